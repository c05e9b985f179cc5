//! Evaluation-sample selection and transfer error rates.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attacks::{self, AttackConfig, Fingerprint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalSet {
    /// Indices into the pool, in pool order.
    pub ids: Vec<usize>,
    pub source_id: String,
    pub target_id: String,
    pub fingerprint: Fingerprint,
    /// Set when the pool ran out before `n` samples qualified.
    pub exhausted: bool,
}

/// Walks the pool in order and keeps samples that both models classify
/// correctly and whose white-box attack fools the model it was generated
/// on, for source and target alike. Stops after `n` samples.
pub fn select_eval_samples(
    source: &Model,
    target: &Model,
    pool: &Dataset,
    n: usize,
    cfg: &AttackConfig,
) -> Result<EvalSet> {
    cfg.validate()?;
    let mut ids = Vec::with_capacity(n);
    let all: Vec<usize> = (0..pool.len()).collect();
    for chunk in all.chunks(64) {
        if ids.len() >= n {
            break;
        }
        let (x, y) = pool.batch(chunk);
        let ps = source.predict(&x)?;
        let pt = target.predict(&x)?;
        let keep: Vec<usize> = (0..chunk.len()).filter(|&i| ps[i] == y[i] && pt[i] == y[i]).collect();
        if keep.is_empty() {
            continue;
        }
        let xk = x.select(&keep);
        let yk: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
        let fooled_s = attacks::attack(core::slice::from_ref(source), &xk, &yk, cfg)?.whitebox_success;
        let fooled_t = attacks::attack(core::slice::from_ref(target), &xk, &yk, cfg)?.whitebox_success;
        for (j, &i) in keep.iter().enumerate() {
            if fooled_s[j] && fooled_t[j] && ids.len() < n {
                ids.push(chunk[i]);
            }
        }
    }
    let fingerprint = Fingerprint::of(format!("select;n={n};{}", cfg.canonical()));
    Ok(EvalSet {
        exhausted: ids.len() < n,
        ids,
        source_id: source.id(),
        target_id: target.id(),
        fingerprint,
    })
}

/// Percentage of `x_adv` that `target` misclassifies.
pub fn transfer_error(target: &Model, x_adv: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("adversarial set"));
    }
    let preds = target.predict(x_adv)?;
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} adversarial inputs but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let wrong = preds.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;
    use crate::tensor::NamedTensor;
    use alloc::vec;

    /// Predicts class 0 iff the single input exceeds `t`.
    fn threshold(t: f64) -> Model {
        Model::new(
            vec![LayerSpec::Dense { inputs: 1, outputs: 2 }, LayerSpec::Softmax],
            vec![1],
            vec![
                NamedTensor {
                    name: "0.dense.weight".into(),
                    value: Tensor::matrix(&[&[10.0], &[-10.0]]).unwrap(),
                },
                NamedTensor {
                    name: "0.dense.bias".into(),
                    value: Tensor::vector(&[-10.0 * t, 10.0 * t]),
                },
            ],
            "thr",
            0,
        )
        .unwrap()
    }

    #[test]
    fn counting() {
        let m = threshold(0.5);
        let x = Tensor::new(vec![10, 1], vec![0.9; 10]).unwrap();
        let mut y = vec![1; 10];
        assert_eq!(transfer_error(&m, &x, &y).unwrap(), 100.0);
        y[..3].iter_mut().for_each(|v| *v = 0);
        assert_eq!(transfer_error(&m, &x, &y).unwrap(), 70.0);
        assert!(transfer_error(&m, &Tensor::zeros(&[0, 1]), &[]).is_err());
    }

    #[test]
    fn selection_criteria() {
        use crate::data::{Provenance, Split};
        let source = threshold(0.5);
        let target = threshold(0.45);
        // 0.52: both correct (class 0) and within eps of both thresholds
        // 0.47: target correct, source wrong -> excluded
        // 0.9: both correct but far from the thresholds -> attack fails
        let pool = Dataset::new(
            Tensor::new(vec![4, 1], vec![0.52, 0.47, 0.9, 0.53]).unwrap(),
            vec![0, 0, 0, 0],
            2,
            Split::Test,
            Provenance::Derived { note: "unit".into() },
        )
        .unwrap();
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.02,
            iterations: 10,
            ..AttackConfig::default()
        };
        let set = select_eval_samples(&source, &target, &pool, 5, &cfg).unwrap();
        assert_eq!(set.ids, vec![0, 3]);
        assert!(set.exhausted);
        let one = select_eval_samples(&source, &target, &pool, 1, &cfg).unwrap();
        assert_eq!(one.ids, vec![0]);
        assert!(!one.exhausted);
    }
}
