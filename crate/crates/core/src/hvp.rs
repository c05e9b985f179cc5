//! Input-Hessian-vector products by central differences of exact gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// Step used for the finite differences: `1e-6 * (1 + ||x||_inf)`. The
/// gradients are exact, so roundoff stays near `eps / h` of the gradient
/// while a small step rarely straddles a relu or max-pool boundary.
pub fn hvp_step(x: &Tensor) -> f64 {
    1e-6 * (1.0 + x.norm_linf())
}

/// One-sided differences disagreeing by more than this share mean a kink.
const KINK_REL: f64 = 1e-3;
/// Gradient roundoff allowance, relative to `||grad(x)|| / h`.
const ROUNDOFF: f64 = 1e-9;

fn l2(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|a| a * a).sum())
}

/// Central difference per item of the leading axis, except where the
/// forward and backward differences disagree: then the stencil crosses a
/// piece boundary of the network, whose jump would swamp the curvature
/// (it grows like 1/h), and the one-sided difference with the smaller
/// norm is kept.
fn combine(gp: &Tensor, g0: &Tensor, gm: &Tensor, h: f64, items: usize) -> Tensor {
    let width = g0.len() / items.max(1);
    let mut out = vec![0.0; g0.len()];
    for (k, o) in out.chunks_mut(width.max(1)).enumerate() {
        let r = k * width..(k + 1) * width;
        let (p, z, m) = (&gp.data()[r.clone()], &g0.data()[r.clone()], &gm.data()[r]);
        let fwd: Vec<f64> = p.iter().zip(z).map(|(a, b)| (a - b) / h).collect();
        let bwd: Vec<f64> = z.iter().zip(m).map(|(a, b)| (a - b) / h).collect();
        let gap: Vec<f64> = fwd.iter().zip(&bwd).map(|(a, b)| a - b).collect();
        let (nf, nb) = (l2(&fwd), l2(&bwd));
        if l2(&gap) <= KINK_REL * nf.max(nb) + ROUNDOFF * l2(z) / h {
            for (i, o) in o.iter_mut().enumerate() {
                *o = (p[i] - m[i]) * (0.5 / h);
            }
        } else {
            o.copy_from_slice(if nf <= nb { &fwd } else { &bwd });
        }
    }
    Tensor::new(g0.shape().to_vec(), out).expect("same shape as the gradient")
}

fn guarded<G>(grad: G, x: &Tensor, v: &Tensor, items: usize) -> Result<Tensor>
where
    G: Fn(&Tensor) -> Result<Tensor>,
{
    x.check_same_shape(v, "hvp direction")?;
    if v.norm_linf() == 0.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let h = hvp_step(x);
    let mut plus = x.clone();
    plus.axpy(h, v)?;
    let mut minus = x.clone();
    minus.axpy(-h, v)?;
    let (gp, g0, gm) = (grad(&plus)?, grad(x)?, grad(&minus)?);
    Ok(combine(&gp, &g0, &gm, h, items))
}

/// `H v` for the Hessian of the scalar function whose gradient is `grad`:
/// `(grad(x + h v) - grad(x - h v)) / (2h)`, falling back to a one-sided
/// difference when the stencil straddles a kink.
pub fn hvp_with<G>(grad: G, x: &Tensor, v: &Tensor) -> Result<Tensor>
where
    G: Fn(&Tensor) -> Result<Tensor>,
{
    guarded(grad, x, v, 1)
}

/// Gradient of the summed cross-entropy with respect to the input.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (_, _, g) = model.cross_entropy_grad(x, labels, 0.0, 1.0, false)?;
    Ok(g)
}

/// `H v` where `H` is the input Hessian of the summed cross-entropy loss.
/// `x` may carry a batch axis; an unbatched `x` is treated as one sample.
pub fn hvp_input(model: &Model, x: &Tensor, labels: &[usize], v: &Tensor) -> Result<Tensor> {
    let unbatched = x.shape() == model.input_shape();
    let (xb, vb) = if unbatched {
        (x.clone().unsqueeze0(), v.clone().unsqueeze0())
    } else {
        (x.clone(), v.clone())
    };
    // samples do not interact, so kinks are judged one sample at a time
    let items = xb.shape()[0];
    let out = guarded(|p| input_gradient(model, p, labels), &xb, &vb, items)?;
    if unbatched {
        out.reshape(x.shape())
    } else {
        Ok(out)
    }
}

/// Dense input Hessian of a single sample, one finite-difference column per
/// input coordinate. Intended for small inputs.
pub fn dense_input_hessian(model: &Model, x: &Tensor, label: usize) -> Result<alloc::vec::Vec<f64>> {
    let n = x.len();
    let mut h = vec![0.0; n * n];
    for j in 0..n {
        let mut e = Tensor::zeros(x.shape());
        e.data_mut()[j] = 1.0;
        let col = hvp_input(model, x, &[label], &e)?;
        for i in 0..n {
            h[i * n + j] = col.data()[i];
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_hessian() {
        let grad = |x: &Tensor| Ok(Tensor::vector(&[x.data()[0], 3.0 * x.data()[1]]));
        let x = Tensor::vector(&[0.2, -0.7]);
        let hv = hvp_with(grad, &x, &Tensor::vector(&[1.0, 1.0])).unwrap();
        assert!((hv.data()[0] - 1.0).abs() < 1e-9);
        assert!((hv.data()[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn kink_inside_the_stencil_is_not_curvature() {
        // f = x0^2 / 2 + 3 max(x1, 0): curvature only along x0
        let grad = |x: &Tensor| Ok(Tensor::vector(&[x.data()[0], if x.data()[1] > 0.0 { 3.0 } else { 0.0 }]));
        let x = Tensor::vector(&[0.4, 1e-7]);
        let hv = hvp_with(grad, &x, &Tensor::vector(&[1.0, 1.0])).unwrap();
        assert!((hv.data()[0] - 1.0).abs() < 1e-6, "{hv:?}");
        assert_eq!(hv.data()[1], 0.0);
        // away from the kink the central difference is used
        let x = Tensor::vector(&[0.4, 0.5]);
        let hv = hvp_with(grad, &x, &Tensor::vector(&[1.0, 1.0])).unwrap();
        assert!((hv.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_direction() {
        let grad = |_: &Tensor| -> Result<Tensor> { panic!("must not evaluate") };
        let x = Tensor::vector(&[0.2, -0.7]);
        let hv = hvp_with(grad, &x, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(hv.data(), &[0.0, 0.0]);
    }
}
