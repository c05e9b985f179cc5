//! Layer-stack classifiers with reverse-mode gradients for parameters and inputs.
//!
//! A model with `l` layers maps `z[0] = x` through `z[i] = layer_i(z[i-1])`;
//! the last layer is always a softmax, so `z[l-1]` are the logits and `z[l]`
//! is a probability vector.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::loss;
use crate::tensor::{NamedTensor, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    params: Vec<NamedTensor>,
    /// Per layer: index of its weight in `params` (bias follows).
    slots: Vec<Option<usize>>,
    /// Per-sample shapes of `z[0] ..= z[l]`.
    shapes: Vec<Vec<usize>>,
    pub arch_id: String,
    pub init_seed: u64,
}

/// Result of one reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Empty when parameter gradients were not requested.
    pub param_grads: Vec<NamedTensor>,
    pub input_grad: Tensor,
    pub loss_value: f64,
}

/// A scalar loss together with its gradients with respect to chosen
/// hidden representations `z[layer]`.
#[derive(Debug, Clone)]
pub struct LossSeed {
    pub value: f64,
    pub seeds: Vec<(usize, Tensor)>,
}

/// Activations recorded by a forward pass, reused by the reverse pass.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Tensor>,
    routes: Vec<Option<Vec<usize>>>,
}

impl Trace {
    /// `z[0] ..= z[upto]`, each with a leading batch axis.
    pub fn activations(&self) -> &[Tensor] {
        &self.acts
    }

    pub fn at(&self, layer: usize) -> &Tensor {
        &self.acts[layer]
    }

    pub fn depth(&self) -> usize {
        self.acts.len() - 1
    }
}

fn param_name(layer: usize, spec: &LayerSpec, which: &str) -> String {
    format!("{layer}.{}.{which}", spec.kind())
}

impl Model {
    /// Validates the layer stack against `input_shape` and the parameters
    /// against the layer specs.
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        params: Vec<NamedTensor>,
        arch_id: impl Into<String>,
        init_seed: u64,
    ) -> Result<Self> {
        let (shapes, slots, expected) = Self::plan(&layers, &input_shape)?;
        if params.len() != expected.len() {
            return Err(Error::InvalidModel(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.iter().zip(&expected) {
            if p.value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "model parameter",
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
            if &p.name != name {
                return Err(Error::InvalidModel(format!(
                    "parameter named {:?}, expected {name:?}",
                    p.name
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::InvalidModel(format!("parameter {name} is not finite")));
            }
        }
        Ok(Self {
            layers,
            input_shape,
            params,
            slots,
            shapes,
            arch_id: arch_id.into(),
            init_seed,
        })
    }

    /// A model whose parameters are all zero.
    pub fn zeroed(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        arch_id: impl Into<String>,
        init_seed: u64,
    ) -> Result<Self> {
        let (_, _, expected) = Self::plan(&layers, &input_shape)?;
        let params = expected
            .into_iter()
            .map(|(name, shape)| NamedTensor {
                name,
                value: Tensor::zeros(&shape),
            })
            .collect();
        Self::new(layers, input_shape, params, arch_id, init_seed)
    }

    #[allow(clippy::type_complexity)]
    fn plan(
        layers: &[LayerSpec],
        input_shape: &[usize],
    ) -> Result<(Vec<Vec<usize>>, Vec<Option<usize>>, Vec<(String, Vec<usize>)>)> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!(
                "input shape must have positive extents, got {input_shape:?}"
            )));
        }
        match layers.iter().position(|l| *l == LayerSpec::Softmax) {
            Some(i) if i + 1 == layers.len() => {}
            _ => {
                return Err(Error::InvalidModel(
                    "exactly one softmax layer is required and it must be last".into(),
                ))
            }
        }
        if layers.len() < 2 {
            return Err(Error::InvalidModel("a model needs a layer before the softmax".into()));
        }
        let mut shapes = vec![input_shape.to_vec()];
        let mut slots = Vec::with_capacity(layers.len());
        let mut expected = Vec::new();
        for (i, spec) in layers.iter().enumerate() {
            let next = spec.output_shape(i, shapes.last().expect("nonempty"))?;
            let ps = spec.param_shapes();
            if ps.is_empty() {
                slots.push(None);
            } else {
                slots.push(Some(expected.len()));
                expected.push((param_name(i, spec, "weight"), ps[0].clone()));
                expected.push((param_name(i, spec, "bias"), ps[1].clone()));
            }
            shapes.push(next);
        }
        Ok((shapes, slots, expected))
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of layers `l`, including the terminal softmax.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Index of the logits representation, `l - 1`.
    pub fn logits_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// Index of the representation feeding the last dense layer.
    pub fn embedding_layer(&self) -> Result<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
            .ok_or_else(|| Error::InvalidModel("model has no dense layer".into()))
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample shape of `z[layer]`.
    pub fn shape_at(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes[self.layers.len()][0]
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Identifier combining the architecture tag, seed, and a digest of the
    /// current parameters.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut tag = String::new();
        for b in &digest[..4] {
            tag.push_str(&format!("{b:02x}"));
        }
        format!("{}@{}:{tag}", self.arch_id, self.init_seed)
    }

    fn layer_params(&self, layer: usize) -> &[NamedTensor] {
        match self.slots[layer] {
            Some(i) => &self.params[i..i + 2],
            None => &[],
        }
    }

    fn batched(&self, x: &Tensor) -> Result<(Tensor, bool)> {
        if x.shape() == self.input_shape.as_slice() {
            return Ok((x.clone().unsqueeze0(), false));
        }
        if x.rank() == self.input_shape.len() + 1 && x.shape()[1..] == self.input_shape[..] {
            return Ok((x.clone(), true));
        }
        Err(Error::LayerShape {
            layer: 0,
            kind: self.layers[0].kind(),
            expected: self.input_shape.clone(),
            found: x.shape().to_vec(),
        })
    }

    /// Records `z[0] ..= z[upto]` for a batch (or a single unbatched input,
    /// which gains a batch axis of 1).
    pub fn trace(&self, x: &Tensor, upto: usize) -> Result<Trace> {
        if upto > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer index {upto} exceeds model depth {}",
                self.layers.len()
            )));
        }
        let (x, _) = self.batched(x)?;
        let mut acts = Vec::with_capacity(upto + 1);
        let mut routes = Vec::with_capacity(upto);
        acts.push(x);
        for i in 0..upto {
            let mut r = None;
            let next =
                self.layers[i].forward(&acts[i], self.layer_params(i), &self.shapes[i + 1], &mut r);
            acts.push(next);
            routes.push(r);
        }
        Ok(Trace { acts, routes })
    }

    /// Returns `z[upto]` (defaulting to the output distribution). A batch
    /// axis on `x` is preserved; an unbatched input yields an unbatched result.
    pub fn forward(&self, x: &Tensor, upto: Option<usize>) -> Result<Tensor> {
        let upto = upto.unwrap_or(self.layers.len());
        let (_, batched) = self.batched(x)?;
        let mut trace = self.trace(x, upto)?;
        let out = trace.acts.pop().expect("trace holds z[0]");
        if batched {
            Ok(out)
        } else {
            let shape = out.shape()[1..].to_vec();
            out.reshape(&shape)
        }
    }

    /// Pre-softmax outputs `z[l-1]` for a batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.trace(x, self.logits_layer())?.acts.pop().expect("nonempty"))
    }

    /// Reverse pass from gradients seeded at arbitrary representations.
    /// Parameter gradients are produced only when `want_params` is set.
    pub fn backward_trace(
        &self,
        trace: &Trace,
        seeds: &[(usize, Tensor)],
        want_params: bool,
    ) -> Result<(Vec<NamedTensor>, Tensor)> {
        let top = seeds.iter().map(|(l, _)| *l).max().unwrap_or(0);
        if top > trace.depth() {
            return Err(Error::InvalidArgument(format!(
                "gradient seeded at z[{top}] but trace stops at z[{}]",
                trace.depth()
            )));
        }
        for (l, g) in seeds {
            if g.shape() != trace.acts[*l].shape() {
                return Err(Error::ShapeMismatch {
                    context: "loss gradient seed",
                    expected: trace.acts[*l].shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        let mut grads: Vec<Tensor> = if want_params {
            self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
        } else {
            Vec::new()
        };
        let seeded_at = |layer: usize, acc: &mut Option<Tensor>| {
            for (l, g) in seeds {
                if *l == layer {
                    match acc {
                        Some(t) => t.add_assign(g).expect("seed shape checked"),
                        None => *acc = Some(g.clone()),
                    }
                }
            }
        };
        let mut grad: Option<Tensor> = None;
        seeded_at(top, &mut grad);
        for i in (0..top).rev() {
            let g_out = grad.take().expect("gradient present above top");
            let pg = match (want_params, self.slots[i]) {
                (true, Some(s)) => Some(&mut grads[s..s + 2]),
                _ => None,
            };
            let g_in = self.layers[i].backward(
                &trace.acts[i],
                &trace.acts[i + 1],
                &g_out,
                self.layer_params(i),
                pg,
                trace.routes[i].as_ref(),
            );
            grad = Some(g_in);
            seeded_at(i, &mut grad);
        }
        let input_grad = grad.unwrap_or_else(|| Tensor::zeros(trace.acts[0].shape()));
        let named = grads
            .into_iter()
            .zip(&self.params)
            .map(|(value, p)| NamedTensor {
                name: p.name.clone(),
                value,
            })
            .collect();
        Ok((named, input_grad))
    }

    /// Runs the model forward on `x`, evaluates `loss_fn` on the recorded
    /// activations, and backpropagates the seeds it returns.
    pub fn backward<F>(&self, x: &Tensor, loss_fn: F) -> Result<GradientBundle>
    where
        F: FnOnce(&[Tensor]) -> Result<LossSeed>,
    {
        let (_, batched) = self.batched(x)?;
        let trace = self.trace(x, self.layers.len())?;
        let seed = loss_fn(&trace.acts)?;
        if !seed.value.is_finite() {
            return Err(Error::NonFinite {
                context: "loss value",
                step: 0,
            });
        }
        let (param_grads, mut input_grad) = self.backward_trace(&trace, &seed.seeds, true)?;
        if !batched {
            input_grad = input_grad.reshape(&self.input_shape)?;
        }
        Ok(GradientBundle {
            param_grads,
            input_grad,
            loss_value: seed.value,
        })
    }

    /// Gradients of `scale * sum_i CE(f(x_i), y_i)` through the fused
    /// softmax/cross-entropy derivative. Returns per-sample losses too.
    pub fn cross_entropy_grad(
        &self,
        x: &Tensor,
        labels: &[usize],
        smoothing: f64,
        scale: f64,
        want_params: bool,
    ) -> Result<(Vec<f64>, Vec<NamedTensor>, Tensor)> {
        let trace = self.trace(x, self.layers.len())?;
        let probs = trace.at(self.layers.len());
        let per = loss::cross_entropy_per_sample(probs, labels, smoothing)?;
        let g = loss::cross_entropy_logit_grad(probs, labels, smoothing, scale)?;
        let (pg, ig) = self.backward_trace(&trace, &[(self.logits_layer(), g)], want_params)?;
        Ok((per, pg, ig))
    }

    /// Mean cross-entropy loss on a batch.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let probs = self.trace(x, self.layers.len())?.acts.pop().expect("nonempty");
        loss::cross_entropy(&probs, labels, 0.0)
    }

    /// Class predictions for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}
