//! Layer specifications and their batched forward/backward kernels.
//!
//! Activations carry a leading batch axis. Per-sample shapes are `[features]`
//! for dense layers and `[channels, height, width]` for spatial layers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::{NamedTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Softmax,
}

fn spatial_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Weight and bias shapes, or an empty list for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            _ => Vec::new(),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, layer: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::LayerShape {
            layer,
            kind: self.kind(),
            expected,
            found: input.to_vec(),
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(mismatch(vec![inputs]));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(mismatch(vec![in_channels, 0, 0]));
                }
                let h = spatial_out(input[1], kernel, stride, padding);
                let w = spatial_out(input[2], kernel, stride, padding);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![out_channels, h, w]),
                    _ => Err(mismatch(vec![in_channels, kernel, kernel])),
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } | LayerSpec::AvgPool2d { kernel, stride } => {
                if input.len() != 3 {
                    return Err(mismatch(vec![0, kernel, kernel]));
                }
                match (
                    spatial_out(input[1], kernel, stride, 0),
                    spatial_out(input[2], kernel, stride, 0),
                ) {
                    (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
                    _ => Err(mismatch(vec![input[0], kernel, kernel])),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(mismatch(vec![input.iter().product()]));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Applies the layer to a batch. `params` holds `[weight, bias]` for
    /// parametric layers. Max-pool argmax indices are written to `routes`.
    pub(crate) fn forward(
        &self,
        x: &Tensor,
        params: &[NamedTensor],
        out_shape: &[usize],
        routes: &mut Option<Vec<usize>>,
    ) -> Tensor {
        let batch = x.batch_len();
        let mut shape = Vec::with_capacity(out_shape.len() + 1);
        shape.push(batch);
        shape.extend_from_slice(out_shape);
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let (w, b) = (params[0].value.data(), params[1].value.data());
                let mut out = Tensor::zeros(&shape);
                for n in 0..batch {
                    let xi = x.item_slice(n);
                    let o = out.item_slice_mut(n);
                    for j in 0..outputs {
                        let row = &w[j * inputs..(j + 1) * inputs];
                        o[j] = b[j] + row.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
                    }
                }
                out
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let (wt, b) = (params[0].value.data(), params[1].value.data());
                let mut out = Tensor::zeros(&shape);
                for n in 0..batch {
                    let xi = x.item_slice(n);
                    let o = out.item_slice_mut(n);
                    for oc in 0..out_channels {
                        let plane = &mut o[oc * oh * ow..(oc + 1) * oh * ow];
                        plane.iter_mut().for_each(|v| *v = b[oc]);
                        for ic in 0..in_channels {
                            let src = &xi[ic * h * w..(ic + 1) * h * w];
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let wv = wt[((oc * in_channels + ic) * kernel + ky) * kernel + kx];
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                                        let drow = &mut plane[oy * ow..(oy + 1) * ow];
                                        for (ox, d) in drow.iter_mut().enumerate() {
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if ix >= 0 && ix < w as isize {
                                                *d += wv * srow[ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
            LayerSpec::Relu => x
                .map(|v| if v > 0.0 { v } else { 0.0 })
                .reshape(&shape)
                .expect("relu preserves shape"),
            LayerSpec::MaxPool2d { kernel, stride } => {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut out = Tensor::zeros(&shape);
                let mut idx = vec![0usize; out.len()];
                for n in 0..batch {
                    let xi = x.item_slice(n);
                    let base_out = n * c * oh * ow;
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = usize::MAX;
                                let mut best_v = f64::NEG_INFINITY;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let at = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                                        if best == usize::MAX || xi[at] > best_v {
                                            best = at;
                                            best_v = xi[at];
                                        }
                                    }
                                }
                                let o = base_out + (ch * oh + oy) * ow + ox;
                                out.data_mut()[o] = best_v;
                                idx[o] = best;
                            }
                        }
                    }
                }
                *routes = Some(idx);
                out
            }
            LayerSpec::AvgPool2d { kernel, stride } => {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let area = (kernel * kernel) as f64;
                let mut out = Tensor::zeros(&shape);
                for n in 0..batch {
                    let xi = x.item_slice(n);
                    let o = out.item_slice_mut(n);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut s = 0.0;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        s += xi[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                                    }
                                }
                                o[(ch * oh + oy) * ow + ox] = s / area;
                            }
                        }
                    }
                }
                out
            }
            LayerSpec::Flatten => x.clone().reshape(&shape).expect("flatten preserves length"),
            LayerSpec::Softmax => loss::softmax_t(x, 1.0).expect("unit temperature is valid"),
        }
    }

    /// Backpropagates `grad_out` through the layer. Returns the gradient with
    /// respect to the layer input; parameter gradients are accumulated into
    /// `param_grads` when provided.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        y: &Tensor,
        grad_out: &Tensor,
        params: &[NamedTensor],
        param_grads: Option<&mut [Tensor]>,
        routes: Option<&Vec<usize>>,
    ) -> Tensor {
        let batch = x.batch_len();
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let w = params[0].value.data();
                let mut gx = Tensor::zeros(x.shape());
                for n in 0..batch {
                    let g = grad_out.item_slice(n);
                    let gxi = gx.item_slice_mut(n);
                    for (j, &gj) in g.iter().enumerate() {
                        if gj == 0.0 {
                            continue;
                        }
                        let row = &w[j * inputs..(j + 1) * inputs];
                        for (d, &wv) in gxi.iter_mut().zip(row) {
                            *d += wv * gj;
                        }
                    }
                }
                if let Some(pg) = param_grads {
                    let (gw, gb) = pg.split_at_mut(1);
                    let (gw, gb) = (gw[0].data_mut(), gb[0].data_mut());
                    for n in 0..batch {
                        let g = grad_out.item_slice(n);
                        let xi = x.item_slice(n);
                        for j in 0..outputs {
                            gb[j] += g[j];
                            let row = &mut gw[j * inputs..(j + 1) * inputs];
                            for (d, &xv) in row.iter_mut().zip(xi) {
                                *d += g[j] * xv;
                            }
                        }
                    }
                }
                gx
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (y.shape()[2], y.shape()[3]);
                let wt = params[0].value.data();
                let mut gx = Tensor::zeros(x.shape());
                let mut pg = param_grads;
                for n in 0..batch {
                    let g = grad_out.item_slice(n);
                    let xi = x.item_slice(n);
                    let gxi = gx.item_slice_mut(n);
                    for oc in 0..out_channels {
                        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                        if let Some(pg) = pg.as_deref_mut() {
                            pg[1].data_mut()[oc] += gplane.iter().sum::<f64>();
                        }
                        for ic in 0..in_channels {
                            let src = &xi[ic * h * w..(ic + 1) * h * w];
                            let dst = &mut gxi[ic * h * w..(ic + 1) * h * w];
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let widx = ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
                                    let wv = wt[widx];
                                    let mut gw_acc = 0.0;
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let iy = iy as usize;
                                        for ox in 0..ow {
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let gv = gplane[oy * ow + ox];
                                            dst[iy * w + ix as usize] += wv * gv;
                                            gw_acc += src[iy * w + ix as usize] * gv;
                                        }
                                    }
                                    if let Some(pg) = pg.as_deref_mut() {
                                        pg[0].data_mut()[widx] += gw_acc;
                                    }
                                }
                            }
                        }
                    }
                }
                gx
            }
            LayerSpec::Relu => x
                .zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
                .expect("relu gradient shape"),
            LayerSpec::MaxPool2d { .. } => {
                let routes = routes.expect("max-pool routes recorded in forward");
                let mut gx = Tensor::zeros(x.shape());
                let per_in = x.item_len();
                let per_out = y.item_len();
                for (o, (&g, &src)) in grad_out.data().iter().zip(routes).enumerate() {
                    let n = o / per_out;
                    gx.data_mut()[n * per_in + src] += g;
                }
                gx
            }
            LayerSpec::AvgPool2d { kernel, stride } => {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (y.shape()[2], y.shape()[3]);
                let area = (kernel * kernel) as f64;
                let mut gx = Tensor::zeros(x.shape());
                for n in 0..batch {
                    let g = grad_out.item_slice(n);
                    let gxi = gx.item_slice_mut(n);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(ch * oh + oy) * ow + ox] / area;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        gxi[(ch * h + oy * stride + ky) * w + ox * stride + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                gx
            }
            LayerSpec::Flatten => grad_out
                .clone()
                .reshape(x.shape())
                .expect("flatten gradient shape"),
            LayerSpec::Softmax => {
                loss::softmax_backward(y, grad_out, 1.0).expect("softmax gradient shape")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_shape() {
        let conv = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(conv.output_shape(0, &[1, 8, 8]).unwrap(), vec![4, 8, 8]);
        assert!(conv.output_shape(0, &[2, 8, 8]).is_err());
        let pool = LayerSpec::MaxPool2d { kernel: 2, stride: 2 };
        assert_eq!(pool.output_shape(1, &[4, 8, 8]).unwrap(), vec![4, 4, 4]);
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let pool = LayerSpec::MaxPool2d { kernel: 2, stride: 2 };
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut routes = None;
        let y = pool.forward(&x, &[], &[1, 1, 1], &mut routes);
        let g = Tensor::full(y.shape(), 1.0);
        let gx = pool.backward(&x, &y, &g, &[], None, routes.as_ref());
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
