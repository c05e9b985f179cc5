//! Model families of graded capacity and seeded initialization.
//!
//! Layers whose output feeds a ReLU get He-normal weights `N(0, 2 / fan_in)`;
//! every other weight, and every bias, is uniform in `±1 / sqrt(fan_in)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::math;
use crate::model::Model;
use crate::rng::{self, Stream};
use crate::tensor::NamedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Family {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SizeTag {
    S,
    M,
    L,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArchFamily {
    pub family: Family,
    pub size: SizeTag,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub input_shape: Vec<usize>,
}

/// An architecture tag such as `mlp-S` or `cnn-L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArchTag {
    pub family: Family,
    pub size: SizeTag,
}

impl FromStr for ArchTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (fam, size) = s
            .split_once('-')
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture tag {s:?}")))?;
        let family = match fam {
            "mlp" => Family::Mlp,
            "cnn" => Family::Cnn,
            _ => return Err(Error::InvalidArgument(format!("unknown architecture family {fam:?}"))),
        };
        let size = match size {
            "S" => SizeTag::S,
            "M" => SizeTag::M,
            "L" => SizeTag::L,
            _ => return Err(Error::InvalidArgument(format!("unknown size tag {size:?}"))),
        };
        Ok(Self { family, size })
    }
}

impl fmt::Display for ArchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = match self.family {
            Family::Mlp => "mlp",
            Family::Cnn => "cnn",
        };
        let size = match self.size {
            SizeTag::S => "S",
            SizeTag::M => "M",
            SizeTag::L => "L",
        };
        write!(f, "{fam}-{size}")
    }
}

impl ArchFamily {
    pub fn new(tag: ArchTag, num_classes: usize, input_shape: &[usize]) -> Self {
        Self {
            family: tag.family,
            size: tag.size,
            num_classes,
            input_shape: input_shape.to_vec(),
        }
    }

    pub fn tag(&self) -> ArchTag {
        ArchTag {
            family: self.family,
            size: self.size,
        }
    }

    /// Hidden widths (MLP) or `(conv channels, dense hidden widths)` (CNN).
    fn widths(&self) -> (Vec<usize>, Vec<usize>) {
        match (self.family, self.size) {
            (Family::Mlp, SizeTag::S) => (vec![], vec![32]),
            (Family::Mlp, SizeTag::M) => (vec![], vec![64, 32]),
            (Family::Mlp, SizeTag::L) => (vec![], vec![128, 64]),
            (Family::Cnn, SizeTag::S) => (vec![4, 8], vec![]),
            (Family::Cnn, SizeTag::M) => (vec![8, 16], vec![32]),
            (Family::Cnn, SizeTag::L) => (vec![16, 32], vec![64]),
        }
    }

    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("at least two classes are required".into()));
        }
        let (channels, hidden) = self.widths();
        let mut layers = Vec::new();
        let mut features = match self.family {
            Family::Mlp => self.input_shape.iter().product(),
            Family::Cnn => {
                if self.input_shape.len() != 3 || self.input_shape[1] < 4 || self.input_shape[2] < 4 {
                    return Err(Error::InvalidArgument(format!(
                        "cnn families need a [C, H, W] input of at least 4x4, got {:?}",
                        self.input_shape
                    )));
                }
                let (mut c, mut h, mut w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                for &oc in &channels {
                    layers.push(LayerSpec::Conv2d {
                        in_channels: c,
                        out_channels: oc,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    });
                    layers.push(LayerSpec::Relu);
                    layers.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
                    c = oc;
                    h /= 2;
                    w /= 2;
                }
                c * h * w
            }
        };
        layers.push(LayerSpec::Flatten);
        for &width in &hidden {
            layers.push(LayerSpec::Dense {
                inputs: features,
                outputs: width,
            });
            layers.push(LayerSpec::Relu);
            features = width;
        }
        layers.push(LayerSpec::Dense {
            inputs: features,
            outputs: self.num_classes,
        });
        layers.push(LayerSpec::Softmax);
        Ok(layers)
    }
}

/// Seeded parameters for an arbitrary layer stack.
pub fn init_params(layers: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Vec<NamedTensor>> {
    let skeleton = Model::zeroed(layers.to_vec(), input_shape.to_vec(), "init", seed)?;
    let mut rng = rng::stream(seed, Stream::Init);
    let mut params = skeleton.params().to_vec();
    let mut slot = 0;
    for (i, spec) in layers.iter().enumerate() {
        let fan_in = match *spec {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => continue,
        };
        let feeds_relu = matches!(layers.get(i + 1), Some(LayerSpec::Relu));
        let bound = 1.0 / math::sqrt(fan_in as f64);
        let weight = params[slot].value.data_mut();
        if feeds_relu {
            let normal = Normal::new(0.0, math::sqrt(2.0 / fan_in as f64))
                .map_err(|e| Error::InvalidArgument(format!("{e}")))?;
            weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        } else {
            weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        }
        params[slot + 1]
            .value
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-bound..bound));
        slot += 2;
    }
    Ok(params)
}

/// Builds a freshly initialized member of an architecture family.
pub fn build_model(family: &ArchFamily, init_seed: u64) -> Result<Model> {
    let layers = family.layers()?;
    let params = init_params(&layers, &family.input_shape, init_seed)?;
    let arch_id: String = format!("{}", family.tag());
    Model::new(layers, family.input_shape.clone(), params, arch_id, init_seed)
}
