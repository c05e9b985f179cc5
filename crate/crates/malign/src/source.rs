//! Dataset source strings:
//!
//! - `synth:gauss-blobs[,key=value...]` (keys: n_train, n_test, classes,
//!   noise, amplitude, seed, side); omitted keys take the bundled 10-class
//!   values
//! - `idx:TRAIN_IMAGES,TRAIN_LABELS,TEST_IMAGES,TEST_LABELS[,classes=N]`
//! - `csv:TRAIN,TEST[,header][,scale=S][,shape=CxHxW][,classes=N]`

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use malign_core::data::{synth_dataset, Dataset, Split, SynthKind, SynthSpec};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::csvdata::{load_csv, CsvOptions};
use crate::error::{Error, IoContext, Result};
use crate::idx::load_idx;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Idx {
        train: (PathBuf, PathBuf),
        test: (PathBuf, PathBuf),
        num_classes: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        has_header: bool,
        scale: f64,
        sample_shape: Option<Vec<usize>>,
        num_classes: Option<usize>,
    },
}

fn bad(s: &str, why: impl fmt::Display) -> Error {
    Error::Manifest(format!("data source {s:?}: {why}"))
}

fn num<T: FromStr>(s: &str, key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| bad(s, format!("{key}={v}: {e}")))
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (scheme, rest) = s.split_once(':').ok_or_else(|| bad(s, "expected scheme:..."))?;
        let mut parts = rest.split(',').map(str::trim);
        match scheme {
            "synth" => {
                let kind: SynthKind = parts.next().unwrap_or("").parse().map_err(|e| bad(s, e))?;
                let mut spec = SynthSpec::bundled_ten_class(0);
                spec.kind = kind;
                for kv in parts {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad(s, format!("expected key=value, got {kv:?}")))?;
                    match k {
                        "n_train" => spec.n_train = num(s, k, v)?,
                        "n_test" => spec.n_test = num(s, k, v)?,
                        "classes" => spec.num_classes = num(s, k, v)?,
                        "noise" => spec.noise = num(s, k, v)?,
                        "amplitude" => spec.amplitude = num(s, k, v)?,
                        "seed" => spec.seed = num(s, k, v)?,
                        "side" => spec.side = num(s, k, v)?,
                        _ => return Err(bad(s, format!("unknown key {k:?}"))),
                    }
                }
                Ok(DataSource::Synth(spec))
            }
            "idx" => {
                let mut paths = Vec::new();
                let mut num_classes = None;
                for p in parts {
                    match p.strip_prefix("classes=") {
                        Some(v) => num_classes = Some(num(s, "classes", v)?),
                        None => paths.push(PathBuf::from(p)),
                    }
                }
                let [a, b, c, d]: [PathBuf; 4] = paths
                    .try_into()
                    .map_err(|_| bad(s, "expected four paths: train images, train labels, test images, test labels"))?;
                Ok(DataSource::Idx {
                    train: (a, b),
                    test: (c, d),
                    num_classes,
                })
            }
            "csv" => {
                let mut paths = Vec::new();
                let (mut has_header, mut scale, mut sample_shape, mut num_classes) = (false, 1.0, None, None);
                for p in parts {
                    if p == "header" {
                        has_header = true;
                    } else if let Some(v) = p.strip_prefix("scale=") {
                        scale = num(s, "scale", v)?;
                    } else if let Some(v) = p.strip_prefix("classes=") {
                        num_classes = Some(num(s, "classes", v)?);
                    } else if let Some(v) = p.strip_prefix("shape=") {
                        sample_shape = Some(v.split('x').map(|d| num(s, "shape", d)).collect::<Result<Vec<usize>>>()?);
                    } else {
                        paths.push(PathBuf::from(p));
                    }
                }
                let [train, test]: [PathBuf; 2] = paths
                    .try_into()
                    .map_err(|_| bad(s, "expected two paths: train and test"))?;
                Ok(DataSource::Csv {
                    train,
                    test,
                    has_header,
                    scale,
                    sample_shape,
                    num_classes,
                })
            }
            _ => Err(bad(s, format!("unknown scheme {scheme:?}"))),
        }
    }
}

/// Canonical description used for hashing and report metadata.
#[derive(Serialize)]
struct Canonical<'a> {
    kind: &'a str,
    spec: Option<&'a SynthSpec>,
    files: Vec<(String, String)>,
    options: String,
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synth(spec) => Ok(synth_dataset(spec)?),
            DataSource::Idx {
                train,
                test,
                num_classes,
            } => {
                let tr = load_idx(&train.0, &train.1, *num_classes, Split::Train)?;
                // both splits must agree on the class count
                let te = load_idx(&test.0, &test.1, Some(num_classes.unwrap_or(tr.num_classes)), Split::Test)?;
                Ok((tr, te))
            }
            DataSource::Csv {
                train,
                test,
                has_header,
                scale,
                sample_shape,
                num_classes,
            } => {
                let mut opts = CsvOptions {
                    has_header: *has_header,
                    scale: *scale,
                    sample_shape: sample_shape.clone(),
                    num_classes: *num_classes,
                };
                let tr = load_csv(train, &opts, Split::Train)?;
                opts.num_classes = Some(tr.num_classes);
                let te = load_csv(test, &opts, Split::Test)?;
                Ok((tr, te))
            }
        }
    }

    fn files(&self) -> Vec<&PathBuf> {
        match self {
            DataSource::Synth(_) => vec![],
            DataSource::Idx { train, test, .. } => vec![&train.0, &train.1, &test.0, &test.1],
            DataSource::Csv { train, test, .. } => vec![train, test],
        }
    }

    /// Hex sha256 over the source description and, for file sources, the
    /// file contents.
    pub fn content_hash(&self) -> Result<String> {
        let mut files = Vec::new();
        for p in self.files() {
            let bytes = fs::read(p).at(p)?;
            files.push((p.display().to_string(), hex::encode(Sha256::digest(&bytes))));
        }
        let canon = Canonical {
            kind: match self {
                DataSource::Synth(_) => "synth",
                DataSource::Idx { .. } => "idx",
                DataSource::Csv { .. } => "csv",
            },
            spec: match self {
                DataSource::Synth(s) => Some(s),
                _ => None,
            },
            files,
            options: format!("{self:?}"),
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canon)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_defaults_and_overrides() {
        let d: DataSource = "synth:gauss-blobs".parse().unwrap();
        assert_eq!(d, DataSource::Synth(SynthSpec::bundled_ten_class(0)));
        let DataSource::Synth(s) = "synth:ring-classes, classes=4,noise=0.05,seed=3".parse().unwrap() else {
            panic!()
        };
        assert_eq!((s.kind, s.num_classes, s.noise, s.seed), (SynthKind::RingClasses, 4, 0.05, 3));
        assert!("synth:gauss-blobs,bogus=1".parse::<DataSource>().is_err());
        assert!("synth:nope".parse::<DataSource>().is_err());
        assert!("tfrecord:x".parse::<DataSource>().is_err());
        assert!("nothing".parse::<DataSource>().is_err());
    }

    #[test]
    fn file_sources_parse() {
        let d: DataSource = "csv:a.csv,b.csv,header,scale=255,shape=1x2x2".parse().unwrap();
        let DataSource::Csv { has_header, scale, sample_shape, .. } = d else { panic!() };
        assert!(has_header);
        assert_eq!(scale, 255.0);
        assert_eq!(sample_shape, Some(vec![1, 2, 2]));
        assert!("idx:a,b,c".parse::<DataSource>().is_err());
        assert!("idx:a,b,c,d,classes=10".parse::<DataSource>().is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        fs::write(&a, "0,0.5\n1,0.25\n").unwrap();
        fs::write(&b, "1,0.5\n").unwrap();
        let src: DataSource = format!("csv:{},{}", a.display(), b.display()).parse().unwrap();
        let h1 = src.content_hash().unwrap();
        let (tr, te) = src.load().unwrap();
        assert_eq!((tr.len(), te.len(), te.num_classes), (2, 1, 2));
        fs::write(&b, "0,0.5\n").unwrap();
        assert_ne!(h1, src.content_hash().unwrap());
        let s1: DataSource = "synth:gauss-blobs,seed=1".parse().unwrap();
        let s2: DataSource = "synth:gauss-blobs,seed=2".parse().unwrap();
        assert_ne!(s1.content_hash().unwrap(), s2.content_hash().unwrap());
    }
}
