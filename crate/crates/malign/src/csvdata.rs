//! CSV datasets: label in column 0, features after.

use std::path::Path;

use malign_core::data::{Dataset, Provenance, Split};
use malign_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Features are divided by this value (255 for byte pixels).
    pub scale: f64,
    /// Per-sample shape; defaults to `[features]`.
    pub sample_shape: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: false,
            scale: 1.0,
            sample_shape: None,
            num_classes: None,
        }
    }
}

pub fn load_csv(path: &Path, opts: &CsvOptions, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.into(),
                source,
            },
            other => Error::Parse {
                path: path.into(),
                line: 0,
                reason: format!("{other:?}"),
            },
        })?;
    // a header fixes the row width up front
    let mut width = if opts.has_header { Some(reader.headers()?.len()) } else { None };
    let mut labels = Vec::new();
    let mut features = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        let w = *width.get_or_insert(record.len());
        if record.len() != w || w < 2 {
            return Err(Error::RowWidth {
                path: path.into(),
                line,
                expected: w.max(2),
                found: record.len(),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.into(),
                line,
                reason: format!("{s:?}: {e}"),
            })
        };
        let label = parse(&record[0])?;
        if label < 0.0 || label.fract() != 0.0 {
            return Err(Error::Parse {
                path: path.into(),
                line,
                reason: format!("label {label} is not a class index"),
            });
        }
        labels.push(label as usize);
        for field in record.iter().skip(1) {
            features.push(parse(field)? / opts.scale);
        }
    }
    let n = labels.len();
    let per = width.map_or(0, |w| w - 1);
    let shape = match &opts.sample_shape {
        Some(s) => {
            if s.iter().product::<usize>() != per {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 0,
                    reason: format!("sample shape {s:?} does not hold {per} features"),
                });
            }
            s.clone()
        }
        None => vec![per],
    };
    let mut full = vec![n];
    full.extend(&shape);
    let classes = opts
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    Ok(Dataset::new(
        Tensor::new(full, features)?,
        labels,
        classes,
        split,
        Provenance::CsvFile {
            path: path.display().to_string(),
        },
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn parses_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "label,a,b,c,d\n1,0,255,51,0\n0,255,255,0,0\n").unwrap();
        let opts = CsvOptions {
            has_header: true,
            scale: 255.0,
            sample_shape: Some(vec![1, 2, 2]),
            num_classes: Some(3),
        };
        let d = load_csv(&p, &opts, Split::Test).unwrap();
        assert_eq!(d.inputs.shape(), &[2, 1, 2, 2]);
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.inputs.data()[2], 0.2);
    }

    #[test]
    fn ragged_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "1,0.1,0.2\n0,0.3\n").unwrap();
        let err = load_csv(&p, &CsvOptions::default(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::RowWidth { line: 2, .. }), "{err}");
        fs::write(&p, "1,0.1,x\n").unwrap();
        assert!(matches!(
            load_csv(&p, &CsvOptions::default(), Split::Train),
            Err(Error::Parse { .. })
        ));
        fs::write(&p, "1,0.1,1.5\n").unwrap();
        assert!(matches!(
            load_csv(&p, &CsvOptions::default(), Split::Train),
            Err(Error::Core(_))
        ));
    }
}
