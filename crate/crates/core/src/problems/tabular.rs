//! Numeric CSV loader for tabular classification/regression data.
//!
//! Features are standardized column-wise to zero mean and unit variance
//! (constant columns become all zeros rather than dividing by zero), a
//! bias feature 1 is appended, and the label column can optionally be
//! binarized at a threshold (value ≥ threshold → 1).

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};
use crate::problems::Dataset;

/// Load a headered numeric CSV, taking `label_column` as the target.
pub fn load_csv(
    path: &Path,
    label_column: &str,
    binarize_threshold: Option<f64>,
) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: String::new(),
            detail: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: label_column.to_owned(),
            detail: "label column not found in header".into(),
        })?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_idx).collect();

    let mut raw_features: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2; // 1-based, after the header
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: row_no,
            column: String::new(),
            detail: e.to_string(),
        })?;
        if row.len() != headers.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: row_no,
                column: String::new(),
                detail: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
        }
        let parse = |c: usize| -> Result<f64> {
            row[c].parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: row_no,
                column: headers[c].clone(),
                detail: format!("non-numeric cell {:?}", &row[c]),
            })
        };
        for &c in &feature_cols {
            raw_features.push(parse(c)?);
        }
        ys.push(parse(label_idx)?);
    }

    if ys.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} has a header but no data rows",
            path.display()
        )));
    }

    let n = ys.len();
    let raw_p = feature_cols.len();
    standardize_columns(&mut raw_features, n, raw_p);

    // Interleave the bias feature after standardization.
    let p = raw_p + 1;
    let mut xs = Vec::with_capacity(n * p);
    for i in 0..n {
        xs.extend_from_slice(&raw_features[i * raw_p..(i + 1) * raw_p]);
        xs.push(1.0);
    }

    if let Some(t) = binarize_threshold {
        for y in &mut ys {
            *y = f64::from(*y >= t);
        }
    }

    Dataset::from_rows(xs, ys, p)
}

/// The median of the label column of a loaded file — the customary
/// binarization threshold for popularity-style targets.
pub fn label_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn standardize_columns(features: &mut [f64], n: usize, p: usize) {
    for c in 0..p {
        let mut mean = 0.0;
        for i in 0..n {
            mean += features[i * p + c];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let d = features[i * p + c] - mean;
            var += d * d;
        }
        var /= n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            let v = &mut features[i * p + c];
            *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn loads_and_standardizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.csv");
        write(&p, "a,b,target\n1,10,5\n3,10,15\n");
        let d = load_csv(&p, "target", None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 3, "two features plus bias");
        // Column a standardizes to ±1; constant column b becomes zeros.
        assert_eq!(d.x(0)[0], -1.0);
        assert_eq!(d.x(1)[0], 1.0);
        assert_eq!(d.x(0)[1], 0.0);
        assert_eq!(d.x(1)[1], 0.0);
        assert_eq!(d.x(0)[2], 1.0, "bias");
        assert_eq!(d.labels(), &[5.0, 15.0]);
    }

    #[test]
    fn binarizes_at_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.csv");
        write(&p, "a,target\n1,5\n2,15\n");
        let d = load_csv(&p, "target", Some(10.0)).unwrap();
        assert_eq!(d.labels(), &[0.0, 1.0]);
    }

    #[test]
    fn non_numeric_cell_locates_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.csv");
        write(&p, "a,target\n1,5\nx,15\n");
        let e = load_csv(&p, "target", None).unwrap_err();
        match e {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_label_column_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.csv");
        write(&p, "a,b\n1,2\n");
        let e = load_csv(&p, "target", None).unwrap_err();
        assert!(matches!(e, Error::Parse { column, .. } if column == "target"));
    }

    #[test]
    fn reload_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.csv");
        write(&p, "a,b,target\n1,4,0\n2,5,1\n3,6,0\n");
        let d1 = load_csv(&p, "target", None).unwrap();
        let d2 = load_csv(&p, "target", None).unwrap();
        assert_eq!(d1.labels(), d2.labels());
        for i in 0..d1.len() {
            assert_eq!(d1.x(i), d2.x(i));
        }
    }

    #[test]
    fn median_threshold_helper() {
        assert_eq!(label_median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(label_median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
