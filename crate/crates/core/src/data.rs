//! Tabular dataset ingestion and preprocessing.
//!
//! CSV files are read with a mandatory header row. Categorical columns are
//! expanded into one binary feature per level, with levels in lexicographic
//! order and the expanded columns taking the place of the original column.
//! All variances in this module use the population (divide-by-N) convention.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::metrics::{mean, population_variance};
use crate::rng::{seeded, Stream};

/// Floor applied to feature standard deviations.
pub const STD_FLOOR: f64 = 1e-8;
/// Lower bound on the residual variance used by [`snr_proxy`].
pub const SNR_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("column `{column}` not found in header")]
    MissingColumn { column: String },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Unparseable {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: value is NaN or infinite")]
    NonFinite { row: usize, column: String },
    #[error("dataset has no rows")]
    Empty,
    #[error("dataset has no feature columns")]
    NoFeatures,
    #[error("{0}")]
    Invalid(String),
}

/// Features plus target, with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        feature_names: Vec<String>,
        x: Matrix,
        y: Vec<f64>,
    ) -> Result<Self, DataError> {
        if x.rows() == 0 {
            return Err(DataError::Empty);
        }
        if x.cols() == 0 {
            return Err(DataError::NoFeatures);
        }
        if y.len() != x.rows() {
            return Err(DataError::Invalid(format!(
                "{} targets for {} rows",
                y.len(),
                x.rows()
            )));
        }
        if feature_names.len() != x.cols() {
            return Err(DataError::Invalid(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                x.cols()
            )));
        }
        for (i, row) in x.iter_rows().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    row: i + 1,
                    column: feature_names[j].clone(),
                });
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                row: i + 1,
                column: "<target>".into(),
            });
        }
        Ok(Self {
            name: name.into(),
            feature_names,
            x,
            y,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx`, in order, as a new dataset with the same name.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            feature_names: self.feature_names.clone(),
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Reads a CSV file into a [`Dataset`] named after the file stem.
pub fn load_csv(
    path: impl AsRef<Path>,
    target_column: &str,
    categorical_columns: &[String],
) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_csv(&name, &text, target_column, categorical_columns).map_err(|e| match e {
        DataError::Malformed { message, .. } => DataError::Malformed {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Parses CSV text. `name` becomes the dataset name.
pub fn parse_csv(
    name: &str,
    text: &str,
    target_column: &str,
    categorical_columns: &[String],
) -> Result<Dataset, DataError> {
    let malformed = |message: String| DataError::Malformed {
        path: PathBuf::from(name),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| malformed(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();

    let column_index = |c: &str| {
        header
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| DataError::MissingColumn { column: c.into() })
    };
    let target_idx = column_index(target_column)?;
    let mut categorical = BTreeSet::new();
    for c in categorical_columns {
        let j = column_index(c)?;
        if j == target_idx {
            return Err(DataError::Invalid(format!(
                "target column `{c}` cannot be categorical"
            )));
        }
        categorical.insert(j);
    }

    let mut records: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        records.push(rec.iter().map(str::to_owned).collect());
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }

    let parse = |row: usize, col: usize, cell: &str| -> Result<f64, DataError> {
        let v: f64 = cell.parse().map_err(|_| DataError::Unparseable {
            row,
            column: header[col].clone(),
            value: cell.to_owned(),
        })?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DataError::NonFinite {
                row,
                column: header[col].clone(),
            })
        }
    };

    // Levels per categorical column, lexicographically ordered.
    let mut levels: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for &j in &categorical {
        let set: BTreeSet<&str> = records.iter().map(|r| r[j].as_str()).collect();
        levels.insert(j, set.into_iter().map(str::to_owned).collect());
    }

    let mut feature_names = Vec::new();
    for (j, h) in header.iter().enumerate() {
        if j == target_idx {
            continue;
        }
        match levels.get(&j) {
            Some(lv) => feature_names.extend(lv.iter().map(|l| format!("{h}={l}"))),
            None => feature_names.push(h.clone()),
        }
    }
    if feature_names.is_empty() {
        return Err(DataError::NoFeatures);
    }

    let d = feature_names.len();
    let mut data = Vec::with_capacity(records.len() * d);
    let mut y = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let row = i + 1;
        for (j, cell) in rec.iter().enumerate() {
            if j == target_idx {
                y.push(parse(row, j, cell)?);
            } else if let Some(lv) = levels.get(&j) {
                data.extend(lv.iter().map(|l| if l == cell { 1.0 } else { 0.0 }));
            } else {
                data.push(parse(row, j, cell)?);
            }
        }
    }
    Dataset::new(name, feature_names, Matrix::from_vec(y.len(), d, data), y)
}

/// A dataset bundled under `data/` with its documented column layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundledDataset {
    pub key: &'static str,
    pub display_name: &'static str,
    pub file: &'static str,
    pub target: &'static str,
    pub categorical: &'static [&'static str],
}

pub const BUNDLED: &[BundledDataset] = &[
    BundledDataset {
        key: "concrete",
        display_name: "Concrete Strength",
        file: "concrete.csv",
        target: "compressive_strength",
        categorical: &[],
    },
    BundledDataset {
        key: "wine_red",
        display_name: "Wine Quality Red",
        file: "wine_red.csv",
        target: "quality",
        categorical: &[],
    },
    BundledDataset {
        key: "abalone",
        display_name: "Abalone",
        file: "abalone.csv",
        target: "rings",
        categorical: &["sex"],
    },
    BundledDataset {
        key: "california",
        display_name: "California Housing",
        file: "california.csv",
        target: "MedHouseVal",
        categorical: &[],
    },
    BundledDataset {
        key: "diabetes",
        display_name: "Diabetes",
        file: "diabetes.csv",
        target: "progression",
        categorical: &[],
    },
];

impl BundledDataset {
    /// Looks a bundled dataset up by key or by file name / path stem.
    pub fn lookup(name_or_path: &str) -> Option<&'static BundledDataset> {
        let stem = Path::new(name_or_path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(name_or_path);
        BUNDLED.iter().find(|b| b.key == stem)
    }

    pub fn categorical_columns(&self) -> Vec<String> {
        self.categorical.iter().map(|s| s.to_string()).collect()
    }

    pub fn load_from(&self, data_dir: impl AsRef<Path>) -> Result<Dataset, DataError> {
        load_csv(
            data_dir.as_ref().join(self.file),
            self.target,
            &self.categorical_columns(),
        )
    }
}

/// Disjoint train/test row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded holdout split; `|test| = round(test_fraction * N)`, clamped so both sides are non-empty.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitIndices, DataError> {
    split_n(ds.n_samples(), test_fraction, seed)
}

pub fn split_n(n: usize, test_fraction: f64, seed: u64) -> Result<SplitIndices, DataError> {
    if n < 2 {
        return Err(DataError::Invalid(format!(
            "cannot split {n} sample(s) into train and test"
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded(seed, Stream::Split));
    let test = perm[..n_test].to_vec();
    let train = perm[n_test..].to_vec();
    Ok(SplitIndices { train, test, seed })
}

/// Per-column z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Scaler {
    /// Fits on the rows `idx` of `x`. Population standard deviation, floored at [`STD_FLOOR`].
    pub fn fit(x: &Matrix, idx: &[usize]) -> Result<Self, DataError> {
        if idx.is_empty() {
            return Err(DataError::Invalid("cannot fit a scaler on zero rows".into()));
        }
        let d = x.cols();
        let mut means = vec![0.0; d];
        let mut stds = vec![0.0; d];
        for j in 0..d {
            let col: Vec<f64> = idx.iter().map(|&i| x.get(i, j)).collect();
            means[j] = mean(&col);
            stds[j] = population_variance(&col).sqrt().max(STD_FLOOR);
        }
        Ok(Self { means, stds })
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows() {
            self.transform_row_in_place(out.row_mut(i));
        }
        out
    }

    pub fn transform_row_in_place(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.means).zip(&self.stds) {
            *v = (*v - m) / s;
        }
    }
}

pub fn fit_scaler(ds: &Dataset, idx: &[usize]) -> Result<Scaler, DataError> {
    Scaler::fit(&ds.x, idx)
}

pub fn apply_scaler(scaler: &Scaler, x: &Matrix) -> Result<Matrix, DataError> {
    if x.cols() != scaler.means.len() {
        return Err(DataError::Invalid(format!(
            "scaler fitted on {} columns applied to {}",
            scaler.means.len(),
            x.cols()
        )));
    }
    Ok(scaler.transform(x))
}

/// Adds `Normal(0, (sigma * std(y))^2)` noise to the targets. Features are untouched.
pub fn inject_label_noise(ds: &Dataset, sigma: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(DataError::Invalid(format!(
            "noise level must be a non-negative number, got {sigma}"
        )));
    }
    let mut out = ds.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let scale = sigma * population_variance(&ds.y).sqrt();
    if scale == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, scale).expect("finite positive scale");
    let mut rng = seeded(seed, Stream::LabelNoise);
    for y in &mut out.y {
        *y += normal.sample(&mut rng);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub dataset: String,
    pub var_y: f64,
    pub var_residuals: f64,
    pub snr: f64,
}

/// Variance of the target over variance of ordinary-least-squares residuals.
///
/// The linear model has an intercept and is fitted on the whole dataset after
/// standardizing the features. Rank-deficient designs fall back to the
/// minimum-norm least-squares solution.
pub fn snr_proxy(ds: &Dataset) -> Result<SnrReport, DataError> {
    let n = ds.n_samples();
    let d = ds.n_features();
    if n <= d + 1 {
        return Err(DataError::Invalid(format!(
            "linear fit needs more than {} samples, got {n}",
            d + 1
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let xs = Scaler::fit(&ds.x, &all)?.transform(&ds.x);
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { xs.get(i, j - 1) });
    let target = DVector::from_column_slice(&ds.y);
    let svd = design.clone().svd(true, true);
    let tol = f64::EPSILON * n.max(d + 1) as f64 * svd.singular_values.max();
    let coef = svd
        .solve(&target, tol)
        .map_err(|e| DataError::Invalid(format!("least-squares solve failed: {e}")))?;
    let fitted = &design * coef;
    let residuals: Vec<f64> = ds.y.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect();
    let var_y = population_variance(&ds.y);
    let var_residuals = population_variance(&residuals);
    Ok(SnrReport {
        dataset: ds.name.clone(),
        var_y,
        var_residuals,
        snr: var_y / var_residuals.max(SNR_EPSILON),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        parse_csv("tiny", "a,b,y\n1,2,3\n4,5,6\n", "y", &[]).unwrap()
    }

    #[test]
    fn two_row_csv() {
        let ds = tiny();
        assert_eq!(ds.x, Matrix::from_rows(&[[1.0, 2.0], [4.0, 5.0]]));
        assert_eq!(ds.y, vec![3.0, 6.0]);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn target_in_the_middle() {
        let ds = parse_csv("t", "a,y,b\n1,9,2\n", "y", &[]).unwrap();
        assert_eq!(ds.x.row(0), &[1.0, 2.0]);
        assert_eq!(ds.y, vec![9.0]);
    }

    #[test]
    fn one_hot_is_lexicographic_and_in_place() {
        let text = "s,a,y\nM,1,0\nF,2,1\nI,3,2\nM,4,3\n";
        let ds = parse_csv("t", text, "y", &["s".into()]).unwrap();
        assert_eq!(ds.feature_names, vec!["s=F", "s=I", "s=M", "a"]);
        assert_eq!(ds.x.row(0), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(ds.x.row(1), &[1.0, 0.0, 0.0, 2.0]);
        assert_eq!(ds.x.row(2), &[0.0, 1.0, 0.0, 3.0]);
        assert_eq!(ds.n_samples(), 4);
        for row in ds.x.iter_rows() {
            assert_eq!(row[..3].iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        assert!(matches!(
            load_csv("/definitely/not/here.csv", "y", &[]),
            Err(DataError::Io { .. })
        ));
        assert!(matches!(
            parse_csv("t", "a,b\n1,2\n", "y", &[]),
            Err(DataError::MissingColumn { column }) if column == "y"
        ));
        assert!(matches!(
            parse_csv("t", "a,y\n1,2\nx,3\n", "y", &[]),
            Err(DataError::Unparseable { row: 2, column, .. }) if column == "a"
        ));
        assert!(matches!(
            parse_csv("t", "a,y\n1,NaN\n", "y", &[]),
            Err(DataError::NonFinite { row: 1, column }) if column == "y"
        ));
        assert!(matches!(
            parse_csv("t", "a,y\n", "y", &[]),
            Err(DataError::Empty)
        ));
        assert!(matches!(
            parse_csv("t", "a,y\n1,2\n", "y", &["c".into()]),
            Err(DataError::MissingColumn { .. })
        ));
    }

    #[test]
    fn split_sizes() {
        let s = split_n(10, 0.2, 42).unwrap();
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.train.len(), 8);
        assert!(s.test.iter().all(|i| !s.train.contains(i)));
        assert_eq!(s, split_n(10, 0.2, 42).unwrap());
        assert_eq!(split_n(5, 0.2, 0).unwrap().test.len(), 1);
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split_n(1, 0.2, 0).is_err());
        assert!(split_n(10, 0.0, 0).is_err());
        assert!(split_n(10, 1.0, 0).is_err());
    }

    #[test]
    fn scaler_population_convention() {
        let x = Matrix::from_rows(&[[2.0, 5.0], [4.0, 5.0]]);
        let s = Scaler::fit(&x, &[0, 1]).unwrap();
        assert_eq!(s.means, vec![3.0, 5.0]);
        assert_eq!(s.stds, vec![1.0, STD_FLOOR]);
        let t = s.transform(&x);
        assert_eq!(t.column(0), vec![-1.0, 1.0]);
        assert_eq!(t.column(1), vec![0.0, 0.0]);
    }

    #[test]
    fn scaler_uses_fit_rows_only() {
        let x = Matrix::from_rows(&[[0.0], [2.0], [100.0]]);
        let s = Scaler::fit(&x, &[0, 1]).unwrap();
        let t = apply_scaler(&s, &x.select_rows(&[2])).unwrap();
        assert_eq!(t.get(0, 0), 99.0);
        assert!(Scaler::fit(&x, &[]).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let ds = tiny();
        assert_eq!(inject_label_noise(&ds, 0.0, 1).unwrap(), ds);
        assert!(inject_label_noise(&ds, -0.1, 1).is_err());
    }

    #[test]
    fn snr_of_exact_linear_target_is_huge_but_finite() {
        let rows: Vec<[f64; 2]> = (0..20).map(|i| [i as f64, ((i * 7) % 5) as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 3.0 * r[0] - 2.0 * r[1] + 1.0).collect();
        let ds = Dataset::new("lin", vec!["a".into(), "b".into()], Matrix::from_rows(&rows), y)
            .unwrap();
        let rep = snr_proxy(&ds).unwrap();
        assert!(rep.var_residuals < 1e-18);
        assert!(rep.snr.is_finite());
        assert!(rep.snr >= rep.var_y / SNR_EPSILON * 0.999);
    }

    #[test]
    fn snr_rank_deficient_design() {
        // duplicate column
        let rows: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| ((i * i) % 7) as f64).collect();
        let ds = Dataset::new("dup", vec!["a".into(), "b".into()], Matrix::from_rows(&rows), y)
            .unwrap();
        let rep = snr_proxy(&ds).unwrap();
        assert!(rep.snr >= 1.0 - 1e-9);
        assert!(snr_proxy(&ds.subset(&[0, 1, 2])).is_err());
    }
}
