use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, BundledDataset, Dataset};
use crate::dtree::TreeConfig;
use crate::error::{Error, Result};
use crate::symreg::GPConfig;
use crate::teacher::TeacherConfig;

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 0.001, 0.01, 0.05, 0.1, 0.5];
pub const DEFAULT_SIGMA_GRID: [f64; 4] = [0.0, 0.10, 0.25, 0.50];

/// Everything needed to reproduce an experiment. Serialized verbatim into every report.
///
/// On disk this is TOML: top-level experiment keys followed by optional
/// `[teacher]`, `[gp]` and `[tree]` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to a CSV file, or the key of a bundled dataset (`concrete`, `wine_red`, ...).
    pub dataset: String,
    /// Target column; defaults to the bundled layout, else the last column.
    pub target: Option<String>,
    pub categorical: Option<Vec<String>>,
    /// Directory searched for bundled datasets given by key.
    pub data_dir: PathBuf,
    pub test_fraction: f64,
    pub lambda_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// λ of the regularized teacher in the tree comparison.
    pub tree_lambda: f64,
    pub output_dir: PathBuf,
    pub teacher: TeacherConfig,
    pub gp: GPConfig,
    pub tree: TreeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "concrete".into(),
            target: None,
            categorical: None,
            data_dir: PathBuf::from("data"),
            test_fraction: 0.2,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            sigma_grid: DEFAULT_SIGMA_GRID.to_vec(),
            seeds: vec![42],
            tree_lambda: 0.001,
            output_dir: PathBuf::from("reports"),
            teacher: TeacherConfig::default(),
            gp: GPConfig::default(),
            tree: TreeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid is empty".into());
        }
        if self.sigma_grid.is_empty() {
            return bad("sigma_grid is empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds is empty".into());
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return bad(format!("lambda {l} is negative or not finite"));
        }
        if let Some(s) = self.sigma_grid.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return bad(format!("sigma {s} is negative or not finite"));
        }
        if !(self.tree_lambda >= 0.0 && self.tree_lambda.is_finite()) {
            return bad(format!("tree_lambda {} is invalid", self.tree_lambda));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        self.teacher.validate().map_err(Error::from)?;
        self.gp.validate().map_err(Error::from)?;
        self.tree.validate().map_err(Error::from)?;
        Ok(())
    }

    /// Resolves `dataset` to a file and column layout and loads it.
    pub fn load_dataset(&self) -> Result<Dataset> {
        load_dataset_spec(
            &self.dataset,
            &self.data_dir,
            self.target.as_deref(),
            self.categorical.as_deref(),
        )
    }
}

/// Loads a dataset given either a CSV path or a bundled key.
///
/// Column layout comes from the explicit arguments when given, then from the
/// bundled registry (matched on file stem), and finally defaults to "last
/// column is the target, nothing categorical".
pub fn load_dataset_spec(
    dataset: &str,
    data_dir: &Path,
    target: Option<&str>,
    categorical: Option<&[String]>,
) -> Result<Dataset> {
    let bundled = BundledDataset::lookup(dataset);
    let as_path = PathBuf::from(dataset);
    let path = if as_path.is_file() {
        as_path
    } else if let Some(b) = bundled {
        data_dir.join(b.file)
    } else {
        as_path
    };
    let target = match (target, bundled) {
        (Some(t), _) => t.to_owned(),
        (None, Some(b)) => b.target.to_owned(),
        (None, None) => last_header_column(&path)?,
    };
    let categorical = match (categorical, bundled) {
        (Some(c), _) => c.to_vec(),
        (None, Some(b)) => b.categorical_columns(),
        (None, None) => Vec::new(),
    };
    let ds = load_csv(&path, &target, &categorical)?;
    Ok(ds)
}

fn last_header_column(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|source| crate::data::DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header = text.lines().next().unwrap_or("");
    header
        .rsplit(',')
        .next()
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| {
            crate::data::DataError::Malformed {
                path: path.to_path_buf(),
                message: "missing header row".into(),
            }
            .into()
        })
}
