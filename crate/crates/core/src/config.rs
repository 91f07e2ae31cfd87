//! Run configuration.
//!
//! Configuration files are TOML: `key = value` pairs grouped in sections.
//! Every key is optional and defaults to the values below.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/mixed"
//!
//! [data]
//! path = "data/cora"          # or a [data.synthetic] table, not both
//! l2_normalize = false
//! train_fraction = 0.8        # used only when the dataset has no splits
//! val_fraction = 0.1
//!
//! [data.synthetic]
//! family = "MIXED"            # TREE | CYCLE_CLIQUE | MIXED
//! depth = 5
//!
//! [model]
//! encoder_dim = 64
//! capsule_layers = 3
//! space_dim = 9
//! time_dim = 9
//! classifier = "prcc"         # prcc | linear
//! dropout = 0.5
//!
//! [model.routing]
//! mode = "acr"                # euclidean | pcr | acr | none
//! iterations = 3
//! perspectives = 4
//!
//! [train]
//! epochs = 100
//! batch_size = 16
//!
//! [train.optimizer]
//! lr = 0.001
//! weight_decay = 0.0001
//!
//! [ablation]
//! grid = "routing_classifier"   # routing_classifier | components | k_sweep | t_sweep | dim_sweep
//! seeds = 5
//!
//! [policy]
//! manifold_tol = 1e-6
//! ```
//!
//! Unknown keys are rejected. Seeds must fit in a TOML integer (`< 2^63`).

use crate::data::synthetic::SyntheticSpec;
use crate::model::{ClassifierKind, ModelConfig};
use crate::policy::NumericPolicy;
use crate::routing::RoutingMode;
use crate::training::{TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: field `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Scale every feature row to unit Euclidean norm.
    pub l2_normalize: bool,
    /// Stratified split applied when the dataset carries no splits.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: None,
            l2_normalize: false,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Routing {euclidean, pcr, acr} x classifier {linear, prcc}.
    RoutingClassifier,
    /// Pseudo-Riemannian geometry on/off x capsules on/off.
    Components,
    /// Perspectives `K` over `k_values`.
    KSweep,
    /// Routing iterations `T` over `t_values`.
    TSweep,
    /// `(s, t)` over `dim_values`.
    DimSweep,
}

impl std::str::FromStr for Grid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "routing_classifier" => Ok(Self::RoutingClassifier),
            "components" => Ok(Self::Components),
            "k_sweep" | "ksweep" => Ok(Self::KSweep),
            "t_sweep" | "tsweep" => Ok(Self::TSweep),
            "dim_sweep" | "dimsweep" => Ok(Self::DimSweep),
            other => Err(format!("unknown grid `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub grid: Grid,
    /// Number of seeds per cell; run `i` uses `seed + i`.
    pub seeds: usize,
    /// Also reseed the synthetic generator per run, so each seed draws a
    /// fresh dataset instance.
    pub vary_data: bool,
    pub k_values: Vec<usize>,
    pub t_values: Vec<usize>,
    pub dim_values: Vec<[usize; 2]>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grid: Grid::RoutingClassifier,
            seeds: 5,
            vary_data: true,
            k_values: vec![1, 2, 4, 8],
            t_values: vec![1, 2, 3, 4, 5],
            dim_values: vec![[3, 3], [6, 6], [9, 9], [12, 12]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub policy: NumericPolicy,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub routing: Option<RoutingMode>,
    pub classifier: Option<ClassifierKind>,
    pub perspectives: Option<usize>,
    pub iterations: Option<usize>,
    pub dims: Option<(usize, usize)>,
    pub output_dir: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    /// Forces row-wise L2 feature normalization on.
    pub l2_normalize: bool,
    pub epochs: Option<usize>,
    pub grid: Option<Grid>,
    pub seeds: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.routing {
            self.model.routing.mode = m;
        }
        if let Some(c) = o.classifier {
            self.model.classifier = c;
        }
        if let Some(k) = o.perspectives {
            self.model.routing.perspectives = k;
        }
        if let Some(t) = o.iterations {
            self.model.routing.iterations = t;
        }
        if let Some((s, t)) = o.dims {
            self.model.space_dim = s;
            self.model.time_dim = t;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
        if let Some(p) = &o.data_path {
            self.data.path = Some(p.clone());
            self.data.synthetic = None;
        }
        if o.l2_normalize {
            self.data.l2_normalize = true;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(g) = o.grid {
            self.ablation.grid = g;
        }
        if let Some(n) = o.seeds {
            self.ablation.seeds = n;
        }
    }

    /// Checks every field that does not depend on the dataset.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed > i64::MAX as u64 {
            return Err(ConfigError::invalid("seed", "must be below 2^63"));
        }
        match (&self.data.path, &self.data.synthetic) {
            (None, None) => {
                return Err(ConfigError::invalid(
                    "data.path",
                    "no dataset given; set data.path or a [data.synthetic] table",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(ConfigError::invalid(
                    "data.path",
                    "data.path and data.synthetic are mutually exclusive",
                ))
            }
            (None, Some(spec)) => spec
                .validate()
                .map_err(|e| ConfigError::invalid("data.synthetic", e.to_string()))?,
            (Some(_), None) => {}
        }
        let (tf, vf) = (self.data.train_fraction, self.data.val_fraction);
        if !(tf > 0.0 && vf >= 0.0 && tf + vf <= 1.0) {
            return Err(ConfigError::invalid(
                "data.train_fraction",
                "fractions must satisfy 0 < train, 0 <= val, train + val <= 1",
            ));
        }
        // Dataset-derived fields get placeholders here; they are checked for
        // real once the dataset is loaded.
        let mut m = self.model.clone();
        m.num_classes = m.num_classes.max(2);
        m.input_dim = m.input_dim.max(1);
        m.validate().map_err(|e| match e {
            crate::model::ModelError::Config { field, msg } => ConfigError::invalid(format!("model.{field}"), msg),
            other => ConfigError::invalid("model", other.to_string()),
        })?;
        self.train.validate().map_err(|e| match e {
            TrainError::Config { field, msg } => ConfigError::invalid(format!("train.{field}"), msg),
            other => ConfigError::invalid("train", other.to_string()),
        })?;
        let p = &self.policy;
        for (name, v) in [
            ("policy.manifold_tol", p.manifold_tol),
            ("policy.sphere_tol", p.sphere_tol),
            ("policy.idempotence_tol", p.idempotence_tol),
            ("policy.guard_eps", p.guard_eps),
            ("policy.cut_locus_margin", p.cut_locus_margin),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(name, "must be positive"));
            }
        }
        let a = &self.ablation;
        if a.seeds == 0 {
            return Err(ConfigError::invalid("ablation.seeds", "must be >= 1"));
        }
        if a.k_values.contains(&0) || a.t_values.contains(&0) || a.dim_values.iter().any(|d| d.contains(&0)) {
            return Err(ConfigError::invalid("ablation", "sweep values must be >= 1"));
        }
        Ok(())
    }
}
