//! Training configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! layer_kind = nn
//! strategy = pov
//! n_v = 20
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{FeatureMatrix, SubgraphDataset};
use crate::io::read_to_string;
use crate::model::ModelConfig;
use crate::sampler::ViewParams;
use crate::train::SchedulerConfig;

/// Degree buckets used when `degree_features = true`; higher degrees share
/// the last bucket.
pub const DEGREE_FEATURE_CAP: usize = 32;

/// Keys accepted in config files and as CLI overrides, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "lr",
    "max_epochs",
    "warmup",
    "patience",
    "batch_size",
    "strategy",
    "n_v",
    "n_ve",
    "h",
    "k",
    "n_eval",
    "layer_kind",
    "num_layers",
    "hidden_dim",
    "pool",
    "dropout",
    "ablate_neighborhood",
    "normalized_aggregation",
    "degree_features",
    "sched_factor",
    "sched_patience",
    "min_lr",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs before early stopping may trigger.
    pub warmup_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// `(subgraph, view)` pairs per optimizer step.
    pub batch_size: usize,
    /// Sampling parameters; `base_seed` is overwritten by `seed`.
    pub views: ViewParams,
    /// `input_dim`, `num_classes` and `multi_label` are filled in from the
    /// dataset at training time.
    pub model: ModelConfig,
    pub scheduler: SchedulerConfig,
    /// Replace node features by one-hot degrees.
    pub degree_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 0.001,
            max_epochs: 300,
            warmup_epochs: 50,
            patience: 50,
            batch_size: 64,
            views: ViewParams::default(),
            model: ModelConfig::default(),
            scheduler: SchedulerConfig::default(),
            degree_features: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(key, format!("expected true or false, got {other:?}"))),
    }
}

impl TrainConfig {
    /// Sets one key. Dashes in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "seed" => self.seed = parse_value(k, value)?,
            "lr" => self.lr = parse_value(k, value)?,
            "max_epochs" => self.max_epochs = parse_value(k, value)?,
            "warmup" | "warmup_epochs" => self.warmup_epochs = parse_value(k, value)?,
            "patience" => self.patience = parse_value(k, value)?,
            "batch_size" => self.batch_size = parse_value(k, value)?,
            "strategy" => self.views.strategy = parse_value(k, value)?,
            "n_v" => self.views.n_v = parse_value(k, value)?,
            "n_ve" => self.views.n_ve = parse_value(k, value)?,
            "h" => self.views.h = parse_value(k, value)?,
            "k" => self.views.k = parse_value(k, value)?,
            "n_eval" => self.views.n_eval = parse_value(k, value)?,
            "layer_kind" => self.model.layer_kind = parse_value(k, value)?,
            "num_layers" => self.model.num_layers = parse_value(k, value)?,
            "hidden_dim" => self.model.hidden_dim = parse_value(k, value)?,
            "pool" => self.model.pool = parse_value(k, value)?,
            "dropout" => self.model.dropout = parse_value(k, value)?,
            "ablate_neighborhood" => self.model.ablate_neighborhood = parse_bool(k, value)?,
            "normalized_aggregation" => self.model.normalized_aggregation = parse_bool(k, value)?,
            "degree_features" => self.degree_features = parse_bool(k, value)?,
            "sched_factor" => self.scheduler.factor = parse_value(k, value)?,
            "sched_patience" => self.scheduler.patience = parse_value(k, value)?,
            "min_lr" => self.scheduler.min_lr = parse_value(k, value)?,
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// Applies every pair in order.
    pub fn apply<'a, I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Value of one key in its text form.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "seed" => self.seed.to_string(),
            "lr" => self.lr.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "warmup" => self.warmup_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "strategy" => self.views.strategy.to_string(),
            "n_v" => self.views.n_v.to_string(),
            "n_ve" => self.views.n_ve.to_string(),
            "h" => self.views.h.to_string(),
            "k" => self.views.k.to_string(),
            "n_eval" => self.views.n_eval.to_string(),
            "layer_kind" => self.model.layer_kind.to_string(),
            "num_layers" => self.model.num_layers.to_string(),
            "hidden_dim" => self.model.hidden_dim.to_string(),
            "pool" => self.model.pool.to_string(),
            "dropout" => self.model.dropout.to_string(),
            "ablate_neighborhood" => self.model.ablate_neighborhood.to_string(),
            "normalized_aggregation" => self.model.normalized_aggregation.to_string(),
            "degree_features" => self.degree_features.to_string(),
            "sched_factor" => self.scheduler.factor.to_string(),
            "sched_patience" => self.scheduler.patience.to_string(),
            "min_lr" => self.scheduler.min_lr.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// All keys in [`KEYS`] order, one `key = value` per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("known key")).unwrap();
        }
        s
    }

    /// Checks every cross-field invariant, reporting the offending key.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.warmup_epochs > self.max_epochs {
            return Err(Error::config(
                "warmup",
                format!("must not exceed max_epochs = {}", self.max_epochs),
            ));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) {
            return Err(Error::config("sched_factor", "must be in (0, 1)"));
        }
        if self.scheduler.patience == 0 {
            return Err(Error::config("sched_patience", "must be at least 1"));
        }
        if self.scheduler.min_lr.is_nan() || self.scheduler.min_lr < 0.0 {
            return Err(Error::config("min_lr", "must be non-negative"));
        }
        self.views.validate()?;
        self.model.validate()
    }

    /// View parameters with the run seed applied.
    pub fn view_params(&self) -> ViewParams {
        ViewParams {
            base_seed: self.seed,
            ..self.views.clone()
        }
    }

    /// Node features the model sees for `ds` under this configuration.
    pub fn features(&self, ds: &SubgraphDataset) -> FeatureMatrix {
        if self.degree_features {
            FeatureMatrix::one_hot_degree(&ds.graph, DEGREE_FEATURE_CAP)
        } else {
            ds.features.clone()
        }
    }

    /// Model configuration with dimensions taken from `ds`.
    pub fn model_for(&self, ds: &SubgraphDataset) -> ModelConfig {
        ModelConfig {
            input_dim: self.features(ds).cols(),
            num_classes: ds.num_classes,
            multi_label: ds.multi_label,
            ..self.model.clone()
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, source: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Reads a config file on top of the defaults.
pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let pairs = parse_kv(&read_to_string(path)?, path)?;
    let mut cfg = TrainConfig::default();
    cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok(cfg)
}
