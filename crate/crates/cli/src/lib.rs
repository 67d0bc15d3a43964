//! Command-line front end: dataset generation, view sampling, training,
//! evaluation, hyperparameter sweeps and the two diagnostic commands.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 a diagnostic threshold was not met.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod sweep;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_THRESHOLD: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ssnp",
    version,
    about = "Subgraph classification with stochastic neighborhood pooling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic planted-triangle dataset.
    Gen(GenArgs),
    /// Print the exact neighborhood and sampled views of one subgraph.
    Sample(SampleArgs),
    /// Train a model and stream per-epoch metrics as JSON lines.
    Train(TrainArgs),
    /// Score a saved checkpoint on one split.
    Eval(EvalArgs),
    /// Train over a cartesian grid of settings and tabulate test micro-F1.
    Sweep(SweepArgs),
    /// Search for marked graphs that only neighborhood pooling tells apart.
    WlDemo(WlDemoArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub num_subgraphs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Index into the dataset's subgraph list.
    #[arg(long)]
    pub subgraph: usize,
    #[arg(long, default_value_t = 1)]
    pub h: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub views: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Training settings. Flags override the config file; `--set` pairs are
/// applied last.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub layer_kind: Option<String>,
    #[arg(long)]
    pub num_layers: Option<String>,
    #[arg(long)]
    pub hidden_dim: Option<String>,
    #[arg(long)]
    pub pool: Option<String>,
    #[arg(long)]
    pub h: Option<String>,
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub n_v: Option<String>,
    #[arg(long)]
    pub n_ve: Option<String>,
    #[arg(long)]
    pub n_eval: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<String>,
    #[arg(long)]
    pub warmup: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    /// Zero the neighborhood half of the pooled representation.
    #[arg(long)]
    pub ablate_neighborhood: bool,
    #[arg(long)]
    pub normalized_aggregation: bool,
    /// Use one-hot degree features instead of the dataset's features.
    #[arg(long)]
    pub degree_features: bool,
    /// Any config key, e.g. `--set sched_patience=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    /// Flag overrides as `(key, value)` pairs, `--set` pairs last.
    pub fn overrides(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut out = Vec::new();
        let flags = [
            ("seed", &self.seed),
            ("layer_kind", &self.layer_kind),
            ("num_layers", &self.num_layers),
            ("hidden_dim", &self.hidden_dim),
            ("pool", &self.pool),
            ("h", &self.h),
            ("k", &self.k),
            ("strategy", &self.strategy),
            ("n_v", &self.n_v),
            ("n_ve", &self.n_ve),
            ("n_eval", &self.n_eval),
            ("lr", &self.lr),
            ("max_epochs", &self.max_epochs),
            ("warmup", &self.warmup),
            ("patience", &self.patience),
            ("batch_size", &self.batch_size),
            ("dropout", &self.dropout),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                out.push((key.to_string(), v.clone()));
            }
        }
        let switches = [
            ("ablate_neighborhood", self.ablate_neighborhood),
            ("normalized_aggregation", self.normalized_aggregation),
            ("degree_features", self.degree_features),
        ];
        for (key, on) in switches {
            if on {
                out.push((key.to_string(), "true".to_string()));
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Failure::invalid(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn run_spec(&self) -> Result<RunSpec, Failure> {
        Ok(RunSpec {
            config: self.config.clone(),
            overrides: self.overrides()?,
        })
    }
}

/// Where a training configuration comes from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSpec {
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

impl RunSpec {
    /// Defaults, then the config file, then the overrides; validated.
    pub fn resolve(&self) -> Result<ssnp::config::TrainConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => ssnp::config::load_config(path)?,
            None => ssnp::config::TrainConfig::default(),
        };
        cfg.apply(self.overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Where to save the best checkpoint (parameters plus a `.cfg` sidecar).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write the metrics JSONL here instead of standard output.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Include per-phase wall-clock seconds in each metrics line.
    #[arg(long)]
    pub timings: bool,
    /// Reuse precomputed views from this file, or create it.
    #[arg(long)]
    pub views_cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One of train, val, test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub views_cache: Option<PathBuf>,
    /// Write per-instance predictions and probabilities as TSV.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Lines of `key = v1, v2, ...`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct WlDemoArgs {
    #[arg(long, default_value_t = 8)]
    pub max_nodes: usize,
    #[arg(long, default_value_t = 1)]
    pub h: usize,
    #[arg(long, default_value_t = 2)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write both marked graphs in DOT format.
    #[arg(long)]
    pub dot: Option<PathBuf>,
    /// Skip training the two small models on the pair.
    #[arg(long)]
    pub no_models: bool,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// mlp, gcn or nn; all three when absent.
    #[arg(long)]
    pub layer_kind: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Why a command did not succeed, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
    Threshold(String),
}

impl Failure {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Failure::Invalid(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Runtime(_) => EXIT_RUNTIME,
            Failure::Threshold(_) => EXIT_THRESHOLD,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
            Failure::Threshold(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<ssnp::Error> for Failure {
    fn from(e: ssnp::Error) -> Self {
        use ssnp::Error as E;
        match e {
            E::Parse { .. }
            | E::NodeOutOfRange { .. }
            | E::LabelOutOfRange { .. }
            | E::InvalidDataset(_)
            | E::InvalidConfig { .. }
            | E::OverlappingView { .. }
            | E::Checkpoint(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Sample(a) => commands::sample(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => sweep::run(a),
        Command::WlDemo(a) => commands::wl_demo(a),
        Command::GradCheck(a) => commands::grad_check(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("ssnp").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn overrides_keep_flag_then_set_order() {
        let cli = parse(&[
            "train",
            "--data",
            "d",
            "--lr",
            "0.01",
            "--ablate-neighborhood",
            "--set",
            "lr=0.02",
        ]);
        let Command::Train(t) = cli.command else {
            panic!("not train")
        };
        let o = t.config.overrides().unwrap();
        assert_eq!(
            o,
            vec![
                ("lr".to_string(), "0.01".to_string()),
                ("ablate_neighborhood".to_string(), "true".to_string()),
                ("lr".to_string(), "0.02".to_string()),
            ]
        );
        let cfg = t.config.run_spec().unwrap().resolve().unwrap();
        assert_eq!(cfg.lr, 0.02);
        assert!(cfg.model.ablate_neighborhood);
    }

    #[test]
    fn invalid_pov_subset_is_rejected_with_key() {
        let cli = parse(&[
            "train",
            "--data",
            "d",
            "--strategy",
            "pov",
            "--n-v",
            "20",
            "--n-ve",
            "25",
        ]);
        let Command::Train(t) = cli.command else {
            panic!("not train")
        };
        let err = t.config.run_spec().unwrap().resolve().unwrap_err();
        assert_eq!(err.exit_code(), EXIT_INVALID);
        assert!(err.to_string().contains("n_ve"), "{err}");
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# base\nlr = 0.5\nhidden_dim = 8\n").unwrap();
        let spec = RunSpec {
            config: Some(path),
            overrides: vec![("lr".into(), "0.25".into())],
        };
        let cfg = spec.resolve().unwrap();
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.model.hidden_dim, 8);
    }

    #[test]
    fn malformed_set_is_invalid() {
        let args = ConfigArgs {
            set: vec!["lr".into()],
            ..ConfigArgs::default()
        };
        assert_eq!(args.overrides().unwrap_err().exit_code(), EXIT_INVALID);
    }

    #[test]
    fn usage_errors_exit_with_invalid() {
        assert_eq!(run(["ssnp", "train"]), EXIT_INVALID);
        assert_eq!(run(["ssnp", "--help"]), EXIT_OK);
    }
}
