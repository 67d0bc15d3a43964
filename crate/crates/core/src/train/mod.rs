//! Optimization loop, evaluation and checkpoints.

mod metrics;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use crate::config::TrainConfig;
pub use metrics::{argmax, micro_f1, predict, MULTI_LABEL_THRESHOLD};
pub use optim::{AdamState, PlateauScheduler, SchedulerConfig, PLATEAU_THRESHOLD};

use crate::autodiff::{sigmoid, softmax, ParamStore, Tape};
use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::graph::{FeatureMatrix, Split, SubgraphDataset, SubgraphInstance};
use crate::io::{read_to_string, write_atomic};
use crate::model::{ModelConfig, SsnpModel};
use crate::rng::{Domain, RngStream};
use crate::sampler::{build_view_store, NeighborhoodView, ViewStore};

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` before taking
/// logs in evaluation losses.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_micro_f1: f64,
    pub test_loss: f64,
    pub test_micro_f1: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// `(subgraph, view)` pairs the optimizer saw this epoch.
    pub train_instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PhaseTimings>,
}

impl MetricsRecord {
    /// JSON object on one line; wall-clock timings are only included when
    /// asked for, since they differ between otherwise identical runs.
    pub fn to_json_line(&self, with_timings: bool) -> String {
        let rec = if with_timings {
            self.clone()
        } else {
            MetricsRecord {
                timings: None,
                ..self.clone()
            }
        };
        serde_json::to_string(&rec).expect("plain struct serializes")
    }
}

/// Predictions and scores for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    /// Dataset indices of the evaluated instances.
    pub indices: Vec<usize>,
    /// View-averaged class probabilities per instance.
    pub probabilities: Vec<Vec<f64>>,
    pub predictions: Vec<Vec<usize>>,
    pub loss: f64,
    pub micro_f1: f64,
}

/// A trained model, the configuration that produced it, and where the best
/// validation score was reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: SsnpModel,
    pub best_epoch: usize,
    pub best_val_micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<MetricsRecord>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

impl Checkpoint {
    /// Writes the parameters to `path` and the configuration to `path.cfg`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut cfg = self.config.to_kv();
        let m = &self.model.config;
        writeln!(cfg, "input_dim = {}", m.input_dim).unwrap();
        writeln!(cfg, "num_classes = {}", m.num_classes).unwrap();
        writeln!(cfg, "multi_label = {}", m.multi_label).unwrap();
        writeln!(cfg, "best_epoch = {}", self.best_epoch).unwrap();
        writeln!(cfg, "best_val_micro_f1 = {}", self.best_val_micro_f1).unwrap();
        write_atomic(sidecar_path(path), cfg.as_bytes())?;
        self.model.params.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let pairs = parse_kv(&read_to_string(&side)?, &side)?;
        let mut config = TrainConfig::default();
        let mut dims = ModelConfig::default();
        let (mut best_epoch, mut best_val_micro_f1) = (0usize, 0.0f64);
        let bad = |k: &str, v: &str| Error::Checkpoint(format!("bad value {v:?} for {k}"));
        for (k, v) in &pairs {
            match k.as_str() {
                "input_dim" => dims.input_dim = v.parse().map_err(|_| bad(k, v))?,
                "num_classes" => dims.num_classes = v.parse().map_err(|_| bad(k, v))?,
                "multi_label" => dims.multi_label = v.parse().map_err(|_| bad(k, v))?,
                "best_epoch" => best_epoch = v.parse().map_err(|_| bad(k, v))?,
                "best_val_micro_f1" => best_val_micro_f1 = v.parse().map_err(|_| bad(k, v))?,
                _ => config.set(k, v)?,
            }
        }
        let model_config = ModelConfig {
            input_dim: dims.input_dim,
            num_classes: dims.num_classes,
            multi_label: dims.multi_label,
            ..config.model.clone()
        };
        let params = ParamStore::load(path)?;
        Ok(Checkpoint {
            config,
            model: SsnpModel::from_params(model_config, params)?,
            best_epoch,
            best_val_micro_f1,
        })
    }
}

fn refs<'a>(
    ds: &'a SubgraphDataset,
    batch: &[(usize, &'a NeighborhoodView)],
) -> Vec<(&'a SubgraphInstance, &'a NeighborhoodView)> {
    batch.iter().map(|&(i, v)| (&ds.instances[i], v)).collect()
}

/// One forward/backward/Adam update on `batch`; returns the loss before the
/// update.
pub fn train_step(
    model: &mut SsnpModel,
    adam: &mut AdamState,
    ds: &SubgraphDataset,
    features: &FeatureMatrix,
    batch: &[(usize, &NeighborhoodView)],
    lr: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    model.params.zero_grad();
    let pairs = refs(ds, batch);
    let instances: Vec<&SubgraphInstance> = pairs.iter().map(|p| p.0).collect();
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &ds.graph, features, &pairs, true, rng)?;
    let loss = model.loss(&mut tape, logits, &instances)?;
    let value = tape.value(loss)?.get(0, 0);
    tape.backward(loss, &mut model.params)?;
    adam.step(&mut model.params, lr)?;
    Ok(value)
}

/// Loss of `batch` under the current parameters, dropout off.
pub fn batch_loss(
    model: &SsnpModel,
    ds: &SubgraphDataset,
    features: &FeatureMatrix,
    batch: &[(usize, &NeighborhoodView)],
) -> Result<f64> {
    let pairs = refs(ds, batch);
    let instances: Vec<&SubgraphInstance> = pairs.iter().map(|p| p.0).collect();
    let mut tape = Tape::new();
    let mut rng = RngStream::keyed(Domain::Dropout, 0, 0, 0, 0);
    let logits = model.forward(&mut tape, &ds.graph, features, &pairs, false, &mut rng)?;
    let loss = model.loss(&mut tape, logits, &instances)?;
    Ok(tape.value(loss)?.get(0, 0))
}

/// Evaluates `model` on one split, averaging class probabilities over each
/// instance's evaluation views.
pub fn evaluate_split(
    model: &SsnpModel,
    ds: &SubgraphDataset,
    features: &FeatureMatrix,
    store: &ViewStore,
    split: Split,
) -> Result<EvalReport> {
    let indices = ds.split_indices(split);
    let mut report = EvalReport {
        split,
        indices: indices.clone(),
        probabilities: Vec::new(),
        predictions: Vec::new(),
        loss: 0.0,
        micro_f1: 0.0,
    };
    if indices.is_empty() {
        return Ok(report);
    }
    let views: Vec<_> = indices.iter().map(|&i| store.eval_views(ds, i)).collect();
    let mut tape = Tape::new();
    let mut rng = RngStream::keyed(Domain::Dropout, 0, 0, 0, 0);
    let z = model.forward_transform(&mut tape, &ds.graph, features, false, &mut rng)?;
    let mut pairs: Vec<(&[usize], &[usize])> = Vec::new();
    for (&i, vs) in indices.iter().zip(&views) {
        for v in vs {
            pairs.push((&ds.instances[i].node_ids, &v.node_ids));
        }
    }
    let q = model.pool_pairs(&mut tape, z, &pairs)?;
    let logits = model.classify(&mut tape, q)?;
    let logits = tape.value(logits)?;

    let c = model.config.num_classes;
    let multi = model.config.multi_label;
    let mut row = 0;
    let mut loss = 0.0;
    let mut truth = Vec::with_capacity(indices.len());
    for (&i, vs) in indices.iter().zip(&views) {
        let mut avg = vec![0.0; c];
        for _ in 0..vs.len() {
            let probs = if multi {
                logits.row(row).iter().map(|&x| sigmoid(x)).collect()
            } else {
                softmax(logits.row(row))
            };
            for (a, p) in avg.iter_mut().zip(probs) {
                *a += p;
            }
            row += 1;
        }
        let n = vs.len().max(1) as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        let labels = &ds.instances[i].labels;
        if multi {
            for (cls, &p) in avg.iter().enumerate() {
                let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                loss -= if labels.contains(&cls) { p.ln() } else { (1.0 - p).ln() };
            }
        } else {
            loss -= avg[labels[0]].max(PROB_FLOOR).ln();
        }
        report.predictions.push(predict(&avg, multi));
        report.probabilities.push(avg);
        truth.push(labels.clone());
    }
    let denom = if multi { indices.len() * c } else { indices.len() };
    report.loss = loss / denom as f64;
    report.micro_f1 = micro_f1(&report.predictions, &truth);
    Ok(report)
}

fn check_dims(checkpoint: &Checkpoint, ds: &SubgraphDataset) -> Result<()> {
    let m = &checkpoint.model.config;
    let expected = checkpoint.config.model_for(ds);
    if m.input_dim != expected.input_dim {
        return Err(Error::config(
            "input_dim",
            format!(
                "checkpoint expects {} features, dataset has {}",
                m.input_dim, expected.input_dim
            ),
        ));
    }
    if m.num_classes != ds.num_classes || m.multi_label != ds.multi_label {
        return Err(Error::config(
            "num_classes",
            format!(
                "checkpoint has {} classes (multi_label={}), dataset has {} (multi_label={})",
                m.num_classes, m.multi_label, ds.num_classes, ds.multi_label
            ),
        ));
    }
    Ok(())
}

/// Evaluates a checkpoint on `split`, rebuilding its view store.
pub fn evaluate(checkpoint: &Checkpoint, ds: &SubgraphDataset, split: Split) -> Result<EvalReport> {
    check_dims(checkpoint, ds)?;
    let store = build_view_store(ds, &checkpoint.config.view_params())?;
    evaluate_with_store(checkpoint, ds, split, &store)
}

/// Evaluates a checkpoint on `split` against an existing view store.
pub fn evaluate_with_store(
    checkpoint: &Checkpoint,
    ds: &SubgraphDataset,
    split: Split,
    store: &ViewStore,
) -> Result<EvalReport> {
    check_dims(checkpoint, ds)?;
    let features = checkpoint.config.features(ds);
    evaluate_split(&checkpoint.model, ds, &features, store, split)
}

/// Trains from scratch, building the view store from `config`.
pub fn train(ds: &SubgraphDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let store = build_view_store(ds, &config.view_params())?;
    train_with_store(ds, config, &store, |_| {})
}

/// Trains against a prebuilt view store, calling `on_epoch` after each
/// epoch's record is complete.
pub fn train_with_store<F>(
    ds: &SubgraphDataset,
    config: &TrainConfig,
    store: &ViewStore,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord),
{
    config.validate()?;
    if store.params() != &config.view_params() {
        return Err(Error::config(
            "views_cache",
            "view store was built with different sampling parameters",
        ));
    }
    if ds.split_indices(Split::Train).is_empty() {
        return Err(Error::InvalidDataset("training split is empty".into()));
    }
    if ds.split_indices(Split::Val).is_empty() {
        return Err(Error::InvalidDataset("validation split is empty".into()));
    }
    let features = config.features(ds);
    let mut model = SsnpModel::new(config.model_for(ds), config.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut sched = PlateauScheduler::new(config.lr, config.scheduler);
    let mut best: Option<(usize, f64, f64, ParamStore)> = None;
    let mut records = Vec::new();

    for epoch in 0..config.max_epochs {
        let lr = sched.lr();
        let start = Instant::now();
        let pairs = store.epoch_views(ds, epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut RngStream::keyed(Domain::Shuffle, config.seed, 0, 0, epoch as i64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(usize, &NeighborhoodView)> =
                chunk.iter().map(|&p| (pairs[p].0, pairs[p].1.as_ref())).collect();
            let mut rng = RngStream::keyed(Domain::Dropout, config.seed, b as u64, 0, epoch as i64);
            let loss = match train_step(&mut model, &mut adam, ds, &features, &batch, lr, &mut rng) {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let train_seconds = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let val = evaluate_split(&model, ds, &features, store, Split::Val)?;
        let test = evaluate_split(&model, ds, &features, store, Split::Test)?;
        let eval_seconds = start.elapsed().as_secs_f64();
        sched.step(val.loss);

        let record = MetricsRecord {
            epoch,
            train_loss: loss_sum / pairs.len() as f64,
            val_loss: val.loss,
            val_micro_f1: val.micro_f1,
            test_loss: test.loss,
            test_micro_f1: test.micro_f1,
            lr,
            train_instances: pairs.len(),
            timings: Some(PhaseTimings {
                train_seconds,
                eval_seconds,
            }),
        };
        on_epoch(&record);
        records.push(record);

        let improved = match &best {
            None => true,
            Some((_, f1, loss, _)) => val.micro_f1 > *f1 || (val.micro_f1 == *f1 && val.loss < *loss),
        };
        if improved {
            let mut snapshot = model.params.clone();
            snapshot.zero_grad();
            best = Some((epoch, val.micro_f1, val.loss, snapshot));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch + 1 >= config.warmup_epochs && epoch - best_epoch >= config.patience {
            break;
        }
    }

    let (best_epoch, best_f1, _, params) = best.expect("at least one epoch ran");
    let model = SsnpModel::from_params(model.config.clone(), params)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            model,
            best_epoch,
            best_val_micro_f1: best_f1,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use crate::sampler::Strategy;

    fn quick_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.apply([
            ("max_epochs", "6"),
            ("warmup", "2"),
            ("patience", "2"),
            ("hidden_dim", "8"),
            ("n_v", "4"),
            ("n_ve", "2"),
            ("seed", "3"),
        ])
        .unwrap();
        cfg
    }

    #[test]
    fn deterministic_records() {
        let ds = generate_synthetic(40, 1).unwrap();
        let cfg = quick_config();
        let strip = |o: TrainOutcome| o.records.into_iter().map(|r| r.to_json_line(false)).collect::<Vec<_>>();
        let a = strip(train(&ds, &cfg).unwrap());
        let b = strip(train(&ds, &cfg).unwrap());
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn best_checkpoint_reproduces_val_f1() {
        let ds = generate_synthetic(40, 2).unwrap();
        let out = train(&ds, &quick_config()).unwrap();
        let ck = &out.checkpoint;
        let rec = &out.records[ck.best_epoch];
        assert_eq!(rec.val_micro_f1, ck.best_val_micro_f1);
        let report = evaluate(ck, &ds, Split::Val).unwrap();
        assert_eq!(report.micro_f1, ck.best_val_micro_f1);
        assert_eq!(report.loss, rec.val_loss);
        assert!(ck.best_epoch < out.records.len());
        assert!(out.records.iter().all(|r| r.val_micro_f1 <= ck.best_val_micro_f1));
    }

    #[test]
    fn instance_counts_per_strategy() {
        let ds = generate_synthetic(40, 0).unwrap();
        let n_train = ds.split_indices(Split::Train).len();
        for (strategy, expected) in [
            (Strategy::Pv, 4 * n_train),
            (Strategy::Pov, 2 * n_train),
            (Strategy::Ov, n_train),
        ] {
            let mut cfg = quick_config();
            cfg.views.strategy = strategy;
            cfg.max_epochs = 2;
            cfg.warmup_epochs = 2;
            let out = train(&ds, &cfg).unwrap();
            assert!(out.records.iter().all(|r| r.train_instances == expected), "{strategy}");
        }
    }

    #[test]
    fn early_stopping_respects_warmup_and_patience() {
        let ds = generate_synthetic(40, 5).unwrap();
        let mut cfg = quick_config();
        cfg.max_epochs = 40;
        cfg.warmup_epochs = 10;
        cfg.patience = 3;
        let out = train(&ds, &cfg).unwrap();
        let last = out.records.len() - 1;
        assert!(last + 1 >= cfg.warmup_epochs);
        if last + 1 < cfg.max_epochs {
            let gap = last - out.checkpoint.best_epoch;
            assert!(gap >= cfg.patience);
            assert!(gap == cfg.patience || last + 1 == cfg.warmup_epochs);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ds = generate_synthetic(40, 4).unwrap();
        let out = train(&ds, &quick_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        out.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.checkpoint);
    }

    #[test]
    fn small_step_descends_on_frozen_batch() {
        let ds = generate_synthetic(40, 7).unwrap();
        let mut cfg = quick_config();
        cfg.model.dropout = 0.0;
        let store = build_view_store(&ds, &cfg.view_params()).unwrap();
        let features = cfg.features(&ds);
        for seed in 0..5u64 {
            let mut model = SsnpModel::new(cfg.model_for(&ds), seed).unwrap();
            let mut adam = AdamState::new(&model.params);
            let pairs = store.epoch_views(&ds, seed as usize);
            let batch: Vec<(usize, &NeighborhoodView)> = pairs.iter().take(16).map(|(i, v)| (*i, v.as_ref())).collect();
            let before = batch_loss(&model, &ds, &features, &batch).unwrap();
            let mut rng = RngStream::keyed(Domain::Dropout, seed, 0, 0, 0);
            train_step(&mut model, &mut adam, &ds, &features, &batch, 1e-4, &mut rng).unwrap();
            let after = batch_loss(&model, &ds, &features, &batch).unwrap();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn single_view_store_averaging_is_identity() {
        let ds = generate_synthetic(40, 8).unwrap();
        let mut cfg = quick_config();
        cfg.views.strategy = Strategy::Pv;
        cfg.views.n_v = 1;
        let store = build_view_store(&ds, &cfg.view_params()).unwrap();
        let features = cfg.features(&ds);
        let model = SsnpModel::new(cfg.model_for(&ds), 0).unwrap();
        let report = evaluate_split(&model, &ds, &features, &store, Split::Test).unwrap();
        for (k, &i) in report.indices.iter().enumerate() {
            let v = &store.views_of(i)[0];
            let mut tape = Tape::new();
            let mut rng = RngStream::keyed(Domain::Dropout, 0, 0, 0, 0);
            let logits = model
                .forward(
                    &mut tape,
                    &ds.graph,
                    &features,
                    &[(&ds.instances[i], v)],
                    false,
                    &mut rng,
                )
                .unwrap();
            let probs = softmax(tape.value(logits).unwrap().row(0));
            for (a, b) in probs.iter().zip(&report.probabilities[k]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn store_mismatch_rejected() {
        let ds = generate_synthetic(40, 0).unwrap();
        let cfg = quick_config();
        let mut other = cfg.view_params();
        other.n_v = 5;
        let store = build_view_store(&ds, &other).unwrap();
        let err = train_with_store(&ds, &cfg, &store, |_| {}).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref key, .. } if key == "views_cache"));
    }

    #[test]
    fn json_line_omits_timings_by_default() {
        let rec = MetricsRecord {
            epoch: 0,
            train_loss: 0.5,
            val_loss: 0.5,
            val_micro_f1: 1.0,
            test_loss: 0.5,
            test_micro_f1: 1.0,
            lr: 0.001,
            train_instances: 10,
            timings: Some(PhaseTimings {
                train_seconds: 1.0,
                eval_seconds: 2.0,
            }),
        };
        assert!(!rec.to_json_line(false).contains("timings"));
        let back: MetricsRecord = serde_json::from_str(&rec.to_json_line(true)).unwrap();
        assert_eq!(back, rec);
    }
}
