//! Cartesian hyperparameter sweeps.
//!
//! A grid file holds one axis per line:
//!
//! ```text
//! # views precomputed per subgraph
//! n_v = 1, 3, 5, 10, 15, 20
//! strategy = pv
//! ```

use std::cmp::Ordering;
use std::io;
use std::path::Path;
use std::time::Instant;

use ssnp::config::{TrainConfig, KEYS};
use ssnp::dataset::load_dataset;
use ssnp::graph::{Split, SubgraphDataset};
use ssnp::io::write_atomic;
use ssnp::train::{evaluate, train};

use crate::{Failure, SweepArgs};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grid {
    /// Canonical key and its values, in file order.
    pub axes: Vec<(String, Vec<String>)>,
}

fn canonical_key(key: &str) -> String {
    let k = key.trim().replace('-', "_");
    if k == "warmup_epochs" {
        "warmup".to_string()
    } else {
        k
    }
}

/// Parses a grid file. Keys and values are checked against the training
/// configuration; each key may appear once.
pub fn parse_grid(text: &str, source: &Path) -> Result<Grid, Failure> {
    let mut grid = Grid::default();
    for (i, raw) in text.lines().enumerate() {
        let at = |m: String| Failure::invalid(format!("{}:{}: {m}", source.display(), i + 1));
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, vs)) = line.split_once('=') else {
            return Err(at(format!("expected key = v1, v2, got {line:?}")));
        };
        let key = canonical_key(k);
        if !KEYS.contains(&key.as_str()) {
            return Err(at(format!("unknown key {key:?}")));
        }
        if grid.axes.iter().any(|(k, _)| *k == key) {
            return Err(at(format!("duplicate key {key:?}")));
        }
        let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(at(format!("empty value in list for {key:?}")));
        }
        for v in &values {
            TrainConfig::default().set(&key, v).map_err(|e| at(e.to_string()))?;
        }
        grid.axes.push((key, values));
    }
    Ok(grid)
}

/// Orders numbers numerically and everything else as text; numbers first.
pub fn compare_values(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

impl Grid {
    /// Every combination of axis values, sorted lexicographically by value
    /// in axis order. An empty grid has exactly one empty cell.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells.sort_by(|x, y| {
            x.iter()
                .zip(y)
                .map(|((_, a), (_, b))| compare_values(a, b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        });
        cells.dedup();
        cells
    }
}

/// Aggregated result of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub settings: Vec<(String, String)>,
    pub runs: usize,
    pub mean_micro_f1: f64,
    /// Standard error of the mean; 0 for a single run.
    pub stderr_micro_f1: f64,
    pub mean_seconds: f64,
    /// Optimizer instances per epoch.
    pub train_instances: usize,
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Trains `repeats` times with seeds `cfg.seed + r` and scores the best
/// checkpoint of each run on the test split.
pub fn run_cell(
    ds: &SubgraphDataset,
    cfg: &TrainConfig,
    settings: Vec<(String, String)>,
    repeats: usize,
) -> Result<SweepRow, Failure> {
    let mut f1 = Vec::with_capacity(repeats);
    let mut seconds = Vec::with_capacity(repeats);
    let mut train_instances = 0;
    for r in 0..repeats {
        let cfg = TrainConfig {
            seed: cfg.seed + r as u64,
            ..cfg.clone()
        };
        let start = Instant::now();
        let outcome = train(ds, &cfg)?;
        seconds.push(start.elapsed().as_secs_f64());
        f1.push(evaluate(&outcome.checkpoint, ds, Split::Test)?.micro_f1);
        train_instances = outcome.records[0].train_instances;
    }
    let (mean_micro_f1, stderr_micro_f1) = mean_stderr(&f1);
    Ok(SweepRow {
        settings,
        runs: repeats,
        mean_micro_f1,
        stderr_micro_f1,
        mean_seconds: seconds.iter().sum::<f64>() / repeats as f64,
        train_instances,
    })
}

/// Renders rows as CSV with one column per grid key.
pub fn to_csv(keys: &[String], rows: &[SweepRow]) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = keys.iter().map(String::as_str).collect();
    header.extend([
        "runs",
        "mean_test_micro_f1",
        "stderr_test_micro_f1",
        "mean_seconds",
        "train_instances_per_epoch",
    ]);
    w.write_record(&header)?;
    for row in rows {
        let mut rec: Vec<String> = row.settings.iter().map(|(_, v)| v.clone()).collect();
        rec.push(row.runs.to_string());
        rec.push(format!("{:.6}", row.mean_micro_f1));
        rec.push(format!("{:.6}", row.stderr_micro_f1));
        rec.push(format!("{:.3}", row.mean_seconds));
        rec.push(row.train_instances.to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub(crate) fn run(a: SweepArgs) -> Result<(), Failure> {
    if a.repeats == 0 {
        return Err(Failure::invalid("repeats must be at least 1"));
    }
    let spec = a.config.run_spec()?;
    let base = spec.resolve()?;
    let grid = match &a.grid {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
            parse_grid(&text, path)?
        }
        None => Grid::default(),
    };
    let cells = grid.cells();
    let mut configs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut cfg = base.clone();
        cfg.apply(cell.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate().map_err(|e| {
            let desc: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
            Failure::invalid(format!("grid cell {}: {e}", desc.join(" ")))
        })?;
        configs.push(cfg);
    }
    let ds = load_dataset(&a.data)?;

    let mut rows = Vec::with_capacity(cells.len());
    for (cell, cfg) in cells.into_iter().zip(&configs) {
        let row = run_cell(&ds, cfg, cell, a.repeats)?;
        let desc: Vec<String> = row.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        eprintln!(
            "{} micro_f1 {:.4} +- {:.4} ({:.1}s per run)",
            if desc.is_empty() {
                "defaults".to_string()
            } else {
                desc.join(" ")
            },
            row.mean_micro_f1,
            row.stderr_micro_f1,
            row.mean_seconds
        );
        rows.push(row);
    }
    let keys: Vec<String> = grid.axes.iter().map(|(k, _)| k.clone()).collect();
    let csv = to_csv(&keys, &rows)?;
    match &a.out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => io::Write::write_all(&mut io::stdout().lock(), csv.as_bytes())?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(text: &str) -> Result<Grid, Failure> {
        parse_grid(text, Path::new("grid.txt"))
    }

    #[test]
    fn two_values_two_cells() {
        let g = grid("n_v = 3, 1\n").unwrap();
        let cells = g.cells();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0], vec![("n_v".to_string(), "1".to_string())]);
    }

    #[test]
    fn empty_grid_has_one_cell() {
        let g = grid("# nothing\n\n").unwrap();
        assert_eq!(g.cells(), vec![Vec::<(String, String)>::new()]);
    }

    #[test]
    fn numeric_values_sort_numerically() {
        let g = grid("n-v = 20, 3, 10, 1\nstrategy = pv, pov\n").unwrap();
        let order: Vec<(String, String)> = g.cells().iter().map(|c| (c[0].1.clone(), c[1].1.clone())).collect();
        let expect = [
            ("1", "pov"),
            ("1", "pv"),
            ("3", "pov"),
            ("3", "pv"),
            ("10", "pov"),
            ("10", "pv"),
            ("20", "pov"),
            ("20", "pv"),
        ];
        assert_eq!(order.len(), expect.len());
        for (o, e) in order.iter().zip(expect) {
            assert_eq!((o.0.as_str(), o.1.as_str()), e);
        }
    }

    #[test]
    fn malformed_grids_rejected() {
        for bad in [
            "n_v 1, 2",
            "colour = red",
            "n_v = 1,,2",
            "n_v = 1\nn-v = 2",
            "lr = fast",
        ] {
            let err = grid(bad).unwrap_err();
            assert_eq!(err.exit_code(), crate::EXIT_INVALID, "{bad}");
        }
    }

    #[test]
    fn mean_and_stderr() {
        assert_eq!(mean_stderr(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_has_one_column_per_key() {
        let rows = vec![SweepRow {
            settings: vec![("n_v".into(), "3".into())],
            runs: 2,
            mean_micro_f1: 0.75,
            stderr_micro_f1: 0.05,
            mean_seconds: 1.5,
            train_instances: 30,
        }];
        let csv = to_csv(&["n_v".to_string()], &rows).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "n_v,runs,mean_test_micro_f1,stderr_test_micro_f1,mean_seconds,train_instances_per_epoch"
        );
        assert_eq!(lines.next().unwrap(), "3,2,0.750000,0.050000,1.500,30");
    }
}
