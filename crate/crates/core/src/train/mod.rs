//! Optimization loops: pretext training, linear evaluation, fine-tuning,
//! grid search and aggregation of trial results.

mod aggregate;
mod downstream;
mod grid;
pub mod optim;
mod pipeline;
mod pretext;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use optim::AdamConfig;

pub use aggregate::{aggregate, format_rank, mean_std, rank_by_mean, CellStats, RankTable};
pub use downstream::{accuracy, finetune, linear_eval, DownstreamData, DownstreamOutcome};
pub use grid::{grid_points, select_best, GridSpec, Hyper, PointSummary};
pub use pipeline::{prepare, run_grid, run_trial, Prepared, TrialOutput, TrialSpec};
pub use pretext::{pretrain, DinoConfig, EpochLog, PretextConfig, PretrainOutcome, VimeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Qmatch,
    Vime,
    Tabnet,
    Infonce,
    MseAlign,
    Dino,
    /// No pretext task; downstream training starts from random weights.
    Supervised,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Qmatch,
        Algorithm::Vime,
        Algorithm::Tabnet,
        Algorithm::Infonce,
        Algorithm::MseAlign,
        Algorithm::Dino,
        Algorithm::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Qmatch => "qmatch",
            Algorithm::Vime => "vime",
            Algorithm::Tabnet => "tabnet",
            Algorithm::Infonce => "infonce",
            Algorithm::MseAlign => "mse_align",
            Algorithm::Dino => "dino",
            Algorithm::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let known: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown algorithm {s:?} (known: {})", known.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Linear,
    Finetune,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Linear => "linear",
            Task::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: AdamConfig,
}

impl LoopConfig {
    pub fn pretext(lr: f64) -> Self {
        Self {
            batch_size: 512,
            max_epochs: 200,
            patience: 32,
            optimizer: AdamConfig::new(lr, 0.0),
        }
    }

    pub fn downstream(lr: f64) -> Self {
        Self {
            batch_size: 512,
            max_epochs: 500,
            patience: 32,
            optimizer: AdamConfig::new(lr, 0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_epochs > 0 && self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

/// Patience-based stopping on a monitored metric. Only strict improvements
/// reset the counter.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    direction: Direction,
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(direction: Direction, patience: usize) -> Self {
        Self {
            direction,
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        let better = match (self.best, self.direction) {
            (None, _) => !metric.is_nan(),
            (Some(b), Direction::Minimize) => metric < b,
            (Some(b), Direction::Maximize) => metric > b,
        };
        if better {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Runs `epoch` until patience runs out or `max_epochs` is reached. `epoch`
/// returns the monitored metric; `on_improve` is called whenever it improves
/// (typically to snapshot parameters). Returns the number of epochs run.
pub fn run_with_patience(
    max_epochs: usize,
    patience: usize,
    direction: Direction,
    mut epoch: impl FnMut(usize) -> Result<f64>,
    mut on_improve: impl FnMut(usize, f64) -> Result<()>,
) -> Result<(usize, EarlyStopping)> {
    let mut stop = EarlyStopping::new(direction, patience);
    let mut ran = 0;
    for e in 0..max_epochs {
        let m = epoch(e)?;
        ran += 1;
        match stop.observe(e, m) {
            Verdict::Improved => on_improve(e, m)?,
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    Ok((ran, stop))
}

/// One downstream evaluation. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub algorithm: String,
    pub dataset: String,
    pub task: Task,
    pub hyperparameters: BTreeMap<String, f64>,
    pub seed: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

impl TrialResult {
    pub fn ok(&self) -> bool {
        self.failed.is_none()
    }
}

/// Appends results as JSON lines.
pub fn append_results(path: impl AsRef<Path>, results: &[TrialResult]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in results {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<TrialResult>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrialResult =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !(0.0..=100.0).contains(&r.val_accuracy) || !(0.0..=100.0).contains(&r.test_accuracy) {
            return Err(Error::Data(format!(
                "{}:{}: accuracy outside [0, 100]",
                path.display(),
                i + 1
            )));
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_metric_stops_after_patience() {
        let (ran, stop) = run_with_patience(200, 32, Direction::Minimize, |_| Ok(1.0), |_, _| Ok(())).unwrap();
        assert_eq!(ran, 33);
        assert_eq!(stop.best_epoch(), 0);
    }

    #[test]
    fn improving_metric_runs_to_the_end() {
        let mut snaps = 0;
        let (ran, stop) = run_with_patience(
            200,
            32,
            Direction::Minimize,
            |e| Ok(100.0 - e as f64),
            |_, _| {
                snaps += 1;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!((ran, snaps, stop.best_epoch()), (200, 200, 199));
    }

    #[test]
    fn best_epoch_not_last() {
        let metric = [0.5, 0.7, 0.9, 0.8, 0.85, 0.6];
        let (ran, stop) = run_with_patience(6, 3, Direction::Maximize, |e| Ok(metric[e]), |_, _| Ok(())).unwrap();
        assert_eq!(ran, 6);
        assert_eq!(stop.best_epoch(), 2);
    }

    #[test]
    fn patience_must_be_below_max_epochs() {
        let mut c = LoopConfig::pretext(1e-3);
        c.patience = 200;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.name()));
        }
        assert!("byol".parse::<Algorithm>().is_err());
    }

    #[test]
    fn results_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r/results.jsonl");
        let r = TrialResult {
            algorithm: "qmatch".into(),
            dataset: "adult-1pct".into(),
            task: Task::Linear,
            hyperparameters: [("lr".to_string(), 1e-3)].into(),
            seed: 3,
            val_accuracy: 80.0,
            test_accuracy: 79.5,
            wall_time_s: 1.5,
            failed: None,
        };
        append_results(&p, std::slice::from_ref(&r)).unwrap();
        append_results(&p, std::slice::from_ref(&r)).unwrap();
        assert_eq!(read_results(&p).unwrap(), vec![r.clone(), r]);
    }
}
