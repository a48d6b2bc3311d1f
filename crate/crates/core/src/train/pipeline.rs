use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::grid::{grid_points, GridSpec, Hyper, PointSummary};
use super::{
    finetune, linear_eval, mean_std, pretrain, Algorithm, DownstreamData, LoopConfig, PretextConfig, PretrainOutcome,
    Task, TrialResult,
};
use crate::data::{fit_preprocess, make_splits, PreprocessOptions, PreprocessState, SplitSpec, Splits, TabularDataset};
use crate::error::{Error, Result};
use crate::model::{init_params, EncoderConfig, ModelParams};
use crate::tensor::Real;

/// A dataset with its splits and preprocessing fitted on pretext-train.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: TabularDataset,
    pub splits: Splits,
    pub prep: PreprocessState,
}

pub fn prepare(data: TabularDataset, spec: &SplitSpec, opts: &PreprocessOptions) -> Result<Prepared> {
    let splits = make_splits(&data, spec)?;
    let fit_rows = if splits.pretext_train.is_empty() {
        &splits.down_train
    } else {
        &splits.pretext_train
    };
    let prep = fit_preprocess(&data, Some(fit_rows), opts)?;
    Ok(Prepared { data, splits, prep })
}

/// Everything one trial needs apart from the data and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    /// Label written into results, usually the preset name.
    pub dataset: String,
    pub encoder: EncoderConfig,
    pub pretext: PretextConfig,
    pub pretext_loop: LoopConfig,
    pub downstream_loop: LoopConfig,
    pub task: Task,
}

impl TrialSpec {
    /// Copy with grid overrides applied.
    pub fn with_hyper(&self, hyper: &Hyper) -> Result<Self> {
        let mut s = self.clone();
        for (k, &v) in hyper {
            match k.as_str() {
                "lr" => s.downstream_loop.optimizer.lr = v,
                "pretext_lr" => s.pretext_loop.optimizer.lr = v,
                "corruption" => s.pretext.corruption.p_student = v,
                "tau_student" => s.pretext.qmatch.tau_student = v,
                "queue_size" => s.pretext.qmatch.queue_capacity = v as usize,
                "temperature" => s.pretext.temperature = v,
                other => return Err(Error::Config(format!("unknown hyperparameter {other:?}"))),
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct TrialOutput<T: Real> {
    pub result: TrialResult,
    /// Absent for the supervised baseline.
    pub pretrained: Option<PretrainOutcome<T>>,
}

fn downstream_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD0_57
}

fn encoder_config(spec: &TrialSpec, prepared: &Prepared) -> EncoderConfig {
    EncoderConfig {
        input_dim: prepared.prep.output_dim(),
        ..spec.encoder.clone()
    }
}

/// Pretext stage of a trial: random weights for the supervised baseline.
fn pretext_stage<T: Real>(
    prepared: &Prepared,
    spec: &TrialSpec,
    seed: u64,
) -> Result<(ModelParams<T>, Option<PretrainOutcome<T>>)> {
    let enc = encoder_config(spec, prepared);
    if spec.pretext.algorithm == Algorithm::Supervised {
        return Ok((init_params(&enc, seed)?, None));
    }
    let out = pretrain::<T>(
        &prepared.data,
        &prepared.splits,
        &prepared.prep,
        &enc,
        &spec.pretext,
        &spec.pretext_loop,
        seed,
    )?;
    Ok((out.student.clone(), Some(out)))
}

fn downstream_stage<T: Real>(
    encoder: &ModelParams<T>,
    data: &DownstreamData<T>,
    spec: &TrialSpec,
    seed: u64,
) -> Result<(f64, f64)> {
    let s = downstream_seed(seed);
    let out = match spec.task {
        Task::Linear => linear_eval(encoder, data, &spec.downstream_loop, s)?,
        Task::Finetune => finetune(encoder, data, &spec.downstream_loop, s)?,
    };
    Ok((out.val_accuracy, out.test_accuracy))
}

fn result(
    spec: &TrialSpec,
    hyper: &Hyper,
    seed: u64,
    start: Instant,
    outcome: Result<(f64, f64)>,
) -> Result<TrialResult> {
    let (val, test, failed) = match outcome {
        Ok((v, t)) => (v, t, None),
        Err(e @ Error::Diverged(_)) => (0.0, 0.0, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(TrialResult {
        algorithm: spec.pretext.algorithm.name().to_string(),
        dataset: spec.dataset.clone(),
        task: spec.task,
        hyperparameters: hyper.clone(),
        seed,
        val_accuracy: val,
        test_accuracy: test,
        wall_time_s: start.elapsed().as_secs_f64(),
        failed,
    })
}

fn diverged<T: Real>(p: &Option<PretrainOutcome<T>>) -> Option<Error> {
    p.as_ref()
        .and_then(|o| o.diverged.clone())
        .map(|m| Error::Diverged(format!("pretraining: {m}")))
}

/// Pretext training (unless supervised) followed by the downstream task.
/// Divergence is recorded in the result rather than returned as an error.
pub fn run_trial<T: Real>(prepared: &Prepared, spec: &TrialSpec, hyper: &Hyper, seed: u64) -> Result<TrialOutput<T>> {
    let start = Instant::now();
    let spec = spec.with_hyper(hyper)?;
    let data = DownstreamData::<T>::from_splits(&prepared.data, &prepared.splits, &prepared.prep)?;
    let (encoder, pretrained) = match pretext_stage::<T>(prepared, &spec, seed) {
        Ok(x) => x,
        Err(e @ Error::Diverged(_)) => {
            return Ok(TrialOutput {
                result: result(&spec, hyper, seed, start, Err(e))?,
                pretrained: None,
            })
        }
        Err(e) => return Err(e),
    };
    let outcome = match diverged(&pretrained) {
        Some(e) => Err(e),
        None => downstream_stage(&encoder, &data, &spec, seed),
    };
    Ok(TrialOutput {
        result: result(&spec, hyper, seed, start, outcome)?,
        pretrained,
    })
}

/// Evaluates every grid point for every seed. Each pretext setting is
/// pretrained once per seed and reused across downstream learning rates.
/// Returns all trial results and one summary per point.
pub fn run_grid<T: Real>(
    prepared: &Prepared,
    spec: &TrialSpec,
    grid: &GridSpec,
    seeds: &[u64],
) -> Result<(Vec<TrialResult>, Vec<PointSummary>)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let points = grid_points(grid)?;
    let data = DownstreamData::<T>::from_splits(&prepared.data, &prepared.splits, &prepared.prep)?;
    let mut by_pretext: BTreeMap<Vec<(String, u64)>, Vec<Hyper>> = BTreeMap::new();
    for p in points {
        let key = p
            .iter()
            .filter(|(k, _)| k.as_str() != "lr")
            .map(|(k, v)| (k.clone(), v.to_bits()))
            .collect();
        by_pretext.entry(key).or_default().push(p);
    }
    let mut results = Vec::new();
    let mut per_point: Vec<(Hyper, Vec<TrialResult>)> = Vec::new();
    for group in by_pretext.values() {
        let mut rows: Vec<Vec<TrialResult>> = vec![Vec::new(); group.len()];
        for &seed in seeds {
            let start = Instant::now();
            let pre_spec = spec.with_hyper(&group[0])?;
            let stage = match pretext_stage::<T>(prepared, &pre_spec, seed) {
                Ok(x) => Ok(x),
                Err(Error::Diverged(m)) => Err(m),
                Err(e) => return Err(e),
            };
            let pretext_time = start.elapsed();
            for (i, hyper) in group.iter().enumerate() {
                let s = spec.with_hyper(hyper)?;
                let t0 = Instant::now();
                let outcome = match &stage {
                    Ok((enc, pre)) => match diverged(pre) {
                        Some(e) => Err(e),
                        None => downstream_stage(enc, &data, &s, seed),
                    },
                    Err(m) => Err(Error::Diverged(m.clone())),
                };
                let mut r = result(&s, hyper, seed, t0, outcome)?;
                r.wall_time_s += pretext_time.as_secs_f64();
                log::info!(
                    "{} {:?} seed {seed}: val {:.2} test {:.2}{}",
                    r.algorithm,
                    hyper,
                    r.val_accuracy,
                    r.test_accuracy,
                    r.failed
                        .as_deref()
                        .map(|f| format!(" (failed: {f})"))
                        .unwrap_or_default()
                );
                rows[i].push(r);
            }
        }
        for (hyper, rs) in group.iter().zip(rows) {
            per_point.push((hyper.clone(), rs));
        }
    }
    let mut summaries = Vec::new();
    for (hyper, rs) in per_point {
        let failed = rs.iter().any(|r| !r.ok());
        let val: Vec<f64> = rs.iter().map(|r| r.val_accuracy).collect();
        let test: Vec<f64> = rs.iter().map(|r| r.test_accuracy).collect();
        summaries.push(PointSummary {
            hyper,
            mean_val_accuracy: mean_std(&val).0,
            mean_test_accuracy: mean_std(&test).0,
            failed,
        });
        results.extend(rs);
    }
    Ok((results, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TestSplit;
    use crate::model::ProjectionHead;
    use crate::train::optim::AdamConfig;
    use crate::train::select_best;

    fn fixture() -> Prepared {
        let data = crate::train::pretext::tests::fixture(240, 4);
        let spec = SplitSpec {
            pretext: Some(140),
            pretext_val_fraction: 0.1,
            down_train: 30,
            down_val: 30,
            test: TestSplit::Tail(40),
            label_fraction: 1.0,
            seed: 0,
        };
        prepare(data, &spec, &PreprocessOptions::default()).unwrap()
    }

    fn spec(algorithm: Algorithm) -> TrialSpec {
        let lc = |lr| LoopConfig {
            batch_size: 32,
            max_epochs: 5,
            patience: 2,
            optimizer: AdamConfig::new(lr, 0.0),
        };
        let mut pretext = PretextConfig::new(algorithm);
        pretext.qmatch.queue_capacity = 64;
        TrialSpec {
            dataset: "fixture".into(),
            encoder: EncoderConfig {
                layer_widths: vec![16, 16],
                maxout_k: 2,
                projector_dim: 8,
                input_dim: 0,
                batchnorm_momentum: 0.9,
                batchnorm_eps: 1e-5,
                projection_head: ProjectionHead::Linear,
            },
            pretext,
            pretext_loop: lc(1e-3),
            downstream_loop: lc(1e-2),
            task: Task::Linear,
        }
    }

    #[test]
    fn trial_is_reproducible() {
        let p = fixture();
        let a = run_trial::<f64>(&p, &spec(Algorithm::Qmatch), &Hyper::new(), 7).unwrap();
        let b = run_trial::<f64>(&p, &spec(Algorithm::Qmatch), &Hyper::new(), 7).unwrap();
        assert!(a.result.ok());
        assert_eq!(a.result.test_accuracy.to_bits(), b.result.test_accuracy.to_bits());
        assert_eq!(a.result.val_accuracy.to_bits(), b.result.val_accuracy.to_bits());
    }

    #[test]
    fn supervised_trial_skips_pretext() {
        let p = fixture();
        let out = run_trial::<f64>(&p, &spec(Algorithm::Supervised), &Hyper::new(), 1).unwrap();
        assert!(out.pretrained.is_none());
        assert_eq!(out.result.algorithm, "supervised");
    }

    #[test]
    fn unknown_hyper_is_a_config_error() {
        let h: Hyper = [("momentum".to_string(), 0.5)].into();
        assert!(matches!(spec(Algorithm::Qmatch).with_hyper(&h), Err(Error::Config(_))));
    }

    #[test]
    fn grid_summarizes_every_point() {
        let p = fixture();
        let g = GridSpec {
            lr: Some(vec![1e-3, 1e-2]),
            tau_student: Some(vec![0.1, 0.2]),
            ..Default::default()
        };
        let (results, summaries) = run_grid::<f64>(&p, &spec(Algorithm::Qmatch), &g, &[0, 1]).unwrap();
        assert_eq!(results.len(), 8);
        assert_eq!(summaries.len(), 4);
        assert!(select_best(&summaries).is_some());
    }
}
