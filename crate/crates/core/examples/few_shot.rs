// Usage: cargo run --release --example few_shot -- [preset] [pretext epochs]
//
// Q-Match pretraining followed by a linear probe, against a supervised model
// fine-tuned from random weights, on a 1% labeled preset (default
// adult-1pct). Needs the converted datasets from scripts/fetch_datasets.sh
// under QMATCH_DATA_DIR or ./data.

use std::path::PathBuf;

use qmatch::data::{load_named, preset, PreprocessOptions};
use qmatch::model::EncoderConfig;
use qmatch::train::{prepare, run_trial, Algorithm, Hyper, LoopConfig, PretextConfig, Task, TrialSpec};

fn main() -> qmatch::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "adult-1pct".into());
    let epochs: usize = args
        .next()
        .map_or(Ok(20), |s| s.parse())
        .map_err(|e| qmatch::Error::Config(format!("epochs: {e}")))?;
    let dir = std::env::var_os("QMATCH_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from);

    let p = preset(&name)?;
    let opts = PreprocessOptions {
        quantile: p.quantile,
        ..PreprocessOptions::default()
    };
    let prepared = prepare(load_named(&dir, p.dataset)?, &p.split, &opts)?;
    println!(
        "{name}: {} pretext rows, {} labeled, {} test",
        prepared.splits.pretext_len(),
        prepared.splits.down_train.len(),
        prepared.splits.test.len()
    );

    let spec = |algorithm, task| TrialSpec {
        dataset: name.clone(),
        encoder: EncoderConfig::desk(0),
        pretext: PretextConfig::new(algorithm),
        pretext_loop: LoopConfig {
            max_epochs: epochs,
            patience: 10,
            ..LoopConfig::pretext(1e-3)
        },
        downstream_loop: LoopConfig::downstream(1e-3),
        task,
    };
    let qm = run_trial::<f32>(&prepared, &spec(Algorithm::Qmatch, Task::Linear), &Hyper::new(), 0)?.result;
    let sup = run_trial::<f32>(
        &prepared,
        &spec(Algorithm::Supervised, Task::Finetune),
        &Hyper::new(),
        0,
    )?
    .result;
    println!(
        "q-match linear probe   test {:.2}%  ({:.0}s)",
        qm.test_accuracy, qm.wall_time_s
    );
    println!(
        "supervised fine-tune   test {:.2}%  ({:.0}s)",
        sup.test_accuracy, sup.wall_time_s
    );
    Ok(())
}
