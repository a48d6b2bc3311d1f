// Usage: cargo run --example rank_table
//
// Aggregates per-seed results into mean ± std cells and average ranks.

use qmatch::train::{aggregate, Task, TrialResult};

fn trial(algorithm: &str, dataset: &str, seed: u64, acc: f64) -> TrialResult {
    TrialResult {
        algorithm: algorithm.into(),
        dataset: dataset.into(),
        task: Task::Linear,
        hyperparameters: Default::default(),
        seed,
        val_accuracy: acc,
        test_accuracy: acc,
        wall_time_s: 0.0,
        failed: None,
    }
}

fn main() -> qmatch::Result<()> {
    let mut results = Vec::new();
    let runs = [
        ("qmatch", "adult-1pct", [80.1, 80.6, 80.3]),
        ("qmatch", "mnist-1pct", [96.9, 97.3, 97.2]),
        ("infonce", "adult-1pct", [76.8, 77.0, 76.9]),
        ("infonce", "mnist-1pct", [91.7, 92.0, 91.8]),
        ("supervised", "adult-1pct", [78.6, 78.4, 78.9]),
        ("supervised", "mnist-1pct", [86.0, 85.8, 86.1]),
    ];
    for (alg, ds, accs) in runs {
        for (seed, acc) in accs.into_iter().enumerate() {
            results.push(trial(alg, ds, seed as u64, acc));
        }
    }
    print!("{}", aggregate(&results)?.to_text());
    Ok(())
}
