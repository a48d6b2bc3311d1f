// Usage: cargo run --release --example corruption_heatmap
//
// Sweeps student and teacher corruption on a synthetic table through the
// same code path as `qmatch sweep corruption-heatmap`, then prints the grid
// of mean test accuracies.

use std::fmt::Write as _;

use qmatch::cli::{cmd_sweep, RunConfig, SweepKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write_table(dir: &std::path::Path) -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut csv = String::from("a,b,c,d,e,f,y\n");
    for _ in 0..1200 {
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = usize::from(v[0] + v[1] * v[2] > 0.0);
        let cells: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
        writeln!(csv, "{},{y}", cells.join(",")).unwrap();
    }
    std::fs::write(dir.join("toy.csv"), csv)?;
    let cols: Vec<String> = "abcdef"
        .chars()
        .map(|c| format!(r#"{{"name":"{c}","type":"numeric"}}"#))
        .collect();
    std::fs::write(
        dir.join("toy.schema.json"),
        format!(
            r#"{{"name":"toy","columns":[{},{{"name":"y","type":"label","categories":["0","1"]}}]}}"#,
            cols.join(",")
        ),
    )
}

fn main() -> qmatch::Result<()> {
    let dir = std::env::temp_dir().join("qmatch-heatmap-example");
    std::fs::create_dir_all(&dir)
        .and_then(|_| write_table(&dir))
        .map_err(|e| qmatch::Error::Data(e.to_string()))?;
    let config = serde_json::json!({
        "data_dir": dir,
        "dataset": {
            "name": "toy",
            "split": {"pretext": 800, "down_train": 40, "down_val": 100, "test": {"kind": "tail", "rows": 200}}
        },
        "encoder": {"layer_widths": [64, 64, 128], "maxout_k": 4, "projector_dim": 32, "batchnorm_momentum": 0.9},
        "qmatch": {"queue_capacity": 256},
        "pretext_loop": {"batch_size": 64, "max_epochs": 8, "patience": 4},
        "downstream_loop": {"batch_size": 40, "max_epochs": 60, "patience": 10},
        "sweep": {"p_student": [0.0, 0.3, 0.5], "p_teacher": [0.0, 0.5]},
        "seeds": [0, 1],
        "out": dir.join("out"),
    });
    let cfg = RunConfig::from_json(&config.to_string(), "example")?;
    cmd_sweep::<f32>(&cfg, SweepKind::CorruptionHeatmap, &mut std::io::stdout())?;
    println!("\nper-cell results: {}", dir.join("out").display());
    Ok(())
}
