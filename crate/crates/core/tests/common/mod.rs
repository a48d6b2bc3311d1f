#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::{Just, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes `fixture.csv` and `fixture.schema.json`: four numeric columns, one
/// categorical and a three-class label that depends on both kinds.
pub fn write_fixture(dir: &Path, rows: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("a,b,c,d,color,label\n");
    let colors = ["red", "green", "blue"];
    for _ in 0..rows {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let color = rng.random_range(0..3);
        let score = v[0] + 0.5 * v[1] + if color == 2 { 1.0 } else { 0.0 };
        let label = if score < -0.5 {
            "low"
        } else if score < 1.0 {
            "mid"
        } else {
            "high"
        };
        csv.push_str(&format!(
            "{:.4},{:.4},{:.4},{:.4},{},{label}\n",
            v[0], v[1], v[2], v[3], colors[color]
        ));
    }
    fs::write(dir.join("fixture.csv"), csv).unwrap();
    fs::write(
        dir.join("fixture.schema.json"),
        r#"{"name":"fixture","columns":[
            {"name":"a","type":"numeric"},
            {"name":"b","type":"numeric"},
            {"name":"c","type":"numeric"},
            {"name":"d","type":"numeric"},
            {"name":"color","type":"categorical","categories":["red","green","blue"]},
            {"name":"label","type":"label","categories":["low","mid","high"]}]}"#,
    )
    .unwrap();
}

/// Run config for the fixture with a small encoder and short loops.
pub fn fixture_config(data_dir: &Path, out: &Path) -> serde_json::Value {
    serde_json::json!({
        "data_dir": data_dir,
        "dataset": {
            "name": "fixture",
            "split": {
                "pretext": 240,
                "down_train": 60,
                "down_val": 40,
                "test": {"kind": "tail", "rows": 60}
            }
        },
        "encoder": {
            "layer_widths": [32, 32, 64],
            "maxout_k": 4,
            "projector_dim": 16,
            "batchnorm_momentum": 0.9
        },
        "qmatch": {"queue_capacity": 64},
        "pretext_loop": {"batch_size": 32, "max_epochs": 6, "patience": 3},
        "downstream_loop": {"batch_size": 32, "max_epochs": 20, "patience": 5},
        "out": out
    })
}

pub fn write_config(path: &Path, value: &serde_json::Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_path_buf()
}

/// Directory holding the converted Adult and MNIST files, if present.
pub fn real_data_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("QMATCH_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    dir.join("adult.csv").exists().then_some(dir)
}

/// Pushes each batch (rows normalized first) into an empty queue and compares
/// against a plain deque model after every push.
pub fn check_fifo(cap: usize, dim: usize, pushes: &[Vec<Vec<f64>>]) -> Result<(), String> {
    use qmatch::distill::EmbeddingQueue;
    use qmatch::Tensor;
    let mut q = EmbeddingQueue::<f64>::empty(cap, dim).map_err(|e| e.to_string())?;
    let mut model: std::collections::VecDeque<Vec<f64>> = Default::default();
    for batch in pushes {
        let rows: Vec<Vec<f64>> = batch
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        q.push(&Tensor::from_rows(&rows).unwrap()).map_err(|e| e.to_string())?;
        for r in rows {
            model.push_back(r);
            if model.len() > cap {
                model.pop_front();
            }
        }
        if q.capacity() != cap || q.storage().rows() != cap {
            return Err(format!("capacity changed to {}", q.storage().rows()));
        }
        if q.len() != model.len() {
            return Err(format!("holds {} rows, expected {}", q.len(), model.len()));
        }
        let ordered = q.ordered();
        for (r, expect) in model.iter().enumerate() {
            if ordered.row(r) != expect.as_slice() {
                return Err(format!("row {r} out of FIFO order"));
            }
        }
        for r in 0..q.len() {
            let n = q.active().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-12 {
                return Err(format!("row {r} has norm {n}"));
            }
        }
    }
    Ok(())
}

fn nonzero_row(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6)
}

pub fn push_plan() -> impl Strategy<Value = (usize, usize, Vec<Vec<Vec<f64>>>)> {
    (1usize..12, 1usize..5).prop_flat_map(|(cap, dim)| {
        let batch = (1..=cap).prop_flat_map(move |b| proptest::collection::vec(nonzero_row(dim), b));
        (Just(cap), Just(dim), proptest::collection::vec(batch, 1..10))
    })
}
