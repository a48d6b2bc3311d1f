// Usage: cargo run --example preprocess_and_splits
//
// Splits a small mixed-type table into pretext, downstream and test rows,
// fits preprocessing on the pretext rows and shows what it learned.

use qmatch::data::{
    fit_preprocess, make_splits, Feature, FeatureKind, FeatureTransform, PreprocessOptions, SplitSpec, TabularDataset,
    TestSplit,
};
use qmatch::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> qmatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 2000;
    let mut x = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let income: f64 = rng.random_range(0.0f64..1.0).powi(4) * 1e5;
        let age = rng.random_range(18.0..90.0);
        let sector = rng.random_range(0..4) as f64;
        x.extend([income, age, sector]);
        labels.push(usize::from(income > 2e4));
    }
    let features = vec![
        Feature {
            name: "income".into(),
            kind: FeatureKind::Numeric,
        },
        Feature {
            name: "age".into(),
            kind: FeatureKind::Numeric,
        },
        Feature {
            name: "sector".into(),
            kind: FeatureKind::Categorical {
                categories: ["a", "b", "c", "d"].map(String::from).to_vec(),
            },
        },
    ];
    let data = TabularDataset::new(
        "toy",
        features,
        Tensor::new(vec![n, 3], x)?,
        Some(labels),
        vec!["low".into(), "high".into()],
    )?;

    let spec = SplitSpec {
        pretext: Some(1500),
        pretext_val_fraction: 0.05,
        down_train: 20,
        down_val: 100,
        test: TestSplit::Tail(300),
        label_fraction: 1.0,
        seed: 0,
    };
    let splits = make_splits(&data, &spec)?;
    for (name, rows) in splits.parts() {
        println!("{name:>14}: {} rows", rows.len());
    }

    // the skewed income column is where the quantile transform matters
    for quantile in [false, true] {
        let opts = PreprocessOptions {
            quantile,
            ..PreprocessOptions::default()
        };
        let prep = fit_preprocess(&data, Some(&splits.pretext_train), &opts)?;
        println!("\nquantile = {quantile}, model input width {}", prep.output_dim());
        for (feat, t) in data.features.iter().zip(&prep.features) {
            match t {
                FeatureTransform::Numeric { mean, var, .. } => {
                    println!("  {:<7} mean {mean:>10.3} var {var:>14.3}", feat.name)
                }
                FeatureTransform::OneHot { cardinality } => println!("  {:<7} one-hot over {cardinality}", feat.name),
            }
        }
        let z: Tensor<f64> = prep.apply(&data.x.select_rows(&splits.test[..3]))?;
        for r in 0..3 {
            println!(
                "  test row {r}: {:?}",
                z.row(r).iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }
    Ok(())
}
