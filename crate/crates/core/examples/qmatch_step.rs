// Usage: cargo run --release --example qmatch_step
//
// Runs Q-Match training steps on an in-memory toy table and prints the loss,
// gradient norms and how the queue fills up. The teacher is bound with
// gradients on, so the printed teacher norm shows the stop-gradient at work.

use qmatch::augment::{CorruptionConfig, Pool};
use qmatch::data::{fit_preprocess, Feature, FeatureKind, PreprocessOptions, TabularDataset};
use qmatch::distill::{training_step, QMatchConfig, QMatchState, QueueInit, StepContext};
use qmatch::model::{init_params, EncoderConfig};
use qmatch::train::optim::{AdamConfig, AdamW};
use qmatch::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> qmatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, f) = (1024, 12);
    let x: Vec<f64> = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let features = (0..f)
        .map(|i| Feature {
            name: format!("x{i}"),
            kind: FeatureKind::Numeric,
        })
        .collect();
    let data = TabularDataset::new("toy", features, Tensor::new(vec![n, f], x)?, None, vec![])?;
    let prep = fit_preprocess(&data, None, &PreprocessOptions::default())?;

    let enc = EncoderConfig {
        layer_widths: vec![64, 64, 128],
        projector_dim: 32,
        ..EncoderConfig::desk(prep.output_dim())
    };
    let student = init_params::<f32>(&enc, 1)?;
    let opt = AdamW::new(AdamConfig::new(1e-3, 0.0), student.params().into_iter().map(|p| p.2))?;
    // start from an empty queue to watch it fill
    let cfg = QMatchConfig {
        queue_capacity: 256,
        queue_init: QueueInit::Empty,
        ..Default::default()
    };
    let mut state = QMatchState::new(student, opt, &cfg, &mut rng)?;

    let rows: Vec<usize> = (0..n).collect();
    let corruption = CorruptionConfig::default();
    let ctx = StepContext {
        pool: Some(Pool::new(&data.x, &rows)),
        prep: &prep,
        corruption: &corruption,
        qmatch: &cfg,
        diagnostics: true,
    };
    println!("step  loss    |grad student|  |grad teacher|  queue");
    for step in 0..16 {
        let lo = (step * 64) % n;
        let batch = data.x.select_rows(&rows[lo..lo + 64]);
        let o = training_step(&mut state, &batch, &ctx, &mut rng)?;
        let loss = o.loss.map_or("   -  ".to_string(), |l| format!("{l:.4}"));
        println!(
            "{step:>4}  {loss}  {:>14.4}  {:>14}  {}/{}",
            o.student_grad_norm,
            o.teacher_grad_norm.map_or("-".to_string(), |v| v.to_string()),
            state.queue.len(),
            state.queue.capacity()
        );
    }
    println!(
        "mean pairwise cosine of queued embeddings: {:.3}",
        state.queue.mean_pairwise_cosine()
    );
    Ok(())
}
