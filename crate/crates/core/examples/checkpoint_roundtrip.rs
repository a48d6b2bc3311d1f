// Usage: cargo run --example checkpoint_roundtrip
//
// Saves an encoder with its EMA copy and a queue, loads it back and checks
// that nothing changed.

use qmatch::distill::EmbeddingQueue;
use qmatch::model::{
    init_params, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, EmaParams, EncoderConfig, NamedArray,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> qmatch::Result<()> {
    let config = EncoderConfig {
        layer_widths: vec![64, 64, 128],
        ..EncoderConfig::desk(20)
    };
    let params = init_params::<f32>(&config, 1)?;
    let ema = EmaParams::new(&params, 0.9)?;
    let queue = EmbeddingQueue::<f32>::random(256, config.projector_dim, &mut ChaCha8Rng::seed_from_u64(2))?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            config: config.clone(),
            seed: 1,
            step: 0,
            algorithm: "qmatch".into(),
            preprocess_ref: None,
            has_classifier: false,
            ema_decay: Some(ema.decay()),
            extra: serde_json::json!({"queue_cursor": queue.cursor()}),
        },
        params,
        ema: Some(ema),
        arrays: vec![NamedArray::new("queue", queue.storage().clone())],
    };

    let dir = std::env::temp_dir().join("qmatch-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| qmatch::Error::Data(e.to_string()))?;
    let path = dir.join("encoder.ckpt");
    save_checkpoint(&path, &ckpt)?;
    let back = load_checkpoint::<f32>(&path, Some(&config))?;
    println!(
        "{} parameters, identical after reload: {}",
        back.params.num_params(),
        back == ckpt
    );

    // loading at a different precision is refused
    match load_checkpoint::<f64>(&path, Some(&config)) {
        Ok(_) => println!("unexpected: f64 load succeeded"),
        Err(e) => println!("f64 load refused: {e}"),
    }
    Ok(())
}
