// Usage: cargo run --example baseline_losses
//
// Evaluates every pretext loss on the same pair of embedding batches.

use qmatch::baselines::{
    dino_proto_loss, mse_align_loss, simclr_loss, tabnet_recon_loss, vime_pretext_loss, PrototypeBank,
};
use qmatch::distill::{qmatch_loss, EmbeddingQueue};
use qmatch::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor<f64> {
    EmbeddingQueue::<f64>::random(rows, dim, rng).unwrap().storage().clone()
}

fn main() -> qmatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, d, f) = (8, 16, 6);
    let zs = unit(&mut rng, b, d);
    // the teacher view is a noisy copy of the student view
    let zt = Tensor::new(
        vec![b, d],
        zs.data().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect(),
    )?;
    let queue = unit(&mut rng, 128, d);

    let mut g = Graph::new();
    let (s, t) = (g.leaf(zs.clone()), g.leaf(zt.clone()));
    let tn = g.l2_normalize_rows(t, 1e-12);
    let l = qmatch_loss(&mut g, s, tn, &queue, 0.1, 0.04)?;
    println!("q-match    {:.4}", g.value(l).item());
    let l = simclr_loss(&mut g, s, tn, 0.1)?;
    println!("infonce    {:.4}", g.value(l).item());
    let l = mse_align_loss(&mut g, s, tn)?;
    println!("alignment  {:.4}", g.value(l).item());
    let bank = PrototypeBank::<f64>::new(32, d, &mut rng)?;
    let p = g.param(bank.prototypes.clone());
    let (l, _) = dino_proto_loss(&mut g, s, tn, p, Some(&bank.center), 0.1, 0.04)?;
    println!("dino       {:.4}", g.value(l).item());

    let x = Tensor::new(vec![b, f], (0..b * f).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mask = Tensor::new(
        vec![b, f],
        (0..b * f)
            .map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let logits = g.leaf(Tensor::zeros(&[b, f]));
    let recon = g.leaf(Tensor::zeros(&[b, f]));
    let l = vime_pretext_loss(&mut g, logits, recon, &mask, &x, 1.0, 2.0)?;
    println!("vime       {:.4}", g.value(l).item());
    let l = tabnet_recon_loss(&mut g, recon, &x, &mask)?;
    println!("tabnet     {:.4}", g.value(l).item());
    Ok(())
}
