use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::{Direction, EarlyStopping, LoopConfig, Verdict};
use crate::data::{PreprocessState, Splits, TabularDataset};
use crate::distill::LOG_EPS;
use crate::error::{Error, Result};
use crate::model::{Dense, Mode, ModelParams};
use crate::tensor::{Graph, Real, Tensor, Var};

const EMBED_CHUNK: usize = 2048;

/// Preprocessed downstream partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamData<T: Real> {
    pub train_x: Tensor<T>,
    pub train_y: Vec<usize>,
    pub val_x: Tensor<T>,
    pub val_y: Vec<usize>,
    pub test_x: Tensor<T>,
    pub test_y: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Real> DownstreamData<T> {
    pub fn from_splits(data: &TabularDataset, splits: &Splits, prep: &PreprocessState) -> Result<Self> {
        let labels = data.labels()?;
        let part = |rows: &[usize]| -> Result<(Tensor<T>, Vec<usize>)> {
            Ok((
                prep.apply(&data.x.select_rows(rows))?,
                rows.iter().map(|&r| labels[r]).collect(),
            ))
        };
        let (train_x, train_y) = part(&splits.down_train)?;
        let (val_x, val_y) = part(&splits.down_val)?;
        let (test_x, test_y) = part(&splits.test)?;
        Ok(Self {
            train_x,
            train_y,
            val_x,
            val_y,
            test_x,
            test_y,
            num_classes: data.num_classes(),
        })
    }

    fn check(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Data(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        for (name, x, y) in [
            ("train", &self.train_x, &self.train_y),
            ("validation", &self.val_x, &self.val_y),
            ("test", &self.test_x, &self.test_y),
        ] {
            if x.rows() != y.len() {
                return Err(Error::Shape(format!(
                    "{name}: {} rows but {} labels",
                    x.rows(),
                    y.len()
                )));
            }
            if y.is_empty() {
                return Err(Error::Data(format!("{name} split is empty")));
            }
            if let Some(&bad) = y.iter().find(|&&c| c >= self.num_classes) {
                return Err(Error::Data(format!(
                    "{name}: label {bad} outside {} classes",
                    self.num_classes
                )));
            }
        }
        let mut seen = vec![false; self.num_classes];
        for &c in &self.train_y {
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "class {missing} is absent from the training labels"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamOutcome {
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Percentage of rows whose arg-max logit (lowest index on ties) is the label.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len(), "one label per row");
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

fn one_hot<T: Real>(labels: &[usize], k: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (r, &c) in labels.iter().enumerate() {
        t.set(r, c, T::one());
    }
    t
}

fn softmax_ce<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize], k: usize) -> Result<Var> {
    let p = g.softmax_rows(logits, 1.0)?;
    let target = g.leaf(one_hot(labels, k));
    g.cross_entropy_rows(target, p, LOG_EPS)
}

fn affine<T: Real>(x: &Tensor<T>, head: &Dense<T>) -> Result<Tensor<T>> {
    let mut y = x.matmul(&head.weight)?;
    let b = head.bias.data();
    for r in 0..y.rows() {
        for (v, &bb) in y.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
    Ok(y)
}

/// Downstream batches keep the remainder; a trailing single row is folded into
/// the previous batch so batch norm always sees at least two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Linear evaluation: the encoder stays frozen (eval-mode batch norm, no
/// gradient) and a single affine classifier is trained on its outputs with
/// softmax cross-entropy and early stopping on validation accuracy.
pub fn linear_eval<T: Real>(
    encoder: &ModelParams<T>,
    data: &DownstreamData<T>,
    loop_cfg: &LoopConfig,
    seed: u64,
) -> Result<DownstreamOutcome> {
    loop_cfg.validate()?;
    data.check()?;
    let k = data.num_classes;
    let train = encoder.embed(&data.train_x, EMBED_CHUNK)?;
    let val = encoder.embed(&data.val_x, EMBED_CHUNK)?;
    let test = encoder.embed(&data.test_x, EMBED_CHUNK)?;

    let mut head = Dense::seeded(encoder.output_dim(), k, seed ^ 0x0011_AEA7);
    let mut opt = AdamW::new(loop_cfg.optimizer.clone(), [&head.weight, &head.bias])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.rows()).collect();

    let mut best = (head.clone(), accuracy(&affine(&val, &head)?, &data.val_y));
    let mut stop = EarlyStopping::new(Direction::Maximize, loop_cfg.patience);
    let mut epochs_run = 0;
    for epoch in 0..loop_cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in batches(&order, loop_cfg.batch_size) {
            let y: Vec<usize> = batch.iter().map(|&r| data.train_y[r]).collect();
            let mut g = Graph::new();
            let hb = head.bind(&mut g, true);
            let x = g.leaf(train.select_rows(batch));
            let logits = Dense::forward(&mut g, hb, x)?;
            let loss = softmax_ce(&mut g, logits, &y, k)?;
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = hb.iter().map(|&v| g.grad(v).cloned().expect("head grad")).collect();
            opt.step(vec![&mut head.weight, &mut head.bias], &grads, &[true, false])?;
        }
        epochs_run += 1;
        let acc = accuracy(&affine(&val, &head)?, &data.val_y);
        match stop.observe(epoch, acc) {
            Verdict::Improved => best = (head.clone(), acc),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let (head, val_accuracy) = best;
    Ok(DownstreamOutcome {
        val_accuracy,
        test_accuracy: accuracy(&affine(&test, &head)?, &data.test_y),
        best_epoch: stop.best_epoch(),
        epochs_run,
    })
}

fn predict<T: Real>(model: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.rows();
    let k = model.classifier.as_ref().map_or(0, |c| c.out_dim());
    let mut out = Vec::with_capacity(n * k);
    for start in (0..n).step_by(EMBED_CHUNK) {
        let idx: Vec<usize> = (start..(start + EMBED_CHUNK).min(n)).collect();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let xv = g.leaf(x.select_rows(&idx));
        let h = model.forward_encoder_eval(&mut g, &b, xv)?;
        let y = model.forward_classifier(&mut g, &b, h)?;
        out.extend_from_slice(g.value(y).data());
    }
    Tensor::new(vec![n, k], out)
}

/// Fine-tuning: a fresh classifier head on top of the encoder, all
/// parameters trained, same early-stopping protocol as [`linear_eval`].
/// Started from random weights this is the supervised baseline.
pub fn finetune<T: Real>(
    encoder: &ModelParams<T>,
    data: &DownstreamData<T>,
    loop_cfg: &LoopConfig,
    seed: u64,
) -> Result<DownstreamOutcome> {
    loop_cfg.validate()?;
    data.check()?;
    let k = data.num_classes;
    let mut model = encoder.clone();
    model.attach_classifier(k, seed);
    let mut opt = AdamW::new(loop_cfg.optimizer.clone(), model.params().into_iter().map(|p| p.2))?;
    let decay = model.decay_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.train_x.rows()).collect();

    let mut best = (model.clone(), accuracy(&predict(&model, &data.val_x)?, &data.val_y));
    let mut stop = EarlyStopping::new(Direction::Maximize, loop_cfg.patience);
    let mut epochs_run = 0;
    for epoch in 0..loop_cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in batches(&order, loop_cfg.batch_size) {
            let y: Vec<usize> = batch.iter().map(|&r| data.train_y[r]).collect();
            let mut g = Graph::new();
            let b = model.bind(&mut g, true);
            let x = g.leaf(data.train_x.select_rows(batch));
            let h = model.forward_encoder(&mut g, &b, x, Mode::Train)?;
            let logits = model.forward_classifier(&mut g, &b, h)?;
            let loss = softmax_ce(&mut g, logits, &y, k)?;
            let value = g.value(loss).item().f64();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("fine-tuning loss is {value} in epoch {epoch}")));
            }
            g.backward(loss)?;
            let grads = model.grads(&g, &b)?;
            opt.step(model.params_mut(), &grads, &decay)?;
        }
        epochs_run += 1;
        let acc = accuracy(&predict(&model, &data.val_x)?, &data.val_y);
        match stop.observe(epoch, acc) {
            Verdict::Improved => best = (model.clone(), acc),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let (model, val_accuracy) = best;
    Ok(DownstreamOutcome {
        val_accuracy,
        test_accuracy: accuracy(&predict(&model, &data.test_x)?, &data.test_y),
        best_epoch: stop.best_epoch(),
        epochs_run,
    })
}
