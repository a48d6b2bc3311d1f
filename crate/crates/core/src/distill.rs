//! Queue-based student/teacher distribution matching.
//!
//! Student and teacher embeddings are compared through their similarity
//! distributions over a FIFO queue of past teacher embeddings:
//! `p_t = softmax(z_t·Qᵀ/τ_t)`, `p_s = softmax(z_s·Qᵀ/τ_s)`, and the loss is
//! the batch mean of `H(p_t, p_s)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, CorruptionConfig, Pool};
use crate::data::PreprocessState;
use crate::error::{Error, Result};
use crate::model::{EmaParams, Mode, ModelParams};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::train::optim::AdamW;

/// Guard in the row normalization; rows shorter than this are left at zero.
pub const NORM_EPS: f64 = 1e-12;
/// Added inside the log of the cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueInit {
    /// Random unit rows, so the loss is defined from the first step.
    #[default]
    Random,
    /// Start empty; steps only fill the queue until it holds a row.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QMatchConfig {
    pub tau_student: f64,
    #[serde(default = "tau_teacher")]
    pub tau_teacher: f64,
    #[serde(default = "tau_ema")]
    pub tau_ema: f64,
    pub queue_capacity: usize,
    #[serde(default)]
    pub queue_init: QueueInit,
}

fn tau_teacher() -> f64 {
    0.04
}

fn tau_ema() -> f64 {
    0.9
}

impl Default for QMatchConfig {
    fn default() -> Self {
        Self {
            tau_student: 0.1,
            tau_teacher: tau_teacher(),
            tau_ema: tau_ema(),
            queue_capacity: 512,
            queue_init: QueueInit::Random,
        }
    }
}

impl QMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_student > 0.0 && self.tau_teacher > 0.0) {
            return Err(Error::Config(format!(
                "temperatures must be positive (student {}, teacher {})",
                self.tau_student, self.tau_teacher
            )));
        }
        if !(0.0..1.0).contains(&self.tau_ema) {
            return Err(Error::Config(format!("tau_ema {} outside [0, 1)", self.tau_ema)));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO of unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingQueue<T: Real = f64> {
    storage: Tensor<T>,
    cursor: usize,
    filled: usize,
}

impl<T: Real> EmbeddingQueue<T> {
    /// Full queue of normalized Gaussian rows.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Self::check_dims(capacity, dim)?;
        let mut data = Vec::with_capacity(capacity * dim);
        for _ in 0..capacity {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            data.extend(row.iter().map(|v| T::of(v / norm)));
        }
        Ok(Self {
            storage: Tensor::new(vec![capacity, dim], data)?,
            cursor: 0,
            filled: capacity,
        })
    }

    pub fn empty(capacity: usize, dim: usize) -> Result<Self> {
        Self::check_dims(capacity, dim)?;
        Ok(Self {
            storage: Tensor::zeros(&[capacity, dim]),
            cursor: 0,
            filled: 0,
        })
    }

    pub fn new<R: Rng + ?Sized>(capacity: usize, dim: usize, init: QueueInit, rng: &mut R) -> Result<Self> {
        match init {
            QueueInit::Random => Self::random(capacity, dim, rng),
            QueueInit::Empty => Self::empty(capacity, dim),
        }
    }

    /// Rebuilds a queue from checkpointed parts.
    pub fn from_parts(storage: Tensor<T>, cursor: usize, filled: usize) -> Result<Self> {
        if storage.shape().len() != 2 {
            return Err(Error::Shape("queue storage must be a matrix".into()));
        }
        let m = storage.rows();
        Self::check_dims(m, storage.cols())?;
        if cursor >= m || filled > m || (filled < m && cursor != filled) {
            return Err(Error::Checkpoint(format!(
                "queue cursor {cursor} / fill {filled} inconsistent with capacity {m}"
            )));
        }
        Ok(Self {
            storage,
            cursor,
            filled,
        })
    }

    fn check_dims(capacity: usize, dim: usize) -> Result<()> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Param(format!(
                "queue needs capacity ≥ 1 and dim ≥ 1, got {capacity}×{dim}"
            )));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.storage.rows()
    }

    pub fn dim(&self) -> usize {
        self.storage.cols()
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Raw ring storage (all `capacity` rows, including unfilled ones).
    pub fn storage(&self) -> &Tensor<T> {
        &self.storage
    }

    /// Filled rows in storage order; this is the support the loss uses.
    pub fn active(&self) -> Tensor<T> {
        if self.is_full() {
            self.storage.clone()
        } else {
            self.storage.select_rows(&(0..self.filled).collect::<Vec<_>>())
        }
    }

    /// Filled rows from oldest to newest.
    pub fn ordered(&self) -> Tensor<T> {
        let m = self.capacity();
        let idx: Vec<usize> = if self.is_full() {
            (self.cursor..m).chain(0..self.cursor).collect()
        } else {
            (0..self.filled).collect()
        };
        self.storage.select_rows(&idx)
    }

    /// Overwrites the `B` oldest rows with `batch`.
    pub fn push(&mut self, batch: &Tensor<T>) -> Result<()> {
        let (b, m) = (batch.rows(), self.capacity());
        if batch.shape().len() != 2 || batch.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "queue holds rows of width {}, got {:?}",
                self.dim(),
                batch.shape()
            )));
        }
        if b > m {
            return Err(Error::Param(format!("batch of {b} exceeds queue capacity {m}")));
        }
        if cfg!(debug_assertions) {
            for r in 0..b {
                let n = batch.row(r).iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-5 {
                    return Err(Error::Validation(format!("queue row {r} has norm {n}")));
                }
            }
        }
        for r in 0..b {
            let slot = (self.cursor + r) % m;
            self.storage.row_mut(slot).copy_from_slice(batch.row(r));
        }
        self.cursor = (self.cursor + b) % m;
        self.filled = (self.filled + b).min(m);
        Ok(())
    }

    /// Mean cosine similarity over distinct pairs of filled rows. Values near
    /// 1 mean the embeddings have collapsed onto one direction.
    pub fn mean_pairwise_cosine(&self) -> f64 {
        let q = self.active();
        let n = q.rows();
        if n < 2 {
            return 1.0;
        }
        let mut total = vec![0.0f64; q.cols()];
        let mut self_dots = 0.0;
        for r in 0..n {
            for (t, v) in total.iter_mut().zip(q.row(r)) {
                *t += v.f64();
            }
            self_dots += q.row(r).iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        }
        let sum_sq: f64 = total.iter().map(|t| t * t).sum();
        (sum_sq - self_dots) / (n * (n - 1)) as f64
    }
}

/// Q-Match loss on normalized embeddings. The teacher side is detached here,
/// so gradients reach only `z_student`; the queue enters as a constant.
pub fn qmatch_loss<T: Real>(
    g: &mut Graph<T>,
    z_student: Var,
    z_teacher: Var,
    queue: &Tensor<T>,
    tau_student: f64,
    tau_teacher: f64,
) -> Result<Var> {
    let (s, t) = (g.value(z_student).shape().to_vec(), g.value(z_teacher).shape().to_vec());
    if s != t || s.len() != 2 || s[1] != queue.cols() {
        return Err(Error::Shape(format!(
            "student {s:?}, teacher {t:?} and queue {:?} disagree",
            queue.shape()
        )));
    }
    let zt = g.detach(z_teacher);
    let q = g.leaf(queue.clone());
    let lt = g.matmul_t(zt, q)?;
    let pt = g.softmax_rows(lt, tau_teacher)?;
    let ls = g.matmul_t(z_student, q)?;
    let ps = g.softmax_rows(ls, tau_student)?;
    g.cross_entropy_rows(pt, ps, LOG_EPS)
}

/// Student, EMA teacher, queue and optimizer for one Q-Match run.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatchState<T: Real = f64> {
    pub student: ModelParams<T>,
    pub ema: EmaParams<T>,
    pub queue: EmbeddingQueue<T>,
    pub opt: AdamW<T>,
}

impl<T: Real> QMatchState<T> {
    pub fn new<R: Rng + ?Sized>(
        student: ModelParams<T>,
        opt: AdamW<T>,
        cfg: &QMatchConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let ema = EmaParams::new(&student, cfg.tau_ema)?;
        let dim = student.config().projector_dim;
        let queue = EmbeddingQueue::new(cfg.queue_capacity, dim, cfg.queue_init, rng)?;
        Ok(Self {
            student,
            ema,
            queue,
            opt,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// `None` while an empty-initialized queue has no rows yet.
    pub loss: Option<f64>,
    /// Norm of all teacher-parameter gradients; only measured when the
    /// teacher was bound with gradients for diagnostics.
    pub teacher_grad_norm: Option<f64>,
    pub student_grad_norm: f64,
}

pub struct StepContext<'a> {
    pub pool: Option<Pool<'a>>,
    pub prep: &'a PreprocessState,
    pub corruption: &'a CorruptionConfig,
    pub qmatch: &'a QMatchConfig,
    /// Track gradients on the teacher parameters to verify they stay zero.
    pub diagnostics: bool,
}

fn norm<T: Real>(ts: &[Tensor<T>]) -> f64 {
    ts.iter()
        .flat_map(|t| t.data())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

fn embed_normalized<T: Real>(
    params: &mut ModelParams<T>,
    g: &mut Graph<T>,
    bound: &crate::model::Bound,
    x: Tensor<T>,
) -> Result<Var> {
    let xv = g.leaf(x);
    let h = params.forward_encoder(g, bound, xv, Mode::Train)?;
    let z = params.forward_projector(g, bound, h)?;
    Ok(g.l2_normalize_rows(z, NORM_EPS))
}

/// Pushes a teacher batch; when the batch is larger than the queue only its
/// last `capacity` rows are kept, which is what pushing row by row would leave.
fn push_latest<T: Real>(queue: &mut EmbeddingQueue<T>, batch: &Tensor<T>) -> Result<()> {
    let (b, m) = (batch.rows(), queue.capacity());
    if b <= m {
        queue.push(batch)
    } else {
        queue.push(&batch.select_rows(&(b - m..b).collect::<Vec<_>>()))
    }
}

/// One training step on a batch of raw rows:
/// views, teacher forward (EMA, eval-mode batch norm), student forward
/// (train mode), normalization, stop-gradient, loss against the queue as it
/// was before this step, backward, optimizer step, EMA update, then the
/// normalized teacher batch is pushed.
pub fn training_step<T: Real, R: Rng + ?Sized>(
    state: &mut QMatchState<T>,
    x: &Tensor<f64>,
    ctx: &StepContext<'_>,
    rng: &mut R,
) -> Result<StepOutcome> {
    let (sv, tv) = make_views(x, ctx.pool, ctx.corruption, rng)?;
    let xs: Tensor<T> = ctx.prep.apply(&sv.x)?;
    let xt: Tensor<T> = ctx.prep.apply(&tv.x)?;

    let mut g = Graph::new();
    let teacher = state.ema.params();
    let tb = teacher.bind(&mut g, ctx.diagnostics);
    let xv = g.leaf(xt);
    let h = teacher.forward_encoder_eval(&mut g, &tb, xv)?;
    let z = teacher.forward_projector(&mut g, &tb, h)?;
    let zt = g.l2_normalize_rows(z, NORM_EPS);
    let zt_value = g.value(zt).clone();

    if state.queue.is_empty() {
        push_latest(&mut state.queue, &zt_value)?;
        return Ok(StepOutcome {
            loss: None,
            teacher_grad_norm: None,
            student_grad_norm: 0.0,
        });
    }

    let sb = state.student.bind(&mut g, true);
    let zs = embed_normalized(&mut state.student, &mut g, &sb, xs)?;
    let q = state.queue.active();
    let loss = qmatch_loss(&mut g, zs, zt, &q, ctx.qmatch.tau_student, ctx.qmatch.tau_teacher)?;
    let loss_value = g.value(loss).item().f64();
    if !loss_value.is_finite() {
        return Err(Error::Diverged(format!("Q-Match loss is {loss_value}")));
    }
    g.backward(loss)?;
    let grads = state.student.grads(&g, &sb)?;
    let teacher_grad_norm = if ctx.diagnostics {
        Some(norm(&state.ema.params().grads(&g, &tb)?))
    } else {
        None
    };
    let student_grad_norm = norm(&grads);
    let decay = state.student.decay_mask();
    state.opt.step(state.student.params_mut(), &grads, &decay)?;
    state.ema.update(&state.student)?;
    push_latest(&mut state.queue, &zt_value)?;
    Ok(StepOutcome {
        loss: Some(loss_value),
        teacher_grad_norm,
        student_grad_norm,
    })
}

/// Loss on a batch with both networks in eval mode; changes no state.
pub fn evaluate_loss<T: Real, R: Rng + ?Sized>(
    state: &QMatchState<T>,
    x: &Tensor<f64>,
    ctx: &StepContext<'_>,
    rng: &mut R,
) -> Result<f64> {
    if state.queue.is_empty() {
        return Ok(f64::INFINITY);
    }
    let (sv, tv) = make_views(x, ctx.pool, ctx.corruption, rng)?;
    let mut g: Graph<T> = Graph::new();
    let mut z = Vec::with_capacity(2);
    for (params, view) in [(state.ema.params(), &tv.x), (&state.student, &sv.x)] {
        let b = params.bind(&mut g, false);
        let xv = g.leaf(ctx.prep.apply(view)?);
        let h = params.forward_encoder_eval(&mut g, &b, xv)?;
        let p = params.forward_projector(&mut g, &b, h)?;
        z.push(g.l2_normalize_rows(p, NORM_EPS));
    }
    let q = state.queue.active();
    let loss = qmatch_loss(&mut g, z[1], z[0], &q, ctx.qmatch.tau_student, ctx.qmatch.tau_teacher)?;
    Ok(g.value(loss).item().f64())
}

/// Mean row entropy of `softmax(z·Qᵀ/τ)`, computed without the tape.
pub fn mean_entropy<T: Real>(z: &Tensor<T>, queue: &Tensor<T>, tau: f64) -> Result<f64> {
    let logits = z.matmul(&queue.transpose()?)?;
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.f64() / tau).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        total -= exps
            .iter()
            .map(|e| e / s)
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
    }
    Ok(total / logits.rows() as f64)
}
