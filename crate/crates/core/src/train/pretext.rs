use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::{Algorithm, EarlyStopping, LoopConfig, Verdict};
use crate::augment::{corrupt, CorruptionConfig, Pool};
use crate::baselines::{
    dino_proto_loss, mse_align_loss, simclr_loss, tabnet_recon_loss, vime_pretext_loss, PrototypeBank,
};
use crate::data::{PreprocessState, Splits, TabularDataset};
use crate::distill::{self, EmbeddingQueue, QMatchConfig, QMatchState, StepContext, NORM_EPS};
use crate::error::{Error, Result};
use crate::model::{init_params, Bound, Dense, EmaParams, EncoderConfig, Mode, ModelParams};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VimeConfig {
    pub alpha_mask: f64,
    pub alpha_recon: f64,
}

impl Default for VimeConfig {
    fn default() -> Self {
        Self {
            alpha_mask: 1.0,
            alpha_recon: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DinoConfig {
    pub num_prototypes: usize,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub center_momentum: f64,
    pub use_center: bool,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self {
            num_prototypes: 256,
            tau_student: 0.1,
            tau_teacher: 0.04,
            center_momentum: 0.9,
            use_center: true,
        }
    }
}

/// Everything a pretext objective needs besides the encoder and loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub qmatch: QMatchConfig,
    /// InfoNCE temperature.
    #[serde(default = "infonce_tau")]
    pub temperature: f64,
    #[serde(default)]
    pub dino: DinoConfig,
    #[serde(default)]
    pub vime: VimeConfig,
}

fn infonce_tau() -> f64 {
    0.1
}

impl PretextConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            corruption: CorruptionConfig::default(),
            qmatch: QMatchConfig::default(),
            temperature: infonce_tau(),
            dino: DinoConfig::default(),
            vime: VimeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        match self.algorithm {
            Algorithm::Qmatch => self.qmatch.validate(),
            Algorithm::Infonce if self.temperature <= 0.0 => Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            ))),
            Algorithm::Dino if self.dino.tau_student <= 0.0 || self.dino.tau_teacher <= 0.0 => {
                Err(Error::Config("DINO temperatures must be positive".into()))
            }
            Algorithm::Dino if self.dino.num_prototypes < 2 => {
                Err(Error::Config("DINO needs at least 2 prototypes".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Best-epoch state of a pretext run.
#[derive(Clone, Debug)]
pub struct PretrainOutcome<T: Real> {
    pub algorithm: Algorithm,
    pub student: ModelParams<T>,
    pub ema: Option<EmaParams<T>>,
    pub queue: Option<EmbeddingQueue<T>>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: u64,
    pub history: Vec<EpochLog>,
    /// Set when training hit a non-finite loss; the state is the last good one.
    pub diverged: Option<String>,
}

/// Non-Q-Match objectives share one student, optimizer and optional extras.
#[derive(Clone, Debug)]
struct Other<T: Real> {
    algorithm: Algorithm,
    student: ModelParams<T>,
    opt: AdamW<T>,
    ema: Option<EmaParams<T>>,
    heads: Vec<Dense<T>>,
    bank: Option<PrototypeBank<T>>,
}

#[derive(Clone, Debug)]
enum Engine<T: Real> {
    Qmatch(QMatchState<T>),
    Other(Other<T>),
}

impl<T: Real> Engine<T> {
    fn steps(&self) -> u64 {
        match self {
            Engine::Qmatch(s) => s.opt.steps(),
            Engine::Other(o) => o.opt.steps(),
        }
    }
}

struct Ctx<'a> {
    pool: Pool<'a>,
    prep: &'a PreprocessState,
    cfg: &'a PretextConfig,
}

struct Bindings {
    student: Bound,
    heads: Vec<[Var; 2]>,
    prototypes: Option<Var>,
}

fn encode<T: Real>(params: &mut ModelParams<T>, g: &mut Graph<T>, b: &Bound, x: Var, train: bool) -> Result<Var> {
    let mode = if train { Mode::Train } else { Mode::Eval };
    params.forward_encoder(g, b, x, mode)
}

fn project<T: Real>(params: &mut ModelParams<T>, g: &mut Graph<T>, b: &Bound, x: Var, train: bool) -> Result<Var> {
    let h = encode(params, g, b, x, train)?;
    let z = params.forward_projector(g, b, h)?;
    Ok(g.l2_normalize_rows(z, NORM_EPS))
}

impl<T: Real> Other<T> {
    fn new<R: Rng + ?Sized>(
        algorithm: Algorithm,
        student: ModelParams<T>,
        loop_cfg: &LoopConfig,
        cfg: &PretextConfig,
        prep: &PreprocessState,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = student.output_dim();
        let heads = match algorithm {
            Algorithm::Vime => vec![
                Dense::seeded(d, prep.raw_dim(), seed ^ 0x11),
                Dense::seeded(d, prep.output_dim(), seed ^ 0x12),
            ],
            Algorithm::Tabnet => vec![Dense::seeded(d, prep.output_dim(), seed ^ 0x13)],
            _ => Vec::new(),
        };
        let (ema, bank) = if algorithm == Algorithm::Dino {
            let mut bank = PrototypeBank::new(cfg.dino.num_prototypes, student.config().projector_dim, rng)?;
            bank.center_momentum = cfg.dino.center_momentum;
            (Some(EmaParams::new(&student, cfg.qmatch.tau_ema)?), Some(bank))
        } else {
            (None, None)
        };
        let mut tensors: Vec<&Tensor<T>> = student.params().into_iter().map(|p| p.2).collect();
        for h in &heads {
            tensors.push(&h.weight);
            tensors.push(&h.bias);
        }
        if let Some(b) = &bank {
            tensors.push(&b.prototypes);
        }
        let opt = AdamW::new(loop_cfg.optimizer.clone(), tensors)?;
        Ok(Self {
            algorithm,
            student,
            opt,
            ema,
            heads,
            bank,
        })
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bindings {
        Bindings {
            student: self.student.bind(g, trainable),
            heads: self.heads.iter().map(|h| h.bind(g, trainable)).collect(),
            prototypes: self.bank.as_ref().map(|b| g.input(b.prototypes.clone(), trainable)),
        }
    }

    /// Builds the loss on `g`. Returns the teacher logits for DINO's center.
    fn loss<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        b: &Bindings,
        x: &Tensor<f64>,
        ctx: &Ctx<'_>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, Option<Tensor<T>>)> {
        let c = &ctx.cfg.corruption;
        let view = |rng: &mut R| corrupt(x, Some(ctx.pool), c.p_student, c.mode, c.donor, rng);
        match self.algorithm {
            Algorithm::Infonce | Algorithm::MseAlign => {
                let v1 = view(rng)?;
                let v2 = view(rng)?;
                let x1 = g.leaf(ctx.prep.apply(&v1.x)?);
                let x2 = g.leaf(ctx.prep.apply(&v2.x)?);
                let z1 = project(&mut self.student, g, &b.student, x1, train)?;
                let z2 = project(&mut self.student, g, &b.student, x2, train)?;
                if self.algorithm == Algorithm::Infonce {
                    Ok((simclr_loss(g, z1, z2, ctx.cfg.temperature)?, None))
                } else {
                    let a = mse_align_loss(g, z1, z2)?;
                    let bb = mse_align_loss(g, z2, z1)?;
                    let s = g.add(a, bb)?;
                    Ok((g.scale(s, 0.5), None))
                }
            }
            Algorithm::Dino => {
                let vs = view(rng)?;
                let vt = view(rng)?;
                let teacher = self.ema.as_ref().expect("DINO keeps an EMA teacher").params();
                let tb = teacher.bind(g, false);
                let xt = g.leaf(ctx.prep.apply(&vt.x)?);
                let ht = teacher.forward_encoder_eval(g, &tb, xt)?;
                let zt = teacher.forward_projector(g, &tb, ht)?;
                let zt = g.l2_normalize_rows(zt, NORM_EPS);
                let xs = g.leaf(ctx.prep.apply(&vs.x)?);
                let zs = project(&mut self.student, g, &b.student, xs, train)?;
                let bank = self.bank.as_ref().expect("DINO keeps prototypes");
                let center = ctx.cfg.dino.use_center.then_some(&bank.center);
                let d = &ctx.cfg.dino;
                let (l, logits) = dino_proto_loss(
                    g,
                    zs,
                    zt,
                    b.prototypes.expect("bound prototypes"),
                    center,
                    d.tau_student,
                    d.tau_teacher,
                )?;
                Ok((l, Some(logits)))
            }
            Algorithm::Vime | Algorithm::Tabnet => {
                let v = view(rng)?;
                let xin = g.leaf(ctx.prep.apply(&v.x)?);
                let target: Tensor<T> = ctx.prep.apply(x)?;
                let h = encode(&mut self.student, g, &b.student, xin, train)?;
                if self.algorithm == Algorithm::Vime {
                    let mask_logits = Dense::forward(g, b.heads[0], h)?;
                    let recon = Dense::forward(g, b.heads[1], h)?;
                    let vc = &ctx.cfg.vime;
                    let mask: Tensor<T> = v.mask.cast();
                    let l = vime_pretext_loss(g, mask_logits, recon, &mask, &target, vc.alpha_mask, vc.alpha_recon)?;
                    Ok((l, None))
                } else {
                    let recon = Dense::forward(g, b.heads[0], h)?;
                    let mask = ctx.prep.expand_mask(&v.mask)?;
                    Ok((tabnet_recon_loss(g, recon, &target, &mask)?, None))
                }
            }
            Algorithm::Qmatch | Algorithm::Supervised => unreachable!("handled elsewhere"),
        }
    }

    fn step<R: Rng + ?Sized>(&mut self, x: &Tensor<f64>, ctx: &Ctx<'_>, rng: &mut R) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, true);
        let (loss, logits) = self.loss(&mut g, &b, x, ctx, true, rng)?;
        let value = g.value(loss).item().f64();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("{} loss is {value}", self.algorithm)));
        }
        g.backward(loss)?;
        let mut grads = self.student.grads(&g, &b.student)?;
        let mut decay = self.student.decay_mask();
        for hb in &b.heads {
            for &v in hb {
                grads.push(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())));
            }
            decay.extend([true, false]);
        }
        if let Some(p) = b.prototypes {
            grads.push(g.grad(p).cloned().expect("prototype grad"));
            decay.push(true);
        }
        let mut params = self.student.params_mut();
        for h in self.heads.iter_mut() {
            params.push(&mut h.weight);
            params.push(&mut h.bias);
        }
        if let Some(bank) = self.bank.as_mut() {
            params.push(&mut bank.prototypes);
        }
        self.opt.step(params, &grads, &decay)?;
        if let Some(ema) = self.ema.as_mut() {
            ema.update(&self.student)?;
        }
        if let (Some(bank), Some(l)) = (self.bank.as_mut(), logits) {
            bank.update_center(&l);
        }
        Ok(value)
    }

    fn eval_loss<R: Rng + ?Sized>(&self, x: &Tensor<f64>, ctx: &Ctx<'_>, rng: &mut R) -> Result<f64> {
        // eval-mode forwards do not mutate; the clone satisfies the signature
        let mut me = self.clone();
        let mut g = Graph::new();
        let b = me.bind(&mut g, false);
        let (loss, _) = me.loss(&mut g, &b, x, ctx, false, rng)?;
        Ok(g.value(loss).item().f64())
    }
}

fn batches(order: &[usize], size: usize, drop_last: bool) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if drop_last && out.len() > 1 && out.last().is_some_and(|b| b.len() < size) {
        out.pop();
    }
    out
}

/// Trains the encoder on the pretext task with early stopping on the
/// pretext-validation loss (training loss when there is no validation
/// split). Returns the best-epoch state. The last incomplete batch is dropped
/// unless it is the only one.
pub fn pretrain<T: Real>(
    data: &TabularDataset,
    splits: &Splits,
    prep: &PreprocessState,
    encoder: &EncoderConfig,
    cfg: &PretextConfig,
    loop_cfg: &LoopConfig,
    seed: u64,
) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    loop_cfg.validate()?;
    encoder.validate()?;
    if cfg.algorithm == Algorithm::Supervised {
        return Err(Error::Config("the supervised baseline has no pretext task".into()));
    }
    if encoder.input_dim != prep.output_dim() {
        return Err(Error::Config(format!(
            "encoder input_dim {} does not match preprocessed width {}",
            encoder.input_dim,
            prep.output_dim()
        )));
    }
    if splits.pretext_train.is_empty() {
        return Err(Error::Data("pretext-train split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student: ModelParams<T> = init_params(encoder, seed)?;
    let mut engine = match cfg.algorithm {
        Algorithm::Qmatch => {
            let tensors = student.params().into_iter().map(|p| p.2).collect::<Vec<_>>();
            let opt = AdamW::new(loop_cfg.optimizer.clone(), tensors)?;
            Engine::Qmatch(QMatchState::new(student, opt, &cfg.qmatch, &mut rng)?)
        }
        a => Engine::Other(Other::new(a, student, loop_cfg, cfg, prep, seed, &mut rng)?),
    };
    let ctx = Ctx {
        pool: Pool::new(&data.x, &splits.pretext_train),
        prep,
        cfg,
    };
    let step_ctx = StepContext {
        pool: Some(ctx.pool),
        prep,
        corruption: &cfg.corruption,
        qmatch: &cfg.qmatch,
        diagnostics: false,
    };

    let mut order = splits.pretext_train.clone();
    let mut stop = EarlyStopping::new(super::Direction::Minimize, loop_cfg.patience);
    let mut best = engine.clone();
    let mut history = Vec::new();
    let mut diverged = None;
    let mut epochs_run = 0;
    'epochs: for epoch in 0..loop_cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut rows) = (0.0, 0usize);
        for batch in batches(&order, loop_cfg.batch_size, true) {
            let x = data.x.select_rows(batch);
            let r = match &mut engine {
                Engine::Qmatch(s) => {
                    distill::training_step(s, &x, &step_ctx, &mut rng).map(|o| o.loss.unwrap_or(f64::NAN))
                }
                Engine::Other(o) => o.step(&x, &ctx, &mut rng),
            };
            match r {
                Ok(l) if l.is_nan() => {}
                Ok(l) => {
                    total += l * batch.len() as f64;
                    rows += batch.len();
                }
                Err(Error::Diverged(msg)) => {
                    log::warn!("{} diverged in epoch {epoch}: {msg}", cfg.algorithm);
                    diverged = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        epochs_run += 1;
        let train_loss = if rows > 0 { total / rows as f64 } else { f64::INFINITY };
        let val_loss = if splits.pretext_val.is_empty() {
            train_loss
        } else {
            // same corruption draws every epoch so the curve is comparable
            let mut vrng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A11_DA7E);
            let (mut vt, mut vn) = (0.0, 0usize);
            for batch in batches(&splits.pretext_val, loop_cfg.batch_size, false) {
                let x = data.x.select_rows(batch);
                let l = match &engine {
                    Engine::Qmatch(s) => distill::evaluate_loss(s, &x, &step_ctx, &mut vrng)?,
                    Engine::Other(o) => o.eval_loss(&x, &ctx, &mut vrng)?,
                };
                vt += l * batch.len() as f64;
                vn += batch.len();
            }
            vt / vn as f64
        };
        log::debug!(
            "{} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}",
            cfg.algorithm
        );
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if !val_loss.is_finite() {
            diverged = Some(format!("validation loss is {val_loss} in epoch {epoch}"));
            break;
        }
        match stop.observe(epoch, val_loss) {
            Verdict::Improved => best = engine.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let steps = best.steps();
    let (student, ema, queue) = match best {
        Engine::Qmatch(s) => (s.student, Some(s.ema), Some(s.queue)),
        Engine::Other(o) => (o.student, o.ema, None),
    };
    Ok(PretrainOutcome {
        algorithm: cfg.algorithm,
        student,
        ema,
        queue,
        best_epoch: stop.best_epoch(),
        epochs_run,
        steps,
        history,
        diverged,
    })
}
