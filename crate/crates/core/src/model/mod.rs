//! MLP encoder with batch norm and maxout, projector, classifier head, EMA
//! shadow copy and checkpoint files.
//!
//! Layout for widths `[w1, .., wL]`:
//!
//! ```text
//! x ─ Linear(d′→w1) ─ BN ─ ReLU ─ … ─ Linear(w[L-2]→w[L-1]) ─ BN ─ ReLU
//!   ─ Linear(w[L-1]→wL) ─ Maxout(k)                   → h  (d = wL / k)
//! h ─ projector                                        → z  (projector_dim)
//! h ─ classifier                                       → logits
//! ```
//!
//! Hidden linear layers carry no bias: the batch-norm shift that follows
//! makes it redundant and its gradient is identically zero.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Real, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, NamedArray};

/// Projector architecture on top of the encoder output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProjectionHead {
    /// Single affine map to `projector_dim`.
    Linear,
    /// Affine → ReLU → affine, hidden width given.
    Mlp { hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layer_widths: Vec<usize>,
    pub maxout_k: usize,
    pub projector_dim: usize,
    /// Width of the preprocessed input; 0 in a run config means "infer".
    #[serde(default)]
    pub input_dim: usize,
    /// Weight kept on the old running statistic:
    /// `running = momentum·running + (1 − momentum)·batch`.
    pub batchnorm_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub batchnorm_eps: f64,
    #[serde(default = "default_head")]
    pub projection_head: ProjectionHead,
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_head() -> ProjectionHead {
    ProjectionHead::Linear
}

impl EncoderConfig {
    /// Full-size architecture: 2048-2048-4096-4096-8192, 4-way maxout,
    /// 128-d linear projector.
    pub fn full(input_dim: usize) -> Self {
        Self {
            layer_widths: vec![2048, 2048, 4096, 4096, 8192],
            maxout_k: 4,
            projector_dim: 128,
            input_dim,
            batchnorm_momentum: 0.9,
            batchnorm_eps: default_bn_eps(),
            projection_head: ProjectionHead::Linear,
        }
    }

    /// Reduced widths 256-256-512-512-1024 for CPU runs.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            layer_widths: vec![256, 256, 512, 512, 1024],
            ..Self::full(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let last = *self
            .layer_widths
            .last()
            .ok_or_else(|| Error::Config("layer_widths is empty".into()))?;
        if self.layer_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.maxout_k == 0 || last % self.maxout_k != 0 {
            return Err(Error::Config(format!(
                "maxout_k {} does not divide last width {last}",
                self.maxout_k
            )));
        }
        if self.projector_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("projector_dim and input_dim must be positive".into()));
        }
        if !(self.batchnorm_momentum > 0.0 && self.batchnorm_momentum < 1.0) {
            return Err(Error::Config(format!(
                "batchnorm_momentum {} outside (0, 1)",
                self.batchnorm_momentum
            )));
        }
        if !(self.batchnorm_eps > 0.0) {
            return Err(Error::Config("batchnorm_eps must be positive".into()));
        }
        if let ProjectionHead::Mlp { hidden: 0 } = self.projection_head {
            return Err(Error::Config("projection head hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Encoder output width `d = last_width / maxout_k`.
    pub fn output_dim(&self) -> usize {
        self.layer_widths.last().copied().unwrap_or(0) / self.maxout_k.max(1)
    }
}

/// Role of a parameter tensor; only `Weight` receives weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine layer, weight stored `[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    fn he(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: he_normal(rng, fan_in, fan_out),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    /// He-initialized layer with its own seed stream.
    pub fn seeded(fan_in: usize, fan_out: usize, seed: u64) -> Self {
        Self::he(&mut ChaCha8Rng::seed_from_u64(seed), fan_in, fan_out)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> [Var; 2] {
        [
            g.input(self.weight.clone(), trainable),
            g.input(self.bias.clone(), trainable),
        ]
    }

    pub fn forward(g: &mut Graph<T>, bound: [Var; 2], x: Var) -> Result<Var> {
        let y = g.matmul(x, bound[0])?;
        g.add_row(y, bound[1])
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer<T: Real> {
    pub weight: Tensor<T>,
    pub bn_scale: Tensor<T>,
    pub bn_shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Trainable state of encoder, projector and optional classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f64> {
    config: EncoderConfig,
    pub hidden: Vec<HiddenLayer<T>>,
    pub output: Dense<T>,
    pub projector: Vec<Dense<T>>,
    pub classifier: Option<Dense<T>>,
}

/// Graph handles for every parameter, in [`ModelParams::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

fn he_normal<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
}

/// He-normal weights, zero biases, unit batch-norm scale, running stats (0, 1).
/// Deterministic per seed; the same seed yields the same values in f32 and
/// f64 up to rounding.
pub fn init_params<T: Real>(config: &EncoderConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = &config.layer_widths;
    let mut hidden = Vec::with_capacity(widths.len() - 1);
    let mut fan_in = config.input_dim;
    for &w in &widths[..widths.len() - 1] {
        hidden.push(HiddenLayer {
            weight: he_normal(&mut rng, fan_in, w),
            bn_scale: Tensor::ones(&[w]),
            bn_shift: Tensor::zeros(&[w]),
            running_mean: Tensor::zeros(&[w]),
            running_var: Tensor::ones(&[w]),
        });
        fan_in = w;
    }
    let output = Dense::he(&mut rng, fan_in, *widths.last().expect("validated"));
    let d = config.output_dim();
    let projector = match config.projection_head {
        ProjectionHead::Linear => vec![Dense::he(&mut rng, d, config.projector_dim)],
        ProjectionHead::Mlp { hidden: h } => {
            vec![Dense::he(&mut rng, d, h), Dense::he(&mut rng, h, config.projector_dim)]
        }
    };
    Ok(ModelParams {
        config: config.clone(),
        hidden,
        output,
        projector,
        classifier: None,
    })
}

impl<T: Real> ModelParams<T> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Attaches a freshly initialized `d × num_classes` classifier head.
    pub fn attach_classifier(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_51F1);
        self.classifier = Some(Dense::he(&mut rng, self.output_dim(), num_classes));
    }

    /// All trainable tensors with stable names.
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden.{i}.weight"), ParamKind::Weight, &l.weight));
            out.push((format!("hidden.{i}.bn_scale"), ParamKind::Norm, &l.bn_scale));
            out.push((format!("hidden.{i}.bn_shift"), ParamKind::Norm, &l.bn_shift));
        }
        out.push(("output.weight".into(), ParamKind::Weight, &self.output.weight));
        out.push(("output.bias".into(), ParamKind::Bias, &self.output.bias));
        for (j, p) in self.projector.iter().enumerate() {
            out.push((format!("projector.{j}.weight"), ParamKind::Weight, &p.weight));
            out.push((format!("projector.{j}.bias"), ParamKind::Bias, &p.bias));
        }
        if let Some(c) = &self.classifier {
            out.push(("classifier.weight".into(), ParamKind::Weight, &c.weight));
            out.push(("classifier.bias".into(), ParamKind::Bias, &c.bias));
        }
        out
    }

    /// Mutable trainable tensors, same order as [`ModelParams::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bn_scale);
            out.push(&mut l.bn_shift);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        for p in &mut self.projector {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        if let Some(c) = &mut self.classifier {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    /// Batch-norm running statistics (not trained by gradient).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden.{i}.running_mean"), &l.running_mean));
            out.push((format!("hidden.{i}.running_var"), &l.running_var));
        }
        out
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.params()
            .iter()
            .map(|(_, kind, _)| *kind == ParamKind::Weight)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, _, t)| t.all_finite()) && self.buffers().iter().all(|(_, t)| t.all_finite())
    }

    /// True when encoder and projector shapes match one-to-one (the
    /// classifier head is not compared).
    pub fn congruent(&self, other: &Self) -> bool {
        let n = self.classifier_index();
        let a = self.params();
        let b = other.params();
        n == other.classifier_index() && a[..n].iter().zip(&b[..n]).all(|(x, y)| x.2.shape() == y.2.shape())
    }

    /// Registers every parameter on the graph.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params()
                .into_iter()
                .map(|(_, _, t)| g.input(t.clone(), trainable))
                .collect(),
        }
    }

    /// Collects gradients of a bound parameter set after `backward`.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Result<Vec<Tensor<T>>> {
        bound
            .vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .ok_or_else(|| Error::Shape("parameter was bound without gradient".into()))
            })
            .collect()
    }

    fn output_index(&self) -> usize {
        3 * self.hidden.len()
    }

    fn projector_index(&self) -> usize {
        self.output_index() + 2
    }

    fn classifier_index(&self) -> usize {
        self.projector_index() + 2 * self.projector.len()
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects [B × {}], got {shape:?}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Encoder forward pass. Training mode normalizes with batch statistics
    /// and updates the running statistics.
    pub fn forward_encoder(&mut self, g: &mut Graph<T>, bound: &Bound, x: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Eval => self.forward_encoder_eval(g, bound, x),
            Mode::Train => {
                self.check_input(g, x)?;
                let eps = self.config.batchnorm_eps;
                let mut h = x;
                let mut stats = Vec::with_capacity(self.hidden.len());
                for i in 0..self.hidden.len() {
                    let v = &bound.vars[3 * i..3 * i + 3];
                    h = g.matmul(h, v[0])?;
                    let (y, s) = g.batch_norm(h, v[1], v[2], eps)?;
                    stats.push(s);
                    h = g.relu(y);
                }
                for (layer, s) in self.hidden.iter_mut().zip(&stats) {
                    update_running(layer, s, self.config.batchnorm_momentum);
                }
                self.output_block(g, bound, h)
            }
        }
    }

    /// Evaluation-mode encoder pass using running statistics; never mutates.
    pub fn forward_encoder_eval(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let eps = self.config.batchnorm_eps;
        let mut h = x;
        for (i, layer) in self.hidden.iter().enumerate() {
            let v = &bound.vars[3 * i..3 * i + 3];
            h = g.matmul(h, v[0])?;
            h = g.batch_norm_fixed(h, v[1], v[2], layer.running_mean.data(), layer.running_var.data(), eps)?;
            h = g.relu(h);
        }
        self.output_block(g, bound, h)
    }

    fn output_block(&self, g: &mut Graph<T>, bound: &Bound, h: Var) -> Result<Var> {
        let o = self.output_index();
        let y = g.matmul(h, bound.vars[o])?;
        let y = g.add_row(y, bound.vars[o + 1])?;
        g.maxout(y, self.config.maxout_k)
    }

    pub fn forward_projector(&self, g: &mut Graph<T>, bound: &Bound, h: Var) -> Result<Var> {
        let d = g.value(h).cols();
        if d != self.projector[0].in_dim() {
            return Err(Error::Shape(format!(
                "projector expects width {}, got {d}",
                self.projector[0].in_dim()
            )));
        }
        let p = self.projector_index();
        let mut z = h;
        for j in 0..self.projector.len() {
            if j > 0 {
                z = g.relu(z);
            }
            z = g.matmul(z, bound.vars[p + 2 * j])?;
            z = g.add_row(z, bound.vars[p + 2 * j + 1])?;
        }
        Ok(z)
    }

    pub fn forward_classifier(&self, g: &mut Graph<T>, bound: &Bound, h: Var) -> Result<Var> {
        if self.classifier.is_none() {
            return Err(Error::Config("no classifier head attached".into()));
        }
        let c = self.classifier_index();
        let y = g.matmul(h, bound.vars[c])?;
        g.add_row(y, bound.vars[c + 1])
    }

    /// Eval-mode encoder outputs for a whole matrix, computed in chunks.
    pub fn embed(&self, x: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let d = self.output_dim();
        let n = x.rows();
        let mut out = Vec::with_capacity(n * d);
        let chunk = chunk.max(1);
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let xv = g.leaf(x.select_rows(&idx));
            let h = self.forward_encoder_eval(&mut g, &bound, xv)?;
            out.extend_from_slice(g.value(h).data());
        }
        Tensor::new(vec![n, d], out)
    }

    /// Named arrays for checkpointing (parameters, then buffers).
    pub fn to_arrays(&self, prefix: &str) -> Vec<NamedArray<T>> {
        let mut out: Vec<NamedArray<T>> = self
            .params()
            .into_iter()
            .map(|(n, _, t)| NamedArray::new(format!("{prefix}{n}"), t.clone()))
            .collect();
        out.extend(
            self.buffers()
                .into_iter()
                .map(|(n, t)| NamedArray::new(format!("{prefix}{n}"), t.clone())),
        );
        out
    }

    /// Rebuilds parameters for `config` from arrays written by
    /// [`ModelParams::to_arrays`].
    pub fn from_arrays(
        config: &EncoderConfig,
        arrays: &BTreeMap<String, Tensor<T>>,
        prefix: &str,
        with_classifier: bool,
    ) -> Result<Self> {
        config.validate()?;
        let fetch = |name: String, shape: &[usize]| -> Result<Tensor<T>> {
            let key = format!("{prefix}{name}");
            let t = arrays
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "array {key} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let widths = &config.layer_widths;
        let mut hidden = Vec::new();
        let mut fan_in = config.input_dim;
        for (i, &w) in widths[..widths.len() - 1].iter().enumerate() {
            hidden.push(HiddenLayer {
                weight: fetch(format!("hidden.{i}.weight"), &[fan_in, w])?,
                bn_scale: fetch(format!("hidden.{i}.bn_scale"), &[w])?,
                bn_shift: fetch(format!("hidden.{i}.bn_shift"), &[w])?,
                running_mean: fetch(format!("hidden.{i}.running_mean"), &[w])?,
                running_var: fetch(format!("hidden.{i}.running_var"), &[w])?,
            });
            fan_in = w;
        }
        let last = *widths.last().expect("validated");
        let output = Dense {
            weight: fetch("output.weight".into(), &[fan_in, last])?,
            bias: fetch("output.bias".into(), &[last])?,
        };
        let d = config.output_dim();
        let dims: Vec<(usize, usize)> = match config.projection_head {
            ProjectionHead::Linear => vec![(d, config.projector_dim)],
            ProjectionHead::Mlp { hidden: h } => vec![(d, h), (h, config.projector_dim)],
        };
        let mut projector = Vec::new();
        for (j, (i, o)) in dims.into_iter().enumerate() {
            projector.push(Dense {
                weight: fetch(format!("projector.{j}.weight"), &[i, o])?,
                bias: fetch(format!("projector.{j}.bias"), &[o])?,
            });
        }
        let classifier = if with_classifier {
            let key = format!("{prefix}classifier.weight");
            let classes = arrays
                .get(&key)
                .map(|t| t.cols())
                .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            Some(Dense {
                weight: fetch("classifier.weight".into(), &[d, classes])?,
                bias: fetch("classifier.bias".into(), &[classes])?,
            })
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            hidden,
            output,
            projector,
            classifier,
        })
    }

    /// Copies all values into a model of another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let dense = |d: &Dense<T>| Dense {
            weight: d.weight.cast(),
            bias: d.bias.cast(),
        };
        ModelParams {
            config: self.config.clone(),
            hidden: self
                .hidden
                .iter()
                .map(|l| HiddenLayer {
                    weight: l.weight.cast(),
                    bn_scale: l.bn_scale.cast(),
                    bn_shift: l.bn_shift.cast(),
                    running_mean: l.running_mean.cast(),
                    running_var: l.running_var.cast(),
                })
                .collect(),
            output: dense(&self.output),
            projector: self.projector.iter().map(dense).collect(),
            classifier: self.classifier.as_ref().map(dense),
        }
    }
}

fn update_running<T: Real>(layer: &mut HiddenLayer<T>, stats: &BatchStats<T>, momentum: f64) {
    let m = T::of(momentum);
    let one_m = T::one() - m;
    let unbiased = stats.unbiased_var();
    for (r, &b) in layer.running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = m * *r + one_m * b;
    }
    for (r, &b) in layer.running_var.data_mut().iter_mut().zip(&unbiased) {
        *r = m * *r + one_m * b;
    }
}

/// Exponential moving average of a student model (the teacher).
#[derive(Clone, Debug, PartialEq)]
pub struct EmaParams<T: Real = f64> {
    shadow: ModelParams<T>,
    decay: f64,
}

impl<T: Real> EmaParams<T> {
    /// Starts the shadow as a copy of the student's encoder and projector.
    pub fn new(student: &ModelParams<T>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1)")));
        }
        let mut shadow = student.clone();
        shadow.classifier = None;
        Ok(Self { shadow, decay })
    }

    pub fn from_parts(shadow: ModelParams<T>, decay: f64) -> Result<Self> {
        Self::new(&shadow, decay)
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// `e ← τ·e + (1 − τ)·s` for every parameter; running statistics are
    /// copied from the student.
    pub fn update(&mut self, student: &ModelParams<T>) -> Result<()> {
        if !self.shadow.congruent(student) {
            return Err(Error::Shape("EMA and student parameters are not congruent".into()));
        }
        let tau = T::of(self.decay);
        let one_m = T::one() - tau;
        let src: Vec<&Tensor<T>> = student.params().into_iter().map(|(_, _, t)| t).collect();
        // the shadow has no classifier, so zip stops at the projector
        for (e, s) in self.shadow.params_mut().into_iter().zip(src) {
            for (ev, &sv) in e.data_mut().iter_mut().zip(s.data()) {
                *ev = tau * *ev + one_m * sv;
            }
        }
        for (e, s) in self.shadow.hidden.iter_mut().zip(&student.hidden) {
            e.running_mean = s.running_mean.clone();
            e.running_var = s.running_var.clone();
        }
        Ok(())
    }
}
