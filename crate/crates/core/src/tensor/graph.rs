use super::{check_matmul, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Per-feature statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> BatchStats<T> {
    /// Unbiased variance, used for running statistics.
    pub fn unbiased_var(&self) -> Vec<T> {
        if self.count < 2 {
            return self.var.clone();
        }
        let n = T::of(self.count as f64);
        let corr = n / (n - T::one());
        self.var.iter().map(|&v| v * corr).collect()
    }
}

enum Op<T: Real> {
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Maxout {
        x: Var,
        argmax: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    Softmax {
        x: Var,
        temperature: T,
    },
    CrossEntropy {
        target: Var,
        pred: Var,
        eps: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MaskedLogSumExp {
        x: Var,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
}

/// Reverse-mode tape over dense tensors.
///
/// Nodes are stored in creation order, so the tape is already a topological
/// order and the backward pass is a single reverse sweep. Operations whose
/// inputs carry no gradient are evaluated but not recorded.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    tape: Vec<(Var, Op<T>)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tape: Vec::new(),
        }
    }

    /// Registers a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false)
    }

    /// Registers a trainable input whose gradient is collected by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let out = self.push(value, requires_grad);
        if requires_grad {
            self.tape.push((out, op));
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer, populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Number of recorded operations still awaiting a backward pass.
    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies `x` into a new constant node; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_matmul(av.shape(), bv.shape(), transpose_b)?;
        let (m, k) = (av.rows(), av.cols());
        let n = if transpose_b { bv.rows() } else { bv.cols() };
        let mut out = Tensor::zeros(&[m, n]);
        let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            rsb,
            csb,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        Ok(self.record(out, &[a, b], Op::MatMul { a, b, transpose_b }))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if !xv.is_matrix() || bv.numel() != xv.cols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} + row {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.record(out, &[x, bias], Op::AddRow { x, bias }))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(out, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(out, &[a, b], Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::of(factor);
        let out = self.value(x).map(|v| v * factor);
        self.record(out, &[x], Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.record(out, &[x], Op::Relu { x })
    }

    /// Training-mode batch normalization over the rows of `x`, followed by a
    /// per-feature affine map. Returns the batch statistics for running-stat
    /// bookkeeping.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        self.check_norm_params(x, scale, shift)?;
        let xv = self.value(x);
        let (b, c) = (xv.rows(), xv.cols());
        let bt = T::of(b as f64);
        let mut mean = vec![T::zero(); c];
        for row in xv.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / bt);
        let mut var = vec![T::zero(); c];
        for row in xv.data().chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s = *s / bt);
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count: b,
        };
        let out = self.normalize_affine(x, scale, shift, &mean, inv_std, true);
        Ok((out, stats))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_fixed(&mut self, x: Var, scale: Var, shift: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        self.check_norm_params(x, scale, shift)?;
        if mean.len() != self.value(x).cols() || var.len() != mean.len() {
            return Err(Error::Shape("batch_norm_fixed: statistics length".into()));
        }
        let eps = T::of(eps);
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.normalize_affine(x, scale, shift, mean, inv_std, false))
    }

    fn check_norm_params(&self, x: Var, scale: Var, shift: Var) -> Result<()> {
        let c = self.value(x).cols();
        if !self.value(x).is_matrix() || self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(Error::Shape(format!(
                "batch_norm: input {:?}, scale {:?}, shift {:?}",
                self.value(x).shape(),
                self.value(scale).shape(),
                self.value(shift).shape()
            )));
        }
        Ok(())
    }

    fn normalize_affine(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let (sv, tv) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * sv[j] + tv[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.record(
            out,
            &[x, scale, shift],
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Maxout over consecutive groups of `k` columns. Ties resolve to the
    /// lowest index in the group.
    pub fn maxout(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if k == 0 || !xv.is_matrix() || !xv.cols().is_multiple_of(k) {
            return Err(Error::Shape(format!(
                "maxout group {k} does not divide width of {:?}",
                xv.shape()
            )));
        }
        let (b, c) = (xv.rows(), xv.cols());
        let groups = c / k;
        let mut out = Vec::with_capacity(b * groups);
        let mut argmax = Vec::with_capacity(b * groups);
        for (r, row) in xv.data().chunks(c).enumerate() {
            for g in 0..groups {
                let mut best = g * k;
                for j in g * k + 1..(g + 1) * k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(r * c + best);
            }
        }
        let out = Tensor::new(vec![b, groups], out)?;
        Ok(self.record(out, &[x], Op::Maxout { x, argmax }))
    }

    /// `row / max(‖row‖, eps)` for each row.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let eps = T::of(eps);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = n.max(eps);
            row.iter_mut().for_each(|v| *v = *v / d);
            norms.push(n);
        }
        self.record(out, &[x], Op::L2Normalize { x, norms, eps })
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let t = T::of(temperature);
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row, t);
        }
        Ok(self.record(out, &[x], Op::Softmax { x, temperature: t }))
    }

    /// Mean over rows of `-Σ target·log(pred + eps)`.
    pub fn cross_entropy_rows(&mut self, target: Var, pred: Var, eps: f64) -> Result<Var> {
        self.binary_same_shape(target, pred, "cross_entropy_rows")?;
        if cfg!(debug_assertions) {
            check_row_stochastic(self.value(target), "target")?;
            check_row_stochastic(self.value(pred), "pred")?;
        }
        let (tv, pv) = (self.value(target), self.value(pred));
        let e = T::of(eps);
        let total: T = tv
            .data()
            .iter()
            .zip(pv.data())
            .map(|(&t, &p)| if t == T::zero() { T::zero() } else { -t * (p + e).ln() })
            .sum();
        let loss = total / T::of(tv.rows() as f64);
        Ok(self.record(
            Tensor::scalar(loss),
            &[target, pred],
            Op::CrossEntropy { target, pred, eps: e },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / T::of(xv.numel() as f64);
        self.record(Tensor::scalar(s), &[x], Op::Mean { x })
    }

    /// Per-row log-sum-exp over the entries selected by `mask`. Output has
    /// shape `[rows]`.
    pub fn masked_logsumexp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() || !xv.is_matrix() {
            return Err(Error::Shape(format!(
                "masked_logsumexp: mask of {} for {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.rows());
        let mut probs = vec![T::zero(); xv.numel()];
        for (r, row) in xv.data().chunks(c).enumerate() {
            let m = &mask[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::Param(format!("masked_logsumexp: row {r} selects nothing")));
            }
            let mut z = T::zero();
            for j in 0..c {
                if m[j] {
                    let e = (row[j] - max).exp();
                    probs[r * c + j] = e;
                    z += e;
                }
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p = *p / z);
            out.push(max + z.ln());
        }
        Ok(self.record(Tensor::vector(out), &[x], Op::MaskedLogSumExp { x, probs }))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "bce_with_logits: {:?} vs {:?}",
                lv.shape(),
                targets.shape()
            )));
        }
        let total: T = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::of(lv.numel() as f64);
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Stacks the rows of `b` under the rows of `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.cols() {
            return Err(Error::Shape(format!(
                "concat_rows: {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::new(vec![av.rows() + bv.rows(), av.cols()], data)?;
        Ok(self.record(out, &[a, b], Op::ConcatRows { a, b }))
    }

    /// Populates gradient buffers of every `requires_grad` node reachable from
    /// `loss` (unreachable ones get zeros) and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = node.requires_grad.then(|| Tensor::zeros(node.value.shape()));
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g.data_mut()[0] = T::one();
        }
        let tape = std::mem::take(&mut self.tape);
        for (out, op) in tape.into_iter().rev() {
            if out.0 > loss.0 {
                continue;
            }
            let g = match self.nodes[out.0].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let contributions = self.op_backward(&op, &self.nodes[out.0].value, &g);
            self.nodes[out.0].grad = Some(g);
            for (v, delta) in contributions {
                if let Some(buf) = self.nodes[v.0].grad.as_mut() {
                    for (d, x) in buf.data_mut().iter_mut().zip(delta) {
                        *d += x;
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_backward(&self, op: &Op<T>, y: &Tensor<T>, g: &Tensor<T>) -> Vec<(Var, Vec<T>)> {
        let gd = g.data();
        let mut out = Vec::new();
        match *op {
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if self.wants(a) {
                    // da = g @ bᵀ (or g @ b when b was transposed)
                    let mut da = vec![T::zero(); m * k];
                    let (rsb, csb) = if transpose_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        n as isize,
                        1,
                        bv.data(),
                        rsb,
                        csb,
                        T::zero(),
                        &mut da,
                        k as isize,
                        1,
                    );
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    if transpose_b {
                        // d(bᵀ) = aᵀ g  =>  db = gᵀ a, shape n×k
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            gd,
                            1,
                            n as isize,
                            av.data(),
                            k as isize,
                            1,
                            T::zero(),
                            &mut db,
                            k as isize,
                            1,
                        );
                    } else {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.data(),
                            1,
                            k as isize,
                            gd,
                            n as isize,
                            1,
                            T::zero(),
                            &mut db,
                            n as isize,
                            1,
                        );
                    }
                    out.push((b, db));
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(x) {
                    out.push((x, gd.to_vec()));
                }
                if self.wants(bias) {
                    out.push((bias, column_sums(gd, g.cols())));
                }
            }
            Op::Add { a, b } => {
                if self.wants(a) {
                    out.push((a, gd.to_vec()));
                }
                if self.wants(b) {
                    out.push((b, gd.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if self.wants(a) {
                    out.push((a, gd.to_vec()));
                }
                if self.wants(b) {
                    out.push((b, gd.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    out.push((a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                }
                if self.wants(b) {
                    out.push((b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale { x, factor } => {
                out.push((x, gd.iter().map(|&v| v * factor).collect()));
            }
            Op::Relu { x } => {
                let xv = self.value(x).data();
                out.push((
                    x,
                    gd.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                ref xhat,
                ref inv_std,
                batch_stats,
            } => {
                let c = g.cols();
                let b = g.rows();
                let sv = self.value(scale).data();
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dscale[j] += grow[j] * hrow[j];
                        dshift[j] += grow[j];
                    }
                }
                if self.wants(x) {
                    let mut dx = vec![T::zero(); b * c];
                    if batch_stats {
                        // dx = inv/B * (B*dxhat - Σdxhat - xhat*Σ(dxhat*xhat))
                        let bt = T::of(b as f64);
                        for (i, (grow, hrow)) in gd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            for j in 0..c {
                                let sum_dxhat = dshift[j] * sv[j];
                                let sum_dxhat_xhat = dscale[j] * sv[j];
                                let dxhat = grow[j] * sv[j];
                                dx[i * c + j] = inv_std[j] / bt * (bt * dxhat - sum_dxhat - hrow[j] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for (i, grow) in gd.chunks(c).enumerate() {
                            for j in 0..c {
                                dx[i * c + j] = grow[j] * sv[j] * inv_std[j];
                            }
                        }
                    }
                    out.push((x, dx));
                }
                if self.wants(scale) {
                    out.push((scale, dscale));
                }
                if self.wants(shift) {
                    out.push((shift, dshift));
                }
            }
            Op::Maxout { x, ref argmax } => {
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (&i, &gv) in argmax.iter().zip(gd) {
                    dx[i] += gv;
                }
                out.push((x, dx));
            }
            Op::L2Normalize { x, ref norms, eps } => {
                let c = g.cols();
                let xv = self.value(x).data();
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let dr = &mut dx[r * c..(r + 1) * c];
                    if n > eps {
                        // y = x/n; dx = (g - y (y·g)) / n
                        let yg: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            dr[j] = (gr[j] - xr[j] / n * yg) / n;
                        }
                    } else {
                        for j in 0..c {
                            dr[j] = gr[j] / eps;
                        }
                    }
                }
                out.push((x, dx));
            }
            Op::Softmax { x, temperature } => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(c).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&p, &g)| p * (g - dot) / temperature));
                }
                out.push((x, dx));
            }
            Op::CrossEntropy { target, pred, eps } => {
                let (tv, pv) = (self.value(target), self.value(pred));
                let scale = gd[0] / T::of(tv.rows() as f64);
                if self.wants(pred) {
                    out.push((
                        pred,
                        tv.data()
                            .iter()
                            .zip(pv.data())
                            .map(|(&t, &p)| -scale * t / (p + eps))
                            .collect(),
                    ));
                }
                if self.wants(target) {
                    out.push((target, pv.data().iter().map(|&p| -scale * (p + eps).ln()).collect()));
                }
            }
            Op::Sum { x } => {
                out.push((x, vec![gd[0]; self.value(x).numel()]));
            }
            Op::Mean { x } => {
                let n = self.value(x).numel();
                out.push((x, vec![gd[0] / T::of(n as f64); n]));
            }
            Op::MaskedLogSumExp { x, ref probs } => {
                let c = self.value(x).cols();
                let dx = probs.iter().enumerate().map(|(i, &p)| p * gd[i / c]).collect();
                out.push((x, dx));
            }
            Op::BceWithLogits { logits, ref targets } => {
                let lv = self.value(logits).data();
                let scale = gd[0] / T::of(lv.len() as f64);
                out.push((
                    logits,
                    lv.iter()
                        .zip(targets)
                        .map(|(&l, &t)| (sigmoid(l) - t) * scale)
                        .collect(),
                ));
            }
            Op::ConcatRows { a, b } => {
                let split = self.value(a).numel();
                if self.wants(a) {
                    out.push((a, gd[..split].to_vec()));
                }
                if self.wants(b) {
                    out.push((b, gd[split..].to_vec()));
                }
            }
        }
        out
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums<T: Real>(data: &[T], cols: usize) -> Vec<T> {
    let mut s = vec![T::zero(); cols];
    for row in data.chunks(cols) {
        for (a, &v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], temperature: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / z);
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_row_stochastic<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    // the normalizer was accumulated in T, so rounding grows with the width
    let tol = (2.0 * t.cols() as f64 * T::epsilon().f64()).max(1e-6);
    for (r, row) in t.data().chunks(t.cols()).enumerate() {
        let s: f64 = row.iter().map(|v| v.f64()).sum();
        if (s - 1.0).abs() > tol || row.iter().any(|&v| v < T::zero()) {
            return Err(Error::Validation(format!(
                "{what} row {r} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_projection() {
        let mut g = Graph::<f64>::new();
        let i = g.leaf(Tensor::eye(2));
        let m = g.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.leaf(t(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let v = g.leaf(t(&[vec![5.0], vec![7.0]]));
        let y = g.matmul(p, v).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] @ [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let a = t(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]);
        let b = t(&[vec![0.5, 1.0, -2.0], vec![3.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]]);
        let mut g = Graph::<f64>::new();
        let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let y = g.matmul_t(av, bv).unwrap();
        let expected = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(g.value(y), &expected);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[vec![3.0, 4.0], vec![0.0, 0.0]]));
        let y = g.l2_normalize_rows(x, 1e-12);
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[vec![2.5, 2.5, 2.5]]));
        let y = g.softmax_rows(x, 0.37).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.leaf(t(&[vec![50.0, -950.0]]));
        let y = g.softmax_rows(x, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.leaf(t(&[vec![0.3, 0.1, -0.2]]));
        let sharp = g.softmax_rows(x, 0.04).unwrap();
        let soft = g.softmax_rows(x, 1.0).unwrap();
        let max = |v: &Tensor<f64>| v.data().iter().copied().fold(f64::MIN, f64::max);
        assert!(max(g.value(sharp)) > max(g.value(soft)));
        assert!(g.softmax_rows(x, 0.0).is_err());
        assert!(g.softmax_rows(x, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let one_hot = g.leaf(t(&[vec![0.0, 1.0, 0.0]]));
        let ce = g.cross_entropy_rows(one_hot, one_hot, 1e-12).unwrap();
        assert!(g.value(ce).item().abs() < 1e-11);

        let p = [0.2, 0.5, 0.3];
        let pv = g.leaf(t(&[p.to_vec()]));
        let ce = g.cross_entropy_rows(pv, pv, 1e-12).unwrap();
        let entropy: f64 = p.iter().map(|q| -q * q.ln()).sum();
        assert!((g.value(ce).item() - entropy).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_non_stochastic_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[vec![0.7, 0.7]]));
        let b = g.leaf(t(&[vec![0.5, 0.5]]));
        assert!(matches!(g.cross_entropy_rows(a, b, 1e-12), Err(Error::Validation(_))));
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_requires_scalar_and_clears_tape() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(w, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
        let s = g.sum(y);
        assert_eq!(g.tape_len(), 2);
        g.backward(s).unwrap();
        assert_eq!(g.tape_len(), 0);
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::vector(vec![1.0]));
        let b = g.param(Tensor::vector(vec![3.0, 4.0]));
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let d = g.detach(w);
        let p = g.mul(w, d).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        // d(w·stop(w))/dw = stop(w)
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn maxout_picks_group_max_and_lowest_tie() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[vec![1.0, -2.0, 3.0, 0.0, 5.0, 5.0, 1.0, 5.0]]));
        let y = g.maxout(x, 4).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(g.maxout(x, 3).is_err());
    }

    #[test]
    fn masked_logsumexp_matches_direct() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[vec![1.0, 2.0, 3.0]]));
        let y = g.masked_logsumexp(x, &[true, false, true]).unwrap();
        let expected = (1f64.exp() + 3f64.exp()).ln();
        assert!((g.value(y).item() - expected).abs() < 1e-14);
        assert!(g.masked_logsumexp(x, &[false, false, false]).is_err());
    }

    #[test]
    fn wide_f32_softmax_passes_distribution_check() {
        let n = 4096;
        let x = Tensor::<f32>::new(vec![2, n], (0..2 * n).map(|i| ((i * 37 % 101) as f32) / 7.0).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let p = g.softmax_rows(xv, 0.04).unwrap();
        let yv = g.leaf(x);
        let q = g.softmax_rows(yv, 0.1).unwrap();
        assert!(g.cross_entropy_rows(p, q, 1e-12).is_ok());
    }
}
