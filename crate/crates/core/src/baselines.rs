//! Comparison pretext objectives: InfoNCE, alignment (SimSiam-style), DINO
//! prototypes, VIME and TabNet-style reconstruction. Also the class-collision
//! probability used to reason about in-batch negatives.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Param(format!("temperature must be positive, got {tau}")))
    }
}

/// InfoNCE over explicit positive and negative sets.
///
/// `positives` and `negatives` are row-major `[A × C]` masks saying which
/// candidate rows belong to each anchor's sets. Per anchor the loss is
/// `−log Σ₊ exp(z·z⁺/τ) / (Σ₊ exp(z·z⁺/τ) + Σ₋ exp(z·z⁻/τ))`; the result is
/// the mean over anchors.
pub fn info_nce_loss<T: Real>(
    g: &mut Graph<T>,
    anchors: Var,
    candidates: Var,
    positives: &[bool],
    negatives: &[bool],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let a = g.value(anchors).rows();
    let c = g.value(candidates).rows();
    if positives.len() != a * c || negatives.len() != a * c {
        return Err(Error::Shape(format!("set masks must be {a}×{c}")));
    }
    if let Some(r) = (0..a).find(|&r| !positives[r * c..(r + 1) * c].contains(&true)) {
        return Err(Error::Param(format!("anchor {r} has no positives")));
    }
    let logits = g.matmul_t(anchors, candidates)?;
    let logits = g.scale(logits, 1.0 / tau);
    let both: Vec<bool> = positives.iter().zip(negatives).map(|(&p, &n)| p || n).collect();
    let all = g.masked_logsumexp(logits, &both)?;
    let pos = g.masked_logsumexp(logits, positives)?;
    let per_anchor = g.sub(all, pos)?;
    Ok(g.mean(per_anchor))
}

/// SimCLR pairing: the two views of a sample are positives, every other view
/// in the batch is a negative.
pub fn simclr_loss<T: Real>(g: &mut Graph<T>, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    let b = g.value(z1).rows();
    let z = g.concat_rows(z1, z2)?;
    let n = 2 * b;
    let mut pos = vec![false; n * n];
    let mut neg = vec![false; n * n];
    for i in 0..n {
        let partner = (i + b) % n;
        for j in 0..n {
            if j == partner {
                pos[i * n + j] = true;
            } else if j != i {
                neg[i * n + j] = true;
            }
        }
    }
    info_nce_loss(g, z, z, &pos, &neg, tau)
}

/// Negative mean cosine between rows of `z` and the detached `z_positive`.
pub fn mse_align_loss<T: Real>(g: &mut Graph<T>, z: Var, z_positive: Var) -> Result<Var> {
    let b = g.value(z).rows();
    let zp = g.detach(z_positive);
    let prod = g.mul(z, zp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// Learnable prototypes with a running center of the teacher logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T: Real = f64> {
    pub prototypes: Tensor<T>,
    pub center: Tensor<T>,
    pub center_momentum: f64,
}

impl<T: Real> PrototypeBank<T> {
    pub fn new<R: Rng + ?Sized>(num_prototypes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if num_prototypes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 prototypes, got {num_prototypes}"
            )));
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let data = (0..num_prototypes * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::of(scale * v)
            })
            .collect();
        Ok(Self {
            prototypes: Tensor::new(vec![num_prototypes, dim], data)?,
            center: Tensor::zeros(&[num_prototypes]),
            center_momentum: 0.9,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.rows() == 0
    }

    /// `c ← m·c + (1−m)·mean_rows(teacher_logits)`.
    pub fn update_center(&mut self, teacher_logits: &Tensor<T>) {
        let m = self.center_momentum;
        let n = teacher_logits.rows() as f64;
        for (k, c) in self.center.data_mut().iter_mut().enumerate() {
            let mean = (0..teacher_logits.rows())
                .map(|r| teacher_logits.at(r, k).f64())
                .sum::<f64>()
                / n;
            *c = T::of(m * c.f64() + (1.0 - m) * mean);
        }
    }
}

/// DINO-style loss `H(softmax((z_t·Pᵀ − c)/τ_t), softmax(z_s·Pᵀ/τ_s))`.
///
/// `prototypes` is the bank bound on the graph (trainable); the teacher side
/// uses a constant copy and the detached teacher embedding. Returns the loss
/// and the raw teacher logits for the center update.
pub fn dino_proto_loss<T: Real>(
    g: &mut Graph<T>,
    z_student: Var,
    z_teacher: Var,
    prototypes: Var,
    center: Option<&Tensor<T>>,
    tau_student: f64,
    tau_teacher: f64,
) -> Result<(Var, Tensor<T>)> {
    check_tau(tau_student)?;
    check_tau(tau_teacher)?;
    let zt = g.detach(z_teacher);
    let p_const = g.detach(prototypes);
    let lt = g.matmul_t(zt, p_const)?;
    let raw = g.value(lt).clone();
    let lt = match center {
        Some(c) => {
            let neg = g.leaf(c.map(|v| -v));
            g.add_row(lt, neg)?
        }
        None => lt,
    };
    let pt = g.softmax_rows(lt, tau_teacher)?;
    let ls = g.matmul_t(z_student, prototypes)?;
    let ps = g.softmax_rows(ls, tau_student)?;
    Ok((g.cross_entropy_rows(pt, ps, crate::distill::LOG_EPS)?, raw))
}

/// Mean squared error against a constant target.
pub fn mse<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = g.leaf(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// VIME pretext: `α_mask·BCE(mask_logits, mask) + α_recon·MSE(recon, x)`.
/// Both predictions come from heads on the encoder output; the mask is over
/// raw features, reconstruction over every model-input column.
pub fn vime_pretext_loss<T: Real>(
    g: &mut Graph<T>,
    mask_logits: Var,
    reconstruction: Var,
    mask: &Tensor<T>,
    x_original: &Tensor<T>,
    alpha_mask: f64,
    alpha_recon: f64,
) -> Result<Var> {
    let bce = g.bce_with_logits(mask_logits, mask)?;
    let rec = mse(g, reconstruction, x_original)?;
    let bce = g.scale(bce, alpha_mask);
    let rec = g.scale(rec, alpha_recon);
    g.add(bce, rec)
}

/// Reconstruction error averaged over the corrupted cells only. With nothing
/// corrupted there is nothing to predict and the loss is 0.
pub fn tabnet_recon_loss<T: Real>(
    g: &mut Graph<T>,
    reconstruction: Var,
    x_original: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Var> {
    if g.value(reconstruction).shape() != x_original.shape() || mask.shape() != x_original.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?}, target {:?}, mask {:?}",
            g.value(reconstruction).shape(),
            x_original.shape(),
            mask.shape()
        )));
    }
    let count = mask.sum().f64();
    if count == 0.0 {
        log::warn!("reconstruction mask selects no cells; loss is 0");
        return Ok(g.leaf(Tensor::scalar(T::zero())));
    }
    let t = g.leaf(x_original.clone());
    let m = g.leaf(mask.clone());
    let d = g.sub(reconstruction, t)?;
    let d = g.mul(d, m)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / count))
}

/// Probability that at least one of the `B − 1` in-batch negatives shares the
/// anchor's class, with `N` equally likely classes: `1 − ((N−1)/N)^(B−1)`.
/// A single class always collides.
pub fn collision_probability(num_classes: u64, batch_size: u64) -> f64 {
    assert!(num_classes >= 1 && batch_size >= 1, "N and B must be at least 1");
    if num_classes == 1 {
        return 1.0;
    }
    let n = num_classes as f64;
    -((batch_size - 1) as f64 * (-1.0 / n).ln_1p()).exp_m1()
}
