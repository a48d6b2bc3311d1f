use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::NamedArray;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter tensor,
/// in the order the parameters are passed to [`AdamW::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real = f64> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `decay[i]` selects which tensors receive weight decay.
    /// Gradients are checked for finiteness before anything is modified.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], decay: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params / {} grads / {} decay flags",
                self.m.len(),
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "tensor {i}: moment {:?}, param {:?}, grad {:?}",
                    self.m[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite gradient in tensor {i} {:?} at element {j} (step {})",
                    g.shape(),
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let wd = if decay[i] { c.lr * c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                let g = gj.f64();
                let mn = c.beta1 * mj.f64() + (1.0 - c.beta1) * g;
                let vn = c.beta2 * vj.f64() + (1.0 - c.beta2) * g * g;
                *mj = T::of(mn);
                *vj = T::of(vn);
                let mut x = pj.f64() - c.lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                x -= wd * x;
                *pj = T::of(x);
            }
        }
        Ok(())
    }

    pub fn to_arrays(&self, prefix: &str) -> Vec<NamedArray<T>> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push(NamedArray::new(format!("{prefix}m/{i}"), m.clone()));
            out.push(NamedArray::new(format!("{prefix}v/{i}"), v.clone()));
        }
        out
    }

    /// Restores moments written by [`AdamW::to_arrays`] (prefix already
    /// stripped) on top of a freshly built optimizer.
    pub fn restore(&mut self, arrays: &[NamedArray<T>], steps: u64) -> Result<()> {
        for a in arrays {
            let (kind, idx) = a
                .name
                .split_once('/')
                .and_then(|(k, i)| i.parse::<usize>().ok().map(|i| (k, i)))
                .ok_or_else(|| Error::Checkpoint(format!("bad optimizer array {}", a.name)))?;
            let slot = match kind {
                "m" => self.m.get_mut(idx),
                "v" => self.v.get_mut(idx),
                _ => None,
            }
            .ok_or_else(|| Error::Checkpoint(format!("unexpected optimizer array {}", a.name)))?;
            if slot.shape() != a.tensor.shape() {
                return Err(Error::Checkpoint(format!("optimizer array {} has wrong shape", a.name)));
            }
            *slot = a.tensor.clone();
        }
        self.t = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut w = Tensor::vector(vec![0.5, -2.0, 3.0]);
        let orig = w.clone();
        let mut opt = AdamW::new(AdamConfig::new(0.1, 0.0), [&w]).unwrap();
        for _ in 0..5 {
            opt.step(vec![&mut w], &[Tensor::zeros(&[3])], &[true]).unwrap();
        }
        assert_eq!(w, orig);
    }

    #[test]
    fn descends_on_square() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut opt = AdamW::new(AdamConfig::new(0.1, 0.0), [&w]).unwrap();
        let g = w.map(|v| 2.0 * v);
        opt.step(vec![&mut w], &[g], &[true]).unwrap();
        assert!(w.item() < 1.0);
    }

    /// Hand-written Adam recurrence on f(a, b) = 3a² + 0.5b², with decay
    /// applied to `a` only.
    fn reference_trace(lr: f64, wd: f64, steps: usize) -> [f64; 2] {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut p = [1.0f64, -2.0];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for t in 1..=steps {
            let g = [6.0 * p[0], p[1]];
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                p[i] -= lr * mh / (vh.sqrt() + eps);
                if i == 0 {
                    p[i] *= 1.0 - lr * wd;
                }
            }
        }
        p
    }

    #[test]
    fn matches_hand_trace() {
        for wd in [0.0, 0.1] {
            let mut a = Tensor::vector(vec![1.0]);
            let mut b = Tensor::vector(vec![-2.0]);
            let mut opt = AdamW::new(AdamConfig::new(0.05, wd), [&a, &b]).unwrap();
            for _ in 0..10 {
                let ga = a.map(|v| 6.0 * v);
                let gb = b.clone();
                opt.step(vec![&mut a, &mut b], &[ga, gb], &[true, false]).unwrap();
            }
            let r = reference_trace(0.05, wd, 10);
            assert!((a.item() - r[0]).abs() <= 1e-10, "{} {}", a.item(), r[0]);
            assert!((b.item() - r[1]).abs() <= 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = AdamW::new(AdamConfig::new(0.1, 0.0), [&w]).unwrap();
        let err = opt.step(vec![&mut w], &[Tensor::vector(vec![0.0, f64::NAN])], &[true]);
        assert!(matches!(err, Err(Error::Diverged(_))));
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn moments_round_trip() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = AdamW::new(AdamConfig::new(0.1, 0.0), [&w]).unwrap();
        opt.step(vec![&mut w], &[Tensor::vector(vec![0.3, -0.1])], &[true])
            .unwrap();
        let arrays: Vec<_> = opt
            .to_arrays("adam/")
            .into_iter()
            .map(|a| NamedArray::new(a.name.trim_start_matches("adam/"), a.tensor))
            .collect();
        let mut fresh = AdamW::new(AdamConfig::new(0.1, 0.0), [&w]).unwrap();
        fresh.restore(&arrays, opt.steps()).unwrap();
        assert_eq!(fresh, opt);
    }
}
