use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{FeatureKind, TabularDataset};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// How normalization statistics are accumulated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StatsMode {
    /// Mean and unbiased variance over all fitting rows.
    Exact,
    /// One pass in batches, averaging each batch's mean and unbiased
    /// variance, as a parameter-free input batch-norm layer would see them.
    BatchAverage { batch_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessOptions {
    #[serde(default)]
    pub quantile: bool,
    #[serde(default = "default_quantiles")]
    pub n_quantiles: usize,
    #[serde(default = "default_stats")]
    pub stats: StatsMode,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_quantiles() -> usize {
    1000
}

fn default_stats() -> StatsMode {
    StatsMode::BatchAverage { batch_size: 512 }
}

fn default_eps() -> f64 {
    1e-5
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            quantile: false,
            n_quantiles: default_quantiles(),
            stats: default_stats(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureTransform {
    Numeric {
        mean: f64,
        var: f64,
        /// Reference quantiles for the rank → normal-score map.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        quantiles: Option<Vec<f64>>,
    },
    OneHot {
        cardinality: usize,
    },
}

/// Frozen preprocessing: one-hot for categoricals, optional quantile
/// transform then standardization for numerics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub features: Vec<FeatureTransform>,
    pub eps: f64,
}

/// Quantile clip so the normal score stays finite.
const Q_CLIP: f64 = 1e-7;

fn normal_score(quantiles: &[f64], v: f64) -> f64 {
    let n = quantiles.len();
    let p = if n == 1 {
        0.5
    } else {
        let lo = quantiles.partition_point(|&q| q < v);
        let hi = quantiles.partition_point(|&q| q <= v);
        let pos = if lo < hi {
            // ties: middle of the run of equal reference values
            (lo + hi - 1) as f64 / 2.0
        } else if lo == 0 {
            0.0
        } else if lo == n {
            (n - 1) as f64
        } else {
            let (a, b) = (quantiles[lo - 1], quantiles[lo]);
            (lo - 1) as f64 + (v - a) / (b - a)
        };
        pos / (n - 1) as f64
    };
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    std.inverse_cdf(p.clamp(Q_CLIP, 1.0 - Q_CLIP))
}

fn reference_quantiles(mut col: Vec<f64>, n: usize) -> Vec<f64> {
    col.sort_by(f64::total_cmp);
    let m = col.len();
    let n = n.clamp(1, m);
    if n == 1 {
        return vec![col[m / 2]];
    }
    (0..n)
        .map(|k| {
            let pos = k as f64 * (m - 1) as f64 / (n - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if i + 1 < m {
                col[i] + frac * (col[i + 1] - col[i])
            } else {
                col[i]
            }
        })
        .collect()
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Fits on the given rows of `data` (all rows when `rows` is `None`).
pub fn fit_preprocess(
    data: &TabularDataset,
    rows: Option<&[usize]>,
    options: &PreprocessOptions,
) -> Result<PreprocessState> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..data.len()).collect();
            &all
        }
    };
    if rows.is_empty() {
        return Err(Error::Data("cannot fit preprocessing on zero rows".into()));
    }
    if options.eps <= 0.0 {
        return Err(Error::Config("preprocess eps must be positive".into()));
    }
    let mut features = Vec::with_capacity(data.features.len());
    for (j, f) in data.features.iter().enumerate() {
        match &f.kind {
            FeatureKind::Categorical { categories } => features.push(FeatureTransform::OneHot {
                cardinality: categories.len(),
            }),
            FeatureKind::Numeric => {
                let raw: Vec<f64> = rows.iter().map(|&r| data.x.at(r, j)).collect();
                let quantiles = options
                    .quantile
                    .then(|| reference_quantiles(raw.clone(), options.n_quantiles));
                let col: Vec<f64> = match &quantiles {
                    Some(q) => raw.iter().map(|&v| normal_score(q, v)).collect(),
                    None => raw,
                };
                let (mean, var) = match options.stats {
                    StatsMode::Exact => moments(&col),
                    StatsMode::BatchAverage { batch_size } => {
                        if batch_size == 0 {
                            return Err(Error::Config("stats batch_size must be positive".into()));
                        }
                        let (mut m, mut v, mut k) = (0.0, 0.0, 0.0);
                        for chunk in col.chunks(batch_size) {
                            let (bm, bv) = moments(chunk);
                            m += bm;
                            v += bv;
                            k += 1.0;
                        }
                        (m / k, v / k)
                    }
                };
                features.push(FeatureTransform::Numeric { mean, var, quantiles });
            }
        }
    }
    Ok(PreprocessState {
        features,
        eps: options.eps,
    })
}

impl PreprocessState {
    /// Width of the model input.
    pub fn output_dim(&self) -> usize {
        self.features
            .iter()
            .map(|f| match f {
                FeatureTransform::Numeric { .. } => 1,
                FeatureTransform::OneHot { cardinality } => *cardinality,
            })
            .sum()
    }

    pub fn raw_dim(&self) -> usize {
        self.features.len()
    }

    /// For each model-input column, the raw feature it comes from.
    pub fn column_sources(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.output_dim());
        for (j, f) in self.features.iter().enumerate() {
            let w = match f {
                FeatureTransform::Numeric { .. } => 1,
                FeatureTransform::OneHot { cardinality } => *cardinality,
            };
            out.extend(std::iter::repeat_n(j, w));
        }
        out
    }

    /// Maps raw rows to model inputs.
    pub fn apply<T: Real>(&self, raw: &Tensor<f64>) -> Result<Tensor<T>> {
        if raw.shape().len() != 2 || raw.cols() != self.features.len() {
            return Err(Error::Shape(format!(
                "preprocess fitted on {} raw features, got {:?}",
                self.features.len(),
                raw.shape()
            )));
        }
        let d = self.output_dim();
        let mut out = vec![T::zero(); raw.rows() * d];
        for r in 0..raw.rows() {
            let dst = &mut out[r * d..(r + 1) * d];
            let mut o = 0;
            for (j, f) in self.features.iter().enumerate() {
                let v = raw.at(r, j);
                match f {
                    FeatureTransform::Numeric { mean, var, quantiles } => {
                        // constant columns carry no information and map to 0
                        if *var > 0.0 {
                            let v = quantiles.as_ref().map_or(v, |q| normal_score(q, v));
                            dst[o] = T::of((v - mean) / (var + self.eps).sqrt());
                        }
                        o += 1;
                    }
                    FeatureTransform::OneHot { cardinality } => {
                        let k = v as usize;
                        if v < 0.0 || k >= *cardinality {
                            return Err(Error::Data(format!(
                                "row {r}: category index {v} outside {cardinality}"
                            )));
                        }
                        dst[o + k] = T::one();
                        o += cardinality;
                    }
                }
            }
        }
        Tensor::new(vec![raw.rows(), d], out)
    }

    /// Expands a raw-feature mask to model-input columns.
    pub fn expand_mask<T: Real>(&self, mask: &Tensor<f64>) -> Result<Tensor<T>> {
        if mask.cols() != self.features.len() {
            return Err(Error::Shape("mask width does not match raw features".into()));
        }
        let src = self.column_sources();
        let d = src.len();
        let mut out = Vec::with_capacity(mask.rows() * d);
        for r in 0..mask.rows() {
            out.extend(src.iter().map(|&j| T::of(mask.at(r, j))));
        }
        Tensor::new(vec![mask.rows(), d], out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Feature;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(rows: usize, seed: u64) -> TabularDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        for _ in 0..rows {
            x.push(rng.random_range(-2.0..5.0));
            x.push(3.0);
            x.push(rng.random_range(0..3) as f64);
            x.push(rng.random::<f64>().powi(3) * 100.0);
        }
        let features = vec![
            Feature {
                name: "u".into(),
                kind: FeatureKind::Numeric,
            },
            Feature {
                name: "c".into(),
                kind: FeatureKind::Numeric,
            },
            Feature {
                name: "k".into(),
                kind: FeatureKind::Categorical {
                    categories: vec!["a".into(), "b".into(), "c".into()],
                },
            },
            Feature {
                name: "skew".into(),
                kind: FeatureKind::Numeric,
            },
        ];
        TabularDataset::new("t", features, Tensor::new(vec![rows, 4], x).unwrap(), None, vec![]).unwrap()
    }

    #[test]
    fn constant_column_maps_to_zero_and_one_hot_is_exclusive() {
        let d = dataset(300, 1);
        let st = fit_preprocess(&d, None, &PreprocessOptions::default()).unwrap();
        assert_eq!(st.output_dim(), 6);
        let y: Tensor<f64> = st.apply(&d.x).unwrap();
        for r in 0..d.len() {
            let row = y.row(r);
            assert_eq!(row[1], 0.0);
            assert_eq!(row[2..5].iter().sum::<f64>(), 1.0);
            assert_eq!(row[2..5].iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    #[test]
    fn batch_average_stats_match_exact_within_one_percent() {
        let d = dataset(5000, 2);
        let exact = fit_preprocess(
            &d,
            None,
            &PreprocessOptions {
                stats: StatsMode::Exact,
                ..Default::default()
            },
        )
        .unwrap();
        let avg = fit_preprocess(&d, None, &PreprocessOptions::default()).unwrap();
        // oracle: two-pass statistics computed here
        for j in [0usize, 3] {
            let col: Vec<f64> = (0..d.len()).map(|r| d.x.at(r, j)).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let FeatureTransform::Numeric { mean: em, var: ev, .. } = &exact.features[j] else {
                panic!()
            };
            assert!((em - mean).abs() < 1e-9 && (ev - var).abs() < 1e-9 * var);
            let FeatureTransform::Numeric { mean: am, var: av, .. } = &avg.features[j] else {
                panic!()
            };
            assert!((am - mean).abs() <= 0.01 * mean.abs().max(var.sqrt()), "{am} vs {mean}");
            assert!((av - var).abs() <= 0.01 * var, "{av} vs {var}");
        }
    }

    #[test]
    fn quantile_transform_is_monotone_and_roughly_normal() {
        let d = dataset(4000, 3);
        let st = fit_preprocess(
            &d,
            None,
            &PreprocessOptions {
                quantile: true,
                ..Default::default()
            },
        )
        .unwrap();
        let y: Tensor<f64> = st.apply(&d.x).unwrap();
        let mut pairs: Vec<(f64, f64)> = (0..d.len()).map(|r| (d.x.at(r, 3), y.at(r, 5))).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        let col: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (m, v) = moments(&col);
        assert!(m.abs() < 0.05 && (v - 1.0).abs() < 0.05, "{m} {v}");
    }

    #[test]
    fn apply_is_deterministic_and_checks_width() {
        let d = dataset(50, 4);
        let st = fit_preprocess(&d, Some(&[0, 1, 2, 3, 4]), &PreprocessOptions::default()).unwrap();
        let a: Tensor<f32> = st.apply(&d.x).unwrap();
        let b: Tensor<f32> = st.apply(&d.x).unwrap();
        assert_eq!(a, b);
        assert!(st.apply::<f64>(&Tensor::zeros(&[2, 3])).is_err());
        let mask = Tensor::from_rows(&[vec![0.0, 1.0, 1.0, 0.0]]).unwrap();
        let m: Tensor<f64> = st.expand_mask(&mask).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn state_round_trips_through_json() {
        let d = dataset(40, 5);
        let st = fit_preprocess(
            &d,
            None,
            &PreprocessOptions {
                quantile: true,
                n_quantiles: 7,
                ..Default::default()
            },
        )
        .unwrap();
        let back: PreprocessState = serde_json::from_str(&serde_json::to_string(&st).unwrap()).unwrap();
        assert_eq!(back, st);
    }
}
