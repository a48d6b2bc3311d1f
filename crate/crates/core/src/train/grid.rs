use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One grid point: axis name to value.
pub type Hyper = BTreeMap<String, f64>;

/// Hyperparameter value lists. Absent axes are not searched and keep their
/// configured value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Downstream learning rates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretext_lr: Option<Vec<f64>>,
    /// Student corruption probability.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_student: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_size: Option<Vec<f64>>,
    /// InfoNCE temperature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<Vec<f64>>,
}

/// Tie-break order: smaller values win, compared axis by axis.
pub const TIE_ORDER: [&str; 6] = [
    "lr",
    "pretext_lr",
    "queue_size",
    "tau_student",
    "temperature",
    "corruption",
];

impl GridSpec {
    /// The full search space for one algorithm.
    pub fn full(algorithm: super::Algorithm) -> Self {
        use super::Algorithm as A;
        let mut g = GridSpec {
            lr: Some(vec![1e-5, 1e-4, 1e-3, 1e-2]),
            ..Default::default()
        };
        if algorithm != A::Supervised {
            g.pretext_lr = Some(vec![1e-5, 1e-4, 1e-3]);
            g.corruption = Some(vec![0.3, 0.4, 0.5]);
        }
        match algorithm {
            A::Qmatch => {
                g.tau_student = Some(vec![0.05, 0.1, 0.2]);
                g.queue_size = Some(vec![512.0, 2048.0]);
            }
            A::Infonce => g.temperature = Some(vec![0.04, 0.10, 0.15, 0.20, 0.30]),
            _ => {}
        }
        g
    }

    pub fn axes(&self) -> Vec<(&'static str, &[f64])> {
        [
            ("lr", &self.lr),
            ("pretext_lr", &self.pretext_lr),
            ("corruption", &self.corruption),
            ("tau_student", &self.tau_student),
            ("queue_size", &self.queue_size),
            ("temperature", &self.temperature),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.as_deref().map(|v| (n, v)))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in self.axes() {
            if values.is_empty() {
                return Err(Error::Config(format!("grid axis {name} is empty")));
            }
            if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Config(format!("grid axis {name} has invalid value {v}")));
            }
        }
        if let Some(q) = &self.queue_size {
            if let Some(v) = q.iter().find(|v| v.fract() != 0.0 || **v < 1.0) {
                return Err(Error::Config(format!("queue_size {v} is not a positive integer")));
            }
        }
        Ok(())
    }
}

/// Cartesian product of the present axes. An empty spec has one point with
/// no overrides.
pub fn grid_points(spec: &GridSpec) -> Result<Vec<Hyper>> {
    spec.validate()?;
    let mut points = vec![Hyper::new()];
    for (name, values) in spec.axes() {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.insert(name.to_string(), v);
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

/// Validation summary of one grid point over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub hyper: Hyper,
    pub mean_val_accuracy: f64,
    pub mean_test_accuracy: f64,
    /// Any seed failed; such points are never selected.
    pub failed: bool,
}

fn tie_key(h: &Hyper) -> Vec<f64> {
    TIE_ORDER.iter().map(|k| h.get(*k).copied().unwrap_or(0.0)).collect()
}

/// Highest mean validation accuracy among non-failed points; ties go to the
/// smaller values in [`TIE_ORDER`]. Independent of input order.
pub fn select_best(points: &[PointSummary]) -> Option<&PointSummary> {
    points
        .iter()
        .filter(|p| !p.failed && p.mean_val_accuracy.is_finite())
        .min_by(|a, b| {
            b.mean_val_accuracy
                .partial_cmp(&a.mean_val_accuracy)
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    tie_key(&a.hyper)
                        .iter()
                        .zip(tie_key(&b.hyper))
                        .map(|(x, y)| x.total_cmp(&y))
                        .find(|o| o.is_ne())
                        .unwrap_or(Ordering::Equal)
                })
        })
}
