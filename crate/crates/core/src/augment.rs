//! Feature corruption for the student and teacher views.
//!
//! Corruption acts on raw feature rows (categoricals are category indices),
//! before one-hot encoding and normalization, so a corrupted categorical
//! swaps its whole category.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Replace with the same feature's value from a random pool row.
    Resample,
    /// Replace with 0 (category index 0 for categoricals).
    Zero,
}

/// Where resampled values come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Donor {
    /// A fresh pool row for every corrupted cell.
    #[default]
    PerCell,
    /// One pool row per sample, shared by all its corrupted cells.
    PerRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub mode: CorruptionMode,
    pub p_student: f64,
    pub p_teacher: f64,
    #[serde(default)]
    pub donor: Donor,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            mode: CorruptionMode::Resample,
            p_student: 0.3,
            p_teacher: 0.0,
            donor: Donor::PerCell,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_student", self.p_student), ("p_teacher", self.p_teacher)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Rows of a raw feature matrix that resampled values are drawn from.
#[derive(Clone, Copy, Debug)]
pub struct Pool<'a> {
    pub x: &'a Tensor<f64>,
    pub rows: &'a [usize],
}

impl<'a> Pool<'a> {
    pub fn new(x: &'a Tensor<f64>, rows: &'a [usize]) -> Self {
        Self { x, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// A corrupted batch and the 0/1 mask of cells that were selected.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrupted {
    pub x: Tensor<f64>,
    pub mask: Tensor<f64>,
}

/// Corrupts each cell independently with probability `p`.
///
/// A selected cell keeps its original value only when the donor happens to
/// carry the same value, so the mask marks selection rather than change.
pub fn corrupt<R: Rng + ?Sized>(
    x: &Tensor<f64>,
    pool: Option<Pool<'_>>,
    p: f64,
    mode: CorruptionMode,
    donor: Donor,
    rng: &mut R,
) -> Result<Corrupted> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Param(format!("corruption probability {p} outside [0, 1]")));
    }
    let (b, f) = (x.rows(), x.cols());
    let pool = match (mode, pool) {
        (CorruptionMode::Resample, Some(pool)) if !pool.is_empty() => {
            if pool.x.cols() != f {
                return Err(Error::Shape(format!(
                    "pool has {} features, batch has {f}",
                    pool.x.cols()
                )));
            }
            Some(pool)
        }
        (CorruptionMode::Resample, _) => return Err(Error::Data("resample corruption needs a nonempty pool".into())),
        (CorruptionMode::Zero, _) => None,
    };
    let mut out = x.clone();
    let mut mask = Tensor::zeros(&[b, f]);
    for r in 0..b {
        let row_donor = match (donor, pool) {
            (Donor::PerRow, Some(pool)) => Some(pool.rows[rng.random_range(0..pool.len())]),
            _ => None,
        };
        for c in 0..f {
            // one uniform per cell keeps the stream layout independent of p
            if rng.random::<f64>() >= p {
                continue;
            }
            mask.set(r, c, 1.0);
            let v = match pool {
                None => 0.0,
                Some(pool) => {
                    let src = row_donor.unwrap_or_else(|| pool.rows[rng.random_range(0..pool.len())]);
                    pool.x.at(src, c)
                }
            };
            out.set(r, c, v);
        }
    }
    Ok(Corrupted { x: out, mask })
}

/// Student and teacher views, corrupted independently.
pub fn make_views<R: Rng + ?Sized>(
    x: &Tensor<f64>,
    pool: Option<Pool<'_>>,
    config: &CorruptionConfig,
    rng: &mut R,
) -> Result<(Corrupted, Corrupted)> {
    config.validate()?;
    let student = corrupt(x, pool, config.p_student, config.mode, config.donor, rng)?;
    let teacher = corrupt(x, pool, config.p_teacher, config.mode, config.donor, rng)?;
    Ok((student, teacher))
}
