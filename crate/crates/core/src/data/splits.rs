use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TabularDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "rows")]
pub enum TestSplit {
    /// The last `n` rows of the file (a published test partition).
    Tail(usize),
    /// `n` rows drawn by the seeded shuffle.
    Random(usize),
}

impl TestSplit {
    pub fn rows(self) -> usize {
        match self {
            TestSplit::Tail(n) | TestSplit::Random(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Unlabeled pool for the pretext task, validation included; `None`
    /// takes every row left after the downstream and test splits.
    pub pretext: Option<usize>,
    #[serde(default = "default_pretext_val")]
    pub pretext_val_fraction: f64,
    /// Labeled pool size; `label_fraction` of it becomes downstream-train.
    pub down_train: usize,
    pub down_val: usize,
    pub test: TestSplit,
    #[serde(default = "one")]
    pub label_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_pretext_val() -> f64 {
    0.05
}

fn one() -> f64 {
    1.0
}

/// Disjoint row-index partitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub spec: SplitSpec,
    pub pretext_train: Vec<usize>,
    pub pretext_val: Vec<usize>,
    pub down_train: Vec<usize>,
    pub down_val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn pretext_len(&self) -> usize {
        self.pretext_train.len() + self.pretext_val.len()
    }

    pub fn parts(&self) -> [(&'static str, &[usize]); 5] {
        [
            ("pretext_train", &self.pretext_train),
            ("pretext_val", &self.pretext_val),
            ("down_train", &self.down_train),
            ("down_val", &self.down_val),
            ("test", &self.test),
        ]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Takes `k` rows from `order` (kept in order), stratified by label: every
/// class present gets at least one row when `k` allows, the rest is split
/// proportionally by largest remainder.
fn stratified_take(order: &[usize], labels: &[usize], k: usize) -> Result<Vec<usize>> {
    if k > order.len() {
        return Err(Error::Config(format!(
            "cannot take {k} labeled rows from {}",
            order.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in order {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let n = order.len() as f64;
    let mut quota: BTreeMap<usize, usize> = by_class.keys().map(|&c| (c, 0)).collect();
    let mut left = k;
    if k >= by_class.len() {
        for q in quota.values_mut() {
            *q = 1;
        }
        left -= by_class.len();
    }
    // proportional share of what is left, floors first
    let mut rema: Vec<(f64, usize)> = Vec::new();
    let mut assigned = 0;
    for (&c, rows) in &by_class {
        let room = rows.len() - quota[&c];
        let share = left as f64 * rows.len() as f64 / n;
        let floor = (share.floor() as usize).min(room);
        *quota.get_mut(&c).expect("class") += floor;
        assigned += floor;
        rema.push((share - floor as f64, c));
    }
    // largest remainder, ties to the smaller class id; then any slack
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut extra = left - assigned;
    while extra > 0 {
        let before = extra;
        for &(_, c) in &rema {
            if extra == 0 {
                break;
            }
            if quota[&c] < by_class[&c].len() {
                *quota.get_mut(&c).expect("class") += 1;
                extra -= 1;
            }
        }
        if extra == before {
            break;
        }
    }
    let chosen: std::collections::HashSet<usize> = by_class
        .iter()
        .flat_map(|(c, rows)| rows[..quota[c]].iter().copied())
        .collect();
    Ok(order.iter().copied().filter(|i| chosen.contains(i)).collect())
}

/// Seeded shuffle, then partition. Deterministic for a given dataset and spec.
pub fn make_splits(data: &TabularDataset, spec: &SplitSpec) -> Result<Splits> {
    let n = data.len();
    let infeasible = |what: String| Error::Config(format!("infeasible split for {}: {what}", data.name));
    if !(0.0..=1.0).contains(&spec.label_fraction) || spec.label_fraction == 0.0 && spec.down_train > 0 {
        return Err(infeasible(format!("label fraction {}", spec.label_fraction)));
    }
    if !(0.0..1.0).contains(&spec.pretext_val_fraction) {
        return Err(infeasible(format!(
            "pretext_val_fraction {}",
            spec.pretext_val_fraction
        )));
    }
    let t = spec.test.rows();
    if t > n {
        return Err(infeasible(format!("test {t} > {n} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (test, mut rest): (Vec<usize>, Vec<usize>) = match spec.test {
        TestSplit::Tail(_) => {
            let mut rest: Vec<usize> = (0..n - t).collect();
            rest.shuffle(&mut rng);
            ((n - t..n).collect(), rest)
        }
        TestSplit::Random(_) => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let rest = all.split_off(t);
            (all, rest)
        }
    };

    let (down_train, down_val) = if spec.down_train + spec.down_val > 0 {
        let labels = data.labels()?;
        let pool = stratified_take(&rest, labels, spec.down_train).map_err(|e| infeasible(e.to_string()))?;
        let k = ((spec.label_fraction * pool.len() as f64).round() as usize)
            .max(1)
            .min(pool.len());
        let down_train = stratified_take(&pool, labels, k)?;
        let used: std::collections::HashSet<usize> = pool.iter().copied().collect();
        rest.retain(|i| !used.contains(i));
        if spec.down_val > rest.len() {
            return Err(infeasible(format!(
                "down_val {} > {} remaining",
                spec.down_val,
                rest.len()
            )));
        }
        let down_val: Vec<usize> = rest.drain(..spec.down_val).collect();
        (down_train, down_val)
    } else {
        (Vec::new(), Vec::new())
    };

    let p = spec.pretext.unwrap_or(rest.len());
    if p > rest.len() {
        return Err(infeasible(format!("pretext {p} > {} remaining", rest.len())));
    }
    let mut pretext_train: Vec<usize> = rest.drain(..p).collect();
    let v = (spec.pretext_val_fraction * p as f64).round() as usize;
    let pretext_val = pretext_train.split_off(p - v);
    if pretext_train.is_empty() && p > 0 {
        return Err(infeasible("empty pretext-train split".into()));
    }
    Ok(Splits {
        spec: spec.clone(),
        pretext_train,
        pretext_val,
        down_train,
        down_val,
        test,
    })
}

/// A named split recipe for a known dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub dataset: &'static str,
    pub split: SplitSpec,
    pub quantile: bool,
}

pub const PRESETS: [&str; 4] = ["adult-1pct", "mnist-1pct", "covtype-1pct", "higgs-1pct"];

fn spec(pretext: usize, down_train: usize, down_val: usize, test: TestSplit) -> SplitSpec {
    SplitSpec {
        pretext: Some(pretext),
        pretext_val_fraction: default_pretext_val(),
        down_train,
        down_val,
        test,
        label_fraction: 1.0,
        seed: 0,
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    let p = match name {
        "adult-1pct" => Preset {
            name: "adult-1pct",
            dataset: "adult",
            split: spec(8170, 86, 1000, TestSplit::Tail(16281)),
            quantile: true,
        },
        "mnist-1pct" => Preset {
            name: "mnist-1pct",
            dataset: "mnist",
            split: spec(57000, 600, 2400, TestSplit::Tail(10000)),
            quantile: false,
        },
        "covtype-1pct" => Preset {
            name: "covtype-1pct",
            dataset: "covtype",
            split: spec(113400, 1134, 1134, TestSplit::Random(429812)),
            quantile: false,
        },
        "higgs-1pct" => Preset {
            name: "higgs-1pct",
            dataset: "higgs",
            split: spec(98000, 980, 980, TestSplit::Random(500000)),
            quantile: false,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?} (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(p)
}
