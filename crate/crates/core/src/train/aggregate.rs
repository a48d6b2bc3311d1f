use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::TrialResult;
use crate::error::{Error, Result};

/// Mean and sample standard deviation (n − 1); a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Rank 1 for the highest mean; tied means share the average of their ranks.
pub fn rank_by_mean(means: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]));
    let mut ranks = vec![0.0; means.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && means[order[j + 1]] == means[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One decimal, halves rounded up: 1.25 prints as 1.3.
pub fn format_rank(rank: f64) -> String {
    // the nudge absorbs binary representation error of values like 1.25
    format!("{:.1}", (rank * 10.0 + 1e-9).round() / 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Algorithms × datasets table of test accuracies with per-dataset ranks and
/// the average rank per algorithm. Ranks only cover datasets where every
/// algorithm has a cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub algorithms: Vec<String>,
    pub datasets: Vec<String>,
    /// `cells[algorithm][dataset]`.
    pub cells: BTreeMap<String, BTreeMap<String, CellStats>>,
    pub ranks: BTreeMap<String, BTreeMap<String, f64>>,
    pub average_rank: BTreeMap<String, f64>,
}

/// Groups successful trials by (algorithm, dataset) and ranks by mean test
/// accuracy. Failed trials are ignored.
pub fn aggregate(results: &[TrialResult]) -> Result<RankTable> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.ok()) {
        groups
            .entry((r.algorithm.clone(), r.dataset.clone()))
            .or_default()
            .push(r.test_accuracy);
    }
    if groups.is_empty() {
        return Err(Error::Data("no successful results to aggregate".into()));
    }
    let algorithms: Vec<String> = groups
        .keys()
        .map(|k| k.0.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let datasets: Vec<String> = groups
        .keys()
        .map(|k| k.1.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut cells: BTreeMap<String, BTreeMap<String, CellStats>> = BTreeMap::new();
    for ((a, d), v) in &groups {
        let (mean, std) = mean_std(v);
        cells
            .entry(a.clone())
            .or_default()
            .insert(d.clone(), CellStats { mean, std, n: v.len() });
    }
    let mut ranks: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for d in &datasets {
        let means: Option<Vec<f64>> = algorithms.iter().map(|a| cells[a].get(d).map(|c| c.mean)).collect();
        let Some(means) = means else {
            log::warn!("dataset {d} lacks results for some algorithms; left out of the ranking");
            continue;
        };
        for (a, r) in algorithms.iter().zip(rank_by_mean(&means)) {
            ranks.entry(a.clone()).or_default().insert(d.clone(), r);
        }
    }
    let average_rank = ranks
        .iter()
        .map(|(a, per)| (a.clone(), per.values().sum::<f64>() / per.len() as f64))
        .collect();
    Ok(RankTable {
        algorithms,
        datasets,
        cells,
        ranks,
        average_rank,
    })
}

impl RankTable {
    /// Fixed-width text table, one row per algorithm, `mean ± std` per
    /// dataset and the average rank last.
    pub fn to_text(&self) -> String {
        let width = self.algorithms.iter().map(|a| a.len()).max().unwrap_or(0).max(9);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "algorithm");
        for d in &self.datasets {
            let _ = write!(out, "  {d:>15}");
        }
        let _ = writeln!(out, "  {:>5}", "rank");
        for a in &self.algorithms {
            let _ = write!(out, "{a:<width$}");
            for d in &self.datasets {
                let cell = self.cells[a]
                    .get(d)
                    .map(|c| format!("{:.2} ± {:.2}", c.mean, c.std))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(out, "  {cell:>15}");
            }
            let rank = self
                .average_rank
                .get(a)
                .map(|&r| format_rank(r))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "  {rank:>5}");
        }
        out
    }
}
