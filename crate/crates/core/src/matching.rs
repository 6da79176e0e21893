//! Cross-modality cluster matching by maximum centroid similarity, plus
//! homogeneity and adjusted Rand index for judging the unified labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::MemoryBank;
use crate::error::{Error, Result};
use crate::linalg::{argmax, cosine_sim_matrix, Matrix};

/// `Row`: every cluster of the first bank takes the label of its best match
/// in the second. `Col`: the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Row,
    Col,
}

impl MatchMode {
    pub fn name(self) -> &'static str {
        match self {
            MatchMode::Row => "row",
            MatchMode::Col => "col",
        }
    }
}

/// Even epochs match row-wise, odd epochs column-wise.
pub fn alternate_mode(epoch: usize) -> MatchMode {
    if epoch % 2 == 0 {
        MatchMode::Row
    } else {
        MatchMode::Col
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMatch {
    pub mode: MatchMode,
    /// Row mode: for each row of the first bank, the matched row of the
    /// second. Col mode: for each row of the second bank, the matched row of
    /// the first.
    pub assignment: Vec<usize>,
}

impl ClusterMatch {
    /// Every source cluster landed on the same target although there was
    /// more than one source.
    pub fn collapsed(&self) -> bool {
        self.assignment.len() > 1 && self.assignment.windows(2).all(|w| w[0] == w[1])
    }
}

/// Plain argmax over the similarity matrix; many-to-one allowed, ties to the
/// smallest index.
pub fn match_similarity(s: &Matrix, mode: MatchMode) -> Result<ClusterMatch> {
    if s.rows() == 0 || s.cols() == 0 {
        return Err(Error::EmptyBank);
    }
    let assignment = match mode {
        MatchMode::Row => s
            .iter_rows()
            .map(|r| argmax(r).expect("non-empty row"))
            .collect(),
        MatchMode::Col => (0..s.cols())
            .map(|j| {
                let col: Vec<f64> = (0..s.rows()).map(|i| s.get(i, j)).collect();
                argmax(&col).expect("non-empty column")
            })
            .collect(),
    };
    Ok(ClusterMatch { mode, assignment })
}

pub fn imca_match(mem_n: &MemoryBank, mem_m: &MemoryBank, mode: MatchMode) -> Result<ClusterMatch> {
    if mem_n.is_empty() || mem_m.is_empty() {
        return Err(Error::EmptyBank);
    }
    let s = cosine_sim_matrix(mem_n.centroids(), mem_m.centroids())?;
    match_similarity(&s, mode)
}

/// Per-sample unified labels for the two modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedLabels {
    pub mode: MatchMode,
    pub first: Vec<Option<usize>>,
    pub second: Vec<Option<usize>>,
}

/// Applies a match between two dense banks (labels `0..K`) to the
/// per-sample cluster labels of each modality. The propagating side keeps
/// its own ids; the receiving side adopts the matched ids.
pub fn unify(
    m: &ClusterMatch,
    first: &[Option<usize>],
    second: &[Option<usize>],
) -> UnifiedLabels {
    let (first, second) = match m.mode {
        MatchMode::Row => (
            first.iter().map(|l| l.map(|k| m.assignment[k])).collect(),
            second.to_vec(),
        ),
        MatchMode::Col => (
            first.to_vec(),
            second.iter().map(|l| l.map(|k| m.assignment[k])).collect(),
        ),
    };
    UnifiedLabels {
        mode: m.mode,
        first,
        second,
    }
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    let mut h = 0.0;
    for c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.ln();
        }
    }
    h
}

fn paired(pred: &[Option<usize>], truth: &[usize]) -> Result<Vec<(usize, usize)>> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(truth)
        .filter_map(|(p, t)| p.map(|p| (p, *t)))
        .collect())
}

/// `1 - H(truth | pred) / H(truth)` over non-noise samples; 1 when the truth
/// has a single class.
pub fn homogeneity(pred: &[Option<usize>], truth: &[usize]) -> Result<f64> {
    let pairs = paired(pred, truth)?;
    let n = pairs.len() as f64;
    if pairs.is_empty() {
        return Ok(1.0);
    }
    let mut class = BTreeMap::<usize, u64>::new();
    let mut cluster = BTreeMap::<usize, u64>::new();
    let mut joint = BTreeMap::<(usize, usize), u64>::new();
    for &(p, t) in &pairs {
        *class.entry(t).or_default() += 1;
        *cluster.entry(p).or_default() += 1;
        *joint.entry((p, t)).or_default() += 1;
    }
    let h_c = entropy(class.values().copied(), n);
    if h_c == 0.0 {
        return Ok(1.0);
    }
    let mut h_ck = 0.0;
    for (&(p, _), &c) in &joint {
        let nk = cluster[&p] as f64;
        h_ck -= c as f64 / n * (c as f64 / nk).ln();
    }
    Ok((1.0 - h_ck / h_c).clamp(0.0, 1.0))
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table over non-noise samples.
/// Returns 1 in the degenerate cases where both partitions are trivial.
pub fn adjusted_rand(pred: &[Option<usize>], truth: &[usize]) -> Result<f64> {
    let pairs = paired(pred, truth)?;
    let n = pairs.len() as u64;
    let mut rows = BTreeMap::<usize, u64>::new();
    let mut cols = BTreeMap::<usize, u64>::new();
    let mut joint = BTreeMap::<(usize, usize), u64>::new();
    for &(p, t) in &pairs {
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
        *joint.entry((p, t)).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
