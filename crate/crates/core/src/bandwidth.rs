//! k-nearest-neighbour bandwidths and automatic choice of `k` per layer.
//!
//! For every candidate `k` the objective is
//!
//! ```text
//! sum_{x in in-distribution eval} p_k(x) - sum_{x' in perturbed eval} p_k(x')
//! ```
//!
//! and the candidate with the largest objective wins (smaller `k` on ties).
//! In-distribution rows that are themselves reference points are scored
//! leave-one-out so their own kernel term does not inflate the objective.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{kernel, DistanceMetric, BANDWIDTH_FLOOR};
use crate::matrix::FeatureMatrix;

/// Strictly increasing list of candidate neighbour counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct KCandidateSet(Vec<usize>);

impl KCandidateSet {
    pub const DEFAULT: [usize; 10] = [10, 20, 50, 100, 200, 300, 350, 400, 450, 500];

    pub fn new(values: Vec<usize>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("candidate set is empty"));
        }
        if values[0] == 0 {
            return Err(Error::invalid("candidate k must be at least 1"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "candidates must be strictly increasing: {values:?}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    /// Candidates usable with `n_reference` reference rows (`k <= N - 1`).
    pub fn pruned(&self, n_reference: usize) -> Vec<usize> {
        self.0
            .iter()
            .copied()
            .filter(|&k| k < n_reference)
            .collect()
    }
}

impl Default for KCandidateSet {
    fn default() -> Self {
        Self(Self::DEFAULT.to_vec())
    }
}

impl TryFrom<Vec<usize>> for KCandidateSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<KCandidateSet> for Vec<usize> {
    fn from(k: KCandidateSet) -> Self {
        k.0
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "bandwidths need at least 2 reference rows, got {n}"
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "k = {k} out of range 1..={} for {n} reference rows",
            n - 1
        )));
    }
    Ok(())
}

/// Distances from each reference row to every other one, each row sorted ascending.
fn sorted_neighbour_distances(reference: &FeatureMatrix, metric: DistanceMetric) -> Vec<Vec<f64>> {
    let n = reference.rows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = reference.row(i);
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| metric.eval(ri, reference.row(j)))
                .collect();
            d.sort_unstable_by(f64::total_cmp);
            d
        })
        .collect()
}

#[inline]
fn floored(d: f64) -> f64 {
    if d > 0.0 {
        d
    } else {
        BANDWIDTH_FLOOR
    }
}

/// `sigma_i` = k-th smallest distance from reference `i` to the others,
/// floored at [`BANDWIDTH_FLOOR`] when that distance is zero.
pub fn knn_bandwidths(
    reference: &FeatureMatrix,
    k: usize,
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    let n = reference.rows();
    check_k(n, k)?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let ri = reference.row(i);
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| metric.eval(ri, reference.row(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            floored(*kth)
        })
        .collect())
}

/// Rows entering the k-selection objective.
#[derive(Debug, Clone, Copy)]
pub struct SelectionData<'a> {
    pub reference: &'a FeatureMatrix,
    pub in_dist: &'a FeatureMatrix,
    /// For each `in_dist` row, its position in `reference` if it is a
    /// reference member. `None` treats every row as a non-member.
    pub in_dist_membership: Option<&'a [Option<usize>]>,
    pub perturbed: &'a FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionReport {
    pub layer_id: String,
    /// Objective value per surviving candidate.
    pub objectives: BTreeMap<usize, f64>,
    pub chosen_k: usize,
}

/// Evaluates the objective for every candidate and picks the best `k`.
pub fn select_k(
    layer_id: &str,
    data: &SelectionData<'_>,
    candidates: &KCandidateSet,
    metric: DistanceMetric,
) -> Result<KSelectionReport> {
    let n = data.reference.rows();
    if n < 2 {
        return Err(Error::invalid("k selection needs at least 2 reference rows"));
    }
    let ks = candidates.pruned(n);
    if ks.is_empty() {
        return Err(Error::invalid(format!(
            "no candidate k is below the reference size {n}"
        )));
    }
    if data.in_dist.rows() == 0 || data.perturbed.rows() == 0 {
        return Err(Error::invalid("k selection needs non-empty evaluation sets"));
    }
    let dim = data.reference.cols();
    for m in [data.in_dist, data.perturbed] {
        if m.cols() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: m.cols(),
            });
        }
    }
    if let Some(members) = data.in_dist_membership {
        if members.len() != data.in_dist.rows() {
            return Err(Error::Dimension {
                expected: data.in_dist.rows(),
                found: members.len(),
            });
        }
        if members.iter().flatten().any(|&i| i >= n) {
            return Err(Error::invalid("membership index outside the reference set"));
        }
        if n < 3 && members.iter().any(Option::is_some) {
            return Err(Error::invalid(
                "leave-one-out scoring of reference members needs at least 3 references",
            ));
        }
    }

    let sorted = sorted_neighbour_distances(data.reference, metric);
    let sigmas: Vec<Vec<f64>> = ks
        .iter()
        .map(|&k| sorted.iter().map(|row| floored(row[k - 1])).collect())
        .collect();

    // Per row: one score per candidate. Summation order matches
    // `LayerKdeModel::score` / `loo_score`, so values are bit-identical.
    let row_scores = |x: &[f32], skip: Option<usize>| -> Vec<f64> {
        let dists: Vec<f64> = data
            .reference
            .iter_rows()
            .map(|r| metric.eval(x, r))
            .collect();
        let denom = if skip.is_some() { n - 1 } else { n } as f64;
        sigmas
            .iter()
            .map(|sig| {
                let mut acc = 0.0;
                for (i, (&d, &s)) in dists.iter().zip(sig).enumerate() {
                    if Some(i) == skip {
                        continue;
                    }
                    acc += kernel(d, s);
                }
                acc / denom
            })
            .collect()
    };

    let in_scores: Vec<Vec<f64>> = (0..data.in_dist.rows())
        .into_par_iter()
        .map(|r| {
            let skip = data.in_dist_membership.and_then(|m| m[r]);
            row_scores(data.in_dist.row(r), skip)
        })
        .collect();
    let pert_scores: Vec<Vec<f64>> = (0..data.perturbed.rows())
        .into_par_iter()
        .map(|r| row_scores(data.perturbed.row(r), None))
        .collect();

    let mut objectives = BTreeMap::new();
    let mut best: Option<(usize, f64)> = None;
    for (c, &k) in ks.iter().enumerate() {
        let in_sum: f64 = in_scores.iter().map(|s| s[c]).sum();
        let pert_sum: f64 = pert_scores.iter().map(|s| s[c]).sum();
        let objective = in_sum - pert_sum;
        objectives.insert(k, objective);
        // strict comparison keeps the smaller k on ties
        if best.is_none_or(|(_, b)| objective > b) {
            best = Some((k, objective));
        }
    }
    Ok(KSelectionReport {
        layer_id: layer_id.to_owned(),
        objectives,
        chosen_k: best.expect("at least one candidate").0,
    })
}
