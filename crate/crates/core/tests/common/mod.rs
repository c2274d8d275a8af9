//! Brute-force reference implementations used as test oracles. Nothing here
//! calls into the library's numeric code paths.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut impl Rng, n: usize, c: usize, scale: f32) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn dist(a: &[f32], b: &[f32], l2: bool) -> f64 {
    if l2 {
        let mut s = 0.0f64;
        for i in 0..a.len() {
            let d = a[i] as f64 - b[i] as f64;
            s += d * d;
        }
        s.sqrt()
    } else {
        let mut s = 0.0f64;
        for i in 0..a.len() {
            s += (a[i] as f64 - b[i] as f64).abs();
        }
        s
    }
}

pub fn gauss(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (2.0 * sigma * sigma)).exp() / (sigma * SQRT_2PI)
}

/// k-th smallest distance to the other rows by fully sorting them.
pub fn sort_bandwidths(rows: &[Vec<f32>], k: usize, l2: bool) -> Vec<f64> {
    (0..rows.len())
        .map(|i| {
            let mut d = Vec::new();
            for j in 0..rows.len() {
                if j != i {
                    d.push(dist(&rows[i], &rows[j], l2));
                }
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if d[k - 1] == 0.0 {
                1e-12
            } else {
                d[k - 1]
            }
        })
        .collect()
}

/// Double loop over references; `skip` drops one term and renormalizes by N-1.
pub fn kde(rows: &[Vec<f32>], sigmas: &[f64], x: &[f32], l2: bool, skip: Option<usize>) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..rows.len() {
        if Some(i) == skip {
            continue;
        }
        total += gauss(dist(x, &rows[i], l2), sigmas[i]);
        count += 1;
    }
    total / count as f64
}

/// Exhaustive argmax of `sum in - sum perturbed` over candidates (k < N),
/// ties to the smaller k. `members[r]` marks in-dist rows that are references.
pub fn brute_select_k(
    reference: &[Vec<f32>],
    in_dist: &[Vec<f32>],
    members: &[Option<usize>],
    perturbed: &[Vec<f32>],
    candidates: &[usize],
    l2: bool,
) -> (usize, Vec<(usize, f64)>) {
    let mut best = (0, f64::NEG_INFINITY);
    let mut all = Vec::new();
    for &k in candidates.iter().filter(|&&k| k < reference.len()) {
        let s = sort_bandwidths(reference, k, l2);
        let a: f64 = in_dist
            .iter()
            .zip(members)
            .map(|(x, m)| kde(reference, &s, x, l2, *m))
            .sum();
        let b: f64 = perturbed.iter().map(|x| kde(reference, &s, x, l2, None)).sum();
        let obj = a - b;
        all.push((k, obj));
        if obj > best.1 {
            best = (k, obj);
        }
    }
    (best.0, all)
}

/// Mean over all (pos, neg) pairs of 1 / 0.5 / 0, in percent.
pub fn pairwise_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    100.0 * s / (pos.len() * neg.len()) as f64
}

/// Candidate thresholds: +inf followed by every distinct score, descending.
pub fn thresholds(pos: &[f64], neg: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = pos.iter().chain(neg).copied().collect();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    let mut out = vec![f64::INFINITY];
    out.extend(t);
    out
}

/// (TPR, FPR) by counting `score >= t` directly.
pub fn confusion(pos: &[f64], neg: &[f64], t: f64) -> (f64, f64) {
    let tp = pos.iter().filter(|&&s| s >= t).count();
    let fp = neg.iter().filter(|&&s| s >= t).count();
    (tp as f64 / pos.len() as f64, fp as f64 / neg.len() as f64)
}

/// Minimum FPR over all thresholds with TPR >= target, in percent.
pub fn sweep_fpr(pos: &[f64], neg: &[f64], target: f64) -> f64 {
    thresholds(pos, neg)
        .into_iter()
        .map(|t| confusion(pos, neg, t))
        .filter(|(tpr, _)| *tpr >= target)
        .map(|(_, fpr)| fpr)
        .fold(f64::INFINITY, f64::min)
        * 100.0
}

/// Step-wise average precision by recounting at every threshold, in percent.
/// Each step adds `(tp - tp_prev) / n_pos * precision`.
pub fn sweep_aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut area = 0.0;
    let mut prev_tp = 0usize;
    for t in thresholds(pos, neg).into_iter().skip(1) {
        let tp = pos.iter().filter(|&&s| s >= t).count();
        let fp = neg.iter().filter(|&&s| s >= t).count();
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 / pos.len() as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    100.0 * area
}

/// Cross-entropy of a logistic model on features `x` (no standardization
/// inside), plus `l2/2 |w|^2`.
pub fn logistic_loss(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64, l2: f64) -> f64 {
    let mut loss = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let z: f64 = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        let p = 1.0 / (1.0 + (-z).exp());
        loss -= if label { p.ln() } else { (1.0 - p).ln() };
    }
    loss / x.len() as f64 + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Central finite-difference gradient of [`logistic_loss`], `[dw…, db]`.
pub fn fd_gradient(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64, l2: f64, h: f64) -> Vec<f64> {
    let mut g = Vec::new();
    for i in 0..w.len() {
        let mut wp = w.to_vec();
        let mut wm = w.to_vec();
        wp[i] += h;
        wm[i] -= h;
        g.push((logistic_loss(x, y, &wp, b, l2) - logistic_loss(x, y, &wm, b, l2)) / (2.0 * h));
    }
    g.push((logistic_loss(x, y, w, b + h, l2) - logistic_loss(x, y, w, b - h, l2)) / (2.0 * h));
    g
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

/// Full-training-set KDE detector computed by brute force: every training
/// row is a reference, `k` per layer by exhaustive search, layers combined
/// by summed log-density. Returns per-sample combined scores.
pub struct FullKdeOracle {
    layers: Vec<(Vec<Vec<f32>>, Vec<f64>)>,
}

impl FullKdeOracle {
    pub fn fit(train: &[Vec<Vec<f32>>], perturbed: &[Vec<Vec<f32>>], candidates: &[usize]) -> Self {
        let layers = train
            .iter()
            .zip(perturbed)
            .map(|(rows, pert)| {
                let n = rows.len();
                // pairwise distances once, then each k reads a sorted row
                let mut sorted: Vec<Vec<f64>> = Vec::with_capacity(n);
                let mut pair = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for j in 0..n {
                        pair[i][j] = dist(&rows[i], &rows[j], false);
                    }
                    let mut d: Vec<f64> =
                        (0..n).filter(|&j| j != i).map(|j| pair[i][j]).collect();
                    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    sorted.push(d);
                }
                let pert_d: Vec<Vec<f64>> = pert
                    .iter()
                    .map(|x| rows.iter().map(|r| dist(x, r, false)).collect())
                    .collect();
                let mut best = (0.0, f64::NEG_INFINITY);
                let mut best_sig = Vec::new();
                for &k in candidates.iter().filter(|&&k| k < n) {
                    let sig: Vec<f64> = sorted.iter().map(|d| d[k - 1].max(1e-12)).collect();
                    let mut obj = 0.0;
                    for (i, row) in pair.iter().enumerate() {
                        let mut s = 0.0;
                        for j in 0..n {
                            if j != i {
                                s += gauss(row[j], sig[j]);
                            }
                        }
                        obj += s / (n - 1) as f64;
                    }
                    for d in &pert_d {
                        obj -= d.iter().zip(&sig).map(|(&d, &s)| gauss(d, s)).sum::<f64>()
                            / n as f64;
                    }
                    if obj > best.1 {
                        best = (k as f64, obj);
                        best_sig = sig;
                    }
                }
                (rows.to_vec(), best_sig)
            })
            .collect();
        Self { layers }
    }

    pub fn score(&self, sample_layers: &[Vec<f32>]) -> f64 {
        self.layers
            .iter()
            .zip(sample_layers)
            .map(|((rows, sig), x)| kde(rows, sig, x, false, None).ln())
            .sum()
    }
}
