//! Distance-based Gaussian kernel density estimation for one layer.
//!
//! A layer model keeps `N` reference feature vectors, each with its own
//! bandwidth, and scores a vector `x` as
//!
//! ```text
//! p(x) = 1/N * sum_i K(d(x, ref_i); sigma_i)
//! K(d; s) = exp(-d^2 / (2 s^2)) / (s * sqrt(2 pi))
//! ```
//!
//! Terms are always accumulated in ascending reference order in `f64`, so a
//! score is bit-identical no matter how a batch is split across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::knn_bandwidths;
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Bandwidth substituted when a k-th neighbour distance is exactly zero.
pub const BANDWIDTH_FLOOR: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    L1,
    L2,
}

impl DistanceMetric {
    pub(crate) fn tag(self) -> u8 {
        match self {
            DistanceMetric::L1 => 1,
            DistanceMetric::L2 => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DistanceMetric::L1),
            2 => Some(DistanceMetric::L2),
            _ => None,
        }
    }

    /// Unchecked distance; callers guarantee equal lengths.
    #[inline]
    pub(crate) fn eval(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            DistanceMetric::L1 => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
                .sum(),
            DistanceMetric::L2 => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = f64::from(x) - f64::from(y);
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
        }
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DistanceMetric::L1),
            "l2" => Ok(DistanceMetric::L2),
            other => Err(Error::Config(format!("unknown metric `{other}`, use l1 or l2"))),
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistanceMetric::L1 => "l1",
            DistanceMetric::L2 => "l2",
        })
    }
}

/// L1 or L2 distance between two feature vectors, computed in `f64`.
pub fn distance(a: &[f32], b: &[f32], metric: DistanceMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::invalid("distance between empty vectors"));
    }
    Ok(metric.eval(a, b))
}

/// Zero-mean 1-D Gaussian density with standard deviation `sigma`, evaluated at `d`.
pub fn gaussian_kernel(d: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    if !(d >= 0.0 && d.is_finite()) {
        return Err(Error::invalid(format!("kernel distance must be non-negative, got {d}")));
    }
    Ok(kernel(d, sigma))
}

#[inline]
pub(crate) fn kernel(d: f64, sigma: f64) -> f64 {
    let z = d / sigma;
    (-0.5 * z * z).exp() * INV_SQRT_2PI / sigma
}

/// Fitted density model for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKdeModel {
    layer_id: String,
    reference: FeatureMatrix,
    bandwidths: Vec<f64>,
    metric: DistanceMetric,
    k_used: usize,
}

impl LayerKdeModel {
    /// Fits bandwidths by the k-nearest-neighbour rule: `sigma_i` is the k-th
    /// smallest distance from reference `i` to the other references.
    pub fn fit(
        layer_id: impl Into<String>,
        reference: FeatureMatrix,
        k: usize,
        metric: DistanceMetric,
    ) -> Result<Self> {
        let bandwidths = knn_bandwidths(&reference, k, metric)?;
        Ok(Self {
            layer_id: layer_id.into(),
            reference,
            bandwidths,
            metric,
            k_used: k,
        })
    }

    /// Assembles a model from precomputed parts, checking the invariants.
    pub fn from_parts(
        layer_id: impl Into<String>,
        reference: FeatureMatrix,
        bandwidths: Vec<f64>,
        metric: DistanceMetric,
        k_used: usize,
    ) -> Result<Self> {
        if reference.rows() < 2 {
            return Err(Error::invalid("a layer model needs at least 2 reference rows"));
        }
        if bandwidths.len() != reference.rows() {
            return Err(Error::Dimension {
                expected: reference.rows(),
                found: bandwidths.len(),
            });
        }
        if let Some(bad) = bandwidths.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("bandwidth {bad} is not positive and finite")));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            reference,
            bandwidths,
            metric,
            k_used,
        })
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn reference(&self) -> &FeatureMatrix {
        &self.reference
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn k_used(&self) -> usize {
        self.k_used
    }

    pub fn n_reference(&self) -> usize {
        self.reference.rows()
    }

    pub fn dim(&self) -> usize {
        self.reference.cols()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: len,
            });
        }
        Ok(())
    }

    #[inline]
    fn kernel_sum(&self, x: &[f32], skip: Option<usize>) -> f64 {
        let mut acc = 0.0;
        for (i, (r, &s)) in self.reference.iter_rows().zip(&self.bandwidths).enumerate() {
            if Some(i) == skip {
                continue;
            }
            acc += kernel(self.metric.eval(x, r), s);
        }
        acc
    }

    /// Density estimate at `x`.
    pub fn score(&self, x: &[f32]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.kernel_sum(x, None) / self.n_reference() as f64)
    }

    /// Scores every row of `xs`; rows are spread over the current rayon pool.
    pub fn score_batch(&self, xs: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_dim(xs.cols())?;
        let n = self.n_reference() as f64;
        Ok((0..xs.rows())
            .into_par_iter()
            .map(|i| self.kernel_sum(xs.row(i), None) / n)
            .collect())
    }

    /// Density at reference `i` with its own kernel term left out, averaged
    /// over the remaining `N - 1` references.
    pub fn loo_score(&self, i: usize) -> Result<f64> {
        let n = self.n_reference();
        if n < 3 {
            return Err(Error::invalid(format!(
                "leave-one-out scoring needs at least 3 references, model has {n}"
            )));
        }
        if i >= n {
            return Err(Error::invalid(format!(
                "reference index {i} out of range for {n} references"
            )));
        }
        Ok(self.kernel_sum(self.reference.row(i), Some(i)) / (n - 1) as f64)
    }
}
