//! Logistic-regression fusion of per-layer density scores.
//!
//! Each layer score is z-scored with statistics from the training rows, then
//! combined linearly: `confidence = sum_l alpha_l * z_l + bias`. The weights
//! minimise the mean binary cross-entropy (plus an optional L2 penalty on
//! `alpha`) by full-batch gradient descent from zero. The returned
//! confidence is the logit; it orders samples exactly as the probability
//! does.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest standard deviation used when standardizing a score column.
pub const STD_FLOOR: f64 = 1e-12;

/// Per-sample layer scores, optionally labelled (`true` = in-distribution).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub layer_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    /// Row-major `n x L`.
    pub scores: Vec<Vec<f64>>,
    pub labels: Option<Vec<bool>>,
    /// Fused confidence per row, when already computed.
    pub confidence: Option<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(
        layer_ids: Vec<String>,
        sample_ids: Vec<String>,
        scores: Vec<Vec<f64>>,
        labels: Option<Vec<bool>>,
    ) -> Result<Self> {
        let t = Self {
            layer_ids,
            sample_ids,
            scores,
            labels,
            confidence: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layer_ids.len();
        if l == 0 {
            return Err(Error::invalid("score table has no layers"));
        }
        let n = self.scores.len();
        if self.sample_ids.len() != n {
            return Err(Error::Dimension {
                expected: n,
                found: self.sample_ids.len(),
            });
        }
        for (name, len) in [
            ("labels", self.labels.as_ref().map(Vec::len)),
            ("confidence", self.confidence.as_ref().map(Vec::len)),
        ] {
            if let Some(len) = len {
                if len != n {
                    return Err(Error::invalid(format!("{name} has {len} rows, table has {n}")));
                }
            }
        }
        for (r, row) in self.scores.iter().enumerate() {
            if row.len() != l {
                return Err(Error::Dimension {
                    expected: l,
                    found: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: self.layer_ids[c].clone(),
                    row: r,
                    column: c,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_ids.len()
    }

    /// Column `l` of the score matrix.
    pub fn column(&self, l: usize) -> Vec<f64> {
        self.scores.iter().map(|r| r[l]).collect()
    }

    /// Writes the table as CSV: `sample_id,label,<layer ids…>,confidence`.
    /// Reals use Rust's shortest round-trip exponent form.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["sample_id".to_owned(), "label".to_owned()];
        header.extend(self.layer_ids.iter().cloned());
        header.push("confidence".to_owned());
        w.write_record(&header)?;
        for (r, row) in self.scores.iter().enumerate() {
            let mut rec = vec![self.sample_ids[r].clone()];
            rec.push(match self.labels.as_ref().map(|l| l[r]) {
                Some(true) => "pos".to_owned(),
                Some(false) => "neg".to_owned(),
                None => String::new(),
            });
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            rec.push(
                self.confidence
                    .as_ref()
                    .map(|c| format!("{:e}", c[r]))
                    .unwrap_or_default(),
            );
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        if header.len() < 4 || &header[0] != "sample_id" || &header[1] != "label" {
            return Err(Error::Malformed {
                what: "score table",
                offset: 0,
                reason: "expected header sample_id,label,<layers>,confidence".into(),
            });
        }
        let layer_ids: Vec<String> = header
            .iter()
            .skip(2)
            .take(header.len() - 3)
            .map(str::to_owned)
            .collect();
        let parse = |s: &str, line: usize| -> Result<f64> {
            s.parse().map_err(|_| Error::Malformed {
                what: "score table",
                offset: line,
                reason: format!("`{s}` is not a number"),
            })
        };
        let (mut ids, mut scores, mut labels, mut conf) = (vec![], vec![], vec![], vec![]);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            ids.push(rec[0].to_owned());
            labels.push(match &rec[1] {
                "pos" => Some(true),
                "neg" => Some(false),
                _ => None,
            });
            scores.push(
                (2..rec.len() - 1)
                    .map(|c| parse(&rec[c], line + 1))
                    .collect::<Result<Vec<_>>>()?,
            );
            let last = &rec[rec.len() - 1];
            conf.push(if last.is_empty() { None } else { Some(parse(last, line + 1)?) });
        }
        let labels = labels.iter().all(Option::is_some).then(|| labels.into_iter().flatten().collect());
        let confidence = conf.iter().all(Option::is_some).then(|| conf.into_iter().flatten().collect());
        let mut t = Self::new(layer_ids, ids, scores, labels)?;
        t.confidence = confidence;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: u32,
    pub l2_penalty: f64,
    /// Stop once the largest absolute gradient component falls below this.
    pub convergence_tol: f64,
    /// Recorded for reproducibility; optimisation starts from zero weights,
    /// so full-batch training does not consume randomness.
    pub seed: u64,
    /// z-score each layer column before regression (otherwise raw scores).
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_epochs: 2000,
            l2_penalty: 0.0,
            convergence_tol: 1e-7,
            seed: 0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::Config("l2_penalty must be non-negative".into()));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol <= 0.0 {
            return Err(Error::Config("convergence_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Affine standardization of one layer column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    pub const IDENTITY: ColumnStats = ColumnStats { mean: 0.0, std: 1.0 };

    fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub standardizer: Vec<ColumnStats>,
    pub train_config: TrainConfig,
    /// Epochs actually run.
    pub epochs: u32,
    pub training_accuracy: f64,
}

impl FusionModel {
    pub fn n_layers(&self) -> usize {
        self.alpha.len()
    }

    /// Fused confidence (logit) for one row of layer scores.
    pub fn confidence(&self, layer_scores: &[f64]) -> Result<f64> {
        if layer_scores.len() != self.alpha.len() {
            return Err(Error::Dimension {
                expected: self.alpha.len(),
                found: layer_scores.len(),
            });
        }
        if layer_scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite layer score"));
        }
        Ok(self.logit(layer_scores))
    }

    #[inline]
    fn logit(&self, row: &[f64]) -> f64 {
        let mut z = self.bias;
        for ((a, st), &v) in self.alpha.iter().zip(&self.standardizer).zip(row) {
            z += a * st.apply(v);
        }
        z
    }

    pub fn confidence_batch(&self, table: &ScoreTable) -> Result<Vec<f64>> {
        if table.n_layers() != self.alpha.len() {
            return Err(Error::Dimension {
                expected: self.alpha.len(),
                found: table.n_layers(),
            });
        }
        table.scores.iter().map(|r| self.confidence(r)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Training objective on already-standardized features.
///
/// `loss = mean_r [softplus(z_r) - y_r z_r] + l2/2 * |alpha|^2`, with
/// `z_r = alpha . x_r + bias`. Returns the loss and the gradient laid out as
/// `[d alpha_1, …, d alpha_L, d bias]`.
pub fn loss_and_gradient(
    features: &[Vec<f64>],
    labels: &[bool],
    alpha: &[f64],
    bias: f64,
    l2_penalty: f64,
) -> (f64, Vec<f64>) {
    let n = features.len() as f64;
    let l = alpha.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; l + 1];
    for (x, &y) in features.iter().zip(labels) {
        let z = bias + alpha.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        let y = if y { 1.0 } else { 0.0 };
        loss += softplus(z) - y * z;
        let residual = sigmoid(z) - y;
        for (g, v) in grad.iter_mut().zip(x) {
            *g += residual * v;
        }
        grad[l] += residual;
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    for (g, a) in grad.iter_mut().zip(alpha) {
        *g += l2_penalty * a;
    }
    loss += 0.5 * l2_penalty * alpha.iter().map(|a| a * a).sum::<f64>();
    (loss, grad)
}

/// Fits fusion weights on a labelled score table.
pub fn train_fusion(train: &ScoreTable, config: &TrainConfig) -> Result<FusionModel> {
    Ok(train_fusion_traced(train, config)?.0)
}

/// Like [`train_fusion`], also returning the loss before every epoch.
pub fn train_fusion_traced(train: &ScoreTable, config: &TrainConfig) -> Result<(FusionModel, Vec<f64>)> {
    config.validate()?;
    train.validate()?;
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("fusion training needs labelled rows"))?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::invalid(
            "fusion training needs at least one positive and one negative row",
        ));
    }
    let l = train.n_layers();
    let standardizer: Vec<ColumnStats> = if config.standardize {
        (0..l).map(|c| ColumnStats::fit(&train.column(c))).collect()
    } else {
        vec![ColumnStats::IDENTITY; l]
    };
    let features: Vec<Vec<f64>> = train
        .scores
        .iter()
        .map(|row| row.iter().zip(&standardizer).map(|(&v, s)| s.apply(v)).collect())
        .collect();

    let mut alpha = vec![0.0; l];
    let mut bias = 0.0;
    let mut trace = Vec::new();
    let mut epochs = 0;
    while epochs < config.max_epochs {
        let (loss, grad) = loss_and_gradient(&features, labels, &alpha, bias, config.l2_penalty);
        trace.push(loss);
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < config.convergence_tol {
            break;
        }
        for (a, g) in alpha.iter_mut().zip(&grad) {
            *a -= config.learning_rate * g;
        }
        bias -= config.learning_rate * grad[l];
        epochs += 1;
    }

    let mut model = FusionModel {
        alpha,
        bias,
        standardizer,
        train_config: config.clone(),
        epochs,
        training_accuracy: 0.0,
    };
    let correct = train
        .scores
        .iter()
        .zip(labels)
        .filter(|(row, &y)| (model.logit(row) > 0.0) == y)
        .count();
    model.training_accuracy = correct as f64 / labels.len() as f64;
    Ok((model, trace))
}
