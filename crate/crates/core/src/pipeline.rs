//! End-to-end detector: fit per-layer density models, train the fusion
//! weights, score datasets and evaluate them.
//!
//! The `cmd_*` functions are the file-level verbs used by the CLI; each has
//! an in-memory counterpart taking [`LayerFeatureSet`]s directly.
//!
//! # Model file
//!
//! ```text
//! "KDEM"                 magic
//! version                u16 (= 1)
//! section count          u16
//! per section:
//!   tag                  4 ASCII bytes: SUBS | LAYR | FUSN | CONF
//!   length               u64 (body bytes)
//!   body
//! checksum               u64 FNV-1a over every preceding byte
//! ```
//!
//! * `SUBS`: seed u64, population u64, count u32, indices u32 each
//! * `LAYR` (one per layer, in layer order): id (u16 length + UTF-8), metric
//!   u8 (1 = L1, 2 = L2), k u32, rows u32, cols u32, reference f32 row-major,
//!   bandwidths f64
//! * `FUSN` (present once trained): L u16, alpha f64 x L, bias f64,
//!   (mean f64, std f64) x L, learning rate f64, max epochs u32, l2 f64,
//!   tolerance f64, seed u64, standardize u8, epochs run u32, training
//!   accuracy f64
//! * `CONF`: the pipeline configuration as UTF-8 JSON

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandwidth::{select_k, KCandidateSet, KSelectionReport, SelectionData};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::feature_store::{read_feature_file, LayerFeatureSet, ReferenceSubset};
use crate::fusion::{train_fusion, ColumnStats, FusionModel, ScoreTable, TrainConfig};
use crate::kde::{DistanceMetric, LayerKdeModel};
use crate::matrix::FeatureMatrix;
use crate::metrics::{evaluate, EvalReport};

pub const MODEL_MAGIC: &[u8; 4] = b"KDEM";
pub const MODEL_VERSION: u16 = 1;

pub const MODEL_FILE: &str = "model.kdem";
pub const K_SELECTION_FILE: &str = "k_selection.json";
pub const FUSION_JSON_FILE: &str = "fusion.json";
pub const FUSION_TRAIN_FILE: &str = "fusion_train_scores.csv";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeRegime {
    /// Negatives are the perturbed counterparts of the training rows.
    #[default]
    Adversarial,
    /// Negatives are pooled OOD datasets, the evaluation target excluded.
    HeldOutOod,
}

impl std::str::FromStr for NegativeRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" => Ok(Self::Adversarial),
            "held-out-ood" | "held_out_ood" => Ok(Self::HeldOutOod),
            other => Err(Error::Config(format!(
                "unknown regime `{other}`, use adversarial or held-out-ood"
            ))),
        }
    }
}

/// Which rows enter the k-selection objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSelectionEval {
    /// The reference rows (scored leave-one-out) and their perturbed counterparts.
    #[default]
    Reference,
    /// Every training row and every perturbed row.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

impl std::str::FromStr for NamedPath {
    type Err = Error;

    /// Parses `name=path`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, path) = s
            .split_once('=')
            .filter(|(n, p)| !n.is_empty() && !p.is_empty())
            .ok_or_else(|| Error::Config(format!("expected <name>=<path>, got `{s}`")))?;
        Ok(Self {
            name: name.to_owned(),
            path: path.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub in_dist: Option<PathBuf>,
    pub perturbed: Option<PathBuf>,
    pub ood: Vec<NamedPath>,
    /// OOD dataset under evaluation; excluded from held-out fusion training.
    pub target_ood: Option<String>,
    pub n: usize,
    pub seed: u64,
    pub metric: DistanceMetric,
    pub k_candidates: KCandidateSet,
    pub k_selection_eval: KSelectionEval,
    pub fusion: TrainConfig,
    pub regime: NegativeRegime,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            in_dist: None,
            perturbed: None,
            ood: Vec::new(),
            target_ood: None,
            n: 1000,
            seed: 0,
            metric: DistanceMetric::L1,
            k_candidates: KCandidateSet::default(),
            k_selection_eval: KSelectionEval::Reference,
            fusion: TrainConfig::default(),
            regime: NegativeRegime::Adversarial,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        self.fusion.validate()?;
        match self.regime {
            NegativeRegime::Adversarial if self.perturbed.is_none() => {
                return Err(Error::Config(
                    "the adversarial regime needs a perturbed feature file".into(),
                ))
            }
            NegativeRegime::HeldOutOod if self.ood.len() < 2 => {
                return Err(Error::Config(
                    "the held-out-ood regime needs at least two OOD datasets".into(),
                ))
            }
            _ => {}
        }
        let mut names: Vec<&str> = self.ood.iter().map(|o| o.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("OOD dataset names must be unique".into()));
        }
        if let Some(t) = &self.target_ood {
            if !self.ood.iter().any(|o| &o.name == t) {
                return Err(Error::Config(format!("target OOD `{t}` is not among --ood")));
            }
        }
        Ok(())
    }

    fn in_dist_path(&self) -> Result<&Path> {
        self.in_dist
            .as_deref()
            .ok_or_else(|| Error::Config("no in-distribution feature file given".into()))
    }
}

/// Everything needed to score a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    pub subset: ReferenceSubset,
    pub layers: Vec<LayerKdeModel>,
    pub fusion: Option<FusionModel>,
    pub config: PipelineConfig,
}

fn ensure_same_layers(model_ids: &[String], set: &LayerFeatureSet) -> Result<()> {
    let ids = set.layer_ids();
    if ids != model_ids {
        return Err(Error::LayerMismatch(format!(
            "`{}` has layers {ids:?}, expected {model_ids:?}",
            set.dataset_name()
        )));
    }
    Ok(())
}

impl PipelineModel {
    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.layer_id().to_owned()).collect()
    }

    /// `n x L` density scores for every row of `set`.
    pub fn layer_scores(&self, set: &LayerFeatureSet) -> Result<Vec<Vec<f64>>> {
        ensure_same_layers(&self.layer_ids(), set)?;
        let per_layer = self
            .layers
            .iter()
            .zip(set.layers())
            .map(|(m, l)| m.score_batch(&l.features))
            .collect::<Result<Vec<_>>>()?;
        Ok(transpose(&per_layer, set.n_samples()))
    }

    /// Scores of the training set the references were drawn from; reference
    /// members are scored leave-one-out.
    pub fn training_scores(&self, train: &LayerFeatureSet) -> Result<Vec<Vec<f64>>> {
        if train.n_samples() != self.subset.population {
            return Err(Error::invalid(format!(
                "training set has {} rows, the reference subset was drawn from {}",
                train.n_samples(),
                self.subset.population
            )));
        }
        let mut scores = self.layer_scores(train)?;
        for (pos, &row) in self.subset.indices.iter().enumerate() {
            for (l, m) in self.layers.iter().enumerate() {
                scores[row][l] = m.loo_score(pos)?;
            }
        }
        Ok(scores)
    }

    pub fn fusion(&self) -> Result<&FusionModel> {
        self.fusion
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no fusion weights; run train-fusion first"))
    }

    /// Per-layer scores plus fused confidence for every row of `set`.
    pub fn score_set(&self, set: &LayerFeatureSet) -> Result<ScoreTable> {
        let fusion = self.fusion()?;
        let scores = self.layer_scores(set)?;
        let ids = (0..set.n_samples())
            .map(|r| format!("{}:{r}", set.dataset_name()))
            .collect();
        let mut table = ScoreTable::new(self.layer_ids(), ids, scores, None)?;
        table.confidence = Some(fusion.confidence_batch(&table)?);
        Ok(table)
    }

    /// Fused confidences of `in_dist_test` (positives) against `ood` (negatives).
    pub fn evaluate_sets(&self, in_dist_test: &LayerFeatureSet, ood: &LayerFeatureSet) -> Result<EvalReport> {
        let pos = self.score_set(in_dist_test)?.confidence.expect("set by score_set");
        let neg = self.score_set(ood)?.confidence.expect("set by score_set");
        evaluate(&pos, &neg)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();

        let mut s = ByteWriter::new();
        s.u64(self.subset.seed);
        s.u64(self.subset.population as u64);
        s.u32(to_u32(self.subset.len(), "subset size")?);
        for &i in &self.subset.indices {
            s.u32(to_u32(i, "subset index")?);
        }
        sections.push((*b"SUBS", s.into_inner()));

        for m in &self.layers {
            let mut w = ByteWriter::new();
            w.short_str("layer id", m.layer_id())?;
            w.u8(m.metric().tag());
            w.u32(to_u32(m.k_used(), "k")?);
            w.u32(to_u32(m.reference().rows(), "rows")?);
            w.u32(to_u32(m.reference().cols(), "cols")?);
            for &v in m.reference().as_slice() {
                w.f32(v);
            }
            for &b in m.bandwidths() {
                w.f64(b);
            }
            sections.push((*b"LAYR", w.into_inner()));
        }

        if let Some(f) = &self.fusion {
            let mut w = ByteWriter::new();
            w.u16(u16::try_from(f.alpha.len()).map_err(|_| Error::invalid("too many layers"))?);
            f.alpha.iter().for_each(|&a| w.f64(a));
            w.f64(f.bias);
            for st in &f.standardizer {
                w.f64(st.mean);
                w.f64(st.std);
            }
            let c = &f.train_config;
            w.f64(c.learning_rate);
            w.u32(c.max_epochs);
            w.f64(c.l2_penalty);
            w.f64(c.convergence_tol);
            w.u64(c.seed);
            w.u8(c.standardize as u8);
            w.u32(f.epochs);
            w.f64(f.training_accuracy);
            sections.push((*b"FUSN", w.into_inner()));
        }

        sections.push((*b"CONF", serde_json::to_vec(&self.config)?));

        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u16(MODEL_VERSION);
        w.u16(sections.len() as u16);
        for (tag, body) in sections {
            w.bytes(&tag);
            w.u64(body.len() as u64);
            w.bytes(&body);
        }
        Ok(w.finish_with_checksum())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Malformed {
                what: "model file",
                offset: 0,
                reason: "bad magic, expected \"KDEM\"".into(),
            });
        }
        let mut r = ByteReader::with_checksum("model file", bytes)?;
        r.take(4, "magic")?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != MODEL_VERSION {
            return Err(r.malformed(at, format!("unsupported model version {version}")));
        }
        let n_sections = r.u16("section count")?;
        let (mut subset, mut layers, mut fusion, mut config) = (None, Vec::new(), None, None);
        for _ in 0..n_sections {
            let tag_at = r.offset();
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
            let len = r.u64("section length")?;
            let len = usize::try_from(len).map_err(|_| r.malformed(tag_at + 4, "section too large"))?;
            let body_at = r.offset();
            let body = r.take(len, "section body")?;
            let mut s = ByteReader::new("model file", body);
            let shift = |e: Error| match e {
                Error::Malformed { what, offset, reason } => Error::Malformed {
                    what,
                    offset: offset + body_at,
                    reason,
                },
                other => other,
            };
            match &tag {
                b"SUBS" => subset = Some(decode_subset(&mut s).map_err(shift)?),
                b"LAYR" => layers.push(decode_layer(&mut s).map_err(shift)?),
                b"FUSN" => fusion = Some(decode_fusion(&mut s).map_err(shift)?),
                b"CONF" => config = Some(serde_json::from_slice(body)?),
                _ => {
                    return Err(r.malformed(
                        tag_at,
                        format!("unknown section tag {:?}", String::from_utf8_lossy(&tag)),
                    ))
                }
            }
            if tag != *b"CONF" {
                s.expect_end().map_err(shift)?;
            }
        }
        r.expect_end()?;
        let subset = subset.ok_or_else(|| r.malformed(0, "missing SUBS section"))?;
        let config = config.ok_or_else(|| r.malformed(0, "missing CONF section"))?;
        if layers.is_empty() {
            return Err(r.malformed(0, "no LAYR sections"));
        }
        let model = Self {
            subset,
            layers,
            fusion,
            config,
        };
        model.check_consistency()?;
        Ok(model)
    }

    fn check_consistency(&self) -> Result<()> {
        let n = self.subset.len();
        for m in &self.layers {
            if m.n_reference() != n {
                return Err(Error::LayerMismatch(format!(
                    "layer `{}` has {} references, subset has {n}",
                    m.layer_id(),
                    m.n_reference()
                )));
            }
        }
        if let Some(f) = &self.fusion {
            if f.n_layers() != self.layers.len() {
                return Err(Error::LayerMismatch(format!(
                    "fusion has {} weights for {} layers",
                    f.n_layers(),
                    self.layers.len()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))
}

fn decode_subset(s: &mut ByteReader<'_>) -> Result<ReferenceSubset> {
    let seed = s.u64("seed")?;
    let population = s.u64("population")? as usize;
    let n = s.u32("subset size")? as usize;
    let mut indices = Vec::with_capacity(n.min(s.remaining() / 4));
    for _ in 0..n {
        let at = s.offset();
        let i = s.u32("subset index")? as usize;
        if i >= population {
            return Err(s.malformed(at, format!("index {i} outside population {population}")));
        }
        indices.push(i);
    }
    Ok(ReferenceSubset {
        indices,
        seed,
        population,
    })
}

fn decode_layer(s: &mut ByteReader<'_>) -> Result<LayerKdeModel> {
    let id = s.short_str("layer id")?;
    let metric_at = s.offset();
    let metric = DistanceMetric::from_tag(s.u8("metric")?)
        .ok_or_else(|| s.malformed(metric_at, "unknown metric tag"))?;
    let k = s.u32("k")? as usize;
    let rows = s.u32("rows")? as usize;
    let cols = s.u32("cols")? as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| s.malformed(metric_at, "reference size overflows"))?;
    let data = s.f32_vec(count, "reference")?;
    let mut bandwidths = Vec::with_capacity(rows.min(s.remaining() / 8));
    for _ in 0..rows {
        bandwidths.push(s.f64("bandwidth")?);
    }
    let reference = FeatureMatrix::new(rows, cols, data)?;
    if let Some((row, column)) = reference.first_non_finite() {
        return Err(Error::NonFinite { layer: id, row, column });
    }
    LayerKdeModel::from_parts(id, reference, bandwidths, metric, k)
}

fn decode_fusion(s: &mut ByteReader<'_>) -> Result<FusionModel> {
    let l = s.u16("fusion width")? as usize;
    let alpha = (0..l).map(|_| s.f64("alpha")).collect::<Result<Vec<_>>>()?;
    let bias = s.f64("bias")?;
    let standardizer = (0..l)
        .map(|_| {
            Ok(ColumnStats {
                mean: s.f64("mean")?,
                std: s.f64("std")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let train_config = TrainConfig {
        learning_rate: s.f64("learning rate")?,
        max_epochs: s.u32("max epochs")?,
        l2_penalty: s.f64("l2 penalty")?,
        convergence_tol: s.f64("tolerance")?,
        seed: s.u64("seed")?,
        standardize: s.u8("standardize")? != 0,
    };
    Ok(FusionModel {
        alpha,
        bias,
        standardizer,
        train_config,
        epochs: s.u32("epochs")?,
        training_accuracy: s.f64("training accuracy")?,
    })
}

fn transpose(per_layer: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|r| per_layer.iter().map(|col| col[r]).collect())
        .collect()
}

/// Evaluation rows for k selection on layer `layer`.
fn selection_rows(
    config: &PipelineConfig,
    subset: &ReferenceSubset,
    train: &LayerFeatureSet,
    perturbed: &LayerFeatureSet,
    layer: usize,
) -> Result<(FeatureMatrix, Vec<Option<usize>>, FeatureMatrix)> {
    let train_m = &train.layers()[layer].features;
    let pert_m = &perturbed.layers()[layer].features;
    let aligned = perturbed.n_samples() == train.n_samples();
    Ok(match config.k_selection_eval {
        KSelectionEval::Reference => {
            let in_dist = train_m.select_rows(&subset.indices)?;
            let membership = (0..subset.len()).map(Some).collect();
            let pert = if aligned {
                pert_m.select_rows(&subset.indices)?
            } else {
                pert_m.clone()
            };
            (in_dist, membership, pert)
        }
        KSelectionEval::Full => (train_m.clone(), subset.position_lookup(), pert_m.clone()),
    })
}

/// Draws the reference subset and picks `k` for every layer.
pub fn select_k_for_sets(
    config: &PipelineConfig,
    train: &LayerFeatureSet,
    perturbed: &LayerFeatureSet,
) -> Result<(ReferenceSubset, Vec<KSelectionReport>)> {
    ensure_same_layers(&train.layer_ids(), perturbed)?;
    let subset = ReferenceSubset::draw(train.n_samples(), config.n, config.seed)?;
    let mut reports = Vec::with_capacity(train.layers().len());
    for (l, layer) in train.layers().iter().enumerate() {
        let reference = layer.features.select_rows(&subset.indices)?;
        let (in_dist, membership, pert) = selection_rows(config, &subset, train, perturbed, l)?;
        let data = SelectionData {
            reference: &reference,
            in_dist: &in_dist,
            in_dist_membership: Some(&membership),
            perturbed: &pert,
        };
        reports.push(select_k(&layer.id, &data, &config.k_candidates, config.metric)?);
    }
    Ok((subset, reports))
}

/// Fits one density model per layer on a shared reference subset.
///
/// `k` is chosen per layer from the candidates using `perturbed`; without
/// perturbed features the candidate set must hold exactly one value.
pub fn fit_sets(
    config: &PipelineConfig,
    train: &LayerFeatureSet,
    perturbed: Option<&LayerFeatureSet>,
) -> Result<(PipelineModel, Vec<KSelectionReport>)> {
    if config.n < 2 {
        return Err(Error::Config(format!("n must be at least 2, got {}", config.n)));
    }
    let (subset, reports) = match perturbed {
        Some(p) => select_k_for_sets(config, train, p)?,
        None => {
            let [k] = config.k_candidates.values() else {
                return Err(Error::Config(
                    "k selection needs perturbed features (or a single k candidate)".into(),
                ));
            };
            let subset = ReferenceSubset::draw(train.n_samples(), config.n, config.seed)?;
            let reports = train
                .layers()
                .iter()
                .map(|l| KSelectionReport {
                    layer_id: l.id.clone(),
                    objectives: Default::default(),
                    chosen_k: *k,
                })
                .collect();
            (subset, reports)
        }
    };
    let layers = train
        .layers()
        .iter()
        .zip(&reports)
        .map(|(l, rep)| {
            let reference = l.features.select_rows(&subset.indices)?;
            LayerKdeModel::fit(l.id.clone(), reference, rep.chosen_k, config.metric)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = PipelineModel {
        subset,
        layers,
        fusion: None,
        config: config.clone(),
    };
    Ok((model, reports))
}

/// Labelled table for fusion training: every training row as a positive,
/// every row of every negative set as a negative. Sample ids are
/// `<dataset>:<row>`.
pub fn fusion_training_table(
    model: &PipelineModel,
    train: &LayerFeatureSet,
    negatives: &[&LayerFeatureSet],
) -> Result<ScoreTable> {
    let mut scores = model.training_scores(train)?;
    let mut ids: Vec<String> = (0..train.n_samples())
        .map(|r| format!("{}:{r}", train.dataset_name()))
        .collect();
    let mut labels = vec![true; scores.len()];
    for set in negatives {
        let s = model.layer_scores(set)?;
        ids.extend((0..s.len()).map(|r| format!("{}:{r}", set.dataset_name())));
        labels.extend(std::iter::repeat_n(false, s.len()));
        scores.extend(s);
    }
    ScoreTable::new(model.layer_ids(), ids, scores, Some(labels))
}

/// The OOD sets used as negatives in the held-out regime: all but `target`.
pub fn held_out_negatives<'a>(
    oods: &'a [LayerFeatureSet],
    target: &str,
) -> Result<Vec<&'a LayerFeatureSet>> {
    let kept: Vec<_> = oods.iter().filter(|s| s.dataset_name() != target).collect();
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no OOD dataset left for training after excluding `{target}`"
        )));
    }
    Ok(kept)
}

/// Trains the fusion weights according to `config.regime`.
pub fn train_fusion_sets(
    model: &PipelineModel,
    config: &PipelineConfig,
    train: &LayerFeatureSet,
    perturbed: Option<&LayerFeatureSet>,
    oods: &[LayerFeatureSet],
) -> Result<(PipelineModel, ScoreTable)> {
    let negatives: Vec<&LayerFeatureSet> = match config.regime {
        NegativeRegime::Adversarial => vec![perturbed.ok_or_else(|| {
            Error::Config("the adversarial regime needs a perturbed feature file".into())
        })?],
        NegativeRegime::HeldOutOod => {
            if oods.len() < 2 {
                return Err(Error::Config(
                    "the held-out-ood regime needs at least two OOD datasets".into(),
                ));
            }
            let target = config.target_ood.as_deref().ok_or_else(|| {
                Error::Config("the held-out-ood regime needs a target OOD dataset".into())
            })?;
            held_out_negatives(oods, target)?
        }
    };
    let table = fusion_training_table(model, train, &negatives)?;
    let fusion = train_fusion(&table, &config.fusion)?;
    let mut updated = model.clone();
    updated.fusion = Some(fusion);
    updated.config = config.clone();
    Ok((updated, table))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_oods(config: &PipelineConfig) -> Result<Vec<LayerFeatureSet>> {
    config
        .ood
        .iter()
        .map(|o| Ok(read_feature_file(&o.path)?.with_name(o.name.clone())))
        .collect()
}

/// `select-k`: writes `k_selection.json` without fitting a model.
pub fn cmd_select_k(config: &PipelineConfig) -> Result<Vec<KSelectionReport>> {
    let train = read_feature_file(config.in_dist_path()?)?;
    let pert_path = config
        .perturbed
        .as_deref()
        .ok_or_else(|| Error::Config("select-k needs a perturbed feature file".into()))?;
    let perturbed = read_feature_file(pert_path)?;
    let (_, reports) = select_k_for_sets(config, &train, &perturbed)?;
    ensure_dir(&config.out_dir)?;
    write_json(&reports, &config.out_dir.join(K_SELECTION_FILE))?;
    Ok(reports)
}

/// `fit`: writes `model.kdem` and `k_selection.json` into the output directory.
pub fn cmd_fit(config: &PipelineConfig) -> Result<PipelineModel> {
    config.validate()?;
    let train = read_feature_file(config.in_dist_path()?)?;
    let perturbed = config.perturbed.as_deref().map(read_feature_file).transpose()?;
    let (model, reports) = fit_sets(config, &train, perturbed.as_ref())?;
    ensure_dir(&config.out_dir)?;
    model.write(config.out_dir.join(MODEL_FILE))?;
    write_json(&reports, &config.out_dir.join(K_SELECTION_FILE))?;
    Ok(model)
}

/// `train-fusion`: rewrites the model file with fusion weights and writes
/// `fusion.json` plus the labelled training table.
pub fn cmd_train_fusion(model_path: &Path, config: &PipelineConfig) -> Result<PipelineModel> {
    config.validate()?;
    let model = PipelineModel::read(model_path)?;
    let train = read_feature_file(config.in_dist_path()?)?;
    let perturbed = match config.regime {
        NegativeRegime::Adversarial => {
            config.perturbed.as_deref().map(read_feature_file).transpose()?
        }
        NegativeRegime::HeldOutOod => None,
    };
    let oods = match config.regime {
        NegativeRegime::HeldOutOod => load_oods(config)?,
        NegativeRegime::Adversarial => Vec::new(),
    };
    let (updated, table) = train_fusion_sets(&model, config, &train, perturbed.as_ref(), &oods)?;
    ensure_dir(&config.out_dir)?;
    updated.write(model_path)?;
    write_json(updated.fusion()?, &config.out_dir.join(FUSION_JSON_FILE))?;
    table.write_csv(config.out_dir.join(FUSION_TRAIN_FILE))?;
    Ok(updated)
}

/// `score`: writes `<stem>.scores.csv` and returns its path.
pub fn cmd_score(model_path: &Path, features: &Path, out_dir: &Path) -> Result<(ScoreTable, PathBuf)> {
    let model = PipelineModel::read(model_path)?;
    let set = read_feature_file(features)?;
    let table = model.score_set(&set)?;
    ensure_dir(out_dir)?;
    let path = out_dir.join(format!("{}.scores.csv", file_stem(features)));
    table.write_csv(&path)?;
    Ok((table, path))
}

/// `evaluate`: writes `eval_<name>.json` and `roc_<name>.csv`.
pub fn cmd_evaluate(
    model_path: &Path,
    in_dist_test: &Path,
    ood: &NamedPath,
    out_dir: &Path,
) -> Result<EvalReport> {
    let model = PipelineModel::read(model_path)?;
    let test = read_feature_file(in_dist_test)?;
    let ood_set = read_feature_file(&ood.path)?.with_name(ood.name.clone());
    let report = model.evaluate_sets(&test, &ood_set)?;
    ensure_dir(out_dir)?;
    report.write_json(out_dir.join(format!("eval_{}.json", ood.name)))?;
    report.write_roc_csv(out_dir.join(format!("roc_{}.csv", ood.name)))?;
    Ok(report)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "features".into())
}
