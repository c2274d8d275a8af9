//! Synthetic channel-mean features for tests, demos and the benchmark suite.
//!
//! In-distribution rows are standard normal in every layer. Perturbed rows
//! are the training rows pushed by a constant offset plus a little noise, and
//! each OOD dataset shifts the mean of selected layers.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::feature_store::{DatasetManifest, DatasetRole, Layer, LayerFeatureSet};
use crate::matrix::FeatureMatrix;

#[derive(Debug, Clone)]
pub struct OodSpec {
    pub name: String,
    /// Mean shift added to every channel, one entry per layer.
    pub layer_shift: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_layers: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    /// Offset added to every channel of the perturbed copy of the training set.
    pub perturb_shift: f32,
    pub perturb_noise: f32,
    pub oods: Vec<OodSpec>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_layers: 3,
            channels: 16,
            n_train: 2000,
            n_test: 500,
            n_ood: 500,
            perturb_shift: 0.5,
            perturb_noise: 0.1,
            oods: vec![
                OodSpec {
                    name: "shift_all".into(),
                    layer_shift: vec![1.0, 1.0, 1.0],
                },
                OodSpec {
                    name: "shift_first".into(),
                    layer_shift: vec![1.5, 0.0, 0.0],
                },
                OodSpec {
                    name: "shift_deep".into(),
                    layer_shift: vec![0.0, 1.5, 1.5],
                },
            ],
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub train: LayerFeatureSet,
    pub test: LayerFeatureSet,
    pub perturbed: LayerFeatureSet,
    pub oods: Vec<LayerFeatureSet>,
}

fn layer_ids(n: usize) -> Vec<String> {
    (0..n).map(|l| format!("layer{}", l + 1)).collect()
}

fn normal_set(
    name: &str,
    spec: &SyntheticSpec,
    rows: usize,
    shift: &[f32],
    rng: &mut ChaCha8Rng,
) -> Result<LayerFeatureSet> {
    let layers = layer_ids(spec.n_layers)
        .into_iter()
        .enumerate()
        .map(|(l, id)| {
            let s = shift.get(l).copied().unwrap_or(0.0);
            let data = (0..rows * spec.channels)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(rng);
                    z + s
                })
                .collect();
            Ok(Layer {
                id,
                features: FeatureMatrix::new(rows, spec.channels, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LayerFeatureSet::new(name, layers)
}

impl SyntheticBenchmark {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let train = normal_set("train", spec, spec.n_train, &[], &mut rng)?;
        let test = normal_set("test", spec, spec.n_test, &[], &mut rng)?;
        let pert_layers = train
            .layers()
            .iter()
            .map(|l| {
                let data = l
                    .features
                    .as_slice()
                    .iter()
                    .map(|&v| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        v + spec.perturb_shift + spec.perturb_noise * z
                    })
                    .collect();
                Ok(Layer {
                    id: l.id.clone(),
                    features: FeatureMatrix::new(l.features.rows(), l.features.cols(), data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let perturbed = LayerFeatureSet::new("perturbed", pert_layers)?;
        let oods = spec
            .oods
            .iter()
            .map(|o| normal_set(&o.name, spec, spec.n_ood, &o.layer_shift, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train,
            test,
            perturbed,
            oods,
        })
    }

    /// Writes every dataset as `<name>.kdef` plus manifest into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<SyntheticFiles> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        let write = |set: &LayerFeatureSet, role| -> Result<PathBuf> {
            let p = dir.join(format!("{}.kdef", set.dataset_name()));
            DatasetManifest::write_dataset(set, role, &p)?;
            Ok(p)
        };
        Ok(SyntheticFiles {
            train: write(&self.train, DatasetRole::InDistributionTrain)?,
            test: write(&self.test, DatasetRole::InDistributionTest)?,
            perturbed: write(&self.perturbed, DatasetRole::Perturbed)?,
            oods: self
                .oods
                .iter()
                .map(|o| Ok((o.dataset_name().to_owned(), write(o, DatasetRole::Ood)?)))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub train: PathBuf,
    pub test: PathBuf,
    pub perturbed: PathBuf,
    pub oods: Vec<(String, PathBuf)>,
}
