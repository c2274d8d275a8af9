//! Feature files, dataset manifests and reference subsampling.
//!
//! A feature file holds, for one dataset, the channel-mean activation vector
//! of every sample at every hooked layer. The binary layout (little-endian):
//!
//! ```text
//! "KDEF"              4 bytes magic
//! version             u16 (= 1)
//! layer count L       u16
//! L times:
//!   id length         u16
//!   id                UTF-8 bytes
//!   n_samples         u32
//!   n_channels        u32
//!   payload           n_samples * n_channels f32, row-major
//! checksum            u64 FNV-1a over every preceding byte
//! ```
//!
//! A JSON [`DatasetManifest`] may accompany a feature file as a sidecar.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"KDEF";
pub const FEATURE_VERSION: u16 = 1;

/// One hooked layer: its identifier and the `n_samples x n_channels` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub features: FeatureMatrix,
}

/// Per-layer channel-mean feature vectors of one dataset.
///
/// Construct through [`LayerFeatureSet::new`], which enforces that every layer
/// has the same number of rows (at least one), that layer ids are unique and
/// that every value is finite. Layer order is the canonical layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureSet {
    dataset_name: String,
    layers: Vec<Layer>,
}

impl LayerFeatureSet {
    pub fn new(dataset_name: impl Into<String>, layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("a feature set needs at least one layer"))?;
        let n = first.features.rows();
        if n == 0 {
            return Err(Error::invalid(format!(
                "layer `{}` has no samples",
                first.id
            )));
        }
        let mut seen = HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.id.as_str()) {
                return Err(Error::invalid(format!("duplicate layer id `{}`", layer.id)));
            }
            if layer.features.rows() != n {
                return Err(Error::RowCount {
                    layer: layer.id.clone(),
                    expected: n,
                    found: layer.features.rows(),
                });
            }
            if layer.features.cols() == 0 {
                return Err(Error::invalid(format!(
                    "layer `{}` has zero channels",
                    layer.id
                )));
            }
            if let Some((row, column)) = layer.features.first_non_finite() {
                return Err(Error::NonFinite {
                    layer: layer.id.clone(),
                    row,
                    column,
                });
            }
        }
        Ok(Self {
            dataset_name: dataset_name.into(),
            layers,
        })
    }

    pub fn dataset_name(&self) -> &str {
        &self.dataset_name
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_samples(&self) -> usize {
        self.layers[0].features.rows()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Same layers, only the given rows (in the given order).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(Layer {
                    id: l.id.clone(),
                    features: l.features.select_rows(indices)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.dataset_name.clone(), layers)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.dataset_name = name.into();
        self
    }
}

/// Serializes a feature set to the `KDEF` byte layout, checksum included.
pub fn encode_features(set: &LayerFeatureSet) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(FEATURE_MAGIC);
    w.u16(FEATURE_VERSION);
    let n_layers = u16::try_from(set.layers.len())
        .map_err(|_| Error::invalid("more than 65535 layers"))?;
    w.u16(n_layers);
    for layer in &set.layers {
        w.short_str("layer id", &layer.id)?;
        let rows = u32::try_from(layer.features.rows())
            .map_err(|_| Error::invalid("row count exceeds u32"))?;
        let cols = u32::try_from(layer.features.cols())
            .map_err(|_| Error::invalid("channel count exceeds u32"))?;
        w.u32(rows);
        w.u32(cols);
        for &v in layer.features.as_slice() {
            w.f32(v);
        }
    }
    Ok(w.finish_with_checksum())
}

/// Decodes and validates `KDEF` bytes; also returns the stored checksum.
pub fn decode_features(dataset_name: &str, bytes: &[u8]) -> Result<(LayerFeatureSet, u64)> {
    let checksum = bytes
        .len()
        .checked_sub(8)
        .map(|at| u64::from_le_bytes(bytes[at..].try_into().expect("8 bytes")));
    // Magic is checked before the checksum so a foreign file reads as malformed.
    let mut probe = ByteReader::new("feature file", bytes);
    if probe.take(4, "magic")? != FEATURE_MAGIC {
        return Err(probe.malformed(0, "bad magic, expected \"KDEF\""));
    }
    let mut r = ByteReader::with_checksum("feature file", bytes)?;
    r.take(4, "magic")?;
    let version_at = r.offset();
    let version = r.u16("version")?;
    if version != FEATURE_VERSION {
        return Err(r.malformed(version_at, format!("unsupported version {version}")));
    }
    let n_layers = r.u16("layer count")?;
    if n_layers == 0 {
        return Err(r.malformed(version_at + 2, "layer count is zero"));
    }
    let mut layers = Vec::with_capacity(n_layers as usize);
    let mut expected_rows = None;
    for _ in 0..n_layers {
        let id = r.short_str("layer id")?;
        let rows = r.u32("n_samples")? as usize;
        let cols = r.u32("n_channels")? as usize;
        match expected_rows {
            None => expected_rows = Some(rows),
            Some(n) if n != rows => {
                return Err(Error::RowCount {
                    layer: id,
                    expected: n,
                    found: rows,
                })
            }
            Some(_) => {}
        }
        let payload_at = r.offset();
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| r.malformed(payload_at, "payload size overflows"))?;
        let data = r.f32_vec(count, &format!("payload of layer `{id}`"))?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: id,
                row: pos / cols,
                column: pos % cols,
            });
        }
        layers.push(Layer {
            id,
            features: FeatureMatrix::new(rows, cols, data)?,
        });
    }
    r.expect_end()?;
    let set = LayerFeatureSet::new(dataset_name, layers)?;
    Ok((set, checksum.expect("checksum verified above")))
}

/// Writes `set` as a `KDEF` file.
pub fn write_feature_file(set: &LayerFeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(set)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `KDEF` file. The dataset name is taken from the sidecar manifest
/// when one exists, otherwise from the file stem.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<LayerFeatureSet> {
    Ok(read_feature_file_with_checksum(path)?.0)
}

pub fn read_feature_file_with_checksum(path: impl AsRef<Path>) -> Result<(LayerFeatureSet, u64)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest_path = DatasetManifest::sidecar_path(path);
    let name = if manifest_path.exists() {
        DatasetManifest::read(&manifest_path)?.dataset_name
    } else {
        default_dataset_name(path)
    };
    decode_features(&name, &bytes)
}

fn default_dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    InDistributionTrain,
    InDistributionTest,
    Perturbed,
    Ood,
}

/// JSON sidecar describing a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub role: DatasetRole,
    pub source_path: String,
    pub n_samples: usize,
    pub layer_ids: Vec<String>,
    pub checksum: u64,
}

impl DatasetManifest {
    /// `features.kdef` -> `features.kdef.json`
    pub fn sidecar_path(feature_path: &Path) -> std::path::PathBuf {
        let mut s = feature_path.as_os_str().to_owned();
        s.push(".json");
        s.into()
    }

    /// Writes the feature file and its sidecar manifest together.
    pub fn write_dataset(
        set: &LayerFeatureSet,
        role: DatasetRole,
        path: impl AsRef<Path>,
    ) -> Result<Self> {
        let path = path.as_ref();
        let bytes = encode_features(set)?;
        let checksum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        let manifest = Self {
            dataset_name: set.dataset_name().to_owned(),
            role,
            source_path: path.to_string_lossy().into_owned(),
            n_samples: set.n_samples(),
            layer_ids: set.layer_ids(),
            checksum,
        };
        manifest.write(Self::sidecar_path(path))?;
        Ok(manifest)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads `source_path` and checks it against this manifest.
    pub fn load(&self) -> Result<LayerFeatureSet> {
        let path = Path::new(&self.source_path);
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (set, checksum) = decode_features(&self.dataset_name, &bytes)?;
        self.verify(&set, checksum)?;
        Ok(set)
    }

    pub fn verify(&self, set: &LayerFeatureSet, checksum: u64) -> Result<()> {
        if checksum != self.checksum {
            return Err(Error::Checksum {
                what: "manifest",
                stored: self.checksum,
                computed: checksum,
            });
        }
        if set.n_samples() != self.n_samples {
            return Err(Error::RowCount {
                layer: set.layers()[0].id.clone(),
                expected: self.n_samples,
                found: set.n_samples(),
            });
        }
        if set.layer_ids() != self.layer_ids {
            return Err(Error::LayerMismatch(format!(
                "manifest lists {:?}, file has {:?}",
                self.layer_ids,
                set.layer_ids()
            )));
        }
        Ok(())
    }
}

/// Indices of the training rows used as KDE reference points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSubset {
    pub indices: Vec<usize>,
    pub seed: u64,
    /// Size of the population the indices were drawn from.
    pub population: usize,
}

impl ReferenceSubset {
    /// Draws `n` distinct indices from `0..population` uniformly without
    /// replacement.
    ///
    /// Algorithm: a ChaCha8 generator seeded with `seed` drives a partial
    /// Fisher-Yates shuffle of `[0, population)`; step `i` swaps position `i`
    /// with a uniform position in `i..population`, and the first `n`
    /// positions are returned.
    pub fn draw(population: usize, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("reference subset size must be at least 1"));
        }
        if n > population {
            return Err(Error::invalid(format!(
                "reference subset size {n} exceeds population {population}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<usize> = (0..population).collect();
        for i in 0..n {
            let j = rng.random_range(i..population);
            pool.swap(i, j);
        }
        pool.truncate(n);
        Ok(Self {
            indices: pool,
            seed,
            population,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Map from population row to its position in the subset.
    pub fn position_lookup(&self) -> Vec<Option<usize>> {
        let mut lookup = vec![None; self.population];
        for (pos, &row) in self.indices.iter().enumerate() {
            lookup[row] = Some(pos);
        }
        lookup
    }
}

/// Draws the reference subset for the dataset described by `manifest`.
pub fn subsample(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<ReferenceSubset> {
    ReferenceSubset::draw(manifest.n_samples, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(rows: &[&[f32]]) -> LayerFeatureSet {
        LayerFeatureSet::new(
            "toy",
            vec![Layer {
                id: "l0".into(),
                features: FeatureMatrix::from_rows(rows).unwrap(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_small_matrix() {
        let set = one_layer(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let bytes = encode_features(&set).unwrap();
        let (back, _) = decode_features("toy", &bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.n_samples(), 2);
    }

    #[test]
    fn one_by_one_file_has_documented_size() {
        let set = one_layer(&[&[0.5]]);
        let bytes = encode_features(&set).unwrap();
        // magic + version + L + (id len + "l0" + rows + cols + 1 f32) + checksum
        assert_eq!(bytes.len(), 4 + 2 + 2 + (2 + 2 + 4 + 4 + 4) + 8);
        assert_eq!(decode_features("toy", &bytes).unwrap().0, set);
    }

    #[test]
    fn empty_layer_list_rejected() {
        assert!(matches!(
            LayerFeatureSet::new("x", vec![]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn corrupted_magic_is_malformed() {
        let mut bytes = encode_features(&one_layer(&[&[1.0]])).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_features("toy", &bytes),
            Err(Error::Malformed { offset: 0, .. })
        ));
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut bytes = encode_features(&one_layer(&[&[1.0, 2.0]])).unwrap();
        let at = bytes.len() - 9;
        bytes[at] ^= 0x01;
        assert!(matches!(
            decode_features("toy", &bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn nan_payload_names_layer_and_row() {
        // Build the bytes by hand: the in-memory constructor refuses NaN.
        let mut w = ByteWriter::new();
        w.bytes(FEATURE_MAGIC);
        w.u16(1);
        w.u16(1);
        w.short_str("id", "conv3").unwrap();
        w.u32(2);
        w.u32(2);
        for v in [1.0, 2.0, 3.0, f32::NAN] {
            w.f32(v);
        }
        let bytes = w.finish_with_checksum();
        match decode_features("toy", &bytes) {
            Err(Error::NonFinite { layer, row, column }) => {
                assert_eq!((layer.as_str(), row, column), ("conv3", 1, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_row_counts_rejected_on_decode() {
        let mut w = ByteWriter::new();
        w.bytes(FEATURE_MAGIC);
        w.u16(1);
        w.u16(2);
        for (id, rows) in [("a", 1u32), ("b", 2u32)] {
            w.short_str("id", id).unwrap();
            w.u32(rows);
            w.u32(1);
            for _ in 0..rows {
                w.f32(0.0);
            }
        }
        let bytes = w.finish_with_checksum();
        assert!(matches!(
            decode_features("toy", &bytes),
            Err(Error::RowCount { layer, .. }) if layer == "b"
        ));
    }

    #[test]
    fn truncated_file_is_malformed() {
        let bytes = encode_features(&one_layer(&[&[1.0, 2.0]])).unwrap();
        let mut short = bytes[..bytes.len() - 12].to_vec();
        let sum = crate::codec::fnv1a64(&short);
        short.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            decode_features("toy", &short),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn subsample_full_population_is_permutation() {
        let s = ReferenceSubset::draw(17, 17, 9).unwrap();
        let mut sorted = s.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_is_deterministic() {
        let a = ReferenceSubset::draw(10, 3, 42).unwrap();
        let b = ReferenceSubset::draw(10, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.indices, ReferenceSubset::draw(10, 3, 43).unwrap().indices);
    }

    #[test]
    fn subsample_rejects_bad_sizes() {
        assert!(ReferenceSubset::draw(10, 0, 1).is_err());
        assert!(ReferenceSubset::draw(10, 11, 1).is_err());
    }
}
