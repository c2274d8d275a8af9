mod common;

use kde_ood::feature_store::{decode_features, encode_features, read_feature_file_with_checksum};
use kde_ood::{
    read_feature_file, subsample, write_feature_file, DatasetManifest, DatasetRole, Error,
    FeatureMatrix, Layer, LayerFeatureSet, ReferenceSubset,
};
use proptest::prelude::*;

fn arb_set() -> impl Strategy<Value = LayerFeatureSet> {
    (1usize..6, 1usize..4)
        .prop_flat_map(|(rows, n_layers)| {
            prop::collection::vec(
                (1usize..7).prop_flat_map(move |cols| {
                    prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), rows * cols)
                        .prop_map(move |data| (rows, cols, data))
                }),
                n_layers,
            )
        })
        .prop_map(|layers| {
            let layers = layers
                .into_iter()
                .enumerate()
                .map(|(i, (r, c, d))| Layer {
                    id: format!("block{i}.conv"),
                    features: FeatureMatrix::new(r, c, d).unwrap(),
                })
                .collect();
            LayerFeatureSet::new("prop", layers).unwrap()
        })
}

proptest! {
    #[test]
    fn encode_decode_is_bit_exact(set in arb_set()) {
        let bytes = encode_features(&set).unwrap();
        let (back, _) = decode_features("prop", &bytes).unwrap();
        let bits = |s: &LayerFeatureSet| -> Vec<u32> {
            s.layers().iter().flat_map(|l| l.features.as_slice().iter().map(|v| v.to_bits())).collect()
        };
        prop_assert_eq!(bits(&back), bits(&set));
        prop_assert_eq!(back, set);
    }

    #[test]
    fn subsample_indices_are_distinct_and_in_range(m in 1usize..300, frac in 0.0f64..1.0, seed: u64) {
        let n = ((m as f64 * frac) as usize).max(1);
        let s = ReferenceSubset::draw(m, n, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        let mut sorted = s.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
        prop_assert!(s.indices.iter().all(|&i| i < m));
        prop_assert_eq!(s, ReferenceSubset::draw(m, n, seed).unwrap());
    }
}

#[test]
fn three_layers_with_different_widths_round_trip_through_a_file() {
    let mut r = common::rng(1);
    let layers = [3usize, 8, 1]
        .iter()
        .enumerate()
        .map(|(i, &c)| Layer {
            id: format!("layer{i}"),
            features: FeatureMatrix::from_rows(&common::random_rows(&mut r, 5, c, 4.0)).unwrap(),
        })
        .collect();
    let set = LayerFeatureSet::new("multi", layers).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("multi.kdef");
    write_feature_file(&set, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = read_feature_file(&path).unwrap();
    assert_eq!(back, set);
    write_feature_file(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn manifest_sidecar_names_dataset_and_verifies() {
    let set = LayerFeatureSet::new(
        "cifar10-train",
        vec![Layer {
            id: "l".into(),
            features: FeatureMatrix::from_rows(&[[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap(),
        }],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.kdef");
    let manifest = DatasetManifest::write_dataset(&set, DatasetRole::InDistributionTrain, &path).unwrap();
    assert_eq!(manifest.n_samples, 3);

    let (back, sum) = read_feature_file_with_checksum(&path).unwrap();
    assert_eq!(back.dataset_name(), "cifar10-train");
    assert_eq!(sum, manifest.checksum);
    assert_eq!(manifest.load().unwrap(), set);

    let reread = DatasetManifest::read(DatasetManifest::sidecar_path(&path)).unwrap();
    assert_eq!(reread, manifest);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(DatasetManifest::sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(json["role"], "in_distribution_train");

    let mut stale = manifest.clone();
    stale.checksum ^= 1;
    assert!(matches!(stale.load(), Err(Error::Checksum { .. })));
    let mut wrong_n = manifest.clone();
    wrong_n.n_samples = 4;
    assert!(matches!(wrong_n.verify(&set, manifest.checksum), Err(Error::RowCount { .. })));

    let sub = subsample(&manifest, 2, 5).unwrap();
    assert_eq!(sub.population, 3);
    assert!(subsample(&manifest, 4, 5).is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(
        read_feature_file("/nonexistent/x.kdef"),
        Err(Error::Io { .. })
    ));
}

/// Inclusion frequency of every index over many seeds stays near N/M.
#[test]
fn subsample_inclusion_is_uniform() {
    let (m, n, seeds) = (10_000usize, 1_000usize, 10_000u64);
    let mut counts = vec![0u32; m];
    for seed in 0..seeds {
        for i in ReferenceSubset::draw(m, n, seed).unwrap().indices {
            counts[i] += 1;
        }
    }
    let p = n as f64 / m as f64;
    let mean = seeds as f64 * p;
    let sd = (seeds as f64 * p * (1.0 - p)).sqrt();
    let z: Vec<f64> = counts.iter().map(|&c| (c as f64 - mean) / sd).collect();
    let beyond_3 = z.iter().filter(|v| v.abs() > 3.0).count();
    let max_z = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    // 0.27% of indices are expected beyond 3 sigma; 4.9 sigma is the
    // Bonferroni bound for 10 000 indices at the 1% level
    assert!(beyond_3 as f64 <= 0.006 * m as f64, "{beyond_3} indices beyond 3 sigma");
    assert!(max_z < 4.9, "max |z| = {max_z}");
}
