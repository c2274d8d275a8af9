mod common;

use common::*;
use kde_ood::fusion::ScoreTable;
use kde_ood::pipeline::{
    cmd_evaluate, cmd_fit, cmd_score, cmd_train_fusion, fusion_training_table, NamedPath,
    FUSION_JSON_FILE, FUSION_TRAIN_FILE, K_SELECTION_FILE, MODEL_FILE,
};
use kde_ood::synthetic::{SyntheticBenchmark, SyntheticFiles, SyntheticSpec};
use kde_ood::{
    evaluate, read_feature_file, Error, KCandidateSet, KSelectionReport, LayerFeatureSet,
    NegativeRegime, PipelineConfig, PipelineModel,
};
use std::path::Path;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        channels: 6,
        n_train: 240,
        n_test: 80,
        n_ood: 80,
        seed: 11,
        ..SyntheticSpec::default()
    }
}

fn setup(dir: &Path) -> (SyntheticBenchmark, SyntheticFiles, PipelineConfig) {
    let bench = SyntheticBenchmark::generate(&small_spec()).unwrap();
    let files = bench.write_to(&dir.join("data")).unwrap();
    let config = PipelineConfig {
        in_dist: Some(files.train.clone()),
        perturbed: Some(files.perturbed.clone()),
        ood: files
            .oods
            .iter()
            .map(|(n, p)| NamedPath {
                name: n.clone(),
                path: p.clone(),
            })
            .collect(),
        n: 60,
        seed: 3,
        k_candidates: KCandidateSet::new(vec![1, 3, 5, 10, 20, 40]).unwrap(),
        out_dir: dir.join("out"),
        ..PipelineConfig::default()
    };
    (bench, files, config)
}

fn rows_of(set: &LayerFeatureSet, l: usize, idx: &[usize]) -> Vec<Vec<f32>> {
    idx.iter().map(|&i| set.layers()[l].features.row(i).to_vec()).collect()
}

#[test]
fn fit_picks_the_same_k_as_exhaustive_search() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, _, config) = setup(dir.path());
    let model = cmd_fit(&config).unwrap();
    let reports: Vec<KSelectionReport> = serde_json::from_str(
        &std::fs::read_to_string(config.out_dir.join(K_SELECTION_FILE)).unwrap(),
    )
    .unwrap();
    let idx = &model.subset.indices;
    for (l, rep) in reports.iter().enumerate() {
        let reference = rows_of(&bench.train, l, idx);
        let members: Vec<Option<usize>> = (0..idx.len()).map(Some).collect();
        let perturbed = rows_of(&bench.perturbed, l, idx);
        let (want, objectives) = brute_select_k(
            &reference,
            &reference,
            &members,
            &perturbed,
            config.k_candidates.values(),
            false,
        );
        assert_eq!(rep.chosen_k, want, "layer {l}");
        assert_eq!(model.layers[l].k_used(), want);
        for (k, obj) in objectives {
            assert!(rel_close(rep.objectives[&k], obj, 1e-9) || (rep.objectives[&k] - obj).abs() < 1e-12);
        }
    }
}

#[test]
fn score_output_is_layer_scores_then_fusion() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, files, config) = setup(dir.path());
    cmd_fit(&config).unwrap();
    let model_path = config.out_dir.join(MODEL_FILE);
    let trained = cmd_train_fusion(&model_path, &config).unwrap();
    assert!(config.out_dir.join(FUSION_JSON_FILE).exists());
    assert!(config.out_dir.join(FUSION_TRAIN_FILE).exists());

    let (table, path) = cmd_score(&model_path, &files.test, &config.out_dir).unwrap();
    assert_eq!(path.file_name().unwrap(), "test.scores.csv");
    let fusion = trained.fusion().unwrap();
    for (l, layer) in trained.layers.iter().enumerate() {
        let want = layer.score_batch(&bench.test.layers()[l].features).unwrap();
        let got: Vec<f64> = table.scores.iter().map(|r| r[l]).collect();
        assert_eq!(got, want);
    }
    let conf = table.confidence.as_ref().unwrap();
    for (row, c) in table.scores.iter().zip(conf) {
        assert_eq!(fusion.confidence(row).unwrap(), *c);
    }
    let reread = ScoreTable::read_csv(&path).unwrap();
    assert_eq!(reread, table);
}

#[test]
fn evaluation_report_matches_metric_functions() {
    let dir = tempfile::tempdir().unwrap();
    let (_, files, config) = setup(dir.path());
    cmd_fit(&config).unwrap();
    let model_path = config.out_dir.join(MODEL_FILE);
    let model = cmd_train_fusion(&model_path, &config).unwrap();
    let (name, path) = &files.oods[0];
    let target = NamedPath {
        name: name.clone(),
        path: path.clone(),
    };
    let report = cmd_evaluate(&model_path, &files.test, &target, &config.out_dir).unwrap();

    let pos = model.score_set(&read_feature_file(&files.test).unwrap()).unwrap();
    let neg = model.score_set(&read_feature_file(path).unwrap()).unwrap();
    let want = evaluate(pos.confidence.as_ref().unwrap(), neg.confidence.as_ref().unwrap()).unwrap();
    assert_eq!(report, want);
    assert!(report.auroc > 90.0, "auroc {}", report.auroc);
    assert!(config.out_dir.join(format!("eval_{name}.json")).exists());
    assert!(config.out_dir.join(format!("roc_{name}.csv")).exists());

    let same = NamedPath {
        name: "self".into(),
        path: files.test.clone(),
    };
    assert_eq!(cmd_evaluate(&model_path, &files.test, &same, &config.out_dir).unwrap().auroc, 50.0);
}

#[test]
fn held_out_training_never_sees_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, _, mut config) = setup(dir.path());
    cmd_fit(&config).unwrap();
    config.regime = NegativeRegime::HeldOutOod;
    config.target_ood = Some("shift_all".into());
    cmd_train_fusion(&config.out_dir.join(MODEL_FILE), &config).unwrap();
    let table = ScoreTable::read_csv(config.out_dir.join(FUSION_TRAIN_FILE)).unwrap();
    assert!(table.sample_ids.iter().all(|id| !id.starts_with("shift_all:")));
    assert!(table.sample_ids.iter().any(|id| id.starts_with("shift_first:")));
    assert!(table.sample_ids.iter().any(|id| id.starts_with("shift_deep:")));
    let negatives = table.labels.as_ref().unwrap().iter().filter(|y| !**y).count();
    assert_eq!(negatives, 2 * bench.oods[0].n_samples());

    config.target_ood = None;
    let err = cmd_train_fusion(&config.out_dir.join(MODEL_FILE), &config).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn training_table_uses_loo_for_reference_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, _, config) = setup(dir.path());
    let model = cmd_fit(&config).unwrap();
    let table = fusion_training_table(&model, &bench.train, &[&bench.perturbed]).unwrap();
    let (pos, &row) = model.subset.indices.iter().enumerate().next().unwrap();
    for l in 0..model.layers.len() {
        assert_eq!(table.scores[row][l], model.layers[l].loo_score(pos).unwrap());
    }
    assert_eq!(table.len(), bench.train.n_samples() + bench.perturbed.n_samples());
}

#[test]
fn model_file_survives_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, config) = setup(dir.path());
    cmd_fit(&config).unwrap();
    let path = config.out_dir.join(MODEL_FILE);
    let model = cmd_train_fusion(&path, &config).unwrap();
    let back = PipelineModel::read(&path).unwrap();
    assert_eq!(back, model);

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(PipelineModel::read(&path).is_err());
}

#[test]
fn fit_errors_surface_with_the_right_kind() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, mut config) = setup(dir.path());
    config.n = 10_000;
    assert!(matches!(cmd_fit(&config), Err(Error::InvalidArgument(_)) | Err(Error::Config(_))));
    config.n = 60;
    config.perturbed = None;
    assert!(matches!(cmd_fit(&config), Err(Error::Config(_))));
    config.in_dist = Some(dir.path().join("missing.kdef"));
    config.k_candidates = KCandidateSet::new(vec![5]).unwrap();
    config.regime = NegativeRegime::HeldOutOod;
    assert!(matches!(cmd_fit(&config), Err(Error::Io { .. })));
}
