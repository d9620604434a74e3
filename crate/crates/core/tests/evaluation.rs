mod common;

use mmdistill::evaluation::{
    count_fb_flops, dropout_sweep, evaluate_subsets, fused_sequence_len, sweep_retained,
    EvalReport, Protocol,
};
use mmdistill::fusion::FusionConfig;
use mmdistill::modality::ModalitySet;
use mmdistill::model::Model;
use mmdistill::synthdata::{generate_dataset, DatasetSpec};

#[test]
fn student_block_costs_at_most_a_fifth_of_the_teacher_block() {
    let (student, teacher) = (FusionConfig::student(), FusionConfig::teacher());
    assert_eq!(
        (student.dim, student.layers, teacher.dim, teacher.layers),
        (384, 1, 768, 2)
    );
    for counts in [
        vec![785],
        vec![785, 785, 785],
        vec![300, 300],
        vec![16, 8, 4],
        vec![1],
    ] {
        for theta in [None, Some(100), Some(300)] {
            let s = count_fb_flops(&student, &counts, theta);
            let t = count_fb_flops(&teacher, &counts, theta);
            assert!(
                s as f64 <= 0.2 * t as f64,
                "{counts:?} {theta:?}: {s} vs {t}"
            );
        }
    }
}

#[test]
fn smaller_token_caps_cost_less() {
    let counts = [785, 785, 785];
    for cfg in [FusionConfig::student(), FusionConfig::teacher()] {
        let t100 = count_fb_flops(&cfg, &counts, Some(100));
        let t300 = count_fb_flops(&cfg, &counts, Some(300));
        let none = count_fb_flops(&cfg, &counts, None);
        assert!(t100 < t300 && t300 < none);
    }
    assert_eq!(fused_sequence_len(&counts, Some(300)), 901);
    assert_eq!(fused_sequence_len(&counts, None), 2356);
}

#[test]
fn sweep_at_zero_equals_the_full_subset_and_is_reproducible() {
    let spec = DatasetSpec {
        train_size: 4,
        val_size: 2,
        test_size: 40,
        ..DatasetSpec::default()
    };
    let splits = generate_dataset(&spec).unwrap();
    let model = Model::new(common::small_student(&spec), 0, "eval").unwrap();
    let sweep = dropout_sweep(&model, &splits.test, &[0.0, 0.5, 0.9], 17, "m").unwrap();
    let subsets =
        evaluate_subsets(&model, &splits.test, &ModalitySet::all_nonempty(3), "m").unwrap();
    let full = subsets
        .iter()
        .find(|r| r.subset == Some(ModalitySet::full(3)))
        .unwrap();
    assert_eq!(sweep[0].head_acc, full.head_acc);
    assert_eq!(
        sweep,
        dropout_sweep(&model, &splits.test, &[0.0, 0.5, 0.9], 17, "m").unwrap()
    );
    assert!(sweep
        .iter()
        .all(|r| r.protocol == Protocol::Sweep && r.samples == 40));

    for p in [0.0, 0.5, 0.9] {
        let sets = sweep_retained(&splits.test, p, 17).unwrap();
        assert!(sets
            .iter()
            .all(|s| !s.is_empty() && s.is_subset_of(ModalitySet::full(3))));
    }
    let heavy = sweep_retained(&splits.test, 0.9, 17).unwrap();
    assert!(heavy.iter().filter(|s| s.len() == 1).count() > 30);
}

#[test]
fn empty_subset_is_rejected() {
    let spec = DatasetSpec {
        train_size: 4,
        val_size: 2,
        test_size: 2,
        ..DatasetSpec::default()
    };
    let splits = generate_dataset(&spec).unwrap();
    let model = Model::new(common::small_student(&spec), 0, "eval").unwrap();
    assert!(evaluate_subsets(&model, &splits.test, &[ModalitySet::EMPTY], "m").is_err());
}

#[test]
fn report_files_carry_schema_and_round_trip() {
    let spec = DatasetSpec {
        train_size: 4,
        val_size: 2,
        test_size: 6,
        ..DatasetSpec::default()
    };
    let splits = generate_dataset(&spec).unwrap();
    let model = Model::new(common::small_student(&spec), 0, "eval").unwrap();
    let rows = evaluate_subsets(&model, &splits.test, &ModalitySet::all_nonempty(3), "m").unwrap();
    let report = EvalReport {
        seeds: vec![0],
        head_names: vec!["noun".into(), "verb".into()],
        modality_names: spec.modality_names(),
        rows,
        resources: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    report.write_json(&dir.path().join("r.json")).unwrap();
    report.write_csv(&dir.path().join("r.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("r.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["schema"], "mmdistill.report/1");
    let back: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv
        .starts_with("model_id,protocol,subset,probability,acc_noun,acc_verb,action_acc,samples"));
    assert_eq!(csv.lines().count(), 8);
}
