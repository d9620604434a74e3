use mmdistill::encoders::{pretrain_encoder, EncoderSpec, PretrainConfig};
use mmdistill::probe::{linear_probe, ProbeConfig};
use mmdistill::synthdata::{
    dataset_stats, generate_dataset, read_splits, write_splits, DatasetSpec,
};

#[test]
fn uninformative_modality_probes_at_chance() {
    let mut spec = DatasetSpec {
        train_size: 2000,
        val_size: 100,
        test_size: 1000,
        label_noise: 0.0,
        ..DatasetSpec::default()
    };
    spec.modalities[2].informativeness = vec![0.0, 0.0];
    let splits = generate_dataset(&spec).unwrap();
    for (h, head) in spec.heads.iter().enumerate() {
        let acc = linear_probe(
            &splits.train,
            &splits.test,
            &[2],
            h,
            &ProbeConfig::default(),
        )
        .unwrap();
        let chance = 1.0 / head.classes as f64;
        assert!(
            (acc - chance).abs() <= 0.03,
            "{}: {acc} vs {chance}",
            head.name
        );
    }
}

#[test]
fn factorized_verb_needs_two_modalities() {
    let spec = DatasetSpec::factorized();
    let splits = generate_dataset(&spec).unwrap();
    let verb = spec.heads.iter().position(|h| h.name == "verb").unwrap();
    let probe = |ms: &[usize]| {
        linear_probe(
            &splits.train,
            &splits.test,
            ms,
            verb,
            &ProbeConfig::default(),
        )
        .unwrap()
    };
    let pair = probe(&[0, 1]);
    let best_single = [probe(&[0]), probe(&[1]), probe(&[2])]
        .into_iter()
        .fold(0.0, f64::max);
    assert!(pair > 0.90, "V+F verb probe {pair}");
    assert!(
        pair - best_single >= 0.05,
        "V+F {pair} vs best single {best_single}"
    );
}

#[test]
fn informative_modality_pretrains_well_above_chance() {
    let spec = DatasetSpec {
        train_size: 1000,
        val_size: 300,
        test_size: 10,
        ..DatasetSpec::default()
    };
    let splits = generate_dataset(&spec).unwrap();
    let enc = EncoderSpec {
        modality_id: 0,
        input_tokens: 48,
        input_dim: 24,
        width: 16,
        depth: 1,
        out_dim: 16,
        attention: false,
        trainable: true,
    };
    let cfg = PretrainConfig {
        epochs: 10,
        ..PretrainConfig::default()
    };
    let out = pretrain_encoder(&enc, &splits.train, &splits.val, &cfg, 0).unwrap();
    let noun = out.proxy_heads.iter().position(|&h| h == 0).unwrap();
    assert!(
        out.probe_accuracy[noun] > 1.0 / 12.0 + 0.20,
        "{:?}",
        out.probe_accuracy
    );
    assert!(!out.spec.trainable);

    let zero = pretrain_encoder(
        &enc,
        &splits.train,
        &splits.val,
        &PretrainConfig { epochs: 0, ..cfg },
        0,
    )
    .unwrap();
    assert!(
        zero.probe_accuracy[noun] < 1.0 / 12.0 + 0.10,
        "{:?}",
        zero.probe_accuracy
    );
}

#[test]
fn availability_and_classes_concentrate_on_their_rates() {
    let mut spec = DatasetSpec {
        train_size: 20_000,
        val_size: 10,
        test_size: 10,
        ..DatasetSpec::default()
    };
    spec.modalities.iter_mut().for_each(|m| {
        m.token_count = 2;
        m.token_dim = 2;
    });
    spec.missing_prob = vec![0.3, 0.1, 0.5];
    let stats = dataset_stats(&generate_dataset(&spec).unwrap().train).unwrap();
    // availability conditioned on at least one modality surviving
    let none = 0.3 * 0.1 * 0.5;
    for (rate, p) in stats.availability_rate.iter().zip(&spec.missing_prob) {
        let expected = (1.0 - p) / (1.0 - none);
        assert!((rate - expected).abs() < 0.015, "{rate} vs {expected}");
    }
    for (hist, head) in stats.class_histogram.iter().zip(&spec.heads) {
        let expected = 20_000.0 / head.classes as f64;
        assert!(
            hist.iter()
                .all(|&c| (c as f64 - expected).abs() < 0.1 * expected),
            "{hist:?}"
        );
    }
}

#[test]
fn generation_is_deterministic_and_round_trips() {
    let spec = DatasetSpec {
        train_size: 30,
        val_size: 5,
        test_size: 5,
        ..DatasetSpec::default()
    };
    let a = generate_dataset(&spec).unwrap();
    assert_eq!(a, generate_dataset(&spec).unwrap());
    let other = generate_dataset(&DatasetSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.train.samples[0], other.train.samples[0]);
    let dir = tempfile::tempdir().unwrap();
    write_splits(dir.path(), &a).unwrap();
    assert_eq!(read_splits(dir.path()).unwrap(), a);
}
