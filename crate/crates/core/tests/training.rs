mod common;

use mmdistill::config::{Ladder, RunConfig};
use mmdistill::optim::{lr_at, Schedule};
use mmdistill::pipeline::{pretrain_encoders, run_ladder, run_teacher};
use mmdistill::synthdata::generate_dataset;
use mmdistill::training::{train_supervised, TrainPlan};
use mmdistill::Error;
use proptest::prelude::*;

fn small() -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            "data.train_size=96".into(),
            "data.val_size=20".into(),
            "data.test_size=20".into(),
            "data.missing_prob=[0.2,0.2,0.3]".into(),
            "pretrain.epochs=1".into(),
            "teacher_plan.epochs=2".into(),
            "student_plan.epochs=2".into(),
        ])
        .unwrap()
}

#[test]
fn teacher_and_student_training_keep_their_invariants() {
    let cfg = small();
    let splits = generate_dataset(&cfg.dataset_spec()).unwrap();
    let bank = pretrain_encoders(&cfg, &splits).unwrap();
    let (teacher, out) = run_teacher(&cfg, &splits, &bank).unwrap();

    // frozen encoders are untouched by teacher training
    for enc in &bank.teacher {
        for (name, value) in &enc.params {
            let id = teacher.store.find(name).unwrap();
            assert_eq!(teacher.store.get(id), value, "{name}");
        }
    }
    assert_eq!(out.log.empty_retained_sets, 0);
    assert!(!out.log.retained_histogram.contains_key(&0));
    assert!(
        out.log.retained_histogram.len() > 1,
        "dropout never removed anything"
    );
    let clip = cfg.teacher_plan().optimizer.clip_norm.unwrap();
    assert!(out.log.max_post_clip_norm <= clip + 1e-9);

    let before = teacher.store.snapshot();
    let (_, sout) = run_ladder(&cfg, &splits, &bank, Some(&teacher), Ladder::FULL).unwrap();
    assert_eq!(
        teacher.store.snapshot(),
        before,
        "distillation changed the teacher"
    );
    assert_eq!(sout.log.empty_retained_sets, 0);
    assert!(sout.log.max_post_clip_norm <= cfg.student_plan.optimizer.clip_norm.unwrap() + 1e-9);
    assert_eq!(sout.metrics.len(), 2);

    let (_, plain) = run_ladder(&cfg, &splits, &bank, None, Ladder::PLAIN).unwrap();
    // without dropout the retained set is exactly the sample's availability
    let avail: usize = splits
        .train
        .samples
        .iter()
        .filter(|s| s.availability().len() == 3)
        .count();
    assert_eq!(
        plain
            .log
            .retained_histogram
            .get(&0b111)
            .copied()
            .unwrap_or(0),
        2 * avail
    );
}

#[test]
fn distillation_without_a_teacher_is_refused() {
    let cfg = small();
    let splits = generate_dataset(&cfg.dataset_spec()).unwrap();
    let bank = pretrain_encoders(&cfg, &splits).unwrap();
    assert!(matches!(
        run_ladder(&cfg, &splits, &bank, None, Ladder::FULL),
        Err(Error::Contract(_))
    ));
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let cfg = small();
    let splits = generate_dataset(&cfg.dataset_spec()).unwrap();
    let mut model =
        mmdistill::model::Model::new(cfg.student_model(Ladder::PLAIN), 0, "boom").unwrap();
    let mut plan = TrainPlan {
        epochs: 3,
        warmup_epochs: 0.0,
        ..cfg.ladder_plan(Ladder::PLAIN)
    };
    plan.optimizer.clip_norm = None;
    plan.base_lr = 1e150;
    plan.peak_lr = 1e150;
    let err = train_supervised(&plan, &splits, &mut model, "boom").unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

proptest! {
    #[test]
    fn schedule_warms_up_then_decays(base in 1e-6f64..1e-4, ratio in 1.0f64..100.0, warm in 0.0f64..10.0, extra in 0.5f64..50.0) {
        let s = Schedule { base_lr: base, peak_lr: base * ratio, warmup_epochs: warm, total_epochs: warm + extra };
        let mut prev = lr_at(0.0, &s);
        let steps = 200;
        for i in 1..=steps {
            let t = s.total_epochs * i as f64 / steps as f64;
            let lr = lr_at(t, &s);
            prop_assert!(lr >= s.base_lr * (1.0 - 1e-12) && lr <= s.peak_lr * (1.0 + 1e-12));
            if t <= warm {
                prop_assert!(lr >= prev - 1e-18);
            } else if t - s.total_epochs / steps as f64 >= warm {
                prop_assert!(lr <= prev + 1e-18);
            }
            prev = lr;
        }
        prop_assert!((lr_at(s.total_epochs, &s) - s.base_lr).abs() <= 1e-12 * s.peak_lr);
    }
}
