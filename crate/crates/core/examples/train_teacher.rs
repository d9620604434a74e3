//! Pretrain per-modality encoders, then train the teacher on top of them
//! with modality dropout. Extra arguments are `key=value` config overrides.
//!
//! cargo run --release --example train_teacher -- teacher_plan.epochs=5

use mmdistill::config::RunConfig;
use mmdistill::pipeline::{pretrain_encoders, run_teacher};
use mmdistill::synthdata::generate_dataset;

fn main() -> mmdistill::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::default().with_overrides(&overrides)?;
    let splits = generate_dataset(&cfg.dataset_spec())?;
    let bank = pretrain_encoders(&cfg, &splits)?;
    for enc in &bank.teacher {
        println!(
            "encoder {} probe accuracy per proxy head {:?}",
            enc.spec.modality_id, enc.probe_accuracy
        );
    }
    let (teacher, out) = run_teacher(&cfg, &splits, &bank)?;
    for m in &out.metrics {
        println!(
            "epoch {:>2} lr {:.2e} loss {:.4} val heads {:?} action {:.3}",
            m.epoch, m.lr, m.train_loss, m.val_head_acc, m.val_action_acc
        );
    }
    println!(
        "retained modality sets (bitmask -> count): {:?}",
        out.log.retained_histogram
    );
    println!("teacher parameters: {}", teacher.param_count());
    Ok(())
}
