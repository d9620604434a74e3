//! The enhancement ladder on one seed: plain baseline, baseline with
//! modality dropout and missing-modality tokens, and the distilled student.
//! Extra arguments are `key=value` config overrides.

use mmdistill::config::{Ladder, RunConfig};
use mmdistill::evaluation::evaluate_subsets;
use mmdistill::modality::ModalitySet;
use mmdistill::pipeline::{pretrain_encoders, run_ladder, run_teacher};
use mmdistill::synthdata::generate_dataset;

fn main() -> mmdistill::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::default().with_overrides(&overrides)?;
    let splits = generate_dataset(&cfg.dataset_spec())?;
    let bank = pretrain_encoders(&cfg, &splits)?;
    let (teacher, _) = run_teacher(&cfg, &splits, &bank)?;
    let full = [ModalitySet::full(cfg.data.num_modalities())];
    let acc = |m: &mmdistill::model::Model| -> mmdistill::Result<f64> {
        Ok(evaluate_subsets(m, &splits.test, &full, "m")?[0].action_acc)
    };
    println!(
        "{:<28} {:.3}  ({} parameters)",
        "teacher",
        acc(&teacher)?,
        teacher.param_count()
    );
    for ladder in [
        Ladder::PLAIN,
        Ladder::DROPOUT,
        Ladder::ENHANCED,
        Ladder::FULL,
    ] {
        let (model, _) = run_ladder(&cfg, &splits, &bank, Some(&teacher), ladder)?;
        println!(
            "{:<28} {:.3}  ({} parameters)",
            ladder.label(),
            acc(&model)?,
            model.param_count()
        );
    }
    Ok(())
}
