//! Fusion-block cost of the full-size teacher and student configurations
//! under different token caps, next to the desk-scale models' measured
//! parameter and activation counts.

use mmdistill::config::{Ladder, RunConfig};
use mmdistill::evaluation::{count_fb_flops, fused_sequence_len, resource_row};
use mmdistill::fusion::FusionConfig;
use mmdistill::model::Model;
use mmdistill::synthdata::{generate_dataset, DatasetSpec};

fn main() -> mmdistill::Result<()> {
    let counts = [785usize, 785, 785];
    println!(
        "{:<8} {:>6} {:>7} {:>18}",
        "config", "theta", "tokens", "fusion FLOPs"
    );
    for (name, cfg) in [
        ("teacher", FusionConfig::teacher()),
        ("student", FusionConfig::student()),
    ] {
        for theta in [None, Some(300), Some(100)] {
            let label = theta.map_or("none".to_string(), |t| t.to_string());
            println!(
                "{name:<8} {label:>6} {:>7} {:>18}",
                fused_sequence_len(&counts, theta),
                count_fb_flops(&cfg, &counts, theta)
            );
        }
    }

    let cfg = RunConfig::default();
    let spec = DatasetSpec {
        train_size: 4,
        val_size: 1,
        test_size: 1,
        ..cfg.dataset_spec()
    };
    let data = generate_dataset(&spec)?.test;
    for (name, mcfg) in [
        ("teacher", cfg.teacher_model()),
        ("student", cfg.student_model(Ladder::FULL)),
    ] {
        let row = resource_row(name, &Model::new(mcfg, 0, name)?, &data)?;
        println!(
            "desk {name}: {} fusion tokens, {} fusion FLOPs, {} parameters, {} activation values per sample",
            row.tokens, row.fb_flops, row.params, row.activation_elements
        );
    }
    Ok(())
}
