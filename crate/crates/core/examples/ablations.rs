//! The file-backed pipeline and its ablation loops on a shrunken config:
//! alpha, token cap and training-time modality dropout. Artifacts land in
//! `runs/example-ablations/`.

use mmdistill::config::RunConfig;
use mmdistill::pipeline::Run;

fn main() -> mmdistill::Result<()> {
    let mut overrides: Vec<String> = [
        "out_dir=\"runs/example-ablations\"",
        "data.train_size=800",
        "data.val_size=200",
        "data.test_size=300",
        "teacher_plan.epochs=6",
        "student_plan.epochs=6",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(std::env::args().skip(1));
    let run = Run::new(RunConfig::default().with_overrides(&overrides)?)?;
    run.echo_config()?;
    run.gen_data()?;
    run.pretrain_encoders()?;
    run.train_teacher()?;
    for r in run.ablate_alpha()? {
        println!(
            "alpha {:<4} action {:.3}  at p=0.9 {:.3}",
            r.value, r.action_acc, r.worst_sweep_action_acc
        );
    }
    for r in run.ablate_theta()? {
        println!(
            "theta {:<4} action {:.3}  tokens {:>4}  fusion FLOPs {:>9}  activations {}",
            r.value, r.action_acc, r.tokens, r.fb_flops, r.activation_elements
        );
    }
    for s in run.ablate_dropout()? {
        println!(
            "dropout {:<4} mean acc {:.3}  relative drop {:.3}  mean rank {:.2}",
            s.rate, s.mean_acc, s.mean_relative_drop, s.mean_rank
        );
    }
    run.report()?;
    println!("report at {}", run.dir().join("report.md").display());
    Ok(())
}
