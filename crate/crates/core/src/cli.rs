//! Command-line front end: one subcommand per pipeline stage, all sharing a
//! run configuration and writing into its run directory.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{Ladder, RunConfig};
use crate::error::{Error, Result};
use crate::pipeline::Run;

/// Exit status for a usage error, including an unknown subcommand.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_MISSING_ARTIFACT: u8 = 4;
pub const EXIT_DIVERGENCE: u8 = 5;
pub const EXIT_OTHER: u8 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "mmdistill",
    version,
    about = "Multimodal teacher-student distillation robust to missing modalities"
)]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dotted-key override such as `student_plan.alpha=0.4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train/val/test splits.
    GenData,
    /// Pretrain the per-modality encoders of both networks.
    PretrainEncoders,
    /// Train the teacher on frozen pretrained encoders.
    TrainTeacher,
    /// Distill the student from the saved teacher.
    DistillStudent,
    /// Train a student-size baseline from the enhancement ladder.
    TrainBaseline {
        /// Ladder rung: plain, dropout, enhanced or full. Defaults to the
        /// config's `baseline` toggles.
        #[arg(long)]
        rung: Option<String>,
    },
    /// Subset table, inference dropout sweep and resource row for a model.
    Evaluate {
        #[arg(long, default_value = "student")]
        model: String,
    },
    /// Inference dropout sweep only.
    Sweep {
        #[arg(long, default_value = "student")]
        model: String,
    },
    /// One distilled student per alpha in the grid.
    AblateAlpha,
    /// One teacher per token cap in the grid.
    AblateTheta,
    /// One teacher per training-time modality dropout rate.
    AblateDropout,
    /// Collect evaluation reports into report.md.
    Report,
}

/// Maps a library error to its process exit status.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING_ARTIFACT,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

pub fn parse_rung(name: &str) -> Result<Ladder> {
    match name {
        "plain" => Ok(Ladder::PLAIN),
        "dropout" => Ok(Ladder::DROPOUT),
        "enhanced" => Ok(Ladder::ENHANCED),
        "full" => Ok(Ladder::FULL),
        other => Err(Error::Config(format!(
            "unknown ladder rung {other:?}; expected plain, dropout, enhanced or full"
        ))),
    }
}

/// Resolves the run configuration: file or defaults, then `--set`, then
/// `--seed` and `--out`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one subcommand and returns a one-line summary.
pub fn run(cli: &Cli) -> Result<String> {
    let run = Run::new(resolve_config(cli)?)?;
    run.echo_config()?;
    let dir = run.dir().display().to_string();
    Ok(match &cli.command {
        Command::GenData => {
            let s = run.gen_data()?;
            format!(
                "wrote {} / {} / {} samples to {dir}/data",
                s.train.len(),
                s.val.len(),
                s.test.len()
            )
        }
        Command::PretrainEncoders => {
            let bank = run.pretrain_encoders()?;
            let probes: Vec<String> = bank
                .teacher
                .iter()
                .map(|e| format!("{}:{:.3}", e.spec.modality_id, mean(&e.probe_accuracy)))
                .collect();
            format!(
                "pretrained {} teacher and {} student encoders (probe {})",
                bank.teacher.len(),
                bank.student.len(),
                probes.join(" ")
            )
        }
        Command::TrainTeacher => {
            let (_, out) = run.train_teacher()?;
            format!(
                "teacher trained, final loss {:.4}, written to {dir}/teacher",
                out.final_loss()
            )
        }
        Command::DistillStudent => {
            let (_, out) = run.distill_student()?;
            format!(
                "student distilled, final loss {:.4}, written to {dir}/student",
                out.final_loss()
            )
        }
        Command::TrainBaseline { rung } => {
            let ladder = match rung {
                Some(r) => parse_rung(r)?,
                None => run.cfg.baseline,
            };
            let name = ladder.label();
            let (_, out) = run.train_rung(ladder, &name)?;
            format!(
                "{name} trained, final loss {:.4}, written to {dir}/{name}",
                out.final_loss()
            )
        }
        Command::Evaluate { model } => {
            let report = run.evaluate(model)?;
            let full = report
                .rows
                .iter()
                .filter(|r| r.subset.is_some())
                .max_by_key(|r| r.subset.map_or(0, |s| s.len()));
            format!(
                "{model}: full-modality action accuracy {:.4}, report in {dir}/eval",
                full.map_or(f64::NAN, |r| r.action_acc)
            )
        }
        Command::Sweep { model } => {
            let report = run.sweep(model)?;
            let accs: Vec<String> = report
                .rows
                .iter()
                .map(|r| format!("{}:{:.3}", r.probability.unwrap_or(f64::NAN), r.action_acc))
                .collect();
            format!("{model} sweep {}", accs.join(" "))
        }
        Command::AblateAlpha => {
            let rows = run.ablate_alpha()?;
            let s: Vec<String> = rows
                .iter()
                .map(|r| format!("{}:{:.4}", r.value, r.action_acc))
                .collect();
            format!(
                "alpha ablation {} -> {dir}/ablations/alpha.csv",
                s.join(" ")
            )
        }
        Command::AblateTheta => {
            let rows = run.ablate_theta()?;
            let s: Vec<String> = rows
                .iter()
                .map(|r| format!("{}:{:.4}/{}", r.value, r.action_acc, r.fb_flops))
                .collect();
            format!(
                "theta ablation {} -> {dir}/ablations/theta.csv",
                s.join(" ")
            )
        }
        Command::AblateDropout => {
            let rows = run.ablate_dropout()?;
            let s: Vec<String> = rows
                .iter()
                .map(|r| format!("{}:{:.4}", r.rate, r.mean_acc))
                .collect();
            format!(
                "dropout ablation {} -> {dir}/ablations/dropout.csv",
                s.join(" ")
            )
        }
        Command::Report => {
            run.report()?;
            format!("wrote {dir}/report.md")
        }
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_are_global() {
        let cli = Cli::try_parse_from([
            "mmdistill",
            "gen-data",
            "--seed",
            "3",
            "--set",
            "theta=8",
            "--set",
            "student_plan.alpha=0.4",
        ])
        .unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.theta, 8);
        assert_eq!(cfg.student_plan.alpha, 0.4);
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let err = Cli::try_parse_from(["mmdistill", "train-everything"]).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE as i32);
    }

    #[test]
    fn error_kinds_map_to_distinct_codes() {
        let codes = [
            exit_code(&Error::Config(String::new())),
            exit_code(&Error::MissingArtifact(PathBuf::new())),
            exit_code(&Error::Divergence(String::new())),
            exit_code(&Error::Contract(String::new())),
        ];
        for (i, a) in codes.iter().enumerate() {
            assert_ne!(*a, EXIT_USAGE);
            for b in &codes[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn rung_names() {
        assert_eq!(parse_rung("full").unwrap(), Ladder::FULL);
        assert!(matches!(parse_rung("turbo"), Err(Error::Config(_))));
    }
}
