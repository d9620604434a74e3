//! End-to-end stages over a [`RunConfig`]: data, encoder pretraining,
//! teacher, students and baselines, evaluation. The in-memory functions are
//! what the file-backed [`Run`] stages call.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::{Ladder, RunConfig};
use crate::encoders::{pretrain_encoder, read_encoder, write_encoder, PretrainedEncoder};
use crate::error::{contract, Error, Result};
use crate::evaluation::{
    dropout_sweep, evaluate_subsets, resource_row, summarize_dropout_ablation, DropoutSummary,
    EvalReport,
};
use crate::modality::ModalitySet;
use crate::model::Model;
use crate::synthdata::{generate_dataset, read_splits, write_splits, Splits};
use crate::training::{
    distill_student, train_supervised, train_teacher, write_metrics_csv, TrainOutcome,
};

/// Pretrained encoders for both networks.
#[derive(Clone, Debug)]
pub struct EncoderBank {
    pub teacher: Vec<PretrainedEncoder>,
    /// Only modalities listed in `student_pretrained`.
    pub student: Vec<PretrainedEncoder>,
}

pub fn pretrain_encoders(cfg: &RunConfig, splits: &Splits) -> Result<EncoderBank> {
    let run = |specs: Vec<crate::encoders::EncoderSpec>, only: Option<&[usize]>| {
        specs
            .into_iter()
            .filter(|s| only.is_none_or(|o| o.contains(&s.modality_id)))
            .map(|mut s| {
                s.trainable = true;
                pretrain_encoder(&s, &splits.train, &splits.val, &cfg.pretrain, cfg.seed)
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(EncoderBank {
        teacher: run(cfg.teacher_model().encoders, None)?,
        student: run(
            cfg.student_model(Ladder::FULL).encoders,
            Some(&cfg.student_pretrained),
        )?,
    })
}

/// Teacher with pretrained, frozen encoders and a fresh fusion block.
pub fn build_teacher(cfg: &RunConfig, bank: &EncoderBank) -> Result<Model> {
    let mut model = Model::new(cfg.teacher_model(), cfg.seed, "teacher")?;
    model.load_encoders(&bank.teacher.iter().collect::<Vec<_>>())?;
    Ok(model)
}

/// Student-size network for a ladder rung; its encoders start from the
/// pretrained student encoders where available and stay trainable.
pub fn build_student(cfg: &RunConfig, bank: &EncoderBank, ladder: Ladder) -> Result<Model> {
    let mut model = Model::new(cfg.student_model(ladder), cfg.seed, "student")?;
    model.load_encoders(&bank.student.iter().collect::<Vec<_>>())?;
    Ok(model)
}

pub fn run_teacher(
    cfg: &RunConfig,
    splits: &Splits,
    bank: &EncoderBank,
) -> Result<(Model, TrainOutcome)> {
    let mut teacher = build_teacher(cfg, bank)?;
    let out = train_teacher(&cfg.teacher_plan(), splits, &mut teacher)?;
    Ok((teacher, out))
}

/// Trains one ladder rung. Rungs with distillation need the teacher.
pub fn run_ladder(
    cfg: &RunConfig,
    splits: &Splits,
    bank: &EncoderBank,
    teacher: Option<&Model>,
    ladder: Ladder,
) -> Result<(Model, TrainOutcome)> {
    let mut student = build_student(cfg, bank, ladder)?;
    let plan = cfg.ladder_plan(ladder);
    let out = if ladder.distillation {
        let teacher = teacher.ok_or_else(|| contract("distillation needs a trained teacher"))?;
        distill_student(&plan, splits, teacher, &mut student)?
    } else {
        train_supervised(&plan, splits, &mut student, "student")?
    };
    Ok((student, out))
}

/// Subset table over every non-empty modality combination plus the
/// inference dropout sweep.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &Model,
    splits: &Splits,
    model_id: &str,
) -> Result<EvalReport> {
    let m = model.num_modalities();
    let mut rows = evaluate_subsets(model, &splits.test, &ModalitySet::all_nonempty(m), model_id)?;
    rows.extend(dropout_sweep(
        model,
        &splits.test,
        &cfg.eval.sweep_probabilities,
        cfg.eval.eval_seed,
        model_id,
    )?);
    Ok(EvalReport {
        seeds: vec![cfg.seed],
        head_names: cfg.data.heads.iter().map(|h| h.name.clone()).collect(),
        modality_names: cfg.data.modality_names(),
        rows,
        resources: vec![resource_row(model_id, model, &splits.test)?],
    })
}

/// File-backed pipeline rooted at `cfg.out_dir`.
///
/// ```text
/// <out>/config.toml                    config echo
/// <out>/data/{train,val,test}.mmds     datasets
/// <out>/encoders/{teacher,student}_<m>.mmck
/// <out>/<model>/model.mmck, metrics.csv, train_log.json
/// <out>/eval/<model>.csv, <model>.json, <model>_sweep.svg
/// ```
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: RunConfig,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    fn need(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    pub fn echo_config(&self) -> Result<()> {
        std::fs::create_dir_all(self.dir())?;
        std::fs::write(self.path("config.toml"), self.cfg.to_toml()?)?;
        Ok(())
    }

    pub fn gen_data(&self) -> Result<Splits> {
        let splits = generate_dataset(&self.cfg.dataset_spec())?;
        write_splits(&self.path("data"), &splits)?;
        Ok(splits)
    }

    pub fn data(&self) -> Result<Splits> {
        read_splits(&self.need("data")?)
    }

    pub fn pretrain_encoders(&self) -> Result<EncoderBank> {
        let bank = pretrain_encoders(&self.cfg, &self.data()?)?;
        for (role, encs) in [("teacher", &bank.teacher), ("student", &bank.student)] {
            for e in encs {
                write_encoder(
                    &self.path(&format!("encoders/{role}_{}.mmck", e.spec.modality_id)),
                    e,
                )?;
            }
        }
        Ok(bank)
    }

    pub fn encoders(&self) -> Result<EncoderBank> {
        let m = self.cfg.data.num_modalities();
        let teacher = (0..m)
            .map(|i| read_encoder(&self.need(&format!("encoders/teacher_{i}.mmck"))?))
            .collect::<Result<Vec<_>>>()?;
        let student = self
            .cfg
            .student_pretrained
            .iter()
            .map(|i| read_encoder(&self.need(&format!("encoders/student_{i}.mmck"))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderBank { teacher, student })
    }

    fn encoders_or_pretrain(&self) -> Result<EncoderBank> {
        match self.encoders() {
            Err(Error::MissingArtifact(_)) => self.pretrain_encoders(),
            other => other,
        }
    }

    fn save_model(&self, name: &str, model: &Model, out: &TrainOutcome) -> Result<()> {
        let heads: Vec<String> = self.cfg.data.heads.iter().map(|h| h.name.clone()).collect();
        write_metrics_csv(
            &self.path(&format!("{name}/metrics.csv")),
            &heads,
            &out.metrics,
        )?;
        std::fs::write(
            self.path(&format!("{name}/train_log.json")),
            serde_json::to_string_pretty(&out.log)?,
        )?;
        model.save(
            &self.path(&format!("{name}/model.mmck")),
            name,
            json!({ "seed": self.cfg.seed, "final_loss": out.final_loss() }),
        )
    }

    pub fn load_model(&self, name: &str) -> Result<Model> {
        Model::load(&self.need(&format!("{name}/model.mmck"))?)
    }

    /// Trains the teacher, pretraining its encoders first if needed.
    pub fn train_teacher(&self) -> Result<(Model, TrainOutcome)> {
        self.train_teacher_as("teacher")
    }

    /// Trains the teacher into `<out>/<name>` instead of `<out>/teacher`.
    pub fn train_teacher_as(&self, name: &str) -> Result<(Model, TrainOutcome)> {
        let splits = self.data()?;
        let bank = self.encoders_or_pretrain()?;
        let (teacher, out) = run_teacher(&self.cfg, &splits, &bank)?;
        self.save_model(name, &teacher, &out)?;
        Ok((teacher, out))
    }

    /// Trains a ladder rung into `<out>/<name>`, distilling from the saved
    /// teacher when the rung asks for it.
    pub fn train_rung(&self, ladder: Ladder, name: &str) -> Result<(Model, TrainOutcome)> {
        let splits = self.data()?;
        let teacher = if ladder.distillation {
            Some(self.load_model("teacher")?)
        } else {
            None
        };
        let bank = self.encoders_or_pretrain()?;
        let (model, out) = run_ladder(&self.cfg, &splits, &bank, teacher.as_ref(), ladder)?;
        self.save_model(name, &model, &out)?;
        Ok((model, out))
    }

    pub fn distill_student(&self) -> Result<(Model, TrainOutcome)> {
        self.train_rung(Ladder::FULL, "student")
    }

    pub fn train_baseline(&self) -> Result<(Model, TrainOutcome)> {
        let ladder = self.cfg.baseline;
        self.train_rung(ladder, &ladder.label())
    }

    /// Inference dropout sweep only, written to `eval/<name>_sweep.csv`.
    pub fn sweep(&self, name: &str) -> Result<EvalReport> {
        let model = self.load_model(name)?;
        let splits = self.data()?;
        let rows = dropout_sweep(
            &model,
            &splits.test,
            &self.cfg.eval.sweep_probabilities,
            self.cfg.eval.eval_seed,
            name,
        )?;
        let report = EvalReport {
            rows,
            ..self.empty_report()
        };
        report.write_csv(&self.path(&format!("eval/{name}_sweep.csv")))?;
        report.write_sweep_svg(&self.path(&format!("eval/{name}_sweep.svg")))?;
        Ok(report)
    }

    fn empty_report(&self) -> EvalReport {
        EvalReport {
            seeds: vec![self.cfg.seed],
            head_names: self.cfg.data.heads.iter().map(|h| h.name.clone()).collect(),
            modality_names: self.cfg.data.modality_names(),
            rows: Vec::new(),
            resources: Vec::new(),
        }
    }

    fn variant(&self, edit: impl FnOnce(&mut RunConfig)) -> Result<Run> {
        let mut cfg = self.cfg.clone();
        edit(&mut cfg);
        Run::new(cfg)
    }

    /// Distills one student per alpha in the grid and evaluates each.
    /// Writes `ablations/alpha.csv`.
    pub fn ablate_alpha(&self) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &alpha in &self.cfg.eval.alpha_grid {
            let run = self.variant(|c| c.student_plan.alpha = alpha)?;
            let name = format!("student-alpha-{alpha}");
            run.train_rung(Ladder::FULL, &name)?;
            let report = run.evaluate(&name)?;
            rows.push(AblationRow::from_report(alpha, &report, &name)?);
        }
        write_ablation_csv(&self.path("ablations/alpha.csv"), "alpha", &rows)?;
        Ok(rows)
    }

    /// Trains one teacher per token cap in the grid; accuracy alongside the
    /// fusion-block FLOPs and memory proxies. Writes `ablations/theta.csv`.
    pub fn ablate_theta(&self) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &theta in &self.cfg.eval.theta_grid {
            let run = self.variant(|c| c.theta = theta)?;
            let name = format!("teacher-theta-{theta}");
            run.train_teacher_as(&name)?;
            let report = run.evaluate(&name)?;
            rows.push(AblationRow::from_report(theta as f64, &report, &name)?);
        }
        write_ablation_csv(&self.path("ablations/theta.csv"), "theta", &rows)?;
        Ok(rows)
    }

    /// Trains one teacher per training-time modality dropout rate and
    /// summarizes accuracy, relative drop and rank over modality subsets.
    /// Writes `ablations/dropout.csv`.
    pub fn ablate_dropout(&self) -> Result<Vec<DropoutSummary>> {
        let mut grid = Vec::new();
        for &rate in &self.cfg.eval.dropout_grid {
            let run = self.variant(|c| c.teacher_plan.modality_dropout_p = rate)?;
            let name = format!("teacher-drop-{rate}");
            run.train_teacher_as(&name)?;
            let report = run.evaluate(&name)?;
            let subset_rows = report
                .rows
                .into_iter()
                .filter(|r| r.subset.is_some())
                .collect();
            grid.push((rate, subset_rows));
        }
        let summary = summarize_dropout_ablation(&grid)?;
        let path = self.path("ablations/dropout.csv");
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rate", "mean_acc", "mean_relative_drop", "mean_rank"])?;
        for s in &summary {
            w.write_record([
                s.rate.to_string(),
                format!("{:.6}", s.mean_acc),
                format!("{:.6}", s.mean_relative_drop),
                format!("{:.4}", s.mean_rank),
            ])?;
        }
        w.flush()?;
        Ok(summary)
    }

    /// Collects every `eval/*.json` report into `report.md`.
    pub fn report(&self) -> Result<String> {
        let dir = self.need("eval")?;
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        let mut md = String::from("# Evaluation report\n");
        for path in names {
            let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            let Some(first) = report.rows.first() else {
                continue;
            };
            md.push_str(&format!(
                "\n## {}\n\n| protocol | subset / p | action |",
                first.model_id
            ));
            md.push_str(&format!(
                " {} |\n|---|---|---|{}\n",
                report.head_names.join(" | "),
                "---|".repeat(report.head_names.len())
            ));
            for r in &report.rows {
                let what = match (r.subset, r.probability) {
                    (Some(s), _) => s.label(&report.modality_names),
                    (_, Some(p)) => format!("p={p}"),
                    _ => String::new(),
                };
                let heads: Vec<String> = r
                    .head_acc
                    .iter()
                    .map(|a| format!("{:.2}", 100.0 * a))
                    .collect();
                md.push_str(&format!(
                    "| {:?} | {what} | {:.2} | {} |\n",
                    r.protocol,
                    100.0 * r.action_acc,
                    heads.join(" | ")
                ));
            }
            for res in &report.resources {
                md.push_str(&format!(
                    "\nfusion tokens {}, fusion FLOPs {}, parameters {}, activation values {}\n",
                    res.tokens, res.fb_flops, res.params, res.activation_elements
                ));
            }
        }
        std::fs::write(self.path("report.md"), &md)?;
        Ok(md)
    }

    pub fn evaluate(&self, name: &str) -> Result<EvalReport> {
        let model = self.load_model(name)?;
        let report = evaluate_model(&self.cfg, &model, &self.data()?, name)?;
        report.write_csv(&self.path(&format!("eval/{name}.csv")))?;
        report.write_resources_csv(&self.path(&format!("eval/{name}_resources.csv")))?;
        report.write_json(&self.path(&format!("eval/{name}.json")))?;
        report.write_sweep_svg(&self.path(&format!("eval/{name}_sweep.svg")))?;
        Ok(report)
    }
}

/// One grid point of an ablation: full-modality accuracy, accuracy under
/// the strongest inference dropout, and the model's resource row.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct AblationRow {
    pub value: f64,
    pub model_id: String,
    pub head_acc: Vec<f64>,
    pub action_acc: f64,
    pub worst_sweep_action_acc: f64,
    pub tokens: usize,
    pub fb_flops: u128,
    pub params: usize,
    pub activation_elements: usize,
}

impl AblationRow {
    fn from_report(value: f64, report: &EvalReport, model_id: &str) -> Result<Self> {
        let full = report
            .rows
            .iter()
            .filter(|r| r.subset.is_some())
            .max_by_key(|r| r.subset.map_or(0, |s| s.len()))
            .ok_or_else(|| contract("report has no subset rows"))?;
        let worst = report
            .rows
            .iter()
            .filter(|r| r.probability.is_some())
            .max_by(|a, b| {
                a.probability
                    .partial_cmp(&b.probability)
                    .expect("finite probabilities")
            })
            .map_or(f64::NAN, |r| r.action_acc);
        let res = report
            .resources
            .first()
            .ok_or_else(|| contract("report has no resource row"))?;
        Ok(Self {
            value,
            model_id: model_id.to_string(),
            head_acc: full.head_acc.clone(),
            action_acc: full.action_acc,
            worst_sweep_action_acc: worst,
            tokens: res.tokens,
            fb_flops: res.fb_flops,
            params: res.params,
            activation_elements: res.activation_elements,
        })
    }
}

fn write_ablation_csv(path: &Path, key: &str, rows: &[AblationRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        key,
        "model_id",
        "action_acc",
        "worst_sweep_action_acc",
        "tokens",
        "fb_flops",
        "params",
        "activation_elements",
    ])?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.model_id.clone(),
            format!("{:.6}", r.action_acc),
            format!("{:.6}", r.worst_sweep_action_acc),
            r.tokens.to_string(),
            r.fb_flops.to_string(),
            r.params.to_string(),
            r.activation_elements.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
