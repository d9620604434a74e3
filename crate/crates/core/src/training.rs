//! Two-stage training: a teacher trained with cross-entropy under modality
//! dropout, then a student distilled from the frozen teacher with
//! `alpha * CE + (1 - alpha) * KL(teacher || student)`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::modality::ModalitySet;
use crate::model::{FeatureCache, Model};
use crate::optim::{lr_at, AdamW, AdamWConfig, Schedule};
use crate::rng::{RngStream, StreamId};
use crate::synthdata::{Dataset, Splits};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Cross-entropy only (teacher and baselines).
    Teacher,
    /// Mixed cross-entropy and KL against a frozen teacher.
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-modality drop probability; 0 disables modality dropout.
    pub modality_dropout_p: f64,
    pub alpha: f64,
    pub optimizer: AdamWConfig,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub seed: u64,
}

impl TrainPlan {
    /// Teacher hyperparameters: p = 0.5, lr 1e-5 -> 5e-4 over 10 warmup
    /// epochs, weight decay 0.05, clip 1.0.
    pub fn teacher() -> Self {
        Self {
            stage: Stage::Teacher,
            epochs: 40,
            batch_size: 32,
            modality_dropout_p: 0.5,
            alpha: 1.0,
            optimizer: AdamWConfig::with_decay(0.05, 1.0),
            base_lr: 1e-5,
            peak_lr: 5e-4,
            warmup_epochs: 10.0,
            seed: 0,
        }
    }

    /// Student hyperparameters: alpha = 0.7, weight decay 0.01, clip 2.0,
    /// peak lr 1e-4, everything else inherited from the teacher.
    pub fn student() -> Self {
        Self {
            stage: Stage::Distill,
            alpha: 0.7,
            optimizer: AdamWConfig::with_decay(0.01, 2.0),
            peak_lr: 1e-4,
            ..Self::teacher()
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            peak_lr: self.peak_lr,
            warmup_epochs: self.warmup_epochs.min(self.epochs as f64),
            total_epochs: self.epochs as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.modality_dropout_p) {
            return Err(config("modality dropout probability must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config("alpha must lie in [0, 1]"));
        }
        self.schedule().validate()
    }
}

/// Drops each available modality independently with probability `p`,
/// redrawing until at least one survives.
pub fn modality_dropout(
    available: ModalitySet,
    p: f64,
    rng: &mut RngStream,
) -> Result<ModalitySet> {
    if available.is_empty() {
        return Err(contract("modality dropout needs a non-empty modality set"));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(config("modality dropout probability must lie in [0, 1)"));
    }
    if p == 0.0 {
        return Ok(available);
    }
    loop {
        let kept = available
            .iter()
            .filter(|_| !rng.bernoulli(p))
            .fold(ModalitySet::EMPTY, |s, m| s.with(m));
        if !kept.is_empty() {
            return Ok(kept);
        }
    }
}

/// `alpha * ce + (1 - alpha) * kl`.
pub fn student_loss(ce: f64, kl: f64, alpha: f64) -> f64 {
    alpha * ce + (1.0 - alpha) * kl
}

/// Mean over heads of the batch-mean softmax cross-entropy.
pub fn ce_loss(g: &mut Graph, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(contract("one label vector per head is required"));
    }
    let terms = logits
        .iter()
        .zip(labels)
        .map(|(&l, y)| g.softmax_cross_entropy(l, y))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / terms.len() as f64;
    g.weighted_sum(&terms.iter().map(|&t| (t, w)).collect::<Vec<_>>())
}

/// Mean over heads of the batch-mean `KL(teacher || student)`.
pub fn kl_loss(g: &mut Graph, teacher: &[Tensor], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(contract("teacher and student must have the same heads"));
    }
    let terms = teacher
        .iter()
        .zip(student)
        .map(|(t, &s)| g.kl_divergence(t, s))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / terms.len() as f64;
    g.weighted_sum(&terms.iter().map(|&t| (t, w)).collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_head_acc: Vec<f64>,
    pub val_action_acc: f64,
}

/// Step-level facts gathered during training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    pub samples_seen: usize,
    /// How often each retained modality set (as bitmask) was used.
    pub retained_histogram: BTreeMap<u32, usize>,
    pub empty_retained_sets: usize,
    pub clip_events: usize,
    /// Largest post-clip global norm over steps where clipping fired.
    pub max_post_clip_norm: f64,
}

impl TrainLog {
    fn record_retained(&mut self, sets: &[ModalitySet]) {
        for s in sets {
            if s.is_empty() {
                self.empty_retained_sets += 1;
            }
            *self.retained_histogram.entry(s.bits()).or_default() += 1;
        }
        self.samples_seen += sets.len();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.train_loss)
    }
}

/// Top-1 accuracy per head plus action accuracy (every head correct).
pub fn accuracy(
    model: &Model,
    data: &Dataset,
    retained: &[ModalitySet],
    cache: Option<&FeatureCache>,
) -> Result<(Vec<f64>, f64)> {
    let heads = model.cfg.head_classes.len();
    let mut correct = vec![0usize; heads];
    let mut action = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for (chunk, sets) in idx.chunks(64).zip(retained.chunks(64)) {
        let logits = model.logits(data, chunk, sets, cache)?;
        for (b, &i) in chunk.iter().enumerate() {
            let mut all = true;
            for h in 0..heads {
                let ok = crate::encoders::argmax(logits[h].row(b)) == data.samples[i].label[h];
                correct[h] += ok as usize;
                all &= ok;
            }
            action += all as usize;
        }
    }
    let n = data.len() as f64;
    Ok((
        correct.iter().map(|&c| c as f64 / n).collect(),
        action as f64 / n,
    ))
}

fn labels_for(data: &Dataset, idx: &[usize], heads: usize) -> Vec<Vec<usize>> {
    (0..heads)
        .map(|h| idx.iter().map(|&i| data.samples[i].label[h]).collect())
        .collect()
}

fn collect_grads(g: &Graph, bound: &crate::nn::Bound) -> Vec<Option<Vec<f64>>> {
    bound
        .vars()
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec))
        .collect()
}

/// Inputs are finite, so non-finite activations mid-training mean the
/// parameters have blown up.
fn diverged(err: Error, tag: &str, epoch: usize) -> Error {
    match err {
        Error::InvalidValue(msg) => Error::Divergence(format!("{tag} at epoch {epoch}: {msg}")),
        other => other,
    }
}

struct Loop<'a> {
    plan: &'a TrainPlan,
    splits: &'a Splits,
    tag: &'static str,
}

impl Loop<'_> {
    fn run<F>(&self, model: &mut Model, mut step_loss: F) -> Result<TrainOutcome>
    where
        F: FnMut(
            &Model,
            &mut Graph,
            &crate::nn::Bound,
            &[usize],
            &[ModalitySet],
            &mut RngStream,
        ) -> Result<Var>,
    {
        self.plan.validate()?;
        let train = &self.splits.train;
        if train.is_empty() {
            return Err(config("empty training split"));
        }
        let schedule = self.plan.schedule();
        let mut opt = AdamW::new(self.plan.optimizer, &model.store);
        let mut shuffle = RngStream::with_tag(
            self.plan.seed,
            StreamId::Data,
            &format!("shuffle/{}", self.tag),
        );
        let mut drop_rng = RngStream::with_tag(
            self.plan.seed,
            StreamId::Dropout,
            &format!("modality/{}", self.tag),
        );
        let mut attn_rng = RngStream::with_tag(
            self.plan.seed,
            StreamId::Dropout,
            &format!("attention/{}", self.tag),
        );
        let val_cache = if model.encoders_frozen() {
            Some(model.feature_cache(&self.splits.val)?)
        } else {
            None
        };
        let val_sets: Vec<ModalitySet> = self
            .splits
            .val
            .samples
            .iter()
            .map(|s| s.availability())
            .collect();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let steps_per_epoch = train.len().div_ceil(self.plan.batch_size);
        let mut log = TrainLog::default();
        let mut metrics = Vec::with_capacity(self.plan.epochs);
        for epoch in 0..self.plan.epochs {
            shuffle.shuffle(&mut order);
            let mut loss_sum = 0.0;
            let mut lr = schedule.base_lr;
            for (s, chunk) in order.chunks(self.plan.batch_size).enumerate() {
                let sets = chunk
                    .iter()
                    .map(|&i| {
                        modality_dropout(
                            train.samples[i].availability(),
                            self.plan.modality_dropout_p,
                            &mut drop_rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                log.record_retained(&sets);
                lr = lr_at(epoch as f64 + s as f64 / steps_per_epoch as f64, &schedule);
                let mut g = Graph::new();
                let bound = model.store.bind(&mut g);
                let loss = step_loss(model, &mut g, &bound, chunk, &sets, &mut attn_rng)
                    .map_err(|e| diverged(e, self.tag, epoch))?;
                let lv = g.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::Divergence(format!(
                        "{} loss is {lv} at epoch {epoch}, step {s}",
                        self.tag
                    )));
                }
                g.backward(loss)?;
                let grads = collect_grads(&g, &bound);
                let info = opt.step(&mut model.store, &grads, lr);
                if info.clipped {
                    log.clip_events += 1;
                    log.max_post_clip_norm = log.max_post_clip_norm.max(info.post_clip_norm);
                }
                log.steps += 1;
                loss_sum += lv * chunk.len() as f64;
            }
            let (head_acc, action) =
                accuracy(model, &self.splits.val, &val_sets, val_cache.as_ref())
                    .map_err(|e| diverged(e, self.tag, epoch))?;
            metrics.push(EpochMetrics {
                epoch: epoch + 1,
                lr,
                train_loss: loss_sum / train.len() as f64,
                val_head_acc: head_acc,
                val_action_acc: action,
            });
        }
        Ok(TrainOutcome { metrics, log })
    }
}

/// Cross-entropy training of every trainable parameter of `model`.
///
/// Used for the teacher (frozen encoders, whose features are computed once
/// and cached) and for the end-to-end baselines.
pub fn train_supervised(
    plan: &TrainPlan,
    splits: &Splits,
    model: &mut Model,
    tag: &'static str,
) -> Result<TrainOutcome> {
    let cache = if model.encoders_frozen() {
        Some(model.feature_cache(&splits.train)?)
    } else {
        None
    };
    let heads = model.cfg.head_classes.len();
    let train = &splits.train;
    Loop { plan, splits, tag }.run(model, |m, g, p, idx, sets, attn| {
        let fwd = m.forward(g, p, train, idx, sets, cache.as_ref(), Some(attn))?;
        ce_loss(g, &fwd.logits, &labels_for(train, idx, heads))
    })
}

/// Trains the teacher's fusion block and heads; its encoders must be frozen.
pub fn train_teacher(
    plan: &TrainPlan,
    splits: &Splits,
    teacher: &mut Model,
) -> Result<TrainOutcome> {
    if !teacher.encoders_frozen() {
        return Err(contract(
            "teacher encoders must be frozen before teacher training",
        ));
    }
    train_supervised(plan, splits, teacher, "teacher")
}

/// Distills a frozen teacher into `student`. Teacher and student see the
/// same retained modality set for every sample; the teacher runs in
/// inference mode, so its logits per (sample, retained set) are memoized.
pub fn distill_student(
    plan: &TrainPlan,
    splits: &Splits,
    teacher: &Model,
    student: &mut Model,
) -> Result<TrainOutcome> {
    if plan.stage != Stage::Distill {
        return Err(config("distill_student needs a plan with stage = distill"));
    }
    if teacher.cfg.head_classes != student.cfg.head_classes {
        return Err(contract("teacher and student heads differ"));
    }
    let train = &splits.train;
    let teacher_cache = if teacher.encoders_frozen() {
        Some(teacher.feature_cache(train)?)
    } else {
        None
    };
    let heads = student.cfg.head_classes.len();
    let alpha = plan.alpha;
    let mut memo: HashMap<(usize, u32), Vec<Vec<f64>>> = HashMap::new();
    Loop {
        plan,
        splits,
        tag: "student",
    }
    .run(student, |m, g, p, idx, sets, attn| {
        let missing: Vec<(usize, ModalitySet)> = idx
            .iter()
            .zip(sets)
            .filter(|(&i, s)| !memo.contains_key(&(i, s.bits())))
            .map(|(&i, &s)| (i, s))
            .collect();
        if !missing.is_empty() {
            let mi: Vec<usize> = missing.iter().map(|x| x.0).collect();
            let ms: Vec<ModalitySet> = missing.iter().map(|x| x.1).collect();
            let tl = teacher.logits(train, &mi, &ms, teacher_cache.as_ref())?;
            for (b, &(i, s)) in missing.iter().enumerate() {
                memo.insert(
                    (i, s.bits()),
                    tl.iter().map(|t| t.row(b).to_vec()).collect(),
                );
            }
        }
        let teacher_logits = (0..heads)
            .map(|h| {
                let rows: Vec<Vec<f64>> = idx
                    .iter()
                    .zip(sets)
                    .map(|(&i, s)| memo[&(i, s.bits())][h].clone())
                    .collect();
                Tensor::from_rows(&rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let fwd = m.forward(g, p, train, idx, sets, None, Some(attn))?;
        let ce = ce_loss(g, &fwd.logits, &labels_for(train, idx, heads))?;
        if alpha == 1.0 {
            return Ok(ce);
        }
        let kl = kl_loss(g, &teacher_logits, &fwd.logits)?;
        g.weighted_sum(&[(ce, alpha), (kl, 1.0 - alpha)])
    })
}

/// Writes `epoch,lr,train_loss,val_acc_<head>...,val_action_acc`.
pub fn write_metrics_csv(
    path: &Path,
    head_names: &[String],
    metrics: &[EpochMetrics],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "lr".into(), "train_loss".into()];
    header.extend(head_names.iter().map(|h| format!("val_acc_{h}")));
    header.push("val_action_acc".into());
    w.write_record(&header)?;
    for m in metrics {
        let mut row = vec![
            m.epoch.to_string(),
            format!("{:e}", m.lr),
            format!("{:.12}", m.train_loss),
        ];
        row.extend(m.val_head_acc.iter().map(|a| format!("{a:.6}")));
        row.push(format!("{:.6}", m.val_action_acc));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_edge_cases() {
        let mut rng = RngStream::new(0, StreamId::Dropout);
        let full = ModalitySet::full(3);
        assert_eq!(modality_dropout(full, 0.0, &mut rng).unwrap(), full);
        let single = ModalitySet::from_indices(&[1]).unwrap();
        for _ in 0..100 {
            assert_eq!(modality_dropout(single, 0.9, &mut rng).unwrap(), single);
        }
        assert!(modality_dropout(ModalitySet::EMPTY, 0.5, &mut rng).is_err());
        assert!(modality_dropout(full, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_never_adds_modalities() {
        let mut rng = RngStream::new(1, StreamId::Dropout);
        let avail = ModalitySet::from_indices(&[0, 2]).unwrap();
        for _ in 0..1000 {
            let r = modality_dropout(avail, 0.7, &mut rng).unwrap();
            assert!(!r.is_empty() && r.is_subset_of(avail));
        }
    }

    #[test]
    fn loss_closed_forms() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let ce = ce_loss(&mut g, &[uniform], &[vec![0]]).unwrap();
        assert!((g.value(ce).data()[0] - 2f64.ln()).abs() < 1e-12);

        let t = Tensor::matrix(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let s = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let kl = kl_loss(&mut g, std::slice::from_ref(&t), &[s]).unwrap();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((g.value(kl).data()[0] - want).abs() < 1e-12);

        let same = g.constant(t.clone());
        let zero = kl_loss(&mut g, &[t], &[same]).unwrap();
        assert!(g.value(zero).data()[0].abs() < 1e-15);

        assert_eq!(student_loss(1.0, 0.5, 0.7), 0.85);
        assert_eq!(student_loss(1.3, 0.2, 1.0), 1.3);
        assert_eq!(student_loss(1.3, 0.2, 0.0), 0.2);
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[2, 3]));
        assert!(kl_loss(&mut g, &[Tensor::zeros(&[2, 2])], &[s]).is_err());
    }

    #[test]
    fn plan_defaults() {
        let t = TrainPlan::teacher();
        assert_eq!(t.modality_dropout_p, 0.5);
        assert_eq!(t.optimizer.weight_decay, 0.05);
        assert_eq!(t.optimizer.clip_norm, Some(1.0));
        let s = TrainPlan::student();
        assert_eq!(s.alpha, 0.7);
        assert_eq!(s.optimizer.weight_decay, 0.01);
        assert_eq!(s.optimizer.clip_norm, Some(2.0));
        assert_eq!(s.peak_lr, 1e-4);
    }
}
