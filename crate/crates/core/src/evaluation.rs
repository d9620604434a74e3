//! Evaluation protocols: accuracy per inference modality subset, inference
//! modality-dropout sweeps, dropout-rate summaries and resource accounting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::fusion::FusionConfig;
use crate::modality::ModalitySet;
use crate::model::Model;
use crate::rng::{RngStream, StreamId};
use crate::synthdata::Dataset;
use crate::training::{accuracy, modality_dropout};

pub const REPORT_SCHEMA: &str = "mmdistill.report/1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Subset,
    Sweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model_id: String,
    pub protocol: Protocol,
    /// Requested modality subset (subset protocol only).
    pub subset: Option<ModalitySet>,
    /// Inference dropout probability (sweep protocol only).
    pub probability: Option<f64>,
    pub head_acc: Vec<f64>,
    pub action_acc: f64,
    pub samples: usize,
}

/// Accuracy with every test sample restricted to `S ∩ availability`.
/// Samples left with nothing take the absent branch for every modality.
pub fn evaluate_subsets(
    model: &Model,
    data: &Dataset,
    subsets: &[ModalitySet],
    model_id: &str,
) -> Result<Vec<EvalRow>> {
    if let Some(s) = subsets.iter().find(|s| s.is_empty()) {
        return Err(contract(format!(
            "cannot evaluate the empty modality subset {s}"
        )));
    }
    let cache = if model.encoders_frozen() {
        Some(model.feature_cache(data)?)
    } else {
        None
    };
    subsets
        .iter()
        .map(|&s| {
            let retained: Vec<ModalitySet> = data
                .samples
                .iter()
                .map(|x| s.intersect(x.availability()))
                .collect();
            let (head_acc, action_acc) = accuracy(model, data, &retained, cache.as_ref())?;
            Ok(EvalRow {
                model_id: model_id.to_string(),
                protocol: Protocol::Subset,
                subset: Some(s),
                probability: None,
                head_acc,
                action_acc,
                samples: data.len(),
            })
        })
        .collect()
}

/// Retained sets for an inference sweep point: the training sampler applied
/// per sample, each on its own eval substream so curves are comparable
/// across models.
pub fn sweep_retained(data: &Dataset, p: f64, eval_seed: u64) -> Result<Vec<ModalitySet>> {
    data.samples
        .iter()
        .map(|s| {
            let mut rng = RngStream::with_tag(
                eval_seed,
                StreamId::Eval,
                &format!("sweep/{p}/{}", s.sample_id),
            );
            modality_dropout(s.availability(), p, &mut rng)
        })
        .collect()
}

pub fn dropout_sweep(
    model: &Model,
    data: &Dataset,
    probabilities: &[f64],
    eval_seed: u64,
    model_id: &str,
) -> Result<Vec<EvalRow>> {
    let cache = if model.encoders_frozen() {
        Some(model.feature_cache(data)?)
    } else {
        None
    };
    probabilities
        .iter()
        .map(|&p| {
            let retained = sweep_retained(data, p, eval_seed)?;
            let (head_acc, action_acc) = accuracy(model, data, &retained, cache.as_ref())?;
            Ok(EvalRow {
                model_id: model_id.to_string(),
                protocol: Protocol::Sweep,
                subset: None,
                probability: Some(p),
                head_acc,
                action_acc,
                samples: data.len(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSummary {
    pub rate: f64,
    pub mean_acc: f64,
    /// Mean of `(acc_full - acc_S) / acc_full` over subsets.
    pub mean_relative_drop: f64,
    /// Mean rank across subsets (1 = best, ties share the mean rank).
    pub mean_rank: f64,
}

/// Summarizes subset evaluations of models trained at different modality
/// dropout rates. Each grid entry holds one row per subset, in the same
/// subset order; the largest subset is the full-modality reference.
pub fn summarize_dropout_ablation(grid: &[(f64, Vec<EvalRow>)]) -> Result<Vec<DropoutSummary>> {
    let Some((_, first)) = grid.first() else {
        return Err(contract("dropout ablation needs at least one trained rate"));
    };
    let subsets: Vec<Option<ModalitySet>> = first.iter().map(|r| r.subset).collect();
    if subsets.is_empty()
        || grid
            .iter()
            .any(|(_, rows)| rows.iter().map(|r| r.subset).collect::<Vec<_>>() != subsets)
    {
        return Err(contract(
            "every rate must be evaluated on the same non-empty subset list",
        ));
    }
    let full = (0..subsets.len())
        .max_by_key(|&i| subsets[i].map_or(0, |s| s.len()))
        .expect("non-empty");
    let mut ranks = vec![0.0; grid.len()];
    for j in 0..subsets.len() {
        let accs: Vec<f64> = grid.iter().map(|(_, rows)| rows[j].action_acc).collect();
        for (i, r) in average_ranks(&accs).into_iter().enumerate() {
            ranks[i] += r;
        }
    }
    let n = subsets.len() as f64;
    Ok(grid
        .iter()
        .zip(ranks)
        .map(|((rate, rows), rank)| {
            let reference = rows[full].action_acc;
            let drop: f64 = rows
                .iter()
                .map(|r| {
                    if reference > 0.0 {
                        (reference - r.action_acc) / reference
                    } else {
                        0.0
                    }
                })
                .sum();
            DropoutSummary {
                rate: *rate,
                mean_acc: rows.iter().map(|r| r.action_acc).sum::<f64>() / n,
                mean_relative_drop: drop / n,
                mean_rank: rank / n,
            }
        })
        .collect())
}

/// Descending ranks starting at 1; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Fusion-block sequence length `1 + Σ min(k_m, Θ)`; `None` disables reduction.
pub fn fused_sequence_len(token_counts: &[usize], theta: Option<usize>) -> usize {
    1 + token_counts
        .iter()
        .map(|&k| theta.map_or(k, |t| k.min(t)))
        .sum::<usize>()
}

/// Analytic fusion-block FLOPs: per layer `4ne² + 2n²e` for attention and
/// `8ne²` for the MLP.
pub fn count_fb_flops(cfg: &FusionConfig, token_counts: &[usize], theta: Option<usize>) -> u128 {
    let n = fused_sequence_len(token_counts, theta) as u128;
    let e = cfg.dim as u128;
    cfg.layers as u128 * (4 * n * e * e + 2 * n * n * e + 8 * n * e * e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub config: String,
    pub theta: Option<usize>,
    pub tokens: usize,
    pub fb_flops: u128,
    pub params: usize,
    /// Values held by one single-sample forward pass.
    pub activation_elements: usize,
}

pub fn resource_row(label: &str, model: &Model, data: &Dataset) -> Result<ResourceRow> {
    let counts: Vec<usize> = model.cfg.encoders.iter().map(|e| e.input_tokens).collect();
    Ok(ResourceRow {
        config: label.to_string(),
        theta: Some(model.cfg.theta),
        tokens: fused_sequence_len(&counts, Some(model.cfg.theta)),
        fb_flops: count_fb_flops(&model.cfg.fusion, &counts, Some(model.cfg.theta)),
        params: model.param_count(),
        activation_elements: model.activation_elements(data)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub head_names: Vec<String>,
    pub modality_names: Vec<String>,
    pub rows: Vec<EvalRow>,
    pub resources: Vec<ResourceRow>,
}

impl EvalReport {
    pub fn find_subset(&self, model_id: &str, subset: ModalitySet) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.subset == Some(subset))
    }

    pub fn find_sweep(&self, model_id: &str, p: f64) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.probability == Some(p))
    }

    /// `model_id,protocol,subset,probability,acc_<head>...,action_acc,samples`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "model_id".to_string(),
            "protocol".into(),
            "subset".into(),
            "probability".into(),
        ];
        header.extend(self.head_names.iter().map(|h| format!("acc_{h}")));
        header.extend(["action_acc".to_string(), "samples".into()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.model_id.clone(),
                match r.protocol {
                    Protocol::Subset => "subset".into(),
                    Protocol::Sweep => "sweep".into(),
                },
                r.subset
                    .map(|s| s.label(&self.modality_names))
                    .unwrap_or_default(),
                r.probability.map(|p| format!("{p}")).unwrap_or_default(),
            ];
            rec.extend(r.head_acc.iter().map(|a| format!("{a:.6}")));
            rec.extend([format!("{:.6}", r.action_acc), r.samples.to_string()]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `config,theta,tokens,fb_flops,params,activation_elements`.
    pub fn write_resources_csv(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "config",
            "theta",
            "tokens",
            "fb_flops",
            "params",
            "activation_elements",
        ])?;
        for r in &self.resources {
            w.write_record([
                r.config.clone(),
                r.theta.map(|t| t.to_string()).unwrap_or_default(),
                r.tokens.to_string(),
                r.fb_flops.to_string(),
                r.params.to_string(),
                r.activation_elements.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut v = serde_json::to_value(self)?;
        v["schema"] = REPORT_SCHEMA.into();
        std::fs::write(path, serde_json::to_string_pretty(&v)?)?;
        Ok(())
    }

    /// Accuracy-vs-probability curves of every swept model as a static SVG.
    pub fn write_sweep_svg(&self, path: &Path) -> Result<()> {
        let mut models: Vec<&str> = Vec::new();
        for r in self.rows.iter().filter(|r| r.protocol == Protocol::Sweep) {
            if !models.contains(&r.model_id.as_str()) {
                models.push(&r.model_id);
            }
        }
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let x = |p: f64| pad + p * (w - 2.0 * pad);
        let y = |a: f64| h - pad - a * (h - 2.0 * pad);
        let colors = [
            "#1b6ac9", "#d1495b", "#2e933c", "#edae49", "#6c4f9e", "#444444",
        ];
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">inference dropout probability</text>\n\
             <text x=\"12\" y=\"{cy}\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">action accuracy</text>\n",
            b = h - pad,
            r = w - pad,
            cx = w / 2.0,
            ly = h - 8.0,
            cy = h / 2.0,
        );
        for (i, m) in models.iter().enumerate() {
            let pts: Vec<String> = self
                .rows
                .iter()
                .filter(|r| r.protocol == Protocol::Sweep && r.model_id == *m)
                .filter_map(|r| {
                    r.probability
                        .map(|p| format!("{:.1},{:.1}", x(p), y(r.action_acc)))
                })
                .collect();
            let c = colors[i % colors.len()];
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" fill=\"{c}\">{m}</text>\n",
                pts.join(" "),
                w - pad - 120.0,
                pad + 14.0 * i as f64,
            ));
        }
        svg.push_str("</svg>\n");
        ensure_parent(path)?;
        std::fs::write(path, svg)?;
        Ok(())
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}
