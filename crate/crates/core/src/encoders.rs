//! Small per-modality feature extractors.
//!
//! An encoder maps a `k x d_raw` stream to `k x out_dim` tokens with a
//! shared per-token MLP, an optional residual self-attention layer and an
//! output projection. Teacher encoders are wider, pretrained on a unimodal
//! proxy task and then frozen; student encoders are trained end to end.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::error::{config, contract, Result};
use crate::graph::{Graph, Var};
use crate::nn::{multi_head_attention, AttentionParams, Bound, LayerNorm, Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{RngStream, StreamId};
use crate::synthdata::{Dataset, DatasetSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub modality_id: usize,
    pub input_tokens: usize,
    pub input_dim: usize,
    pub width: usize,
    /// Number of per-token MLP layers (at least one).
    pub depth: usize,
    pub out_dim: usize,
    /// Adds a residual single-head self-attention layer over the stream's tokens.
    #[serde(default)]
    pub attention: bool,
    pub trainable: bool,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.depth == 0 || self.out_dim == 0 {
            return Err(config(format!(
                "encoder {} needs width >= 2, depth >= 1, out_dim >= 1",
                self.modality_id
            )));
        }
        if self.input_tokens == 0 || self.input_dim == 0 {
            return Err(config("encoder input shape must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub prefix: String,
    layers: Vec<Linear>,
    ln: LayerNorm,
    attn: Option<AttentionParams>,
    out: Linear,
}

pub fn encoder_prefix(modality: usize) -> String {
    format!("enc{modality}.")
}

impl Encoder {
    pub fn new(store: &mut ParamStore, spec: EncoderSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let prefix = encoder_prefix(spec.modality_id);
        let t = spec.trainable;
        let mut layers = Vec::with_capacity(spec.depth);
        let mut fan_in = spec.input_dim;
        for i in 0..spec.depth {
            layers.push(Linear::new(
                store,
                &format!("{prefix}mlp{i}"),
                fan_in,
                spec.width,
                t,
                rng,
            ));
            fan_in = spec.width;
        }
        let ln = LayerNorm::new(store, &format!("{prefix}ln"), spec.width, t);
        let attn = if spec.attention {
            Some(AttentionParams::new(
                store,
                &format!("{prefix}attn"),
                spec.width,
                1,
                t,
                rng,
            )?)
        } else {
            None
        };
        let out = Linear::new(
            store,
            &format!("{prefix}out"),
            spec.width,
            spec.out_dim,
            t,
            rng,
        );
        Ok(Self {
            spec,
            prefix,
            layers,
            ln,
            attn,
            out,
        })
    }

    /// Encodes `[P * k, d_raw]` stacked streams into `[P * k, out_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
        if cols != self.spec.input_dim || rows % self.spec.input_tokens != 0 {
            return Err(contract(format!(
                "encoder {} expects {}x{} streams, got {rows}x{cols}",
                self.spec.modality_id, self.spec.input_tokens, self.spec.input_dim
            )));
        }
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, p, h)?;
            h = g.gelu(h);
        }
        let n = self.ln.forward(g, p, h)?;
        let h = match &self.attn {
            Some(attn) => {
                let a = multi_head_attention(g, p, n, attn, self.spec.input_tokens, None)?;
                g.add(h, a)?
            }
            None => n,
        };
        self.out.forward(g, p, h)
    }
}

/// Runs one stream through an encoder without recording gradients.
pub fn encode(store: &ParamStore, encoder: &Encoder, stream: &Tensor) -> Result<Tensor> {
    if stream.rows() != encoder.spec.input_tokens || stream.cols() != encoder.spec.input_dim {
        return Err(contract(format!(
            "stream {:?} does not match encoder input {}x{}",
            stream.shape(),
            encoder.spec.input_tokens,
            encoder.spec.input_dim
        )));
    }
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(stream.clone());
    let y = encoder.forward(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cap on the number of training samples used for the proxy task.
    pub max_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            lr: 2e-3,
            max_samples: 1000,
        }
    }
}

/// A pretrained, frozen encoder plus proxy-task metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedEncoder {
    pub spec: EncoderSpec,
    pub params: Vec<(String, Tensor)>,
    /// Heads the proxy task classified.
    pub proxy_heads: Vec<usize>,
    /// Validation probe accuracy per proxy head.
    pub probe_accuracy: Vec<f64>,
    pub epochs: usize,
}

/// Heads this modality carries signal for.
pub fn proxy_heads(spec: &DatasetSpec, modality: usize) -> Vec<usize> {
    let mc = &spec.modalities[modality];
    (0..spec.heads.len())
        .filter(|&h| mc.informativeness[h] > 0.0)
        .collect()
}

struct ProbeModel {
    store: ParamStore,
    encoder: Encoder,
    probes: Vec<Linear>,
}

impl ProbeModel {
    fn logits(&self, g: &mut Graph, p: &Bound, batch: &[&Tensor]) -> Result<Vec<Var>> {
        let x = g.constant(Tensor::vstack(batch)?);
        let h = self.encoder.forward(g, p, x)?;
        let k = self.encoder.spec.input_tokens;
        let pooled = g.segment_mean(h, k, &[(0, k)])?;
        self.probes
            .iter()
            .map(|probe| probe.forward(g, p, pooled))
            .collect()
    }
}

/// Trains `spec` with mean-pooled linear probes on every head the modality
/// informs, then returns the encoder weights with the trainable flag
/// cleared. The recorded probe accuracies are measured on `val`.
pub fn pretrain_encoder(
    spec: &EncoderSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainedEncoder> {
    if !spec.trainable {
        return Err(contract("pretraining needs a trainable encoder spec"));
    }
    let m = spec.modality_id;
    let heads = proxy_heads(&train.spec, m);
    if heads.is_empty() {
        return Err(config(format!(
            "modality {m} carries no signal to pretrain on"
        )));
    }
    let view: Vec<(&Tensor, &[usize])> = train
        .samples
        .iter()
        .filter_map(|s| s.stream(m).map(|t| (t, s.label.as_slice())))
        .take(cfg.max_samples)
        .collect();
    if view.is_empty() {
        return Err(config(format!("no training samples contain modality {m}")));
    }
    let tag = format!("pretrain/{m}/{}", spec.width);
    let mut init = RngStream::with_tag(seed, StreamId::Init, &tag);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, spec.clone(), &mut init)?;
    let probes = heads
        .iter()
        .map(|&h| {
            Linear::new(
                &mut store,
                &format!("probe{h}"),
                spec.out_dim,
                train.spec.heads[h].classes,
                true,
                &mut init,
            )
        })
        .collect();
    let mut model = ProbeModel {
        store,
        encoder,
        probes,
    };
    let mut opt = AdamW::new(AdamWConfig::with_decay(0.01, 1.0), &model.store);
    let mut shuffle = RngStream::with_tag(seed, StreamId::Data, &tag);
    let mut order: Vec<usize> = (0..view.len()).collect();
    let w = 1.0 / heads.len() as f64;
    for _ in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| view[i].0).collect();
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let logits = model.logits(&mut g, &p, &batch)?;
            let mut terms = Vec::with_capacity(heads.len());
            for (&h, &l) in heads.iter().zip(&logits) {
                let labels: Vec<usize> = chunk.iter().map(|&i| view[i].1[h]).collect();
                terms.push((g.softmax_cross_entropy(l, &labels)?, w));
            }
            let loss = g.weighted_sum(&terms)?;
            g.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = p
                .vars()
                .iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec))
                .collect();
            opt.step(&mut model.store, &grads, cfg.lr);
        }
    }

    let eval: Vec<(&Tensor, &[usize])> = val
        .samples
        .iter()
        .filter_map(|s| s.stream(m).map(|t| (t, s.label.as_slice())))
        .collect();
    let mut correct = vec![0usize; heads.len()];
    for chunk in eval.chunks(64) {
        let batch: Vec<&Tensor> = chunk.iter().map(|e| e.0).collect();
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let logits = model.logits(&mut g, &p, &batch)?;
        for (j, (&h, &l)) in heads.iter().zip(&logits).enumerate() {
            for (row, e) in chunk.iter().enumerate() {
                if argmax(g.value(l).row(row)) == e.1[h] {
                    correct[j] += 1;
                }
            }
        }
    }
    let n = eval.len().max(1) as f64;
    let mut frozen = spec.clone();
    frozen.trainable = false;
    Ok(PretrainedEncoder {
        spec: frozen,
        params: model.store.export(&model.encoder.prefix),
        proxy_heads: heads,
        probe_accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
        epochs: cfg.epochs,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn write_encoder(path: &std::path::Path, enc: &PretrainedEncoder) -> Result<()> {
    let meta = json!({
        "spec": enc.spec,
        "proxy_heads": enc.proxy_heads,
        "probe_accuracy": enc.probe_accuracy,
        "epochs": enc.epochs,
    });
    let tensors = enc
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.clone(), enc.spec.trainable))
        .collect();
    write_checkpoint(
        path,
        &Checkpoint {
            kind: "encoder".into(),
            meta,
            tensors,
        },
    )
}

pub fn read_encoder(path: &std::path::Path) -> Result<PretrainedEncoder> {
    let ck = read_checkpoint(path)?;
    if ck.kind != "encoder" {
        return Err(contract(format!(
            "{} holds a {} checkpoint, not an encoder",
            path.display(),
            ck.kind
        )));
    }
    Ok(PretrainedEncoder {
        spec: serde_json::from_value(ck.meta["spec"].clone())?,
        params: ck.named(),
        proxy_heads: serde_json::from_value(ck.meta["proxy_heads"].clone())?,
        probe_accuracy: serde_json::from_value(ck.meta["probe_accuracy"].clone())?,
        epochs: ck.meta["epochs"].as_u64().unwrap_or(0) as usize,
    })
}
