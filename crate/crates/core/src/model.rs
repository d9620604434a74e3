//! Complete teacher/student network: encoders, token reduction, fusion
//! block and multi-head classifier.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::encoders::{encoder_prefix, Encoder, EncoderSpec, PretrainedEncoder};
use crate::error::{config, contract, Result};
use crate::fusion::{Fused, FusionBlock, FusionConfig, MultiHead};
use crate::graph::{Graph, Var};
use crate::modality::ModalitySet;
use crate::nn::{Bound, ParamStore};
use crate::reduction::reduced_token_count;
use crate::rng::{RngStream, StreamId};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoders: Vec<EncoderSpec>,
    pub fusion: FusionConfig,
    pub theta: usize,
    pub head_classes: Vec<usize>,
}

impl ModelConfig {
    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    /// Tokens per modality after reduction, i.e. the fusion block's `k_m`.
    pub fn reduced_counts(&self) -> Vec<usize> {
        self.encoders
            .iter()
            .map(|e| reduced_token_count(e.input_tokens, self.theta))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta == 0 {
            return Err(config("theta must be at least 1"));
        }
        if self.encoders.is_empty()
            || self.head_classes.is_empty()
            || self.head_classes.contains(&0)
        {
            return Err(config("model needs encoders and non-empty heads"));
        }
        for (m, e) in self.encoders.iter().enumerate() {
            if e.modality_id != m {
                return Err(config("encoder modality ids must be 0..M in order"));
            }
            e.validate()?;
        }
        self.fusion.validate()
    }
}

/// Reduced, frozen-encoder features per sample and modality.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    features: Vec<Vec<Option<Tensor>>>,
}

impl FeatureCache {
    pub fn get(&self, sample: usize, m: usize) -> Option<&Tensor> {
        self.features[sample][m].as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Averaged logits, one `[B, classes_h]` node per head.
    pub logits: Vec<Var>,
    pub fused: Fused,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoders: Vec<Encoder>,
    fusion: FusionBlock,
    heads: MultiHead,
}

impl Model {
    /// Randomly initialized model; `tag` keys the init substream.
    pub fn new(cfg: ModelConfig, seed: u64, tag: &str) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::with_tag(seed, StreamId::Init, tag);
        let mut store = ParamStore::new();
        let encoders = cfg
            .encoders
            .iter()
            .map(|s| Encoder::new(&mut store, s.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dims: Vec<usize> = cfg.encoders.iter().map(|e| e.out_dim).collect();
        let fusion = FusionBlock::new(
            &mut store,
            cfg.fusion.clone(),
            &dims,
            &cfg.reduced_counts(),
            &mut rng,
        )?;
        let heads = MultiHead::new(
            &mut store,
            cfg.fusion.dim,
            cfg.fusion.head_hidden,
            &cfg.head_classes,
            &mut rng,
        );
        Ok(Self {
            cfg,
            store,
            encoders,
            fusion,
            heads,
        })
    }

    /// Copies pretrained encoder weights in; each encoder keeps the
    /// trainable flag of its spec in `self.cfg`.
    pub fn load_encoders(&mut self, pretrained: &[&PretrainedEncoder]) -> Result<()> {
        for p in pretrained {
            let m = p.spec.modality_id;
            let own = self
                .cfg
                .encoders
                .get(m)
                .ok_or_else(|| contract(format!("no encoder slot {m}")))?;
            if own.width != p.spec.width
                || own.out_dim != p.spec.out_dim
                || own.depth != p.spec.depth
            {
                return Err(contract(format!(
                    "pretrained encoder {m} does not match the configured size"
                )));
            }
            self.store.load(&p.params)?;
        }
        self.sync_encoder_flags();
        Ok(())
    }

    fn sync_encoder_flags(&mut self) {
        for e in &self.cfg.encoders {
            self.store
                .set_trainable_prefix(&encoder_prefix(e.modality_id), e.trainable);
        }
    }

    pub fn fusion(&self) -> &FusionBlock {
        &self.fusion
    }

    pub fn num_modalities(&self) -> usize {
        self.cfg.num_modalities()
    }

    pub fn encoders_frozen(&self) -> bool {
        self.cfg.encoders.iter().all(|e| !e.trainable)
    }

    pub fn param_count(&self) -> usize {
        self.store.count("")
    }

    /// Encodes and reduces `[P * k, d]` raw streams of modality `m`.
    fn encode_reduce(&self, g: &mut Graph, p: &Bound, m: usize, raw: Var) -> Result<Var> {
        let enc = self.encoders[m].forward(g, p, raw)?;
        g.theta_average(enc, self.cfg.encoders[m].input_tokens, self.cfg.theta)
    }

    /// Precomputes reduced features; only meaningful for frozen encoders.
    pub fn feature_cache(&self, data: &Dataset) -> Result<FeatureCache> {
        let mut features: Vec<Vec<Option<Tensor>>> =
            vec![vec![None; self.num_modalities()]; data.len()];
        let counts = self.cfg.reduced_counts();
        for m in 0..self.num_modalities() {
            let have: Vec<usize> = (0..data.len())
                .filter(|&i| data.samples[i].stream(m).is_some())
                .collect();
            for chunk in have.chunks(64) {
                let streams: Vec<&Tensor> = chunk
                    .iter()
                    .map(|&i| data.samples[i].stream(m).expect("filtered"))
                    .collect();
                let mut g = Graph::new();
                let p = self.store.bind_frozen(&mut g);
                let raw = g.constant(Tensor::vstack(&streams)?);
                let red = self.encode_reduce(&mut g, &p, m, raw)?;
                let out = g.value(red);
                let k = counts[m];
                let c = out.cols();
                for (j, &i) in chunk.iter().enumerate() {
                    let block = out.data()[j * k * c..(j + 1) * k * c].to_vec();
                    features[i][m] = Some(Tensor::matrix(k, c, block)?);
                }
            }
        }
        Ok(FeatureCache { features })
    }

    /// Builds the forward graph for the samples `idx` of `data`, restricted
    /// to the `retained` modality set of each sample.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        data: &Dataset,
        idx: &[usize],
        retained: &[ModalitySet],
        cache: Option<&FeatureCache>,
        dropout: Option<&mut RngStream>,
    ) -> Result<Forward> {
        if idx.len() != retained.len() || idx.is_empty() {
            return Err(contract("forward needs one retained set per sample"));
        }
        let mut embedded = Vec::with_capacity(self.num_modalities());
        for m in 0..self.num_modalities() {
            let mut present = Vec::with_capacity(idx.len());
            let mut rows: Vec<&Tensor> = Vec::new();
            for (&i, r) in idx.iter().zip(retained) {
                let sample = &data.samples[i];
                if !r.contains(m) {
                    present.push(None);
                    continue;
                }
                let src = match cache {
                    Some(c) => c.get(i, m),
                    None => sample.stream(m),
                };
                let t = src.ok_or_else(|| {
                    contract(format!(
                        "sample {} retains modality {m} but does not provide it",
                        sample.sample_id
                    ))
                })?;
                present.push(Some(rows.len()));
                rows.push(t);
            }
            let projected = if rows.is_empty() {
                None
            } else {
                let stacked = g.constant(Tensor::vstack(&rows)?);
                let feats = if cache.is_some() {
                    stacked
                } else {
                    self.encode_reduce(g, p, m, stacked)?
                };
                Some(self.fusion.project(g, p, m, feats)?)
            };
            embedded.push(self.fusion.embed_modality(g, p, m, projected, present)?);
        }
        let fused = self.fusion.fuse(g, p, &embedded, idx.len(), dropout)?;
        let logits = self
            .heads
            .predict(g, p, fused.output, self.num_modalities() + 1)?;
        Ok(Forward { logits, fused })
    }

    /// Inference-mode logits per head (no dropout, no gradient).
    pub fn logits(
        &self,
        data: &Dataset,
        idx: &[usize],
        retained: &[ModalitySet],
        cache: Option<&FeatureCache>,
    ) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let fwd = self.forward(&mut g, &p, data, idx, retained, cache, None)?;
        Ok(fwd.logits.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Values stored by a single-sample, full-availability forward pass.
    pub fn activation_elements(&self, data: &Dataset) -> Result<usize> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let avail = data
            .samples
            .first()
            .ok_or_else(|| contract("empty dataset"))?
            .availability();
        self.forward(&mut g, &p, data, &[0], &[avail], None, None)?;
        Ok(g.total_elements())
    }

    pub fn to_checkpoint(&self, role: &str, extra: Value) -> Checkpoint {
        let meta = json!({ "role": role, "config": self.cfg, "extra": extra });
        Checkpoint::from_store("model", meta, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "model" {
            return Err(contract(format!(
                "expected a model checkpoint, found {}",
                ck.kind
            )));
        }
        let cfg: ModelConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = Model::new(cfg, 0, "restore")?;
        model.store.load(&ck.named())?;
        for (name, _, trainable) in &ck.tensors {
            if let Some(id) = model.store.find(name) {
                model.store.set_trainable(id, *trainable);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path, role: &str, extra: Value) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint(role, extra))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}
