//! Transformer fusion block and multi-head classifier.
//!
//! Each modality's (reduced) encoder tokens are projected to the shared
//! width `e`. With the missing-modality strategy enabled, a learned modality
//! token is added to every projected token and a learned token-specific token
//! to each position; an absent modality contributes only the sum of the two
//! learned tokens, so the block input always has `1 + sum_m k_m` rows. The
//! block prepends a CLS token, runs `l` pre-norm transformer layers and emits
//! `M + 1` tokens: the mean of each modality's output positions, then CLS.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    gaussian, Bound, LayerNorm, Linear, ParamId, ParamStore, TransformerLayer, TOKEN_INIT_STD,
};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub attention_dropout: f64,
    /// Learned modality and token-specific tokens (absent streams are zeros otherwise).
    pub missing_tokens: bool,
    /// Width of the shared classifier layer.
    pub head_hidden: usize,
}

impl FusionConfig {
    /// Full-size teacher block: e = 768, two layers, eight heads, 30 % attention dropout.
    pub fn teacher() -> Self {
        Self {
            dim: 768,
            layers: 2,
            heads: 8,
            attention_dropout: 0.3,
            missing_tokens: true,
            head_hidden: 768,
        }
    }

    /// Full-size student block: e = 384, one layer, no attention dropout.
    pub fn student() -> Self {
        Self {
            dim: 384,
            layers: 1,
            heads: 8,
            attention_dropout: 0.0,
            missing_tokens: true,
            head_hidden: 384,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(config(format!(
                "fusion dim {} must be >= 2 and divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(config("attention dropout must lie in [0, 1)"));
        }
        if self.head_hidden == 0 {
            return Err(config("head_hidden must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub cfg: FusionConfig,
    /// Post-reduction token count per modality.
    pub token_counts: Vec<usize>,
    proj: Vec<Linear>,
    modality_tokens: Vec<Option<ParamId>>,
    positional_tokens: Vec<Option<ParamId>>,
    cls: ParamId,
    layers: Vec<TransformerLayer>,
}

/// Output of [`FusionBlock::fuse`].
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// Tensor entering the first transformer layer, `[B * n, e]`.
    pub input: Var,
    /// `[B * (M + 1), e]`; per sample the M modality tokens then CLS.
    pub output: Var,
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        cfg: FusionConfig,
        input_dims: &[usize],
        token_counts: &[usize],
        rng: &mut RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_dims.len() != token_counts.len() || input_dims.is_empty() {
            return Err(config(
                "fusion block needs one input dim and token count per modality",
            ));
        }
        let e = cfg.dim;
        let mut proj = Vec::new();
        let mut modality_tokens = Vec::new();
        let mut positional_tokens = Vec::new();
        for (m, (&d, &k)) in input_dims.iter().zip(token_counts).enumerate() {
            proj.push(Linear::new(store, &format!("fb.proj{m}"), d, e, true, rng));
            if cfg.missing_tokens {
                modality_tokens.push(Some(store.add(
                    format!("fb.mod_tok{m}"),
                    gaussian(rng, TOKEN_INIT_STD, &[1, e]),
                    true,
                )));
                positional_tokens.push(Some(store.add(
                    format!("fb.pos_tok{m}"),
                    gaussian(rng, TOKEN_INIT_STD, &[k, e]),
                    true,
                )));
            } else {
                modality_tokens.push(None);
                positional_tokens.push(None);
            }
        }
        let cls = store.add("fb.cls", gaussian(rng, TOKEN_INIT_STD, &[1, e]), true);
        let layers = (0..cfg.layers)
            .map(|l| TransformerLayer::new(store, &format!("fb.layer{l}"), e, cfg.heads, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            token_counts: token_counts.to_vec(),
            proj,
            modality_tokens,
            positional_tokens,
            cls,
            layers,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.token_counts.len()
    }

    /// Rows per sample entering the transformer stack.
    pub fn sequence_len(&self) -> usize {
        1 + self.token_counts.iter().sum::<usize>()
    }

    pub fn modality_token(&self, m: usize) -> Option<ParamId> {
        self.modality_tokens[m]
    }

    pub fn positional_tokens(&self, m: usize) -> Option<ParamId> {
        self.positional_tokens[m]
    }

    pub fn cls_token(&self) -> ParamId {
        self.cls
    }

    /// Linear projection of `[P * k_m, d_m]` reduced encoder tokens to `[P * k_m, e]`.
    pub fn project(&self, g: &mut Graph, p: &Bound, m: usize, tokens: Var) -> Result<Var> {
        self.proj[m].forward(g, p, tokens)
    }

    /// Embedding-layer output for modality `m` over a batch.
    ///
    /// `present[b]` indexes sample `b`'s block inside `projected`, or is
    /// `None` when the modality is missing for that sample.
    pub fn embed_modality(
        &self,
        g: &mut Graph,
        p: &Bound,
        m: usize,
        projected: Option<Var>,
        present: Vec<Option<usize>>,
    ) -> Result<Var> {
        let k = self.token_counts[m];
        g.embed(
            projected,
            self.modality_tokens[m].map(|id| p[id]),
            self.positional_tokens[m].map(|id| p[id]),
            present,
            k,
            self.cfg.dim,
        )
    }

    /// Concatenates CLS and every modality's embedded stream, runs the
    /// transformer stack and pools `M + 1` output tokens per sample.
    pub fn fuse(
        &self,
        g: &mut Graph,
        p: &Bound,
        embedded: &[Var],
        batch: usize,
        mut dropout: Option<&mut RngStream>,
    ) -> Result<Fused> {
        if embedded.len() != self.num_modalities() {
            return Err(contract(format!(
                "expected {} embedded streams, got {}",
                self.num_modalities(),
                embedded.len()
            )));
        }
        let e = self.cfg.dim;
        let mut parts = vec![(p[self.cls], 1)];
        for (m, &v) in embedded.iter().enumerate() {
            let k = self.token_counts[m];
            let t = g.value(v);
            if t.cols() != e || t.rows() != batch * k {
                return Err(contract(format!(
                    "embedded stream {m} is {}x{}, expected {}x{e}",
                    t.rows(),
                    t.cols(),
                    batch * k
                )));
            }
            parts.push((v, k));
        }
        let input = g.interleave(&parts, batch)?;
        let n = self.sequence_len();
        let mut h = input;
        for layer in &self.layers {
            let drop = match dropout.as_deref_mut() {
                Some(rng) if self.cfg.attention_dropout > 0.0 => {
                    Some((self.cfg.attention_dropout, rng))
                }
                _ => None,
            };
            h = layer.forward(g, p, h, n, drop)?;
        }
        let mut ranges = Vec::with_capacity(self.num_modalities() + 1);
        let mut offset = 1;
        for &k in &self.token_counts {
            ranges.push((offset, k));
            offset += k;
        }
        ranges.push((0, 1));
        let output = g.segment_mean(h, n, &ranges)?;
        Ok(Fused { input, output })
    }
}

/// Shared layer (layer norm, affine, GELU) followed by one linear classifier per head.
#[derive(Clone, Debug)]
pub struct MultiHead {
    ln: LayerNorm,
    shared: Linear,
    heads: Vec<Linear>,
}

impl MultiHead {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        classes: &[usize],
        rng: &mut RngStream,
    ) -> Self {
        let ln = LayerNorm::new(store, "head.ln", dim, true);
        let shared = Linear::new(store, "head.shared", dim, hidden, true, rng);
        let heads = classes
            .iter()
            .enumerate()
            .map(|(h, &c)| Linear::new(store, &format!("head.out{h}"), hidden, c, true, rng))
            .collect();
        Self { ln, shared, heads }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Per-token logits for every head, `[rows, classes_h]`.
    pub fn token_logits(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Vec<Var>> {
        let n = self.ln.forward(g, p, tokens)?;
        let s = self.shared.forward(g, p, n)?;
        let s = g.gelu(s);
        self.heads.iter().map(|h| h.forward(g, p, s)).collect()
    }

    /// Averages each head's logits over the `per_sample` tokens of every sample.
    pub fn predict(
        &self,
        g: &mut Graph,
        p: &Bound,
        tokens: Var,
        per_sample: usize,
    ) -> Result<Vec<Var>> {
        if !g.value(tokens).rows().is_multiple_of(per_sample) {
            return Err(contract(
                "token count is not a multiple of tokens per sample",
            ));
        }
        self.token_logits(g, p, tokens)?
            .into_iter()
            .map(|l| g.segment_mean(l, per_sample, &[(0, per_sample)]))
            .collect()
    }
}
