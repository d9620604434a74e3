//! Parameter storage and the standard layers shared by encoders and the
//! fusion block.

use std::collections::BTreeMap;
use std::ops::Index;

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Standard deviation of learned-token initialization.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors with a per-tensor trainable flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

/// Graph handles for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (n, t) in self.names.iter().zip(self.trainable.iter_mut()) {
            if n.starts_with(prefix) {
                *t = trainable;
            }
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total element count, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Inserts every parameter as a leaf; only trainable ones take gradient.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.values
                .iter()
                .zip(&self.trainable)
                .map(|(v, &t)| g.leaf(v.clone(), t))
                .collect(),
        )
    }

    /// Inserts every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|v| g.constant(v.clone())).collect())
    }

    /// Copies of all parameters whose name starts with `prefix`.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Overwrites parameters by name; shapes must match.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, value) in named {
            let id = self
                .find(name)
                .ok_or_else(|| contract(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(contract(format!(
                    "parameter {name} has shape {:?}, checkpoint holds {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                )));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }

    /// Name-sorted snapshot, handy for bitwise comparisons.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<u64>> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.data().iter().map(|x| x.to_bits()).collect()))
            .collect()
    }
}

pub(crate) fn uniform_fan_in(rng: &mut RngStream, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub(crate) fn gaussian(rng: &mut RngStream, std: f64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        trainable: bool,
        rng: &mut RngStream,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            uniform_fan_in(rng, input, &[input, output]),
            trainable,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]), trainable);
        Self {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_bias(y, p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::vector(vec![1.0; dim]),
            trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), trainable);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Query/key/value/output projections of one multi-head attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(crate::error::config(format!(
                "dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, trainable, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, trainable, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, trainable, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, trainable, rng),
            heads,
        })
    }
}

/// Multi-head self-attention over segments of `seg` tokens stacked in `x`.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    params: &AttentionParams,
    seg: usize,
    dropout: Option<(f64, &mut RngStream)>,
) -> Result<Var> {
    let q = params.q.forward(g, p, x)?;
    let k = params.k.forward(g, p, x)?;
    let v = params.v.forward(g, p, x)?;
    let a = g.attention(q, k, v, seg, params.heads, dropout)?;
    params.o.forward(g, p, a)
}

/// Pre-norm encoder layer: `h = x + MHA(LN(x))`, `out = h + MLP(LN(h))`
/// with a GELU MLP of expansion factor 4.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: AttentionParams,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_EXPANSION: usize = 4;

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, trainable),
            attn: AttentionParams::new(store, &format!("{name}.attn"), dim, heads, trainable, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, trainable),
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                dim,
                MLP_EXPANSION * dim,
                trainable,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                MLP_EXPANSION * dim,
                dim,
                trainable,
                rng,
            ),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        seg: usize,
        dropout: Option<(f64, &mut RngStream)>,
    ) -> Result<Var> {
        let n1 = self.ln1.forward(g, p, x)?;
        let a = multi_head_attention(g, p, n1, &self.attn, seg, dropout)?;
        let h = g.add(x, a)?;
        let n2 = self.ln2.forward(g, p, h)?;
        let f = self.fc1.forward(g, p, n2)?;
        let f = g.gelu(f);
        let f = self.fc2.forward(g, p, f)?;
        g.add(h, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    #[test]
    fn attention_shape_and_row_sums() {
        let mut rng = RngStream::new(0, StreamId::Init);
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, "a", 8, 2, true, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(gaussian(&mut rng, 1.0, &[4, 8]));
        let q = params.q.forward(&mut g, &p, x).unwrap();
        let k = params.k.forward(&mut g, &p, x).unwrap();
        let v = params.v.forward(&mut g, &p, x).unwrap();
        let a = g.attention(q, k, v, 4, 2, None).unwrap();
        let w = g.attention_weights(a).unwrap();
        for row in w.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let out = params.o.forward(&mut g, &p, a).unwrap();
        assert_eq!(g.value(out).shape(), &[4, 8]);
    }

    #[test]
    fn single_token_reduces_to_value_path() {
        let mut rng = RngStream::new(1, StreamId::Init);
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, "a", 6, 3, true, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(gaussian(&mut rng, 1.0, &[1, 6]));
        let out = multi_head_attention(&mut g, &p, x, &params, 1, None).unwrap();
        let v = params.v.forward(&mut g, &p, x).unwrap();
        let direct = params.o.forward(&mut g, &p, v).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(direct)) < 1e-14);
    }

    #[test]
    fn duplicate_tokens_give_duplicate_outputs() {
        let mut rng = RngStream::new(2, StreamId::Init);
        let mut store = ParamStore::new();
        let layer = TransformerLayer::new(&mut store, "l", 8, 2, true, &mut rng).unwrap();
        let base = gaussian(&mut rng, 1.0, &[3, 8]);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| base.row(i).to_vec()).collect();
        rows.push(rows[1].clone());
        let x = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let out = layer.forward(&mut g, &p, xv, 4, None).unwrap();
        let o = g.value(out);
        for (a, b) in o.row(1).iter().zip(o.row(3)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn store_load_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(&[2]), true);
        assert!(store.load(&[("x".into(), Tensor::zeros(&[3]))]).is_err());
        assert!(store.load(&[("y".into(), Tensor::zeros(&[2]))]).is_err());
        store
            .load(&[("x".into(), Tensor::vector(vec![1.0, 2.0]))])
            .unwrap();
        assert_eq!(store.get(store.find("x").unwrap()).data(), &[1.0, 2.0]);
    }
}
