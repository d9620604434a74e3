//! Linear probes on pooled raw streams, used to check what a modality
//! subset reveals about a label head.

use crate::error::{contract, Result};
use crate::graph::Graph;
use crate::nn::{Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{RngStream, StreamId};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Mean and max over tokens of every listed modality, concatenated.
/// Samples lacking one of the modalities are skipped.
pub fn pooled_features(
    data: &Dataset,
    modalities: &[usize],
    head: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    'samples: for s in &data.samples {
        let mut f = Vec::new();
        for &m in modalities {
            let Some(t) = s.stream(m) else {
                continue 'samples;
            };
            let (k, d) = (t.rows(), t.cols());
            let mut mean = vec![0.0; d];
            let mut max = vec![f64::NEG_INFINITY; d];
            for i in 0..k {
                for (j, &v) in t.row(i).iter().enumerate() {
                    mean[j] += v / k as f64;
                    max[j] = max[j].max(v);
                }
            }
            f.extend(mean);
            f.extend(max);
        }
        xs.push(f);
        ys.push(s.label[head]);
    }
    (xs, ys)
}

/// Trains a softmax-regression probe on `train` and returns its accuracy on
/// `test` for one head, reading only the listed modalities.
pub fn linear_probe(
    train: &Dataset,
    test: &Dataset,
    modalities: &[usize],
    head: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if modalities.is_empty() || head >= train.spec.heads.len() {
        return Err(contract(
            "probe needs at least one modality and a valid head",
        ));
    }
    let classes = train.spec.heads[head].classes;
    let (mut xtr, ytr) = pooled_features(train, modalities, head);
    let (mut xte, yte) = pooled_features(test, modalities, head);
    if xtr.is_empty() || xte.is_empty() {
        return Err(contract("no samples carry every probed modality"));
    }
    let dim = xtr[0].len();
    let n = xtr.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| xtr.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            (xtr.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n)
                .sqrt()
                .max(1e-12)
        })
        .collect();
    for x in xtr.iter_mut().chain(xte.iter_mut()) {
        for j in 0..dim {
            x[j] = (x[j] - mean[j]) / std[j];
        }
    }

    let mut rng = RngStream::with_tag(cfg.seed, StreamId::Init, "probe");
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "probe", dim, classes, true, &mut rng);
    let mut opt = AdamW::new(AdamWConfig::with_decay(1e-3, 5.0), &store);
    let mut order: Vec<usize> = (0..xtr.len()).collect();
    let mut shuffle = RngStream::with_tag(cfg.seed, StreamId::Data, "probe");
    for _ in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| xtr[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| ytr[i]).collect();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(Tensor::from_rows(&rows)?);
            let logits = lin.forward(&mut g, &p, x)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = p
                .vars()
                .iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec))
                .collect();
            opt.step(&mut store, &grads, cfg.lr);
        }
    }

    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(Tensor::from_rows(&xte)?);
    let logits = lin.forward(&mut g, &p, x)?;
    let out = g.value(logits);
    let correct = yte
        .iter()
        .enumerate()
        .filter(|&(i, &y)| crate::encoders::argmax(out.row(i)) == y)
        .count();
    Ok(correct as f64 / yte.len() as f64)
}
