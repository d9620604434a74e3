#![allow(dead_code)]

use mmdistill::encoders::EncoderSpec;
use mmdistill::fusion::FusionConfig;
use mmdistill::gradcheck::{grad_check, grad_check_params};
use mmdistill::graph::{Graph, Var};
use mmdistill::modality::ModalitySet;
use mmdistill::model::{Model, ModelConfig};
use mmdistill::reduction::theta_average;
use mmdistill::rng::{RngStream, StreamId};
use mmdistill::synthdata::{generate_dataset, DatasetSpec};
use mmdistill::tensor::Tensor;
use mmdistill::training::{ce_loss, kl_loss};
use mmdistill::Result;

pub const EPS: f64 = 1e-5;

pub fn rand_tensor(rng: &mut RngStream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| scale * rng.normal()).collect(),
    )
    .unwrap()
}

/// Scalar readout `mean(x @ w)` with a fixed random `w`, so every element
/// of `x` gets a distinct gradient.
fn readout(g: &mut Graph, x: Var, rng_seed: u64) -> Result<Var> {
    let cols = g.value(x).cols();
    let mut r = RngStream::with_tag(rng_seed, StreamId::Init, "readout");
    let w = g.constant(rand_tensor(&mut r, &[cols, 1], 1.0));
    let y = g.matmul(x, w)?;
    Ok(g.mean_all(y))
}

/// Worst relative gradient error per primitive over `instances` random
/// instances each.
pub fn primitive_suite(instances: usize) -> Vec<(&'static str, f64)> {
    type Case = (
        &'static str,
        Box<dyn Fn(&mut RngStream, u64) -> Result<f64>>,
    );
    let cases: Vec<Case> = vec![
        (
            "matmul",
            Box::new(|r, s| {
                let (a, b, c) = (1 + r.below(4), 1 + r.below(4), 1 + r.below(4));
                grad_check(
                    |g, v| {
                        let y = g.matmul(v[0], v[1])?;
                        readout(g, y, s)
                    },
                    &[rand_tensor(r, &[a, b], 1.0), rand_tensor(r, &[b, c], 1.0)],
                    EPS,
                )
            }),
        ),
        (
            "add_bias",
            Box::new(|r, s| {
                let (a, c) = (1 + r.below(4), 1 + r.below(4));
                grad_check(
                    |g, v| {
                        let y = g.add_bias(v[0], v[1])?;
                        readout(g, y, s)
                    },
                    &[rand_tensor(r, &[a, c], 1.0), rand_tensor(r, &[c], 1.0)],
                    EPS,
                )
            }),
        ),
        (
            "add",
            Box::new(|r, s| {
                let (a, c) = (1 + r.below(4), 1 + r.below(4));
                grad_check(
                    |g, v| {
                        let y = g.add(v[0], v[1])?;
                        readout(g, y, s)
                    },
                    &[rand_tensor(r, &[a, c], 1.0), rand_tensor(r, &[a, c], 1.0)],
                    EPS,
                )
            }),
        ),
        (
            "scale",
            Box::new(|r, s| {
                let k = r.normal();
                grad_check(
                    move |g, v| {
                        let y = g.scale(v[0], k);
                        readout(g, y, s)
                    },
                    &[rand_tensor(r, &[3, 2], 1.0)],
                    EPS,
                )
            }),
        ),
        (
            "gelu",
            Box::new(|r, s| {
                grad_check(
                    |g, v| {
                        let y = g.gelu(v[0]);
                        readout(g, y, s)
                    },
                    &[rand_tensor(r, &[4, 3], 2.0)],
                    EPS,
                )
            }),
        ),
        (
            "layer_norm",
            Box::new(|r, s| {
                let c = 2 + r.below(5);
                grad_check(
                    |g, v| {
                        let y = g.layer_norm(v[0], v[1], v[2])?;
                        readout(g, y, s)
                    },
                    &[
                        rand_tensor(r, &[3, c], 1.5),
                        rand_tensor(r, &[c], 1.0),
                        rand_tensor(r, &[c], 1.0),
                    ],
                    EPS,
                )
            }),
        ),
        (
            "softmax",
            Box::new(|r, s| {
                grad_check(
                    |g, v| {
                        let y = g.softmax(v[0])?;
                        readout(g, y, s)
                    },
                    &[rand_tensor(r, &[3, 5], 2.0)],
                    EPS,
                )
            }),
        ),
        (
            "attention",
            Box::new(|r, s| {
                let (seg, heads) = (1 + r.below(4), 1 + r.below(2));
                let rows = 2 * seg;
                let dim = 2 * heads;
                let ins = [
                    rand_tensor(r, &[rows, dim], 1.0),
                    rand_tensor(r, &[rows, dim], 1.0),
                    rand_tensor(r, &[rows, dim], 1.0),
                ];
                grad_check(
                    |g, v| {
                        let y = g.attention(v[0], v[1], v[2], seg, heads, None)?;
                        readout(g, y, s)
                    },
                    &ins,
                    EPS,
                )
            }),
        ),
        (
            "attention_dropout",
            Box::new(|r, s| {
                let ins = [
                    rand_tensor(r, &[6, 4], 1.0),
                    rand_tensor(r, &[6, 4], 1.0),
                    rand_tensor(r, &[6, 4], 1.0),
                ];
                grad_check(
                    |g, v| {
                        let mut d = RngStream::with_tag(s, StreamId::Dropout, "gradcheck");
                        let y = g.attention(v[0], v[1], v[2], 3, 2, Some((0.3, &mut d)))?;
                        readout(g, y, s)
                    },
                    &ins,
                    EPS,
                )
            }),
        ),
        (
            "theta_average",
            Box::new(|r, s| {
                let k = 1 + r.below(9);
                let theta = 1 + r.below(5);
                grad_check(
                    |g, v| {
                        let y = g.theta_average(v[0], k, theta)?;
                        readout(g, y, s)
                    },
                    &[rand_tensor(r, &[2 * k, 3], 1.0)],
                    EPS,
                )
            }),
        ),
        (
            "embed",
            Box::new(|r, s| {
                let (k, dim) = (1 + r.below(3), 1 + r.below(3));
                let ins = [
                    rand_tensor(r, &[2 * k, dim], 1.0),
                    rand_tensor(r, &[dim], 1.0),
                    rand_tensor(r, &[k, dim], 1.0),
                ];
                grad_check(
                    |g, v| {
                        let y = g.embed(
                            Some(v[0]),
                            Some(v[1]),
                            Some(v[2]),
                            vec![Some(1), None, Some(0)],
                            k,
                            dim,
                        )?;
                        readout(g, y, s)
                    },
                    &ins,
                    EPS,
                )
            }),
        ),
        (
            "interleave",
            Box::new(|r, s| {
                let ins = [
                    rand_tensor(r, &[1, 3], 1.0),
                    rand_tensor(r, &[4, 3], 1.0),
                    rand_tensor(r, &[6, 3], 1.0),
                ];
                grad_check(
                    |g, v| {
                        let y = g.interleave(&[(v[0], 1), (v[1], 2), (v[2], 3)], 2)?;
                        readout(g, y, s)
                    },
                    &ins,
                    EPS,
                )
            }),
        ),
        (
            "segment_mean",
            Box::new(|r, s| {
                grad_check(
                    |g, v| {
                        let y = g.segment_mean(v[0], 5, &[(0, 2), (2, 3), (4, 1)])?;
                        readout(g, y, s)
                    },
                    &[rand_tensor(r, &[10, 3], 1.0)],
                    EPS,
                )
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(|r, _| {
                let labels: Vec<usize> = (0..4).map(|_| r.below(5)).collect();
                grad_check(
                    |g, v| g.softmax_cross_entropy(v[0], &labels),
                    &[rand_tensor(r, &[4, 5], 2.0)],
                    EPS,
                )
            }),
        ),
        (
            "kl_divergence",
            Box::new(|r, _| {
                let teacher = rand_tensor(r, &[4, 5], 2.0);
                grad_check(
                    |g, v| g.kl_divergence(&teacher, v[0]),
                    &[rand_tensor(r, &[4, 5], 2.0)],
                    EPS,
                )
            }),
        ),
        (
            "weighted_sum",
            Box::new(|r, s| {
                let (w0, w1) = (r.normal(), r.normal());
                grad_check(
                    move |g, v| {
                        let y = g.weighted_sum(&[(v[0], w0), (v[1], w1)])?;
                        readout(g, y, s)
                    },
                    &[rand_tensor(r, &[3, 2], 1.0), rand_tensor(r, &[3, 2], 1.0)],
                    EPS,
                )
            }),
        ),
        (
            "mean_all",
            Box::new(|r, _| {
                grad_check(
                    |g, v| Ok(g.mean_all(v[0])),
                    &[rand_tensor(r, &[3, 4], 1.0)],
                    EPS,
                )
            }),
        ),
    ];
    cases
        .iter()
        .map(|(name, case)| {
            let mut rng = RngStream::with_tag(7, StreamId::Init, name);
            let worst = (0..instances)
                .map(|i| case(&mut rng, i as u64).unwrap_or(f64::INFINITY))
                .fold(0.0f64, f64::max);
            (*name, worst)
        })
        .collect()
}

pub fn small_spec() -> DatasetSpec {
    DatasetSpec {
        train_size: 4,
        val_size: 2,
        test_size: 2,
        ..DatasetSpec::default()
    }
}

/// A student-shaped network (trainable encoders with attention, missing
/// tokens, one fusion layer) small enough to probe every parameter.
pub fn small_student(spec: &DatasetSpec) -> ModelConfig {
    ModelConfig {
        encoders: spec
            .modalities
            .iter()
            .map(|m| EncoderSpec {
                modality_id: m.modality_id,
                input_tokens: m.token_count,
                input_dim: m.token_dim,
                width: 4,
                depth: 1,
                out_dim: 4,
                attention: true,
                trainable: true,
            })
            .collect(),
        fusion: FusionConfig {
            dim: 4,
            layers: 1,
            heads: 2,
            attention_dropout: 0.0,
            missing_tokens: true,
            head_hidden: 4,
        },
        theta: 4,
        head_classes: spec.head_classes(),
    }
}

/// Gradient error of the full student forward plus the mixed
/// cross-entropy / distillation loss, with one sample missing a modality.
pub fn student_grad_error(alpha: f64) -> f64 {
    let spec = small_spec();
    let splits = generate_dataset(&spec).unwrap();
    let student = Model::new(small_student(&spec), 3, "student").unwrap();
    let teacher = Model::new(small_student(&spec), 4, "teacher").unwrap();
    let idx = [0, 1];
    let retained = [
        ModalitySet::from_indices(&[0, 2]).unwrap(),
        ModalitySet::full(3),
    ];
    let teacher_logits = teacher
        .logits(&splits.train, &idx, &retained, None)
        .unwrap();
    let labels: Vec<Vec<usize>> = (0..spec.heads.len())
        .map(|h| {
            idx.iter()
                .map(|&i| splits.train.samples[i].label[h])
                .collect()
        })
        .collect();
    grad_check_params(
        &student.store,
        |g, p| {
            let fwd = student.forward(g, p, &splits.train, &idx, &retained, None, None)?;
            let ce = ce_loss(g, &fwd.logits, &labels)?;
            let kl = kl_loss(g, &teacher_logits, &fwd.logits)?;
            g.weighted_sum(&[(ce, alpha), (kl, 1.0 - alpha)])
        },
        EPS,
        usize::MAX,
    )
    .unwrap()
}

/// Brute force: group `k` rows as the reduction describes, then average.
pub fn theta_oracle(x: &Tensor, theta: usize) -> Vec<Vec<f64>> {
    let k = x.rows();
    if k <= theta {
        return (0..k).map(|i| x.row(i).to_vec()).collect();
    }
    let size = k / theta;
    let mut group_of = vec![0usize; k];
    for (t, g) in group_of.iter_mut().enumerate() {
        *g = (t / size).min(theta - 1);
    }
    (0..theta)
        .map(|gi| {
            let members: Vec<usize> = (0..k).filter(|&t| group_of[t] == gi).collect();
            (0..x.cols())
                .map(|j| members.iter().map(|&t| x.row(t)[j]).sum::<f64>() / members.len() as f64)
                .collect()
        })
        .collect()
}

/// Largest deviation of `theta_average` from the oracle over random cases.
pub fn theta_oracle_error(cases: usize) -> f64 {
    let mut rng = RngStream::with_tag(11, StreamId::Data, "theta-oracle");
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = 1 + rng.below(1024);
        let theta = 1 + rng.below(512);
        let d = 1 + rng.below(8);
        let x = rand_tensor(&mut rng, &[k, d], 1.0);
        let got = theta_average(&x, theta).unwrap();
        let want = theta_oracle(&x, theta);
        assert_eq!(got.rows(), want.len());
        for (i, row) in want.iter().enumerate() {
            for (a, b) in got.row(i).iter().zip(row) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}
