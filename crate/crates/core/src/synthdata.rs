//! Seeded synthetic multimodal action datasets.
//!
//! Every label head `h` owns one or more class factors (a head with classes
//! `c = a * 2 + b` can be split into factors of size 4 and 2). Each factor
//! value has an orthogonal one-hot code; the latent of a sample is the
//! concatenation of its factor codes. Modality `m` renders that latent with a
//! fixed random linear map after weighting head `h` by
//! `informativeness[m][h]` and blanking any factor the modality does not
//! observe. Token `i` of a stream is
//!
//! ```text
//! x_i = envelope_i * R_m z + p_{m,i} + sigma_m * eps_i
//! ```
//!
//! where the envelope is a Gaussian bump at a random position (the "action"
//! happens somewhere in the clip), `p_{m,i}` is a fixed per-position offset
//! and `eps_i` is standard normal noise.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{self, Cursor};
use crate::error::{config, contract, Result};
use crate::modality::{ModalitySet, MAX_MODALITIES};
use crate::rng::{RngStream, StreamId};
use crate::tensor::Tensor;

pub const DATASET_SCHEMA: &str = "mmdistill.dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub classes: usize,
    /// Factor cardinalities whose product is `classes`; empty means one factor.
    #[serde(default)]
    pub factors: Vec<usize>,
}

impl HeadSpec {
    pub fn new(name: &str, classes: usize) -> Self {
        Self {
            name: name.to_string(),
            classes,
            factors: Vec::new(),
        }
    }

    pub fn factor_sizes(&self) -> Vec<usize> {
        if self.factors.is_empty() {
            vec![self.classes]
        } else {
            self.factors.clone()
        }
    }

    /// Mixed-radix digits of `class`, most significant factor first.
    pub fn factor_values(&self, class: usize) -> Vec<usize> {
        let sizes = self.factor_sizes();
        let mut rest = class;
        let mut values = vec![0; sizes.len()];
        for (i, &s) in sizes.iter().enumerate().rev() {
            values[i] = rest % s;
            rest /= s;
        }
        values
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub modality_id: usize,
    pub name: String,
    pub token_count: usize,
    pub token_dim: usize,
    pub noise_sigma: f64,
    /// Signal weight per label head, each in `[0, 1]`.
    pub informativeness: Vec<f64>,
    /// Per head, the factor indices this modality does not observe.
    #[serde(default)]
    pub hidden_factors: Vec<Vec<usize>>,
}

impl ModalityConfig {
    fn hides(&self, head: usize, factor: usize) -> bool {
        self.hidden_factors
            .get(head)
            .is_some_and(|h| h.contains(&factor))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub modalities: Vec<ModalityConfig>,
    pub heads: Vec<HeadSpec>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Per-modality probability that a training sample lacks the modality.
    pub missing_prob: Vec<f64>,
    /// Scale of the fixed per-position offsets.
    pub position_scale: f64,
    /// Probability that a training label is replaced by a uniformly drawn
    /// class (independently per head). Validation and test labels are clean.
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let heads = vec![
            HeadSpec::new("noun", 12),
            HeadSpec {
                name: "verb".into(),
                classes: 8,
                factors: vec![4, 2],
            },
        ];
        let modality =
            |id: usize, name: &str, k, d, sigma, inf: [f64; 2], hidden: Vec<Vec<usize>>| {
                ModalityConfig {
                    modality_id: id,
                    name: name.into(),
                    token_count: k,
                    token_dim: d,
                    noise_sigma: sigma,
                    informativeness: inf.to_vec(),
                    hidden_factors: hidden,
                }
            };
        Self {
            modalities: vec![
                modality(0, "V", 48, 24, 1.5, [0.55, 0.55], vec![vec![], vec![1]]),
                modality(1, "F", 32, 24, 1.5, [0.4, 0.45], vec![]),
                modality(2, "A", 16, 12, 1.5, [0.4, 0.4], vec![]),
            ],
            heads,
            train_size: 4000,
            val_size: 500,
            test_size: 1000,
            missing_prob: vec![0.01, 0.01, 0.02],
            position_scale: 0.5,
            label_noise: 0.3,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Default geometry with the verb factorized across streams: V sees
    /// only the first verb factor and F only the second, so verb is
    /// recoverable from V+F but from neither alone. Labels are clean.
    pub fn factorized() -> Self {
        let mut spec = Self {
            label_noise: 0.0,
            ..Self::default()
        };
        spec.modalities[1].informativeness = vec![0.4, 0.55];
        spec.modalities[1].hidden_factors = vec![vec![], vec![0]];
        spec
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn head_classes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.classes).collect()
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities.len();
        if m == 0 || m > MAX_MODALITIES {
            return Err(config(format!(
                "modality count {m} outside 1..={MAX_MODALITIES}"
            )));
        }
        if self.heads.is_empty() {
            return Err(config("at least one label head is required"));
        }
        for h in &self.heads {
            if h.classes == 0 {
                return Err(config(format!("head {} has zero classes", h.name)));
            }
            if h.factor_sizes().iter().product::<usize>() != h.classes
                || h.factor_sizes().contains(&0)
            {
                return Err(config(format!(
                    "factors of head {} do not multiply to its classes",
                    h.name
                )));
            }
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(config("every split needs at least one sample"));
        }
        for (i, mc) in self.modalities.iter().enumerate() {
            if mc.modality_id != i {
                return Err(config(format!(
                    "modality ids must be 0..M in order, got {} at {i}",
                    mc.modality_id
                )));
            }
            if mc.token_count == 0 || mc.token_dim == 0 {
                return Err(config(format!(
                    "modality {i} needs positive token count and dim"
                )));
            }
            if mc.informativeness.len() != self.heads.len() {
                return Err(config(format!(
                    "modality {i} informativeness must have one weight per head"
                )));
            }
            if mc.informativeness.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(config(format!(
                    "modality {i} informativeness outside [0, 1]"
                )));
            }
            if mc.noise_sigma.is_nan() || mc.noise_sigma < 0.0 {
                return Err(config(format!(
                    "modality {i} noise sigma must be nonnegative"
                )));
            }
        }
        if self.missing_prob.len() != m {
            return Err(config("missing_prob needs one entry per modality"));
        }
        if self.missing_prob.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(config("missing probabilities must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(config("label noise must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One sample: raw streams for the available modalities plus one label per head.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSequence {
    pub sample_id: u64,
    /// Indexed by modality; `None` where the modality is unavailable.
    pub streams: Vec<Option<Tensor>>,
    pub label: Vec<usize>,
}

impl MultimodalSequence {
    pub fn availability(&self) -> ModalitySet {
        self.streams
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .fold(ModalitySet::EMPTY, |acc, (i, _)| acc.with(i))
    }

    pub fn stream(&self, m: usize) -> Option<&Tensor> {
        self.streams.get(m).and_then(Option::as_ref)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub split: Split,
    pub samples: Vec<MultimodalSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Fixed random rendering of the latent for every modality.
struct Renderer {
    latent_dim: usize,
    /// per head, per factor: offset into the latent vector
    offsets: Vec<Vec<usize>>,
    /// `token_dim x latent_dim` per modality
    maps: Vec<Vec<f64>>,
    /// `token_count x token_dim` per modality
    positions: Vec<Vec<f64>>,
}

impl Renderer {
    fn new(spec: &DatasetSpec) -> Self {
        let mut offsets = Vec::new();
        let mut latent_dim = 0;
        for h in &spec.heads {
            let mut o = Vec::new();
            for s in h.factor_sizes() {
                o.push(latent_dim);
                latent_dim += s;
            }
            offsets.push(o);
        }
        let mut maps = Vec::new();
        let mut positions = Vec::new();
        for mc in &spec.modalities {
            let mut rng = RngStream::with_tag(
                spec.seed,
                StreamId::Data,
                &format!("render/{}", mc.modality_id),
            );
            maps.push(
                (0..mc.token_dim * latent_dim)
                    .map(|_| rng.normal())
                    .collect(),
            );
            positions.push(
                (0..mc.token_count * mc.token_dim)
                    .map(|_| spec.position_scale * rng.normal())
                    .collect(),
            );
        }
        Self {
            latent_dim,
            offsets,
            maps,
            positions,
        }
    }

    fn latent(&self, spec: &DatasetSpec, m: usize, label: &[usize]) -> Vec<f64> {
        let mc = &spec.modalities[m];
        let mut z = vec![0.0; self.latent_dim];
        for (h, head) in spec.heads.iter().enumerate() {
            for (f, v) in head.factor_values(label[h]).into_iter().enumerate() {
                if !mc.hides(h, f) {
                    z[self.offsets[h][f] + v] = mc.informativeness[h];
                }
            }
        }
        z
    }

    fn render(&self, spec: &DatasetSpec, m: usize, label: &[usize], rng: &mut RngStream) -> Tensor {
        let mc = &spec.modalities[m];
        let (k, d) = (mc.token_count, mc.token_dim);
        let z = self.latent(spec, m, label);
        let map = &self.maps[m];
        let signal: Vec<f64> = (0..d)
            .map(|r| {
                (0..self.latent_dim)
                    .map(|c| map[r * self.latent_dim + c] * z[c])
                    .sum()
            })
            .collect();
        let center = rng.uniform_range(0.0, k as f64);
        let width = (k as f64 / 4.0).max(1.0);
        let mut data = Vec::with_capacity(k * d);
        for i in 0..k {
            let u = (i as f64 - center) / width;
            let env = (-u * u).exp();
            #[allow(clippy::needless_range_loop)]
            for j in 0..d {
                let noise = mc.noise_sigma * rng.normal();
                data.push(env * signal[j] + self.positions[m][i * d + j] + noise);
            }
        }
        Tensor::matrix(k, d, data).expect("render shape")
    }
}

fn sample_availability(missing: &[f64], rng: &mut RngStream) -> ModalitySet {
    loop {
        let mut s = ModalitySet::EMPTY;
        for (m, &p) in missing.iter().enumerate() {
            if !rng.bernoulli(p) {
                s = s.with(m);
            }
        }
        if !s.is_empty() {
            return s;
        }
    }
}

fn generate_split(spec: &DatasetSpec, renderer: &Renderer, split: Split, size: usize) -> Dataset {
    let m = spec.num_modalities();
    let samples = (0..size)
        .map(|j| {
            let mut rng =
                RngStream::with_tag(spec.seed, StreamId::Data, &format!("{}/{j}", split.name()));
            let label: Vec<usize> = spec.heads.iter().map(|h| rng.below(h.classes)).collect();
            let availability = match split {
                Split::Train => sample_availability(&spec.missing_prob, &mut rng),
                Split::Val | Split::Test => ModalitySet::full(m),
            };
            let streams = (0..m)
                .map(|mi| {
                    availability
                        .contains(mi)
                        .then(|| renderer.render(spec, mi, &label, &mut rng))
                })
                .collect();
            let label = if split == Split::Train && spec.label_noise > 0.0 {
                let mut noise =
                    RngStream::with_tag(spec.seed, StreamId::Data, &format!("label-noise/{j}"));
                label
                    .iter()
                    .zip(&spec.heads)
                    .map(|(&y, h)| {
                        if noise.bernoulli(spec.label_noise) {
                            noise.below(h.classes)
                        } else {
                            y
                        }
                    })
                    .collect()
            } else {
                label
            };
            MultimodalSequence {
                sample_id: j as u64,
                streams,
                label,
            }
        })
        .collect();
    Dataset {
        spec: spec.clone(),
        split,
        samples,
    }
}

/// Generates the train/val/test splits. Missing modalities are sampled for
/// the training split only (independently per modality, empty draws
/// rejected); validation and test samples carry every modality so that
/// evaluation protocols control availability explicitly.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let renderer = Renderer::new(spec);
    Ok(Splits {
        train: generate_split(spec, &renderer, Split::Train, spec.train_size),
        val: generate_split(spec, &renderer, Split::Val, spec.val_size),
        test: generate_split(spec, &renderer, Split::Test, spec.test_size),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub availability_rate: Vec<f64>,
    /// One histogram per label head.
    pub class_histogram: Vec<Vec<usize>>,
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(contract("statistics of an empty dataset"));
    }
    let m = dataset.spec.num_modalities();
    let n = dataset.len();
    let mut present = vec![0usize; m];
    let mut hist: Vec<Vec<usize>> = dataset
        .spec
        .heads
        .iter()
        .map(|h| vec![0; h.classes])
        .collect();
    for s in &dataset.samples {
        for mi in s.availability().iter() {
            present[mi] += 1;
        }
        for (h, &c) in s.label.iter().enumerate() {
            hist[h][c] += 1;
        }
    }
    Ok(DatasetStats {
        samples: n,
        availability_rate: present.iter().map(|&c| c as f64 / n as f64).collect(),
        class_histogram: hist,
    })
}

/// Payload per sample: `u64 sample_id`, `u32 availability bits`, one `u32`
/// per head label, then for each available modality in ascending order
/// `u32 rows`, `u32 cols` and `rows * cols` f64 values.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let header = json!({
        "schema": DATASET_SCHEMA,
        "split": dataset.split,
        "seed": dataset.spec.seed,
        "count": dataset.len(),
        "spec": dataset.spec,
    });
    let mut buf = Vec::new();
    for s in &dataset.samples {
        buf.extend_from_slice(&s.sample_id.to_le_bytes());
        buf.extend_from_slice(&s.availability().bits().to_le_bytes());
        for &l in &s.label {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for t in s.streams.iter().flatten() {
            buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            container::put_f64s(&mut buf, t.data());
        }
    }
    container::write(path, container::DATASET_MAGIC, &header, &buf)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (header, payload) = container::read(path, container::DATASET_MAGIC)?;
    if header["schema"] != DATASET_SCHEMA {
        return Err(container::malformed_header(
            path,
            format!("unexpected schema {}", header["schema"]),
        ));
    }
    let spec: DatasetSpec = serde_json::from_value(header["spec"].clone())?;
    let split: Split = serde_json::from_value(header["split"].clone())?;
    let count = header["count"]
        .as_u64()
        .ok_or_else(|| container::malformed_header(path, "missing count"))?
        as usize;
    let m = spec.num_modalities();
    let mut cur = Cursor::new(&payload, path);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let sample_id = cur.u64()?;
        let avail = ModalitySet::from_bits(cur.u32()?);
        let label = (0..spec.heads.len())
            .map(|_| cur.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut streams = vec![None; m];
        for mi in avail.iter() {
            if mi >= m {
                return Err(container::malformed_header(
                    path,
                    "availability names unknown modality",
                ));
            }
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            streams[mi] = Some(Tensor::matrix(rows, cols, cur.f64s(rows * cols)?)?);
        }
        samples.push(MultimodalSequence {
            sample_id,
            streams,
            label,
        });
    }
    cur.finish()?;
    Ok(Dataset {
        spec,
        split,
        samples,
    })
}

pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    write_dataset(&dir.join("train.mmds"), &splits.train)?;
    write_dataset(&dir.join("val.mmds"), &splits.val)?;
    write_dataset(&dir.join("test.mmds"), &splits.test)
}

pub fn read_splits(dir: &Path) -> Result<Splits> {
    Ok(Splits {
        train: read_dataset(&dir.join("train.mmds"))?,
        val: read_dataset(&dir.join("val.mmds"))?,
        test: read_dataset(&dir.join("test.mmds"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            train_size: 60,
            val_size: 10,
            test_size: 10,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn availability_never_empty_and_matches_streams() {
        let spec = DatasetSpec {
            missing_prob: vec![0.9, 0.9, 0.9],
            ..small_spec()
        };
        let s = generate_dataset(&spec).unwrap();
        for x in &s.train.samples {
            assert!(!x.availability().is_empty());
            for (m, st) in x.streams.iter().enumerate() {
                if let Some(t) = st {
                    let mc = &spec.modalities[m];
                    assert_eq!(t.shape(), &[mc.token_count, mc.token_dim]);
                }
            }
        }
    }

    #[test]
    fn zero_missing_means_full_availability() {
        let spec = DatasetSpec {
            missing_prob: vec![0.0; 3],
            ..small_spec()
        };
        let s = generate_dataset(&spec).unwrap();
        assert!(s
            .train
            .samples
            .iter()
            .all(|x| x.availability() == ModalitySet::full(3)));
        let stats = dataset_stats(&s.train).unwrap();
        assert_eq!(stats.availability_rate, vec![1.0; 3]);
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut spec = small_spec();
        spec.heads[0].classes = 0;
        assert!(matches!(
            generate_dataset(&spec),
            Err(crate::Error::Config(_))
        ));
        let spec = DatasetSpec {
            train_size: 0,
            ..small_spec()
        };
        assert!(generate_dataset(&spec).is_err());
        let spec = DatasetSpec {
            missing_prob: vec![1.0, 0.0, 0.0],
            ..small_spec()
        };
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn factor_digits() {
        let h = HeadSpec {
            name: "v".into(),
            classes: 8,
            factors: vec![4, 2],
        };
        assert_eq!(h.factor_values(0), vec![0, 0]);
        assert_eq!(h.factor_values(5), vec![2, 1]);
        assert_eq!(h.factor_values(7), vec![3, 1]);
    }

    #[test]
    fn file_round_trip_is_lossless() {
        let s = generate_dataset(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_splits(dir.path(), &s).unwrap();
        assert_eq!(read_splits(dir.path()).unwrap(), s);
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_dataset(&dir.path().join("nope.mmds")),
            Err(crate::Error::MissingArtifact(_))
        ));
    }
}
