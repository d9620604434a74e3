//! Parameter-free token reduction by contiguous group averaging.
//!
//! A modality producing `k > theta` tokens is partitioned, in token order,
//! into `theta` groups: the first `theta - 1` hold `k / theta` tokens and the
//! last one also absorbs the `k % theta` remainder. Each group is replaced by
//! its mean. When `k <= theta` the tokens pass through untouched.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub theta: usize,
}

impl ReductionConfig {
    pub fn new(theta: usize) -> Result<Self> {
        if theta == 0 {
            return Err(config("theta must be at least 1"));
        }
        Ok(Self { theta })
    }
}

/// Number of tokens left after reduction.
pub fn reduced_token_count(k: usize, theta: usize) -> usize {
    k.min(theta)
}

/// `(start, len)` of each contiguous group. Passthrough yields `k` singleton groups.
pub fn theta_groups(k: usize, theta: usize) -> Vec<(usize, usize)> {
    if k <= theta {
        return (0..k).map(|i| (i, 1)).collect();
    }
    let size = k / theta;
    let mut groups: Vec<(usize, usize)> = (0..theta).map(|g| (g * size, size)).collect();
    if let Some(last) = groups.last_mut() {
        last.1 += k % theta;
    }
    groups
}

/// Reduces a `k x d` token matrix to `min(k, theta) x d`.
pub fn theta_average(tokens: &Tensor, theta: usize) -> Result<Tensor> {
    if theta == 0 {
        return Err(config("theta must be at least 1"));
    }
    if tokens.shape().len() != 2 {
        return Err(contract("theta_average expects a k x d matrix"));
    }
    let (k, d) = (tokens.rows(), tokens.cols());
    if k <= theta {
        return Ok(tokens.clone());
    }
    let mut out = Vec::with_capacity(theta * d);
    for (start, len) in theta_groups(k, theta) {
        let mut acc = vec![0.0; d];
        for t in start..start + len {
            acc.iter_mut().zip(tokens.row(t)).for_each(|(a, v)| *a += v);
        }
        out.extend(acc.into_iter().map(|a| a / len as f64));
    }
    Tensor::matrix(theta, d, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_partition() {
        let groups = theta_groups(785, 300);
        assert_eq!(groups.len(), 300);
        assert!(groups[..299].iter().all(|g| g.1 == 2));
        assert_eq!(groups[299], (598, 187));
        assert_eq!(groups.iter().map(|g| g.1).sum::<usize>(), 785);
    }

    #[test]
    fn hand_example() {
        let t = Tensor::matrix(5, 1, vec![1.0, 3.0, 5.0, 7.0, 9.0]).unwrap();
        let r = theta_average(&t, 2).unwrap();
        assert_eq!(r.data(), &[2.0, 7.0]);
    }

    #[test]
    fn passthrough_when_under_cap() {
        let t = Tensor::matrix(100, 3, (0..300).map(|i| i as f64).collect()).unwrap();
        assert_eq!(theta_average(&t, 300).unwrap(), t);
        assert_eq!(theta_average(&t, 100).unwrap(), t);
    }

    #[test]
    fn counts() {
        assert_eq!(reduced_token_count(785, 300), 300);
        assert_eq!(reduced_token_count(5, 5), 5);
        assert_eq!(reduced_token_count(1024, 512), 512);
    }

    #[test]
    fn zero_theta_is_rejected() {
        let t = Tensor::zeros(&[4, 2]);
        assert!(matches!(theta_average(&t, 0), Err(crate::Error::Config(_))));
        assert!(ReductionConfig::new(0).is_err());
    }

    #[test]
    fn mean_is_preserved_when_theta_divides_k() {
        let t = Tensor::matrix(12, 2, (0..24).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap();
        let r = theta_average(&t, 4).unwrap();
        for c in 0..2 {
            let before: f64 = (0..12).map(|i| t.row(i)[c]).sum::<f64>() / 12.0;
            let after: f64 = (0..4).map(|i| r.row(i)[c]).sum::<f64>() / 4.0;
            assert!((before - after).abs() < 1e-15);
        }
    }
}
