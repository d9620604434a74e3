mod common;

use mmdistill::reduction::{reduced_token_count, theta_average, theta_groups};
use mmdistill::rng::{RngStream, StreamId};
use proptest::prelude::*;

#[test]
fn random_cases_match_group_then_mean() {
    assert!(common::theta_oracle_error(1000) <= 1e-12);
}

#[test]
fn seven_hundred_eighty_five_tokens_into_three_hundred() {
    let groups = theta_groups(785, 300);
    assert_eq!(groups.len(), 300);
    assert_eq!(groups.last(), Some(&(598, 187)));
    let mut rng = RngStream::new(0, StreamId::Data);
    let x = common::rand_tensor(&mut rng, &[785, 2], 1.0);
    assert_eq!(theta_average(&x, 300).unwrap().rows(), 300);
}

#[test]
fn theta_one_is_the_global_mean() {
    let mut rng = RngStream::new(1, StreamId::Data);
    let x = common::rand_tensor(&mut rng, &[7, 3], 1.0);
    let y = theta_average(&x, 1).unwrap();
    for j in 0..3 {
        let mean = (0..7).map(|i| x.row(i)[j]).sum::<f64>() / 7.0;
        assert!((y.row(0)[j] - mean).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn groups_partition_the_tokens(k in 1usize..2000, theta in 1usize..600) {
        let groups = theta_groups(k, theta);
        prop_assert_eq!(groups.len(), reduced_token_count(k, theta));
        let mut next = 0;
        for &(start, len) in &groups {
            prop_assert_eq!(start, next);
            prop_assert!(len >= 1);
            next += len;
        }
        prop_assert_eq!(next, k);
        if k > theta {
            let size = k / theta;
            prop_assert!(groups[..theta - 1].iter().all(|g| g.1 == size));
            prop_assert_eq!(groups[theta - 1].1, size + k % theta);
        }
    }

    #[test]
    fn reduction_preserves_the_column_sums_weighted_by_group_size(k in 1usize..200, theta in 1usize..64, seed in 0u64..1000) {
        let mut rng = RngStream::new(seed, StreamId::Data);
        let x = common::rand_tensor(&mut rng, &[k, 3], 1.0);
        let y = theta_average(&x, theta).unwrap();
        let groups = theta_groups(k, theta);
        for j in 0..3 {
            let total: f64 = (0..k).map(|i| x.row(i)[j]).sum();
            let back: f64 = groups.iter().enumerate().map(|(g, &(_, len))| y.row(g)[j] * len as f64).sum();
            prop_assert!((total - back).abs() < 1e-9);
        }
    }
}
