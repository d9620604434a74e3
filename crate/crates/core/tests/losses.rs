use approx::assert_abs_diff_eq;
use mmdistill::graph::Graph;
use mmdistill::rng::{RngStream, StreamId};
use mmdistill::tensor::Tensor;
use mmdistill::training::student_loss;
use proptest::prelude::*;

fn ce(logits: &[f64], label: usize) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, logits.len(), logits.to_vec()).unwrap());
    let l = g.softmax_cross_entropy(x, &[label]).unwrap();
    g.value(l).data()[0]
}

fn kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let mut g = Graph::new();
    let q = g.constant(Tensor::matrix(1, q_logits.len(), q_logits.to_vec()).unwrap());
    let t = Tensor::matrix(1, p_logits.len(), p_logits.to_vec()).unwrap();
    let l = g.kl_divergence(&t, q).unwrap();
    g.value(l).data()[0]
}

#[test]
fn cross_entropy_against_uniform_two_class() {
    assert_abs_diff_eq!(ce(&[0.0, 0.0], 0), std::f64::consts::LN_2, epsilon = 1e-9);
}

#[test]
fn kl_of_three_quarters_against_uniform() {
    let p = [0.75f64.ln(), 0.25f64.ln()];
    assert_abs_diff_eq!(kl(&p, &[0.0, 0.0]), 0.130812, epsilon = 1e-6);
}

#[test]
fn mixed_loss_is_exact() {
    assert_eq!(student_loss(1.0, 0.5, 0.7), 0.85);
}

#[test]
fn kl_is_nonnegative_on_random_pairs() {
    let mut rng = RngStream::with_tag(0, StreamId::Data, "kl-pairs");
    for _ in 0..1000 {
        let c = 2 + rng.below(10);
        let p: Vec<f64> = (0..c).map(|_| 3.0 * rng.normal()).collect();
        let q: Vec<f64> = (0..c).map(|_| 3.0 * rng.normal()).collect();
        assert!(kl(&p, &q) >= 0.0);
    }
}

proptest! {
    #[test]
    fn kl_vanishes_on_identical_distributions(v in prop::collection::vec(-20.0f64..20.0, 2..12), shift in -5.0f64..5.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        prop_assert!(kl(&v, &shifted).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 2..12), shift in -50.0f64..50.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        prop_assert!((ce(&v, 0) - ce(&shifted, 0)).abs() < 1e-9);
    }
}
