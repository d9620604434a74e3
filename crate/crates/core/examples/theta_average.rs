//! Contiguous-group token averaging: 785 tokens capped at 300 and 100.

use mmdistill::reduction::{theta_average, theta_groups};
use mmdistill::rng::{RngStream, StreamId};
use mmdistill::tensor::Tensor;

fn main() -> mmdistill::Result<()> {
    let (k, d) = (785, 4);
    let mut rng = RngStream::new(0, StreamId::Data);
    let tokens = Tensor::matrix(k, d, (0..k * d).map(|_| rng.normal()).collect())?;
    for theta in [1000, 300, 100, 1] {
        let groups = theta_groups(k, theta);
        let reduced = theta_average(&tokens, theta)?;
        let last = groups.last().copied().unwrap_or((0, 0));
        println!(
            "theta {theta:>4}: {k} -> {} tokens, first group {:?}, last group starts at {} with {} tokens",
            reduced.rows(),
            groups[0],
            last.0,
            last.1
        );
    }
    let reduced = theta_average(&tokens, 300)?;
    let manual: f64 = (598..785).map(|t| tokens.row(t)[0]).sum::<f64>() / 187.0;
    println!(
        "last reduced token, first feature: {:.6} (direct mean {:.6})",
        reduced.row(299)[0],
        manual
    );
    Ok(())
}
