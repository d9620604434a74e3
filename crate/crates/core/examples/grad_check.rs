//! Central-difference gradient checks of tape primitives and of a whole
//! fusion layer stack.

use mmdistill::gradcheck::grad_check;
use mmdistill::rng::{RngStream, StreamId};
use mmdistill::tensor::Tensor;

fn random(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape")
}

fn main() -> mmdistill::Result<()> {
    let mut rng = RngStream::new(0, StreamId::Init);
    let eps = 1e-5;

    let err = grad_check(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            let y = g.gelu(y);
            let y = g.softmax(y)?;
            g.softmax_cross_entropy(y, &[0, 2, 1])
        },
        &[
            random(&mut rng, 3, 5),
            random(&mut rng, 1, 5).reshape(vec![5])?,
            random(&mut rng, 1, 5).reshape(vec![5])?,
        ],
        eps,
    )?;
    println!("layer_norm -> gelu -> softmax -> cross-entropy: {err:.2e}");

    let err = grad_check(
        |g, v| {
            let y = g.attention(v[0], v[1], v[2], 4, 2, None)?;
            let y = g.theta_average(y, 4, 3)?;
            Ok(g.mean_all(y))
        },
        &[
            random(&mut rng, 8, 4),
            random(&mut rng, 8, 4),
            random(&mut rng, 8, 4),
        ],
        eps,
    )?;
    println!("two-head attention -> theta average: {err:.2e}");

    let teacher = random(&mut rng, 4, 6);
    let err = grad_check(
        |g, v| {
            let ce = g.softmax_cross_entropy(v[0], &[1, 0, 5, 3])?;
            let kl = g.kl_divergence(&teacher, v[0])?;
            g.weighted_sum(&[(ce, 0.7), (kl, 0.3)])
        },
        &[random(&mut rng, 4, 6)],
        eps,
    )?;
    println!("0.7 * CE + 0.3 * KL: {err:.2e}");
    Ok(())
}
