//! Central-difference validation of the tape's analytic gradients.

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar graph against central
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every input element.
///
/// `build` is called once for the analytic pass and twice per input element;
/// it must be deterministic (seed any dropout inside it).
pub fn grad_check<F>(build: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(crate::error::config(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(contract("grad_check needs a scalar output"));
        }
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`grad_check`] over the trainable parameters of a store. At most
/// `max_per_param` evenly spaced elements of each parameter are probed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    build: F,
    epsilon: f64,
    max_per_param: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(crate::error::config(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let out = build(&mut g, &p)?;
        if g.value(out).len() != 1 {
            return Err(contract("grad_check needs a scalar output"));
        }
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let root = build(&mut g, &p)?;
    g.backward(root)?;
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (id, &var) in store.ids().zip(p.vars()) {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        let analytic = g.grad(var).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let stride = n.div_ceil(max_per_param.max(1));
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + epsilon;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - epsilon;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max((analytic[j] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64) * 0.1 - 0.4).collect()).unwrap();
        let err = grad_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let y = g.matmul(v[0], wv)?;
                Ok(g.mean_all(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_scalar_root_and_bad_epsilon() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(grad_check(|_, v| Ok(v[0]), std::slice::from_ref(&x), 1e-5).is_err());
        assert!(grad_check(|g, v| Ok(g.mean_all(v[0])), &[x], 1e-2).is_err());
    }
}
