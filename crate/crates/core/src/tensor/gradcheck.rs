use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-3;

/// Sampled inputs are pushed at least this far from zero so that kinked
/// ops (relu) are never probed across their kink.
const KINK_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Probes skipped because the central difference straddled a relu kink.
    pub skipped_kinks: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Reduces a non-scalar output with fixed random weights so every output
/// element contributes a distinct gradient.
fn reduce_to_scalar<'g>(g: &mut Graph<'g, f64>, out: Var, seed: u64) -> Result<Var> {
    let n = g.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::new(g.shape(out).to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Finite-difference check of an op built from fresh random inputs.
///
/// Returns the max over input elements of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(op: F, input_shapes: &[Vec<usize>], seed: u64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = input_shapes
        .iter()
        .map(|s| {
            let mut t = Tensor::<f64>::randn(s.clone(), 1.0, &mut rng);
            for x in t.data_mut() {
                if x.abs() < KINK_MARGIN {
                    *x = KINK_MARGIN.copysign(*x);
                }
            }
            t
        })
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let loss = reduce_to_scalar(&mut g, out, seed)?;
        Ok(g.scalar_value(loss))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let loss = reduce_to_scalar(&mut g, out, seed)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut perturbed = inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.leaf(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for e in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[e];
            perturbed[i].data_mut()[e] = x0 + FD_STEP;
            let up = eval(&perturbed)?;
            perturbed[i].data_mut()[e] = x0 - FD_STEP;
            let down = eval(&perturbed)?;
            perturbed[i].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[e], numeric));
        }
    }
    if !worst.is_finite() {
        return Err(Error::Numeric("non-finite gradient check error".into()));
    }
    Ok(worst)
}

/// Finite-difference check of a scalar function of every parameter in
/// `store`. With `per_tensor_limit`, only that many randomly chosen
/// elements of each tensor are probed. Probes whose step moves any relu
/// input across zero are skipped and counted, since the central difference
/// is meaningless there.
pub fn gradcheck_fn<F>(
    store: &mut ParamStore<f64>,
    loss_fn: F,
    per_tensor_limit: Option<usize>,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a ParamStore<f64>) -> Result<Var>,
{
    let (analytic, pattern) = {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        if g.value(loss).len() != 1 {
            return Err(Error::contract("gradcheck_fn needs a scalar loss"));
        }
        (g.backward(loss)?, g.relu_pattern())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let a = analytic.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let elems: Vec<usize> = match per_tensor_limit {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for e in elems {
            let x0 = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = x0 + FD_STEP;
            let (up, up_pattern) = {
                let mut g = Graph::new();
                let l = loss_fn(&mut g, store)?;
                (g.scalar_value(l), g.relu_pattern())
            };
            store.get_mut(id).data_mut()[e] = x0 - FD_STEP;
            let (down, down_pattern) = {
                let mut g = Graph::new();
                let l = loss_fn(&mut g, store)?;
                (g.scalar_value(l), g.relu_pattern())
            };
            store.get_mut(id).data_mut()[e] = x0;
            if up_pattern != pattern || down_pattern != pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_error(a[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = format!("{}[{e}]", store.name(id));
            }
        }
    }
    if !report.max_rel_error.is_finite() {
        return Err(Error::Numeric(format!("non-finite error at {}", report.worst)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let err = gradcheck(|g, x| g.matmul(x[0], x[1]), &[vec![3, 4], vec![4, 2]], 1).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_passes() {
        let err = gradcheck(
            |g, x| {
                let s = g.softmax(x[0], 1)?;
                let l = g.cross_entropy(x[0], &[0, 2, 1], u32::MAX)?;
                let t = g.sum(s);
                g.add(l, t)
            },
            &[vec![3, 4]],
            2,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn wrong_derivative_is_caught() {
        let err = gradcheck(|g, x| Ok(g.map(x[0], |v| v * v * v, |v, _| 2.0 * v)), &[vec![5]], 3).unwrap();
        assert!(err > 1e-2, "{err}");
    }
}
