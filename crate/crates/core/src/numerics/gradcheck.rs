use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which gradient coordinates are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Relative error used by the gradient checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective is {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of a scalar function of `inputs` with
/// fourth-order central differences (steps `h` and `h/2`) and returns the
/// largest relative error found.
///
/// `coords_per_input` limits the check to a seeded random subset of each
/// input's coordinates; `None` checks all of them.
pub fn grad_check_subset<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    coords_per_input: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut worst: f64 = 0.0;
    let mut perturbed = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads
            .get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = inputs[i].data()[c];
            let mut at = |x: f64| {
                perturbed[i].data_mut()[c] = x;
                eval_scalar(&f, &perturbed)
            };
            let wide = at(orig + h)? - at(orig - h)?;
            let narrow = at(orig + h / 2.0)? - at(orig - h / 2.0)?;
            perturbed[i].data_mut()[c] = orig;
            // Richardson extrapolation of the central differences at h and h/2
            // (the five-point stencil): truncation error O(h^4) instead of O(h^2).
            let numeric = (8.0 * narrow - wide) / (6.0 * h);
            worst = worst.max(relative_error(analytic[c], numeric));
        }
    }
    Ok(worst)
}

/// [`grad_check_subset`] over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_subset(f, inputs, h, None, 0)
}
