//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::Scalar;

use super::{Graph, Tensor, Var};

fn evaluate<T: Scalar, F>(f: &F, points: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarOutput(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Max over checked coordinates of `|analytic - central| / max(1, |analytic|)`.
///
/// `f` receives one graph node per entry of `points`.
pub fn grad_check<T: Scalar, F>(f: F, points: &[Tensor<T>], eps: T) -> Result<T>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, points, eps, usize::MAX, 0)
}

/// Like [`grad_check`] but probes at most `max_per_input` seeded coordinates of each input.
pub fn grad_check_sampled<T: Scalar, F>(
    f: F,
    points: &[Tensor<T>],
    eps: T,
    max_per_input: usize,
    seed: u64,
) -> Result<T>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(eps > T::zero()) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = T::zero();
    for (pi, point) in points.iter().enumerate() {
        let analytic = grads.take(vars[pi], point.shape())?;
        let n = point.numel();
        let coords: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_per_input).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let mut probe = points.to_vec();
            // divide by the representable step actually taken
            let (up, down) = (point.data()[j] + eps, point.data()[j] - eps);
            probe[pi].data_mut()[j] = up;
            let plus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[j] = down;
            let minus = evaluate(&f, &probe)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "function at input {pi} coordinate {j} +/- eps"
                )));
            }
            let numeric = (plus - minus) / (up - down);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(T::one());
            if err > worst || err.is_nan() {
                worst = err;
            }
        }
    }
    Ok(worst)
}
