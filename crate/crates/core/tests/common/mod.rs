//! Finite-difference oracle and random-case helpers shared by the
//! integration tests.

#![allow(dead_code)]

use esol::{Graph, Result, Tensor, Var};
use rand::Rng;

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Compare reverse-mode gradients of `sum(op(inputs) * projection)` against
/// central differences with step `h`. Only inputs flagged in `check` are
/// perturbed. Returns the worst relative error.
pub fn gradient_error<F>(op: F, inputs: &[Tensor<f64>], check: &[bool], projection_seed: u64, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    use rand::SeedableRng;
    let scalar = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let out = op(g, vars)?;
        let shape = g.value(out).shape().to_vec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(projection_seed);
        let proj = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0))?;
        let weighted = g.mul(out, proj)?;
        g.sum(weighted)
    };
    let value = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars = inputs
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let l = scalar(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::<f64>::new();
    let vars = inputs
        .iter()
        .zip(check)
        .map(|(t, &c)| g.leaf(t.clone(), c))
        .collect::<Result<Vec<_>>>()?;
    let l = scalar(&mut g, &vars)?;
    g.backward(l)?;

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        if !check[i] {
            continue;
        }
        let analytic = g.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for k in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            let numeric = (value(&plus)? - value(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Offsets whose sampling positions stay at least `margin` away from the
/// integer grid, so bilinear kinks are never crossed by a finite difference.
pub fn off_grid_offsets(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let whole = rng.random_range(-2i32..=1) as f64;
        whole + rng.random_range(margin..1.0 - margin)
    })
}
