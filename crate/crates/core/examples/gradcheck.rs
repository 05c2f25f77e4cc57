//! Reverse-mode gradients of a small conv network against central
//! differences, in double precision.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use esol::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net(g: &mut Graph<f64>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.conv2d(x, w, Some(b), 2, 1)?;
    let h = g.relu(h)?;
    let h = g.global_avg_pool(h)?;
    let h = g.sigmoid(h)?;
    g.sum(h)
}

fn loss_at(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x.clone())?, g.constant(w.clone())?, g.constant(b.clone())?);
    let l = net(&mut g, x, w, b)?;
    Ok(g.value(l).item())
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
    let mut w = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-0.5..0.5));
    let b = Tensor::from_fn(&[4], |_| rng.random_range(-0.1..0.1));

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone())?, g.param(w.clone())?, g.param(b.clone())?);
    let l = net(&mut g, xv, wv, bv)?;
    g.backward(l)?;
    let analytic = g.grad(wv).expect("weight gradient").clone();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..w.numel() {
        let keep = w.data()[i];
        w.data_mut()[i] = keep + h;
        let up = loss_at(&x, &w, &b)?;
        w.data_mut()[i] = keep - h;
        let down = loss_at(&x, &w, &b)?;
        w.data_mut()[i] = keep;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
    }
    println!("loss {:.6}", g.value(l).item());
    println!("worst relative error over {} weights: {worst:.2e}", w.numel());
    Ok(())
}
