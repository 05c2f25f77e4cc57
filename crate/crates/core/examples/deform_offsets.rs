//! What the offset branch of a deformable convolution does: zero offsets
//! reproduce the regular convolution, a constant offset of one pixel shifts
//! the sampling grid.
//!
//! ```text
//! cargo run --release --example deform_offsets
//! ```

use esol::deform::{bilinear_sample, deform_conv2d, DeformLayer};
use esol::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer: DeformLayer<f64> = DeformLayer::random(2, 3, 3, &mut rng)?;
    let x = Tensor::from_fn(&[1, 2, 6, 6], |i| ((i * 37) % 11) as f64 / 10.0);

    let (out, field) = layer.apply(&x)?;
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.constant(x.clone())?,
        g.constant(layer.weight.clone())?,
        g.constant(layer.bias.clone())?,
    );
    let conv = g.conv2d(xv, wv, Some(bv), 1, 1)?;
    println!(
        "zero offsets: mean |offset| {:.1}, max |deform - conv| {:.1e}",
        field.mean_abs(),
        out.max_abs_diff(g.value(conv))
    );

    // every kernel tap moved one pixel right: same as convolving the input
    // shifted one pixel left, except in the first column where the shifted
    // grid reads a real pixel instead of padding
    let k = 9;
    let offsets = Tensor::from_fn(&[1, 2 * k, 6, 6], |i| if (i / 36) % 2 == 1 { 1.0 } else { 0.0 });
    let ov = g.constant(offsets)?;
    let moved = deform_conv2d(&mut g, xv, ov, wv, Some(bv))?;
    let shifted = Tensor::from_fn(&[1, 2, 6, 6], |i| if i % 6 == 5 { 0.0 } else { x.data()[i + 1] });
    let sv = g.constant(shifted)?;
    let reference = g.conv2d(sv, wv, Some(bv), 1, 1)?;
    let diff = g
        .value(moved)
        .data()
        .iter()
        .zip(g.value(reference).data())
        .enumerate()
        .filter(|(i, _)| i % 6 != 0)
        .map(|(_, (a, b))| (a - b).abs())
        .fold(0.0, f64::max);
    println!("offset (0,+1): max |deform - conv(shifted)| off the first column {diff:.1e}");

    let plane = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
    for (y, xx) in [(0.0, 1.0), (0.5, 0.5), (-0.5, 0.0)] {
        println!("bilinear at ({y}, {xx}) on [[1,2],[3,4]] = {}", bilinear_sample(&plane, y, xx)?[0]);
    }
    Ok(())
}
