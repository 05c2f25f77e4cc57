//! Precision, recall, F1 and mIoU on hand-made masks, plus a threshold
//! sweep over a synthetic localization map.
//!
//! ```text
//! cargo run --release --example metrics
//! ```

use esol::cam::LocalizationMap;
use esol::metrics::{best_by_f1, best_by_miou, default_taus, miou, prf, sweep_csv, threshold_sweep, EvalItem};
use esol::Tensor;

fn main() -> anyhow::Result<()> {
    // 4x4 ground truth: class 1 in the left half
    let gt: Vec<u8> = (0..16).map(|p| if p % 4 < 2 { 1 } else { 0 }).collect();
    let seed: Vec<u8> = (0..16).map(|p| if p % 4 < 3 && p / 4 > 0 { 1 } else { 0 }).collect();
    let s = prf(&seed, &gt, 1)?;
    println!("P {:.3} R {:.3} F1 {:.3}", s.precision, s.recall, s.f1);
    println!("mIoU {:.3}", miou(&[&seed], &[&gt], 2)?);

    // a map that decays from the left edge
    let map = LocalizationMap {
        values: Tensor::from_fn(&[1, 4, 4], |p| 1.0 - (p % 4) as f32 / 4.0),
        scales: vec![1.0],
    };
    let items = [EvalItem {
        map: &map,
        present: &[0],
        gt: &gt,
    }];
    let rows = threshold_sweep(&items, 2, &default_taus())?;
    print!("{}", sweep_csv(&rows));
    let (f, m) = (best_by_f1(&rows).expect("rows"), best_by_miou(&rows).expect("rows"));
    println!("best F1 at tau {:.2}, best mIoU at tau {:.2}", f.tau, m.tau);
    Ok(())
}
