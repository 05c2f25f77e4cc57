//! Generate a small synthetic dataset, save it and print per-class stats.
//!
//! ```text
//! cargo run --release --example generate_data -- [OUT_DIR]
//! ```

use std::path::PathBuf;

use esol::data::{generate, Dataset, GenConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("esol-data"));
    let cfg = GenConfig {
        train_count: 60,
        eval_count: 20,
        ..GenConfig::default()
    };
    let data = generate(&cfg)?;
    data.save(&out)?;
    let back = Dataset::load(&out)?;
    assert_eq!(back.train.len(), data.train.len());

    let mut images = vec![0usize; cfg.classes];
    let mut pixels = vec![0usize; cfg.classes + 1];
    for s in data.train.iter().chain(&data.eval) {
        for c in s.present() {
            images[c] += 1;
        }
        for &l in &s.gt_mask {
            pixels[l as usize] += 1;
        }
    }
    let total: usize = pixels.iter().sum();
    println!("wrote {} samples to {}", data.train.len() + data.eval.len(), out.display());
    println!("class,images,pixel_share");
    for c in 0..cfg.classes {
        println!("{c},{},{:.3}", images[c], pixels[c + 1] as f64 / total as f64);
    }
    println!("background,-,{:.3}", pixels[0] as f64 / total as f64);
    Ok(())
}
