//! Train a small baseline classifier, then write multi-scale CAM heatmaps
//! (PGM) and thresholded seed overlays (PPM) for a few eval images.
//!
//! ```text
//! cargo run --release --example cam_maps -- [OUT_DIR]
//! ```

use std::path::PathBuf;

use esol::cam::{multiscale_cam, threshold_seed};
use esol::config::TrainConfig;
use esol::data::generate;
use esol::io::{export_heatmap, export_overlay};
use esol::metrics::prf;
use esol::train::train_baseline;

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("esol-maps"));
    std::fs::create_dir_all(&out)?;
    let cfg = TrainConfig::parse("widths = 16,32,64\nfeature_dim = 64\nbaseline_iterations = 400\ntrain_count = 200\neval_count = 8\nscales = 1,1.5,2\n")?;
    let data = generate(&cfg.gen_config())?;
    let (model, report) = train_baseline(&data.train_set(), &cfg)?;
    println!("baseline trained in {:.1?}", report.elapsed);

    for s in &data.eval {
        let map = multiscale_cam(&model, &s.image, &cfg.scales)?;
        for c in s.present() {
            export_heatmap(&map, c, &out.join(format!("{:06}_class{c}.pgm", s.id)))?;
        }
        let seed = threshold_seed(&map, &s.present(), cfg.eval_tau)?;
        export_overlay(&s.image, &seed, &out.join(format!("{:06}_seed.ppm", s.id)))?;
        let scores: Vec<String> = s
            .present()
            .iter()
            .map(|&c| {
                let p = prf(&seed.labels, &s.gt_mask, c as u8 + 1).expect("same size");
                format!("class {c}: P {:.2} R {:.2}", p.precision, p.recall)
            })
            .collect();
        println!("sample {}: {}", s.id, scores.join(", "));
    }
    println!("maps in {}", out.display());
    Ok(())
}
