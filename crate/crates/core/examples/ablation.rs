//! Sweep the clipping ratio with a shared baseline and print the seed
//! quality of each Shrinkage result.
//!
//! ```text
//! cargo run --release --example ablation -- [AXIS] [VALUES]
//! ```

use esol::config::TrainConfig;
use esol::train::{ablation_csv, run_ablation_grid, AblationAxis};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let axis = AblationAxis::parse(args.first().map(String::as_str).unwrap_or("beta"))?;
    let values: Vec<String> = match args.get(1) {
        Some(v) => v.split(',').map(str::to_string).collect(),
        None => axis.default_values(),
    };
    let cfg = TrainConfig::parse(
        "widths = 8,16,32\nfeature_dim = 32\nbaseline_iterations = 300\nexpansion_iterations = 60\nshrinkage_iterations = 60\ntrain_count = 120\neval_count = 30\nscales = 1,2\n",
    )?;
    let rows = run_ablation_grid(axis, &values, &cfg)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
