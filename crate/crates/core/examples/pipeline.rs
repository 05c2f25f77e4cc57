//! Full three-stage run on a generated dataset, printing the stage table.
//!
//! ```text
//! cargo run --release --example pipeline -- [CONFIG] [SEED]
//! ```

use std::path::Path;
use std::time::Instant;

use esol::config::TrainConfig;
use esol::data::generate;
use esol::train::{run_pipeline, stage_table_csv};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = match args.first() {
        Some(p) => TrainConfig::load(Path::new(p))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.get(1) {
        cfg.seed = seed.parse()?;
    }
    print!("{}", cfg.render());

    let t = Instant::now();
    let data = generate(&cfg.gen_config())?;
    println!("# generated {} + {} samples in {:.1?}", data.train.len(), data.eval.len(), t.elapsed());

    let t = Instant::now();
    let run = run_pipeline(&data, &cfg, None)?;
    for r in &run.reports {
        let last = r.records.last().map(|l| l.total).unwrap_or(f64::NAN);
        println!("# {} trained in {:.1?}, final loss {last:.4}", r.stage, r.elapsed);
    }
    println!("# total {:.1?}", t.elapsed());
    print!("{}", stage_table_csv(&run.metrics));
    Ok(())
}
