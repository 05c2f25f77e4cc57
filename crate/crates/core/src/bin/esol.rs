use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use esol::cam::{multiscale_cam, threshold_seed};
use esol::config::TrainConfig;
use esol::data::{generate, Dataset, GenConfig};
use esol::error::{Error, Result};
use esol::io::{export_heatmap, export_overlay};
use esol::metrics::sweep_csv;
use esol::model::{Model, Stage};
use esol::train::{
    ablation_csv, evaluate, run_ablation_grid, stage_table_csv, train_baseline, train_expansion, train_shrinkage,
    AblationAxis, TrainReport,
};

#[derive(Parser)]
#[command(name = "esol", version, about = "Expansion and shrinkage of class activation maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training samples.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluation samples; defaults to a fifth of `count`.
        #[arg(long)]
        eval_count: Option<usize>,
    },
    /// Train the classification baseline.
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn the expansion offsets from a baseline checkpoint.
    TrainExpansion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn the shrinkage offsets from an expansion checkpoint.
    TrainShrinkage {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint's seeds on the eval split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stage: String,
        /// Write one row per threshold instead of the summary row.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write PGM heatmaps and PPM seed overlays for selected samples.
    ExportCam {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated sample ids.
        #[arg(long)]
        ids: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one full pipeline per value of an ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values; `gamma_mu` values are `gamma:mu`.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for line in cfg.render().lines() {
        println!("# {line}");
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn finish(model: &Model, report: &TrainReport, out: &Path) -> Result<()> {
    model.save(out)?;
    write(&out.join("train_log.csv"), &report.log_csv())?;
    let last = report.records.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "{} done: {} iterations in {:.1?}, final loss {last:.6}, checkpoint {}",
        report.stage,
        report.records.len(),
        report.elapsed,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            count,
            classes,
            seed,
            eval_count,
        } => {
            let cfg = GenConfig {
                train_count: count,
                eval_count: eval_count.unwrap_or(count / 5),
                classes,
                seed,
                ..GenConfig::default()
            };
            println!("# train_count = {}", cfg.train_count);
            println!("# eval_count = {}", cfg.eval_count);
            println!("# classes = {}", cfg.classes);
            println!("# seed = {}", cfg.seed);
            println!("# size = {}", cfg.size);
            let data = generate(&cfg)?;
            data.save(&out)?;
            println!("wrote {} samples to {}", data.train.len() + data.eval.len(), out.display());
        }
        Command::TrainBaseline { data, config, out } => {
            let cfg = load_config(Some(&config))?;
            let data = Dataset::load(&data)?;
            let (model, report) = train_baseline(&data.train_set(), &cfg)?;
            finish(&model, &report, &out)?;
        }
        Command::TrainExpansion {
            data,
            config,
            init,
            out,
        } => {
            let cfg = load_config(Some(&config))?;
            let data = Dataset::load(&data)?;
            let (model, report) = train_expansion(&data.train_set(), &cfg, &Model::load(&init)?)?;
            finish(&model, &report, &out)?;
        }
        Command::TrainShrinkage {
            data,
            config,
            init,
            out,
        } => {
            let cfg = load_config(Some(&config))?;
            let data = Dataset::load(&data)?;
            let (model, report) = train_shrinkage(&data.train_set(), &cfg, &Model::load(&init)?)?;
            finish(&model, &report, &out)?;
        }
        Command::Eval {
            data,
            ckpt,
            stage,
            sweep,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let stage = Stage::parse(&stage)?;
            let model = Model::load(&ckpt)?;
            if model.stage != stage {
                return Err(Error::Load(format!(
                    "checkpoint is a {} checkpoint, --stage says {stage}",
                    model.stage
                )));
            }
            let data = Dataset::load(&data)?;
            let m = evaluate(&model, &data.eval, &cfg)?;
            let text = if sweep {
                sweep_csv(&m.sweep)
            } else {
                stage_table_csv(std::slice::from_ref(&m))
            };
            write(&out, &text)?;
            print!("{}", stage_table_csv(std::slice::from_ref(&m)));
        }
        Command::ExportCam {
            data,
            ckpt,
            ids,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = Model::load(&ckpt)?;
            let data = Dataset::load(&data)?;
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            for id in ids.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let id: usize = id
                    .parse()
                    .map_err(|_| Error::Config(format!("bad sample id `{id}`")))?;
                let sample = data
                    .train
                    .iter()
                    .chain(&data.eval)
                    .find(|s| s.id == id)
                    .ok_or_else(|| Error::Data(format!("no sample with id {id}")))?;
                let map = multiscale_cam(&model, &sample.image, &cfg.scales)?;
                for c in sample.present() {
                    export_heatmap(&map, c, &out.join(format!("{id:06}_class{c}.pgm")))?;
                }
                let seed = threshold_seed(&map, &sample.present(), cfg.eval_tau)?;
                export_overlay(&sample.image, &seed, &out.join(format!("{id:06}_seed.ppm")))?;
            }
            println!("wrote maps to {}", out.display());
        }
        Command::Ablate {
            axis,
            values,
            config,
            out,
        } => {
            let cfg = load_config(Some(&config))?;
            let axis = AblationAxis::parse(&axis)?;
            let values = match values {
                Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
                None => axis.default_values(),
            };
            let rows = run_ablation_grid(axis, &values, &cfg)?;
            let csv = ablation_csv(&rows);
            write(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
