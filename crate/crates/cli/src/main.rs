use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use manifold_ood::batch::OodType;
use manifold_ood::detector::Variant;
use manifold_ood::experiment::{
    emit_toy_plotdata, mix_ood, prepare_data, report, run_baselines, run_pipeline, stage_cvae, stage_detector,
    stage_generate, ExperimentConfig, RunDir,
};
use manifold_ood::metrics::format_table;
use manifold_ood::rng::derive_seed;

#[derive(Parser)]
#[command(name = "manifold-ood", version, about = "Manifold-guided OOD sample generation and n+1 detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value config file; starts from the MNIST-subset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or reuse) the CVAE.
    TrainCvae(Common),
    /// Generate Type I and Type II samples.
    GenOod(Common),
    /// Train the n+1 detector on inliers plus generated samples.
    TrainDetector(Common),
    /// Run the full pipeline and print the metrics table.
    Evaluate(Common),
    /// Max-softmax and ODIN on a plain n-class classifier.
    Baselines(Common),
    /// Two-octant sphere toy: pipeline, baselines and plot data.
    Toy3d(Common),
    /// Summarize every metrics file in the output directory.
    Report(Common),
}

fn load_config(c: &Common, preset: &str) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::preset(preset)?,
    };
    cfg.apply_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::TrainCvae(c) => {
            let cfg = load_config(&c, "mnist")?;
            cfg.validate()?;
            let run = RunDir::new(&cfg)?;
            let splits = prepare_data(&cfg)?;
            stage_cvae(&cfg, &run, &splits.train)?;
            println!("{}", run.artifact("cvae", "bin").display());
        }
        Command::GenOod(c) => {
            let cfg = load_config(&c, "mnist")?;
            cfg.validate()?;
            let run = RunDir::new(&cfg)?;
            let splits = prepare_data(&cfg)?;
            let model = stage_cvae(&cfg, &run, &splits.train)?;
            let g = stage_generate(&cfg, &run, &model, &splits.train)?;
            println!("type I: {}  type II: {}", g.type1.count(OodType::I), g.type2.count(OodType::II));
            println!("{}", run.artifact("ood-type1", "idx").display());
            println!("{}", run.artifact("ood-type2", "idx").display());
        }
        Command::TrainDetector(c) => {
            let cfg = load_config(&c, "mnist")?;
            cfg.validate()?;
            let run = RunDir::new(&cfg)?;
            let splits = prepare_data(&cfg)?;
            let model = stage_cvae(&cfg, &run, &splits.train)?;
            let g = stage_generate(&cfg, &run, &model, &splits.train)?;
            let ood = mix_ood(&g, cfg.type1_fraction, derive_seed(cfg.seed, "mix"))?;
            let det = stage_detector(&cfg, &run, &splits.train, &ood, Variant::NPlus1)?;
            println!(
                "held-out accuracy: {:.4} (n+1 arg-max {:.4})",
                det.accuracy(&splits.test)?,
                det.argmax_accuracy(&splits.test)?
            );
            println!("{}", run.artifact("detector", "bin").display());
        }
        Command::Evaluate(c) => {
            let cfg = load_config(&c, "mnist")?;
            let s = run_pipeline(&cfg)?;
            print!("{}", format_table(&s.reports));
            println!("held-out accuracy: {:.4} (n+1 arg-max {:.4})", s.accuracy, s.argmax_accuracy);
            println!("{}", s.metrics_csv.display());
        }
        Command::Baselines(c) => {
            let cfg = load_config(&c, "mnist")?;
            let s = run_baselines(&cfg)?;
            print!("{}", format_table(&s.reports));
            println!("held-out accuracy: {:.4}", s.accuracy);
            println!("{}", s.metrics_csv.display());
        }
        Command::Toy3d(c) => {
            let cfg = load_config(&c, "toy3d")?;
            let s = run_pipeline(&cfg)?;
            let b = run_baselines(&cfg)?;
            let plot = emit_toy_plotdata(&cfg)?;
            let mut all = s.reports.clone();
            all.extend(b.reports);
            print!("{}", format_table(&all));
            println!(
                "held-out accuracy: n+1 {:.4} (arg-max {:.4}), plain {:.4}",
                s.accuracy, s.argmax_accuracy, b.accuracy
            );
            for (tag, n) in &plot.counts {
                println!("{tag}: {n} points");
            }
            println!("{}", plot.points_csv.display());
            println!("{}", plot.projection_csv.display());
        }
        Command::Report(c) => {
            let cfg = load_config(&c, "mnist")?;
            print!("{}", report(&cfg.out_path(), &cfg.validation_ood)?);
        }
    }
    Ok(())
}
