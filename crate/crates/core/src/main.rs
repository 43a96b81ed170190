//! Command-line front end: world generation, head training, calibration,
//! evaluation, and full experiment runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use tailsim::calib::{combine, combine_detections_det, BinSplit, Strategy};
use tailsim::eval::{
    evaluate_detections, write_report_csv, write_report_json, EvalReport, GtSet,
};
use tailsim::experiment::{
    load_world_config, run_experiment, train_mode_head, ExperimentConfig, Preset, TrainMode,
    WorldSource,
};
use tailsim::heads::{load_head, save_head, Head};
use tailsim::twostage::{decode_detections, export_detections, import_detections};
use tailsim::world::{generate_world, World};

#[derive(Parser)]
#[command(
    name = "tailsim",
    version,
    about = "Deterministic synthetic benchmark for long-tail detection calibration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and freeze it to JSON.
    GenWorld {
        /// TOML file of generator settings (all keys optional).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output path for the world JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classification head on a frozen world.
    Train {
        /// Frozen world JSON.
        #[arg(long)]
        world: PathBuf,
        /// standard | balanced | repeat
        #[arg(long, default_value = "standard")]
        mode: String,
        /// Training seed (defaults to the world's).
        #[arg(long)]
        seed: Option<u64>,
        /// Experiment TOML supplying schedule and sampler settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output path for the head checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine two trained heads on the validation split and evaluate.
    Calibrate {
        /// Frozen world JSON.
        #[arg(long)]
        world: PathBuf,
        /// Checkpoint of the standard-trained head.
        #[arg(long)]
        orig: PathBuf,
        /// Checkpoint of the balanced-retrained head.
        #[arg(long)]
        new: PathBuf,
        /// only | avg | det | cat | cat-thr | cat-scale
        #[arg(long)]
        strategy: String,
        /// Decode score threshold override.
        #[arg(long = "score-thr")]
        score_thr: Option<f64>,
        /// Experiment TOML supplying decode/eval/split settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a detection JSON file against a world's validation split.
    Evaluate {
        /// Frozen world JSON.
        #[arg(long)]
        world: PathBuf,
        /// Detection records to score.
        #[arg(long)]
        dets: PathBuf,
        /// Experiment TOML supplying eval settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment, either config-driven or a named preset.
    Run {
        /// table1|table2|table3|table4|table5|table7|table8
        #[arg(long)]
        preset: Option<String>,
        /// Experiment TOML (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Frozen world JSON replacing the config's world source.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Combination strategy for config-driven runs.
        #[arg(long)]
        strategy: Option<String>,
        /// Decode score threshold override.
        #[arg(long = "score-thr")]
        score_thr: Option<f64>,
        /// Per-category count CSV for the table1 preset.
        #[arg(long)]
        counts: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate external detection records; optionally re-export them.
    ImportDets {
        /// Detection JSON to validate.
        #[arg(long)]
        dets: PathBuf,
        /// Re-export path for the normalized records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_experiment_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_checkpoint(world: &World, path: &Path) -> anyhow::Result<Head> {
    let (head, fingerprint) = load_head(path)?;
    if fingerprint != world.config.fingerprint() {
        bail!(
            "checkpoint {} was trained on a different world (fingerprint {} vs {})",
            path.display(),
            fingerprint,
            world.config.fingerprint()
        );
    }
    head.compatible_with(world)?;
    Ok(head)
}

fn print_report(name: &str, report: &EvalReport) {
    let overall = report
        .overall_ap
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "-".to_string());
    let bins: Vec<String> = report
        .bins
        .iter()
        .map(|b| format!("{}={:.4}/{}", b.bin.token(), b.ap, b.class_count))
        .collect();
    println!("{name}: ap {overall}  bins [{}]", bins.join(" "));
}

fn write_reports(out: &Path, name: &str, report: &EvalReport) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))?;
    write_report_csv(report, &out.join(format!("{name}.csv")))?;
    write_report_json(report, &out.join(format!("{name}.json")))?;
    Ok(())
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenWorld { config, seed, out } => {
            let mut cfg = match config {
                Some(path) => load_world_config(&path)
                    .with_context(|| format!("loading {}", path.display()))?,
                None => Default::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let world = generate_world(&cfg)?;
            world.save(&out)?;
            println!(
                "world {} ({} categories, {} train / {} val images) -> {}",
                cfg.fingerprint(),
                world.num_categories(),
                world.train_images.len(),
                world.val_images.len(),
                out.display()
            );
        }
        Command::Train {
            world,
            mode,
            seed,
            config,
            out,
        } => {
            let mut cfg = load_experiment_config(config.as_deref())?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            let mode: TrainMode = mode.parse()?;
            let world = World::load(&world)?;
            let run_seed = cfg.run_seed(&world);
            let head = train_mode_head(&world, &cfg, mode, run_seed, 0)?;
            save_head(&head, &world.config.fingerprint(), &out)?;
            println!(
                "{} head trained (seed {run_seed}) -> {}",
                mode.name(),
                out.display()
            );
        }
        Command::Calibrate {
            world,
            orig,
            new,
            strategy,
            score_thr,
            config,
            out,
        } => {
            let mut cfg = load_experiment_config(config.as_deref())?;
            if let Some(thr) = score_thr {
                cfg.decode.score_threshold = thr;
            }
            let strategy: Strategy = strategy.parse()?;
            let world = World::load(&world)?;
            let orig = load_checkpoint(&world, &orig)?;
            let new = load_checkpoint(&world, &new)?;
            let split = BinSplit::from_categories(&world.categories, &cfg.tail_bins);
            let (proposals, orig_scores) = orig.score_images(&world, &world.val_images)?;
            let (_, new_scores) = new.score_images(&world, &world.val_images)?;
            let detections = if strategy == Strategy::Det {
                let dets_orig = decode_detections(&orig_scores, &proposals, &cfg.decode)?;
                let dets_new = decode_detections(&new_scores, &proposals, &cfg.decode)?;
                combine_detections_det(&dets_orig, &dets_new, &split, cfg.decode.max_per_image)?
            } else {
                let combined =
                    combine(strategy, &orig_scores, &new_scores, &split, &cfg.combine)?;
                decode_detections(&combined, &proposals, &cfg.decode)?
            };
            let gt = GtSet::from_images(&world.val_images);
            let report = evaluate_detections(&detections, &gt, &world.categories, &cfg.eval)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            export_detections(&detections, &out.join("detections.json"))?;
            write_reports(&out, "report", &report)?;
            print_report(strategy.name(), &report);
        }
        Command::Evaluate {
            world,
            dets,
            config,
            out,
        } => {
            let cfg = load_experiment_config(config.as_deref())?;
            let world = World::load(&world)?;
            let detections = import_detections(&dets)?;
            let gt = GtSet::from_images(&world.val_images);
            let report = evaluate_detections(&detections, &gt, &world.categories, &cfg.eval)?;
            write_reports(&out, "report", &report)?;
            print_report("evaluate", &report);
        }
        Command::Run {
            preset,
            config,
            seed,
            world,
            strategy,
            score_thr,
            counts,
            out,
        } => {
            let mut cfg = load_experiment_config(config.as_deref())?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            if let Some(path) = world {
                cfg.world = WorldSource::Frozen(path);
            }
            if let Some(name) = strategy {
                cfg.strategy = Some(name.parse::<Strategy>()?);
            }
            if let Some(thr) = score_thr {
                cfg.decode.score_threshold = thr;
            }
            let preset = preset.map(|name| name.parse::<Preset>()).transpose()?;
            let summary = run_experiment(&cfg, preset, counts.as_deref(), &out)?;
            if let Some(p) = preset {
                println!("{} ({})", p.name(), p.describe());
            }
            for (name, report) in &summary.reports {
                print_report(name, report);
            }
            println!("{} files -> {}", summary.files.len(), out.display());
        }
        Command::ImportDets { dets, out } => {
            let detections = import_detections(&dets)?;
            println!("{} detection records ok", detections.len());
            if let Some(path) = out {
                export_detections(&detections, &path)?;
                println!("re-exported -> {}", path.display());
            }
        }
    }
    Ok(())
}
