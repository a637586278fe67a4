use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use slimnet::experiment::{self, RunConfig, RunError, RunPaths, RunRecord};
use slimnet::flops;
use slimnet::planner::{self, QueryTable};
use slimnet::{BnStatsBank, SlimmableModelSpec, SubnetConfig, TrainMode, WidthMultiplier};

#[derive(Parser)]
#[command(name = "slimnet", version, about = "Train, calibrate and query width-resolution slimmable networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, calibrate, tabulate and extract the frontier in one go.
    Run(RunArgs),
    /// Train and write the checkpoint and per-epoch metrics.
    Train(RunArgs),
    /// Collect normalization statistics for every table configuration.
    Calibrate(RunArgs),
    /// Evaluate every configuration on the validation split.
    Table(RunArgs),
    /// Print the most accurate configuration within a MFLOPs budget.
    Plan {
        /// Query table CSV.
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        budget: f64,
    },
    /// Emit the accuracy/MFLOPs Pareto frontier of a query table as CSV.
    Frontier {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Compare finished runs (record.json files) on a shared MFLOPs axis.
    Compare {
        #[arg(required = true, num_args = 2..)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// MFLOPs of a backbone over a width x resolution grid, as CSV.
    Flops {
        /// Backbone description file or `preset:<name>`.
        #[arg(long)]
        spec: String,
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1000)]
        num_classes: usize,
        /// Per-layer breakdown for a single configuration.
        #[arg(long)]
        per_layer: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Replace existing artifacts.
    #[arg(long)]
    force: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(epochs) = self.epochs {
            cfg.schedule.epochs = epochs;
        }
        if self.max_steps.is_some() {
            cfg.schedule.max_steps = self.max_steps;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn log_epoch(m: &slimnet::trainer::EpochMetrics) {
    info!(
        "epoch {:>3}: loss_full {:.4} total {:.4} train top-1 {:.4} lr {:.5} ({:.1}s)",
        m.epoch, m.loss_full, m.loss_total, m.train_top1, m.lr, m.seconds
    );
}

fn resolve_spec(spec: &str, num_classes: usize) -> Result<SlimmableModelSpec> {
    Ok(match spec.strip_prefix("preset:") {
        Some("desk_mobilenet") => SlimmableModelSpec::desk_mobilenet(num_classes),
        Some("mobilenet_v1") => SlimmableModelSpec::mobilenet_v1(num_classes),
        Some(other) => return Err(slimnet::Error::Config(format!("unknown preset '{other}'")).into()),
        None => SlimmableModelSpec::from_file(Path::new(spec))?,
    })
}

fn write_output(path: &Path, text: &str, force: bool) -> Result<()> {
    experiment::guard_path(path, force)?;
    slimnet::io::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let record = experiment::run(&cfg, args.force, log_epoch)?;
            println!("{}", cfg.output_dir.join("record.json").display());
            println!("test top-1 at {}: {:.4}", record.test_config, record.test_top1);
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let prep = experiment::prepare(&cfg)?;
            let paths = RunPaths::new(&cfg.output_dir);
            experiment::train_stage(&cfg, &prep, &paths, args.force, log_epoch)?;
            println!("{}", paths.checkpoint().display());
        }
        Command::Calibrate(args) => {
            let cfg = args.load()?;
            let prep = experiment::prepare(&cfg)?;
            let paths = RunPaths::new(&cfg.output_dir);
            let ckpt = experiment::load_trained(&prep, &paths)?;
            let bank = experiment::calibrate_stage(&cfg, &prep, &ckpt.params, &paths, args.force)?;
            println!("{} ({} configurations)", paths.bn_stats().display(), bank.len());
        }
        Command::Table(args) => {
            let cfg = args.load()?;
            let prep = experiment::prepare(&cfg)?;
            let paths = RunPaths::new(&cfg.output_dir);
            let ckpt = experiment::load_trained(&prep, &paths)?;
            let mut bank = BnStatsBank::load(&paths.bn_stats(), &prep.spec.hash())?;
            let out = experiment::table_stage(&cfg, &prep, &ckpt.params, &mut bank, &paths, args.force)?;
            println!("{} ({} rows)", paths.table().display(), out.table.len());
        }
        Command::Plan { table, budget } => {
            let table = QueryTable::load(&table)?;
            let row = table.select(budget)?;
            println!("{} {:.3} MFLOPs top-1 {:.4}", row.config(), row.mflops, row.top1);
        }
        Command::Frontier { table, out, force } => {
            let csv = planner::rows_to_csv(&QueryTable::load(&table)?.frontier());
            match out {
                Some(path) => write_output(&path, &csv, force)?,
                None => print!("{csv}"),
            }
        }
        Command::Compare { records, out_dir, force } => {
            let runs = records
                .iter()
                .map(|p| RunRecord::load(p).map(|r| (r.label(), r.frontier)))
                .collect::<slimnet::Result<Vec<_>>>()?;
            let cmp = experiment::compare(&runs)?;
            for w in &cmp.warnings {
                log::warn!("{w}");
            }
            write_output(&out_dir.join("dominance.csv"), &cmp.dominance_csv(), force)?;
            write_output(&out_dir.join("aligned.csv"), &cmp.aligned_csv(), force)?;
            write_output(&out_dir.join("frontiers.svg"), &experiment::frontier_svg(&runs), force)?;
            print!("{}", cmp.dominance_csv());
        }
        Command::Flops { spec, widths, resolutions, num_classes, per_layer } => {
            let spec = resolve_spec(&spec, num_classes)?;
            let widths = match widths {
                Some(w) => w.into_iter().map(WidthMultiplier::new).collect::<slimnet::Result<Vec<_>>>()?,
                None => planner::width_grid(spec.width_lower_bound, planner::WIDTH_STEP)?,
            };
            let resolutions = resolutions.unwrap_or_else(|| spec.resolutions.values().to_vec());
            if per_layer {
                let (&w, &r) = widths.first().zip(resolutions.first()).context("empty grid")?;
                let report = flops::network_cost(&spec, SubnetConfig { width: w, resolution: r })?;
                println!("layer,kind,macs");
                for c in &report.per_layer {
                    println!("{},{:?},{}", c.layer, spec.layers[c.layer].kind, c.macs);
                }
                println!("total,,{}", report.total);
            } else {
                println!("width,resolution,mflops");
                for &r in &resolutions {
                    for &w in &widths {
                        let m = flops::mflops(&spec, SubnetConfig { width: w, resolution: r })?;
                        println!("{},{r},{m:.6}", w.value());
                    }
                }
            }
        }
    }
    Ok(())
}

fn is_config_error(err: &anyhow::Error) -> bool {
    if let Some(e) = err.downcast_ref::<slimnet::Error>() {
        return e.is_config_error();
    }
    if let Some(e) = err.downcast_ref::<RunError>() {
        return e.error.is_config_error();
    }
    false
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
