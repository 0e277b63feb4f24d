use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use probwtal_core::evaluate::{default_thresholds, evaluate};
use probwtal_core::features::{load_dataset, synthesize_dataset, write_dataset, Dataset, Subset, SynthConfig, MANIFEST_FILE};
use probwtal_core::localize::{write_results, LocalizeConfig};
use probwtal_core::train::{
    ablate, ablate_csv, ablate_table, apply_overrides, localize_dataset, merge_toml, Checkpoint, TrainConfig, Trainer,
};
use probwtal_core::verify::gradient_suite;

#[derive(Parser)]
#[command(name = "probwtal", version, about = "Weakly supervised temporal action localization on snippet features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a metric log.
    Train(TrainArgs),
    /// Turn a checkpoint into a results JSON.
    Localize(LocalizeArgs),
    /// Score a results JSON against ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one model per (value, seed).
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Overrides {
    /// TOML file with config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.json, metrics.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Continue from a checkpoint; its config is used as is.
    #[arg(long, conflicts_with_all = ["config", "set"])]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Test,
    All,
}

impl SubsetArg {
    fn subset(self) -> Option<Subset> {
        match self {
            SubsetArg::Train => Some(Subset::Train),
            SubsetArg::Test => Some(Subset::Test),
            SubsetArg::All => None,
        }
    }
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Results JSON to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    subset: SubsetArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per loss term.
    #[arg(long, default_value_t = 3)]
    instances: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Config key to sweep, e.g. `K` or `metric`.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for ablate.csv and ablate.txt.
    #[arg(long)]
    out: PathBuf,
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load(data: &Path) -> Result<Dataset> {
    let path = manifest_path(data);
    load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Defaults, then the dataset's shape, then the config file, then `--set`.
fn train_config(o: &Overrides, ds: &Dataset) -> Result<TrainConfig> {
    let mut cfg = TrainConfig { dim: ds.dim, vlp_dim: ds.vlp_dim, num_classes: ds.num_classes(), ..TrainConfig::default() };
    if let Some(p) = &o.config {
        cfg = merge_toml(&cfg, p)?;
    }
    Ok(cfg.with_overrides(&o.set)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    if let Some(p) = &a.overrides.config {
        cfg = merge_toml(&cfg, p)?;
    }
    let cfg: SynthConfig = apply_overrides(&cfg, &a.overrides.set)?;
    cfg.validate()?;
    let ds = synthesize_dataset(&cfg, a.seed)?;
    let manifest = write_dataset(&ds, &a.out)?;
    println!("wrote {} videos to {}", ds.videos.len(), manifest.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.seed != a.seed {
                bail!("checkpoint was trained with seed {}, not {}", ck.config.seed, a.seed);
            }
            Trainer::resume(ck, &ds)?
        }
        None => {
            let cfg = train_config(&a.overrides, &ds)?.with_overrides(&[format!("seed={}", a.seed)])?;
            Trainer::new(cfg, &ds)?
        }
    };
    create_dir(&a.out)?;
    fs::write(a.out.join("config.toml"), trainer.config().to_toml())?;
    info!("training from step {} to {}", trainer.state.step, trainer.config().steps);
    let log = trainer.run()?;
    trainer.state.save(&a.out.join("checkpoint.json"))?;
    log.write_csv(&a.out.join("metrics.csv"))?;
    match (log.rows.last(), log.last_eval()) {
        (Some(r), Some(e)) => println!(
            "step {}: loss {:.4}, test mAP@0.5 {:.4}, avg mAP 0.1:0.7 {:.4}",
            r.step, r.losses.total, e.map_at_05, e.avg_01_07
        ),
        (Some(r), None) => println!("step {}: loss {:.4}", r.step, r.losses.total),
        _ => println!("nothing to do at step {}", trainer.state.step),
    }
    Ok(())
}

fn localize(a: LocalizeArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    ck.verify()?;
    let props = localize_dataset(&ck.params, &ck.config, &ds, a.subset.subset(), &LocalizeConfig::default())?;
    write_results(&a.out, &props, ds.classes())?;
    println!("wrote {} proposals to {}", props.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = evaluate(&a.results, &a.gt, None, &default_thresholds())?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let entries = gradient_suite(a.seed, a.instances)?;
    println!("{:<20} {:>4} {:>11} {:>9} {:>9}", "term", "seed", "rel_error", "tol", "screened");
    let mut ok = true;
    for e in &entries {
        let pass = e.passed();
        ok &= pass;
        println!(
            "{:<20} {:>4} {:>11.3e} {:>9.0e} {:>4}/{:<4} {}",
            e.term,
            e.seed,
            e.report.smooth_max_rel_error,
            e.tolerance,
            e.report.nonsmooth,
            e.report.coordinates,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let base = train_config(&a.overrides, &ds)?;
    let rows = ablate(&base, &ds, &a.param, &a.values, &a.seeds)?;
    create_dir(&a.out)?;
    fs::write(a.out.join("ablate.csv"), ablate_csv(&rows))?;
    let table = ablate_table(&rows);
    fs::write(a.out.join("ablate.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Train(a) => train(a)?,
        Command::Localize(a) => localize(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Ablate(a) => run_ablate(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
