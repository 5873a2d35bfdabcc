use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ravar::harness::checkpoint::Checkpoint;
use ravar::harness::eval::evaluate;
use ravar::harness::fixtures::{generate_fixtures, FixtureConfig};
use ravar::harness::suites::{self, GradCheckConfig, SuiteReport};
use ravar::harness::train::{train, write_loss_csv};
use ravar::harness::{Dataset, TrainConfig};
use ravar::{Error, Model};

#[derive(Parser)]
#[command(name = "ravar", version, about = "Referring atomic action recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-signal fixture dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a JSON report.
    Eval(EvalArgs),
    /// Finite-difference check of the full model gradient.
    Gradcheck(GradcheckArgs),
    /// Randomized equivalence against brute-force references.
    Oracle(OracleArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// TOML file with fixture settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Spatial grid as ROWSxCOLS, e.g. 4x4.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the shared class signatures and cell embeddings.
    #[arg(long)]
    world_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Loss curve as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// TOML file with model dims, grid, eps and tolerance.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Scan,
    Map,
    Auroc,
}

#[derive(clap::Args)]
struct OracleArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(r)?, parse(c)?))
}

fn gen(args: GenArgs) -> Result<bool> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<FixtureConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FixtureConfig::default(),
    };
    if let Some(v) = args.num {
        cfg.num_samples = v;
    }
    if let Some(v) = args.frames {
        cfg.frames = v;
    }
    if let Some((r, c)) = args.grid {
        cfg.grid_rows = r;
        cfg.grid_cols = c;
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    if let Some(v) = args.classes {
        cfg.classes = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.world_seed {
        cfg.world_seed = v;
    }
    let samples = generate_fixtures(&cfg, &args.out)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(true)
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn train_cmd(args: TrainArgs) -> Result<bool> {
    let mut cfg = load_train_config(args.config.as_deref())?;
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }
    cfg.validate()?;
    let data = Dataset::open(&args.data)?;
    if data.meta.frames != cfg.frames {
        bail!(
            "config expects {} frames but the dataset has {}",
            cfg.frames,
            data.meta.frames
        );
    }
    let model = Model::new(cfg.model.clone())?;
    let samples = data.prepare(&model)?;
    let every = (cfg.steps / 20).max(1);
    let result = train(&model, &cfg, &samples, |r| {
        if r.step % every == 0 || r.step + 1 == cfg.steps {
            eprintln!("step {:>6}  loss {:.6}  lr {:.3e}", r.step, r.loss, r.lr);
        }
    });
    match result {
        Ok(run) => {
            run.checkpoint.save(&args.out_ckpt)?;
            if let Some(log) = &args.log {
                write_loss_csv(log, &run.history)?;
            }
            println!("saved checkpoint at step {} to {}", run.checkpoint.step, args.out_ckpt.display());
            Ok(true)
        }
        Err(Error::Diverged { step, last_good }) => {
            last_good.save(&args.out_ckpt)?;
            bail!(
                "loss became non-finite at step {step}; last good state saved to {}",
                args.out_ckpt.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

fn eval_cmd(args: EvalArgs) -> Result<bool> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let data = Dataset::open(&args.data)?;
    let model = Model::new(ckpt.config.model.clone())?;
    let samples = data.prepare(&model)?;
    let params = ckpt.param_store()?;
    let report = evaluate(&model, &params, &samples, args.workers)?;
    report.write(&args.report)?;
    println!(
        "mIOU {:.4}  mAP {:.4}  AUROC {:.4}  ({} samples)",
        report.metrics.miou, report.metrics.map, report.metrics.auroc, report.num_samples
    );
    Ok(true)
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<bool> {
    let cfg = match &args.config {
        Some(p) => GradCheckConfig::load(p)?,
        None => GradCheckConfig::default(),
    };
    let report = suites::model_grad_check(&cfg, args.seed)?;
    print!("{report}");
    let ok = report.passed(cfg.tolerance);
    println!(
        "{}: max relative error {:.3e} (tolerance {:e})",
        if ok { "PASS" } else { "FAIL" },
        report.max_rel_err,
        cfg.tolerance
    );
    Ok(ok)
}

fn oracle_cmd(args: OracleArgs) -> Result<bool> {
    let reports: Vec<SuiteReport> = match args.suite {
        Suite::Scan => vec![
            suites::scan_oracle_suite(args.cases.unwrap_or(1000), args.seed)?,
            suites::scan_linearity_suite(args.cases.unwrap_or(200), args.seed)?,
            suites::scan_prefix_suite(args.cases.unwrap_or(200), args.seed)?,
        ],
        Suite::Map => vec![suites::map_oracle_suite(args.cases.unwrap_or(200), args.seed)?],
        Suite::Auroc => vec![suites::auroc_oracle_suite(args.cases.unwrap_or(200), args.seed)?],
    };
    let mut ok = true;
    for r in &reports {
        println!("{} {r}", if r.passed() { "PASS" } else { "FAIL" });
        ok &= r.passed();
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Oracle(a) => oracle_cmd(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
