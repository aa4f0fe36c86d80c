mod config;
mod error;
mod report;
mod run;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dln::eval::write_jsonl;
use dln::sweep::Grid;
use dln::synthetic::label_with;
use dln::{SplitSpec, ToyLm, TrainState};
use serde::Serialize;
use serde_json::Value;

use config::{BackendConfig, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "dln", version, about = "Train and run stacked prompt networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network per seed and report mean test accuracy.
    Train(RunArgs),
    /// Train every setting of the config's [sweep] grid and pick the one
    /// with the best mean validation accuracy.
    Sweep(RunArgs),
    /// Temperature-0 forward pass with trained or given prompts.
    Infer(InferArgs),
    /// Token usage, cost and validation curves of a finished run.
    Report {
        dir: PathBuf,
        /// Price per thousand units; defaults to the run's config.
        #[arg(long)]
        price: Option<f64>,
    },
    /// Write a JSONL task labelled by the configured toy backend.
    ToyData(ToyDataArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Replaces the configured seeds; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Hyperparameter override such as `iterations=4` or
    /// `bh_tpl=q_action_prompt:v3.0`; repeatable.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct InferArgs {
    /// Run directory written by `train`.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    run: Option<PathBuf>,
    /// Seed whose learned prompts to use; defaults to the first.
    #[arg(long, requires = "run")]
    seed: Option<u64>,
    /// Config to build the network from instead of a run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prompt per layer, first layer first; defaults to the initial prompts.
    #[arg(long = "prompt", requires = "config")]
    prompts: Vec<String>,
    #[arg(long)]
    input: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ToyDataArgs {
    /// Config with a toy backend.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Prompt of the output layer that produces the labels.
    #[arg(long)]
    target: String,
    /// Prompt of the hidden layer; makes a two-stage task.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {s:?}: expected FIELD=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn load_run_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if !args.overrides.is_empty() {
        let mut grid = Grid::new();
        for o in &args.overrides {
            let (k, v) = parse_override(o)?;
            grid = grid.with(&k, [v]);
        }
        let mut settings = grid.expand(&cfg.hyper).map_err(|e| CliError::Config(format!("--set: {e}")))?;
        cfg.hyper = settings.remove(0).hyper;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl Serialize) {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    // A closed pipe (`dln report dir | head`) is not an error.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

#[derive(Serialize)]
struct Inference {
    input: String,
    prompts: Vec<String>,
    hiddens: Vec<String>,
    output: String,
}

fn infer(args: &InferArgs) -> Result<Inference, CliError> {
    let (cfg, prompts) = match (&args.run, &args.config) {
        (Some(dir), _) => {
            let cfg = RunConfig::load(&dir.join("config.toml"))?;
            let seed = args.seed.unwrap_or(cfg.seeds[0]);
            let path = run::seed_dir(dir, seed).join("final.json");
            let state = TrainState::load(&path).map_err(|e| CliError::io(&path, e))?;
            let prompts = state.best_prompts.iter().map(|p| p.text.clone()).collect();
            (cfg, prompts)
        }
        (None, Some(path)) => {
            let cfg = RunConfig::load(path)?;
            let prompts = if args.prompts.is_empty() {
                cfg.initial_prompts()
            } else {
                args.prompts.clone()
            };
            (cfg, prompts)
        }
        (None, None) => return Err(CliError::Config("infer needs --run or --config".into())),
    };
    let stack = cfg.stack(&prompts)?;
    let lm = cfg.backend()?;
    let pass = stack
        .forward(&args.input, lm.as_ref(), &cfg.hyper.limits)
        .map_err(|e| CliError::Backend(e.to_string()))?;
    Ok(Inference {
        input: args.input.clone(),
        prompts,
        hiddens: pass.hiddens,
        output: pass.y_hat,
    })
}

fn toy_data(args: &ToyDataArgs) -> Result<usize, CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let BackendConfig::Toy(toy) = &cfg.backend else {
        return Err(CliError::Config("toy-data needs a toy backend".into()));
    };
    let lm = ToyLm::new(toy.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let stack = match &args.hidden {
        Some(h) => dln::LayerStack::two_layer(h.clone(), args.target.clone()),
        None => dln::LayerStack::single(args.target.clone()),
    };
    let data = label_with("toy", &stack, &lm, SplitSpec::new(args.count, 0, 0), args.seed)
        .map_err(|e| CliError::Backend(e.to_string()))?;
    write_jsonl(&args.out, &data.train).map_err(|e| CliError::io(&args.out, e))?;
    Ok(data.train.len())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_run_config(&args)?;
            print_json(&run::train(&cfg, &args.out)?);
        }
        Command::Sweep(args) => {
            let cfg = load_run_config(&args)?;
            print_json(&run::sweep(&cfg, &args.out)?);
        }
        Command::Infer(args) => {
            let out = infer(&args)?;
            if args.json {
                print_json(&out);
            } else {
                let mut stdout = std::io::stdout().lock();
                for (i, h) in out.hiddens.iter().enumerate() {
                    let _ = writeln!(stdout, "hidden[{i}]: {h}");
                }
                let _ = writeln!(stdout, "{}", out.output);
            }
        }
        Command::Report { dir, price } => print_json(&report::report(Path::new(&dir), price)?),
        Command::ToyData(args) => {
            let n = toy_data(&args)?;
            eprintln!("wrote {n} examples to {}", args.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
