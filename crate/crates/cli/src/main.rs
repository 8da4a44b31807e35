use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use emmental::dfl::{self, DflConfig};
use emmental::gm::CostFunctionNetwork;
use emmental::harden::{constraint_report, harden};
use emmental::model::{predict_gm, predict_unconditioned};
use emmental::neural::Checkpoint;
use emmental::solver::{solve, SolveOptions, Strategy};
use emmental::tasks::{cut::CutMode, generate, load_dataset, save_dataset, sudoku, GenConfig, TaskKind};
use emmental::train::{evaluate, train, EvalConfig, LossKind, TrainConfig};
use emmental::{Error, Result};

#[derive(Parser)]
#[command(name = "emmental", version, about = "Learn pairwise cost function networks from solved instances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset as JSONL.
    Gen(GenArgs),
    /// Train a predictor and write a checkpoint.
    Train(TrainArgs),
    /// Measure test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Solve a network read from CFN JSON.
    Solve(SolveArgs),
    /// Harden a trained predictor and report the recovered constraints.
    Harden(HardenArgs),
    /// Write the predicted network of one dataset instance as CFN JSON.
    Export(ExportArgs),
    /// Regret curves of E-PLL or SPO+ on a cut task, as CSV.
    Dfl(DflArgs),
}

/// Flags shared by all subcommands. A `--config` file (TOML or JSON) may set
/// any flag by its long name; flags given on the command line win.
#[derive(Args, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Shared {
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    hints: Option<usize>,
    #[arg(long)]
    max_solutions: Option<usize>,
    #[arg(long)]
    keep_solutions: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    p_ineq: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    /// Training set (JSONL).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation set used for per-epoch accuracy and early stopping.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Holes as a fraction of the other variables (overrides --k).
    #[arg(long)]
    k_fraction: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mask_solution_frac: Option<f64>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    node_limit: Option<u64>,
    #[arg(long, default_missing_value = "true", num_args = 0..=1)]
    no_early_stop: Option<bool>,
    /// Validate after every this many epochs.
    #[arg(long)]
    validate_every: Option<usize>,
    /// Perfect validations in a row needed to stop early.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    node_limit: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SolveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    /// Network in CFN JSON.
    #[arg(long)]
    cfn: Option<PathBuf>,
    #[arg(long)]
    node_limit: Option<u64>,
    /// Seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// auto, bnb or elimination.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct HardenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training set whose solutions guard the hardening.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset line (0-based).
    #[arg(long)]
    index: Option<usize>,
    /// Condition the network on the instance's hints.
    #[arg(long, default_missing_value = "true", num_args = 0..=1)]
    conditioned: Option<bool>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DflArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
    #[arg(long)]
    loss: Option<LossKind>,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

/// Fills every flag missing on the command line from the config file.
fn with_config<T: Serialize + DeserializeOwned>(cli: T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else { return Ok(cli) };
    let text = std::fs::read_to_string(path)?;
    let file: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        let value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        serde_json::to_value(value)?
    };
    let serde_json::Value::Object(file) = file else {
        return Err(Error::parse(path.display().to_string(), "config must be a table"));
    };
    let mut merged = serde_json::to_value(&cli)?;
    let target = merged.as_object_mut().expect("arguments serialize to an object");
    for (key, value) in file {
        let key = key.replace('-', "_");
        if target.get(&key).map_or(true, |v| v.is_null()) {
            target.insert(key, value);
        }
    }
    serde_json::from_value(merged).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::input(format!("missing --{flag}")))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_gen(a: GenArgs) -> Result<()> {
    let a = with_config(a.clone(), a.config.as_deref())?;
    let task = required(a.shared.task, "task")?;
    let d = GenConfig::default();
    let cfg = GenConfig {
        count: a.count.unwrap_or(d.count),
        seed: a.shared.seed.unwrap_or(d.seed),
        target_hints: a.hints.unwrap_or(d.target_hints),
        max_solutions: a.max_solutions.unwrap_or(d.max_solutions),
        keep_solutions: a.keep_solutions.unwrap_or(d.keep_solutions),
        size: a.size.unwrap_or(d.size),
        p_ineq: a.p_ineq.unwrap_or(d.p_ineq),
    };
    let samples = generate(task, &cfg)?;
    let out = required(a.shared.out, "out")?;
    save_dataset(&out, &samples)?;
    eprintln!("wrote {} {} samples to {}", samples.len(), task, out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let a = with_config(a.clone(), a.config.as_deref())?;
    let task = required(a.shared.task, "task")?;
    let samples = load_dataset(&required(a.data, "data")?, task)?;
    let valid = match &a.valid {
        Some(p) => load_dataset(p, task)?,
        None => Vec::new(),
    };
    let mut cfg = TrainConfig::for_task(task);
    if let Some(loss) = a.loss {
        cfg.loss = loss;
        if loss == LossKind::SpoPlus {
            cfg.lr = 1e-4;
            cfg.l1 = 0.0;
        }
    }
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.k_fraction = a.k_fraction.or(cfg.k_fraction);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.l1 = a.l1.unwrap_or(cfg.l1);
    cfg.weight_decay = a.weight_decay.unwrap_or(cfg.weight_decay);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.mask_solution_frac = a.mask_solution_frac.unwrap_or(cfg.mask_solution_frac);
    cfg.threshold = a.threshold.or(cfg.threshold);
    cfg.node_limit = a.node_limit.or(cfg.node_limit);
    cfg.seed = a.shared.seed.unwrap_or(cfg.seed);
    cfg.validate_every = a.validate_every.unwrap_or(cfg.validate_every);
    cfg.patience = a.patience.unwrap_or(cfg.patience);
    if a.no_early_stop == Some(true) {
        cfg.early_stop = false;
    }
    let trained = train(&samples, &valid, &cfg, &mut |_| Ok(()))?;
    for r in &trained.history {
        eprintln!(
            "epoch {:>3}  loss {:>10.4}  valid {}  {:.1}s",
            r.epoch,
            r.mean_loss,
            r.validation_accuracy.map_or("-".to_string(), |x| format!("{:.1}%", 100.0 * x)),
            r.seconds
        );
    }
    if trained.imputations > 0 {
        eprintln!(
            "imputed {} solutions ({} inconsistent, {} skipped)",
            trained.imputations, trained.imputation_mismatches, trained.skipped
        );
    }
    let out = required(a.shared.out, "out")?;
    Checkpoint::new(task, trained.network, Some(trained.adam), cfg.seed).save(&out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let a = with_config(a.clone(), a.config.as_deref())?;
    let ck = Checkpoint::load(&required(a.model, "model")?)?;
    let task = a.shared.task.unwrap_or(ck.task);
    let samples = load_dataset(&required(a.data, "data")?, task)?;
    let cfg = EvalConfig {
        threshold: a.threshold.or(TrainConfig::for_task(task).threshold),
        node_limit: a.node_limit.or(TrainConfig::for_task(task).node_limit),
        time_limit: None,
    };
    let report = evaluate(&ck.network, &samples, &cfg)?;
    write_output(a.shared.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn run_solve(a: SolveArgs) -> Result<()> {
    let a = with_config(a.clone(), a.config.as_deref())?;
    let path = required(a.cfn, "cfn")?;
    let gm = CostFunctionNetwork::import_cfn(BufReader::new(File::open(&path)?))?;
    let strategy = match a.strategy.as_deref() {
        None | Some("auto") => Strategy::Auto,
        Some("bnb") => Strategy::BranchAndBound,
        Some("elimination") => Strategy::Elimination,
        Some(s) => return Err(Error::input(format!("unknown strategy '{s}'"))),
    };
    let options = SolveOptions {
        node_limit: a.node_limit,
        time_limit: a.time_limit.map(Duration::from_secs_f64),
        strategy,
        ..Default::default()
    };
    let r = solve(&gm, &options);
    let mut text = String::new();
    match &r.assignment {
        Some(y) => {
            let values: Vec<String> = y.values().iter().map(|v| v.to_string()).collect();
            text += &format!("assignment: {}\ncost: {}\n", values.join(" "), r.cost);
        }
        None => text += "assignment: none\n",
    }
    text += &format!("status: {:?}\nnodes: {}\nbacktracks: {}\n", r.status, r.nodes, r.backtracks);
    write_output(a.shared.out.as_deref(), &text)
}

fn run_harden(a: HardenArgs) -> Result<()> {
    let a = with_config(a.clone(), a.config.as_deref())?;
    let ck = Checkpoint::load(&required(a.model, "model")?)?;
    let task = a.shared.task.unwrap_or(ck.task);
    let samples = load_dataset(&required(a.data, "data")?, task)?;
    let first = samples.first().ok_or_else(|| Error::input("dataset is empty"))?;
    if task == TaskKind::Futoshiki || task.is_cut() {
        return Err(Error::input("hardening needs a task whose pairs do not depend on the instance (sudoku)"));
    }
    let gm = predict_unconditioned(&ck.network, first)?;
    let mut solutions = Vec::new();
    for s in &samples {
        match s.solution.to_complete() {
            Some(y) => solutions.push(y),
            None => return Err(Error::input("hardening needs complete training solutions")),
        }
        solutions.extend(s.solutions.iter().cloned());
    }
    let outcome = harden(&gm, &solutions)?;
    let reference = sudoku::reference_pairs();
    let report = constraint_report(&outcome.gm, Some(&reference));
    eprintln!("hardened {} entries", outcome.hardened.len());
    eprint!("{report}");
    let mut text = Vec::new();
    outcome.gm.export_cfn(&mut text)?;
    write_output(a.shared.out.as_deref(), &(String::from_utf8_lossy(&text).into_owned() + "\n"))
}

fn run_export(a: ExportArgs) -> Result<()> {
    let a = with_config(a.clone(), a.config.as_deref())?;
    let ck = Checkpoint::load(&required(a.model, "model")?)?;
    let task = a.shared.task.unwrap_or(ck.task);
    let samples = load_dataset(&required(a.data, "data")?, task)?;
    let k = a.index.unwrap_or(0);
    let s = samples.get(k).ok_or_else(|| Error::input(format!("dataset has no line {k}")))?;
    let gm = if a.conditioned == Some(true) {
        predict_gm(&ck.network, s)?
    } else {
        predict_unconditioned(&ck.network, s)?
    };
    match a.shared.out {
        Some(p) => gm.export_cfn(BufWriter::new(File::create(p)?)),
        None => {
            gm.export_cfn(std::io::stdout().lock())?;
            println!();
            Ok(())
        }
    }
}

fn run_dfl(a: DflArgs) -> Result<()> {
    let a = with_config(a.clone(), a.config.as_deref())?;
    let mode = match required(a.shared.task, "task")? {
        TaskKind::MinCut => CutMode::Min,
        TaskKind::MaxCut => CutMode::Max,
        t => return Err(Error::input(format!("dfl runs on mincut or maxcut, not {t}"))),
    };
    let first = a.shared.seed.unwrap_or(0);
    let mut curve = Vec::new();
    for seed in first..first + a.seeds.unwrap_or(1) {
        let d = DflConfig::default();
        let cfg = DflConfig {
            mode,
            loss: a.loss.unwrap_or(d.loss),
            seed,
            epochs: a.epochs.unwrap_or(d.epochs),
            k: a.k.unwrap_or(d.k),
            lr: a.lr,
            ..d
        };
        let c = dfl::run_dfl_experiment(&cfg)?;
        eprintln!(
            "seed {seed}: final regret {:.4}, area {:.4}",
            c.last().map_or(0.0, |p| p.mean_test_regret),
            dfl::area_under_curve(&c)
        );
        curve.extend(c);
    }
    match a.shared.out {
        Some(p) => dfl::write_curve_csv(File::create(p)?, &curve),
        None => dfl::write_curve_csv(std::io::stdout().lock(), &curve),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Solve(a) => run_solve(a),
        Command::Harden(a) => run_harden(a),
        Command::Export(a) => run_export(a),
        Command::Dfl(a) => run_dfl(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
