//! The `msdc` command line.
//!
//! Global options come before the subcommand. Any `--section.key=value`
//! argument, anywhere on the line, overrides that key of the run config.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::AblationMode;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{export_house, load_house, HouseBundle};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::network::LossKind;
use crate::simulator::{self, simulate_appliance};
use crate::states::{extract_state_model, read_sidecar, write_sidecar, StateModel, StateSequence};
use crate::train::{split_dataset, train, ApplianceData, RunDir};

#[derive(Debug, Parser)]
#[command(name = "msdc", version, about = "Multi-state energy disaggregation")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster each appliance channel into power states and write sidecars.
    ExtractStates(ExtractArgs),
    /// Train one model per appliance.
    Train(TrainArgs),
    /// Score a checkpoint on a data split.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic REDD-layout dataset.
    Simulate(SimulateArgs),
    /// Monte Carlo checks of the multi-state variance argument.
    VerifyTheory,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Sidecar directory [default: <output.dir>/states].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Msdc,
    MsdcCrf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationArg {
    SingleState,
    MultiState,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Independent runs, seeded `trainer.seed`, `trainer.seed + 1`, ...
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Off/on threshold in watts for the single-state ablation.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Sidecar directory [default: <output.dir>/states].
    #[arg(long)]
    pub states: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Where metrics.csv and predictions.csv go [default: checkpoint's directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Dataset root to write into [default: dataset root].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Splits `--a.b=value` overrides out of the argument list.
pub fn split_overrides(args: impl IntoIterator<Item = OsString>) -> (Vec<OsString>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.to_str() {
            Some(s) if is_override(s) => overrides.push(s.trim_start_matches("--").to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn is_override(arg: &str) -> bool {
    arg.strip_prefix("--")
        .and_then(|s| s.split_once('='))
        .is_some_and(|(key, _)| key.contains('.'))
}

/// Parses the command line and runs it. Returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let (rest, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.class().exit_code()
        }
    }
}

pub fn run(cli: Cli, overrides: &[String]) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::ExtractStates(a) => cmd_extract_states(&cfg, a.out.as_deref()).map(|_| ()),
        Command::Train(a) => {
            if let Some(l) = a.loss {
                cfg.trainer.loss = match l {
                    LossArg::Msdc => LossKind::Msdc,
                    LossArg::MsdcCrf => LossKind::MsdcCrf,
                };
            }
            if let Some(k) = a.seeds {
                cfg.trainer.seeds = k;
            }
            if let Some(m) = a.ablation {
                cfg.ablation.mode = match m {
                    AblationArg::SingleState => AblationMode::SingleState,
                    AblationArg::MultiState => AblationMode::MultiState,
                };
            }
            if a.threshold.is_some() {
                cfg.ablation.threshold = a.threshold;
            }
            cfg.validate()?;
            cmd_train(&cfg, a.states.as_deref()).map(|_| ())
        }
        Command::Evaluate(a) => cmd_evaluate(&cfg, &a.checkpoint, a.split, a.out.as_deref()).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(&cfg, a.out.as_deref()).map(|_| ()),
        Command::VerifyTheory => cmd_verify_theory(&cfg),
    }
}

fn load_bundle(cfg: &RunConfig) -> Result<HouseBundle> {
    load_house(
        &cfg.dataset.resolved_root(),
        &cfg.dataset.house,
        &cfg.dataset.appliances,
        &cfg.dataset.load_options()?,
    )
}

fn file_stem(appliance: &str) -> String {
    appliance
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

pub fn sidecar_path(dir: &Path, house: &str, appliance: &str) -> PathBuf {
    dir.join(house).join(format!("{}.states", file_stem(appliance)))
}

fn states_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join("states"))
}

/// Fits states on the training split of each channel and labels the whole
/// channel, matching what training expects.
pub fn cmd_extract_states(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let bundle = load_bundle(cfg)?;
    let dir = states_dir(cfg, out);
    let mut written = Vec::new();
    for name in &cfg.dataset.appliances {
        let series = bundle.channel(name)?;
        let [train_range, _, _] = split_dataset(series.len(), &cfg.trainer.split)?;
        let (model, _) = extract_state_model(name, &series.values()[train_range], &cfg.extraction)?;
        let labels = model.label_series(series.values());
        let path = sidecar_path(&dir, &bundle.house_id, name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_sidecar(&path, &model.centers, labels.labels())?;
        let centers: Vec<String> = model.centers.iter().map(|c| format!("{c:.1}")).collect();
        println!("{name}: M={} centers=[{}] -> {}", model.num_states(), centers.join(", "), path.display());
        written.push(path);
    }
    Ok(written)
}

/// Trains every configured appliance for every seed. Returns the run
/// directories in (appliance, seed) order.
pub fn cmd_train(cfg: &RunConfig, states: Option<&Path>) -> Result<Vec<PathBuf>> {
    let bundle = load_bundle(cfg)?;
    let dir = states_dir(cfg, states);
    let snapshot = cfg.snapshot()?;
    let mut runs = Vec::new();
    for name in &cfg.dataset.appliances {
        let series = bundle.channel(name)?;
        let (centers, labels) = read_sidecar(&sidecar_path(&dir, &bundle.house_id, name))?;
        let seq = StateSequence::new(labels, centers.len())?;
        let model = StateModel {
            appliance_id: name.clone(),
            bandwidth: cfg.extraction.bandwidth_for(series.values()),
            centers,
        };
        let (model, seq) = cfg.ablation.apply(&model, &seq)?;
        let data = ApplianceData::new(name.clone(), bundle.mains.clone(), series.clone(), seq, model)?;
        for k in 0..cfg.trainer.seeds {
            let seed = cfg.trainer.seed + k as u64;
            let run = RunDir {
                path: cfg.output.dir.join(file_stem(name)).join(format!("seed_{seed}")),
                snapshot: snapshot.clone(),
            };
            let out = train(&data, &cfg.train_config(seed), Some(&run))?;
            let r = &out.report;
            println!(
                "{name} seed {seed}: M={} best epoch {:?} val J_power {:.3} val MAE {} -> {}",
                data.state_model.num_states(),
                r.best_epoch,
                r.best_val_loss,
                r.val_mae.map_or("n/a".into(), |m| format!("{m:.3}")),
                run.path.display()
            );
            runs.push(run.path);
        }
    }
    Ok(runs)
}

/// Writes `metrics.csv` and `predictions.csv`; returns the metrics.
pub fn cmd_evaluate(cfg: &RunConfig, ckpt: &Path, split: SplitArg, out: Option<&Path>) -> Result<MetricsReport> {
    let model = checkpoint::load(ckpt)?;
    let mut bundle = load_house(
        &cfg.dataset.resolved_root(),
        &cfg.dataset.house,
        std::slice::from_ref(&model.appliance),
        &cfg.dataset.load_options()?,
    )?;
    let truth_series = bundle
        .channels
        .remove(&model.appliance)
        .expect("load_house returns requested channels");
    let [tr, va, te] = split_dataset(truth_series.len(), &cfg.trainer.split)?;
    let range = match split {
        SplitArg::Train => tr,
        SplitArg::Val => va,
        SplitArg::Test => te,
        SplitArg::All => 0..truth_series.len(),
    };
    let x = &bundle.mains.values()[range.clone()];
    let truth = &truth_series.values()[range.clone()];
    let pred = model.predict(x)?;
    let states = StateModel {
        appliance_id: model.appliance.clone(),
        centers: model.centers.clone(),
        bandwidth: 0.0,
    };
    let truth_states = states.label_series(truth);
    let period = cfg.metrics.period_samples.min(truth.len());
    let report = metrics::evaluate(&pred.power, truth, &pred.states, truth_states.labels(), period)?;

    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| ckpt.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    metrics::write_report_csv(&dir.join("metrics.csv"), &[(model.appliance.clone(), report)])?;
    write_predictions_csv(
        &dir.join("predictions.csv"),
        range.start,
        truth,
        &pred.power,
        truth_states.labels(),
        &pred.states,
    )?;
    println!(
        "{}: MAE {:.3} W, SAE {:.4}, SAE_delta {:.3} W, state accuracy {:.4}",
        model.appliance, report.mae, report.sae, report.sae_delta, report.state_accuracy
    );
    Ok(report)
}

/// `t,truth_watts,pred_watts,truth_state,pred_state`, `t` indexing the
/// full aligned series.
pub fn write_predictions_csv(
    path: &Path,
    offset: usize,
    truth: &[f64],
    pred: &[f64],
    truth_states: &[usize],
    pred_states: &[usize],
) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::from("t,truth_watts,pred_watts,truth_state,pred_state\n");
    for i in 0..truth.len() {
        writeln!(
            s,
            "{},{},{},{},{}",
            offset + i,
            truth[i],
            pred[i],
            truth_states[i],
            pred_states[i]
        )
        .expect("String write");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Simulates the configured appliances, aggregates them and exports a REDD
/// house. Returns the house directory.
pub fn cmd_simulate(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let sim = &cfg.simulator;
    let mut channels = Vec::new();
    for (i, fsm) in sim.appliances.iter().enumerate() {
        let (y, _) = simulate_appliance(fsm, sim.grid, sim.length, sim.seed.wrapping_add(i as u64))?;
        channels.push((fsm.name.clone(), y));
    }
    let series: Vec<_> = channels.iter().map(|(_, y)| y.clone()).collect();
    let mains = simulator::aggregate(&series, &sim.noise, sim.seed.wrapping_add(1000))?;
    let root = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset.resolved_root());
    let dir = export_house(&root, &sim.house, &mains, &channels)?;
    println!(
        "wrote {} appliances x {} samples to {}",
        channels.len(),
        sim.length,
        dir.display()
    );
    Ok(dir)
}

pub fn cmd_verify_theory(cfg: &RunConfig) -> Result<()> {
    let spec = &cfg.theory.spec;
    let f = simulator::verify_fact1(spec)?;
    println!(
        "fact1: mean {:.4} (analytic {:.4}), variance {:.4} (analytic {:.4}) -> {}",
        f.empirical_mean,
        f.analytic_mean,
        f.empirical_variance,
        f.analytic_variance,
        verdict(f.pass)
    );
    let t = simulator::verify_theorem1(spec)?;
    println!(
        "theorem1: means {:.4} vs {:.4}, variance ratio {:.4} (analytic {:.4}) -> {}",
        t.mean_multi,
        t.mean_single,
        t.ratio_empirical,
        t.ratio_analytic,
        verdict(t.pass)
    );
    let c = simulator::verify_corollary(spec, cfg.theory.xi)?;
    println!(
        "corollary: P_multi {:.4} (analytic {:.4}) vs P_single {:.4} (analytic {:.4}) -> {}",
        c.prob_multi,
        c.analytic_multi,
        c.prob_single,
        c.analytic_single,
        verdict(c.pass)
    );
    if f.pass && t.pass && c.pass {
        Ok(())
    } else {
        Err(Error::VerificationFailed("theory checks did not all pass".into()))
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}
