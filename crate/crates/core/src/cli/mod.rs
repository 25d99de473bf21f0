//! The `rlev` command line: dataset generation, training, evaluation,
//! gradient checks, ablations, alpha sweeps and EOS trajectories.
//!
//! Every subcommand writes its artifacts, the resolved `config.toml` and a
//! `manifest.json` into one output directory. Exit codes: 0 success,
//! 1 internal error, 2 configuration or usage error, 3 data or file error,
//! 4 enumeration budget exceeded, 5 check failure.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    alpha_sweep, eos_trajectories, run_ablation, write_ablation_csv, write_sweep_csv,
    write_trajectories_csv, TrajectoryMode,
};
use crate::error::{Error, Result};
use crate::estimators::{evaluate, train, RunLogRecord};
use crate::exact_oracle::{write_grad_reports_csv, ExactOracle, RandomInstance};
use crate::exam_env::{
    dataset_hash, generate_dataset, load_dataset, mix, write_dataset, ValuedPrompt,
};
use crate::metrics::compute_metrics;
use crate::policy::Policy;
use crate::value_model::RewardModel;

pub use config::{Override, RunConfig};

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;
pub const EXIT_CHECK_FAILED: i32 = 5;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Default output directory when `--out-dir` is not given.
pub const OUT_DIR_ENV: &str = "RLEV_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "rlev",
    version,
    about = "Value-scaled correctness rewards on a toy exam benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic exam dataset as JSONL.
    GenData(GenDataArgs),
    /// Train a tabular policy and write its run log and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random instances.
    GradCheck(GradCheckArgs),
    /// Train every reward form over several seeds.
    Ablate(AblateArgs),
    /// Train over several alpha values and seeds.
    SweepAlpha(SweepArgs),
    /// EOS-probability trajectories for the top- and bottom-valued prompts.
    Traj(TrajArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat TOML file of configuration keys; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, env = OUT_DIR_ENV, default_value = "rlev-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DatasetShapeArgs {
    #[arg(long)]
    exams: Option<usize>,
    /// Questions per exam.
    #[arg(long)]
    questions: Option<usize>,
    /// Vocabulary size including EOS.
    #[arg(long)]
    vocab: Option<usize>,
    /// Longest reference answer.
    #[arg(long)]
    answer_length: Option<usize>,
    #[arg(long)]
    prompt_length: Option<usize>,
    /// skewed_scores or uniform_scores.
    #[arg(long)]
    scores: Option<String>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    shape: DatasetShapeArgs,
    /// Dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file name inside the output directory.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset JSONL; generated from the shape keys when absent.
    #[arg(long)]
    data: Option<String>,
    #[command(flatten)]
    shape: DatasetShapeArgs,
    /// Seed for a generated dataset.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainingArgs {
    /// reinforce_baseline, rloo or grpo.
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    baseline_decay: Option<f64>,
    #[arg(long)]
    grpo_std_floor: Option<f64>,
    /// human_aligned, multiplicative, uniform, shuffled or correctness_only.
    #[arg(long)]
    reward: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    uniform_scale: Option<f64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    learning_rate: Option<f64>,
    /// Rollouts per step.
    #[arg(long)]
    rollout_batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// greedy or sampled.
    #[arg(long)]
    eval_mode: Option<String>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    context_window: Option<usize>,
    #[arg(long)]
    bin_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Policy checkpoint JSONL.
    #[arg(long)]
    checkpoint: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    context_window: Option<usize>,
    /// Number of random instances.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Finite-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Largest accepted absolute error.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Largest number of sequences the oracle may enumerate.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Comma-separated reward forms.
    #[arg(long, value_delimiter = ',')]
    forms: Option<Vec<String>>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    alphas: Option<Vec<f64>>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
struct TrajArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Policy checkpoint JSONL; a policy is trained when absent.
    #[arg(long)]
    checkpoint: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Prompts per value cohort.
    #[arg(long)]
    cohort_size: Option<usize>,
    #[arg(long)]
    budget: Option<u64>,
}

trait FlagValue {
    fn to_toml(&self) -> toml::Value;
}

impl FlagValue for usize {
    fn to_toml(&self) -> toml::Value {
        toml::Value::Integer(*self as i64)
    }
}

impl FlagValue for u64 {
    fn to_toml(&self) -> toml::Value {
        toml::Value::Integer(*self as i64)
    }
}

impl FlagValue for f64 {
    fn to_toml(&self) -> toml::Value {
        toml::Value::Float(*self)
    }
}

impl FlagValue for String {
    fn to_toml(&self) -> toml::Value {
        toml::Value::String(self.clone())
    }
}

impl<T: FlagValue> FlagValue for Vec<T> {
    fn to_toml(&self) -> toml::Value {
        toml::Value::Array(self.iter().map(FlagValue::to_toml).collect())
    }
}

#[derive(Default)]
struct Flags(toml::Table);

impl Flags {
    fn put<T: FlagValue>(&mut self, key: &str, value: &Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), v.to_toml());
        }
        self
    }

    fn shape(&mut self, a: &DatasetShapeArgs) -> &mut Self {
        self.put("exams", &a.exams)
            .put("questions", &a.questions)
            .put("vocab", &a.vocab)
            .put("answer_length", &a.answer_length)
            .put("prompt_length", &a.prompt_length)
            .put("scores", &a.scores)
    }

    fn data(&mut self, a: &DataArgs) -> &mut Self {
        self.put("data", &a.data)
            .shape(&a.shape)
            .put("data_seed", &a.data_seed)
    }

    fn training(&mut self, a: &TrainingArgs) -> &mut Self {
        self.put("estimator", &a.estimator)
            .put("group_size", &a.group_size)
            .put("baseline_decay", &a.baseline_decay)
            .put("grpo_std_floor", &a.grpo_std_floor)
            .put("reward", &a.reward)
            .put("alpha", &a.alpha)
            .put("uniform_scale", &a.uniform_scale)
            .put("shuffle_seed", &a.shuffle_seed)
            .put("learning_rate", &a.learning_rate)
            .put("rollout_batch", &a.rollout_batch)
            .put("epochs", &a.epochs)
            .put("seed", &a.seed)
            .put("eval_every", &a.eval_every)
            .put("eval_mode", &a.eval_mode)
            .put("eval_samples", &a.eval_samples)
            .put("max_len", &a.max_len)
            .put("context_window", &a.context_window)
            .put("bin_fraction", &a.bin_fraction)
    }

    fn take(&mut self) -> toml::Table {
        std::mem::take(&mut self.0)
    }
}

/// Written to `manifest.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_snapshot: RunConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Files written to the output directory, relative to it. The manifest
    /// itself is not listed.
    pub artifact_index: Vec<String>,
    pub overrides: Vec<Override>,
    pub dataset_hash: Option<String>,
    /// Command-specific facts, such as the trajectory mode.
    pub details: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct Run {
    command: &'static str,
    config: RunConfig,
    overrides: Vec<Override>,
    out_dir: PathBuf,
    artifacts: Vec<String>,
    dataset_hash: Option<String>,
    details: BTreeMap<String, String>,
}

impl Run {
    fn start(command: &'static str, common: &CommonArgs, flags: toml::Table) -> Result<Self> {
        let file = match &common.config {
            Some(path) => Some(fs::read_to_string(path).map_err(|e| Error::io(path, e))?),
            None => None,
        };
        let (config, overrides) = RunConfig::resolve(file.as_deref(), flags)?;
        fs::create_dir_all(&common.out_dir).map_err(|e| Error::io(&common.out_dir, e))?;
        let mut run = Self {
            command,
            config,
            overrides,
            out_dir: common.out_dir.clone(),
            artifacts: Vec::new(),
            dataset_hash: None,
            details: BTreeMap::new(),
        };
        let text = run.config.to_toml()?;
        run.write(CONFIG_FILE, |w| {
            w.write_all(text.as_bytes())
                .map_err(|e| Error::io(CONFIG_FILE, e))
        })?;
        Ok(run)
    }

    fn write(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<()> {
        let path = self.out_dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        body(&mut w)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n").map_err(|e| Error::io(name, e))
        })
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<()> {
        self.write(name, |w| {
            for r in records {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n").map_err(|e| Error::io(name, e))?;
            }
            Ok(())
        })
    }

    /// Loads `data` when set, otherwise generates (and writes) a dataset.
    fn dataset(&mut self) -> Result<Vec<ValuedPrompt>> {
        let dataset = match &self.config.data {
            Some(path) => load_dataset(path)?,
            None => {
                let dataset = generate_dataset(&self.config.dataset_config()?)?;
                self.write("dataset.jsonl", |w| write_dataset(&dataset, w))?;
                dataset
            }
        };
        self.dataset_hash = Some(dataset_hash(&dataset));
        Ok(dataset)
    }

    fn checkpoint(&self) -> Result<Policy> {
        match &self.config.checkpoint {
            Some(path) => Policy::load(path),
            None => Err(Error::Config("`checkpoint` is required".into())),
        }
    }

    fn finish(self, seed: u64) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_snapshot: self.config,
            seed,
            output_dir: self.out_dir.clone(),
            artifact_index: self.artifacts,
            overrides: self.overrides,
            dataset_hash: self.dataset_hash,
            details: self.details,
        };
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Exit code for an error, by failure class.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Domain(_) | Error::GroupSize { .. } => EXIT_CONFIG,
        Error::Parse { .. }
        | Error::Invariant { .. }
        | Error::EmptyInput(_)
        | Error::ZeroTotalValue
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_) => EXIT_DATA,
        Error::Budget { .. } => EXIT_BUDGET,
        Error::Infeasible(_) | Error::Unreachable(_) | Error::Numeric(_) => EXIT_INTERNAL,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("rlev: error: {e}");
            exit_code(&e)
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::GradCheck(a) => grad_check(&a),
        Command::Ablate(a) => ablate(&a),
        Command::SweepAlpha(a) => sweep(&a),
        Command::Traj(a) => traj(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<i32> {
    let flags = Flags::default()
        .shape(&a.shape)
        .put("data_seed", &a.seed)
        .put("out", &a.out)
        .take();
    let mut run = Run::start("gen-data", &a.common, flags)?;
    let dataset = generate_dataset(&run.config.dataset_config()?)?;
    let name = run.config.out.clone();
    run.write(&name, |w| write_dataset(&dataset, w))?;
    run.dataset_hash = Some(dataset_hash(&dataset));
    let seed = run.config.data_seed;
    run.finish(seed)?;
    Ok(0)
}

fn train_cmd(a: &TrainArgs) -> Result<i32> {
    let flags = Flags::default().data(&a.data).training(&a.training).take();
    let mut run = Run::start("train", &a.common, flags)?;
    let dataset = run.dataset()?;
    let config = run.config.train_config();
    let outcome = train(&config, &dataset)?;
    let mut log: Vec<RunLogRecord> = outcome.log;
    if let Some(last) = log.last_mut() {
        last.policy_checkpoint_ref = Some("checkpoint.jsonl".into());
    }
    run.write("checkpoint.jsonl", |w| outcome.policy.write_checkpoint(w))?;
    run.write_jsonl("run_log.jsonl", &log)?;
    let results = evaluate(
        &outcome.policy,
        &dataset,
        &outcome.rewards,
        config.eval_mode,
    )?;
    let report = compute_metrics(&results, run.config.bin_fraction)?;
    run.write_json("metrics.json", &report)?;
    let seed = run.config.seed;
    run.finish(seed)?;
    Ok(0)
}

fn eval_cmd(a: &EvalArgs) -> Result<i32> {
    let flags = Flags::default()
        .put("checkpoint", &a.checkpoint)
        .data(&a.data)
        .training(&a.training)
        .take();
    let mut run = Run::start("eval", &a.common, flags)?;
    let policy = run.checkpoint()?;
    let dataset = run.dataset()?;
    let rewards = RewardModel::resolve(&run.config.reward_spec(), &dataset)?;
    let results = evaluate(&policy, &dataset, &rewards, run.config.eval_mode())?;
    let report = compute_metrics(&results, run.config.bin_fraction)?;
    run.write("eval_results.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in &results {
            csv.serialize(r)?;
        }
        csv.flush().map_err(|e| Error::io("eval_results.csv", e))
    })?;
    run.write_json("metrics.json", &report)?;
    let seed = run.config.seed;
    run.finish(seed)?;
    Ok(0)
}

#[derive(Serialize)]
struct TrialSummary {
    trial: usize,
    vocab_size: usize,
    max_len: usize,
    alpha: f64,
    max_abs_error: f64,
}

fn grad_check(a: &GradCheckArgs) -> Result<i32> {
    let flags = Flags::default()
        .put("vocab", &a.vocab)
        .put("max_len", &a.max_len)
        .put("context_window", &a.context_window)
        .put("trials", &a.trials)
        .put("alpha", &a.alpha)
        .put("eps", &a.eps)
        .put("tolerance", &a.tolerance)
        .put("seed", &a.seed)
        .put("budget", &a.budget)
        .take();
    let mut run = Run::start("grad-check", &a.common, flags)?;
    let c = run.config.clone();
    let oracle = ExactOracle::new(c.budget);
    oracle.check_budget(&Policy::new(c.vocab, c.context_window, c.max_len)?)?;

    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    for trial in 0..c.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[c.seed, trial as u64, 0x6AD]));
        let inst = RandomInstance::draw(&mut rng, c.vocab, c.max_len, c.context_window, c.alpha)?;
        let trial_reports = oracle.grad_reports(&inst.policy, &inst.prompt, &inst.spec, c.eps)?;
        summaries.push(TrialSummary {
            trial,
            vocab_size: c.vocab,
            max_len: c.max_len,
            alpha: c.alpha,
            max_abs_error: trial_reports
                .iter()
                .map(|r| r.max_abs_error)
                .fold(0.0, f64::max),
        });
        reports.extend(trial_reports.into_iter().map(|r| (trial, r)));
    }
    run.write("grad_check.csv", |w| {
        write_grad_reports_csv(reports.iter().map(|(t, r)| (*t, r)), w)
    })?;
    run.write("grad_check_summary.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for s in &summaries {
            csv.serialize(s)?;
        }
        csv.flush()
            .map_err(|e| Error::io("grad_check_summary.csv", e))
    })?;
    let worst = summaries
        .iter()
        .map(|s| s.max_abs_error)
        .fold(0.0, f64::max);
    let passed = worst < c.tolerance;
    run.details
        .insert("max_abs_error".into(), format!("{worst:e}"));
    run.details.insert("passed".into(), passed.to_string());
    run.finish(c.seed)?;
    if passed {
        Ok(0)
    } else {
        eprintln!(
            "rlev: gradient check failed: max abs error {worst:e} >= tolerance {:e}",
            c.tolerance
        );
        Ok(EXIT_CHECK_FAILED)
    }
}

fn ablate(a: &AblateArgs) -> Result<i32> {
    let flags = Flags::default()
        .data(&a.data)
        .training(&a.training)
        .put("forms", &a.forms)
        .put("seeds", &a.seeds)
        .take();
    let mut run = Run::start("ablate", &a.common, flags)?;
    let dataset = run.dataset()?;
    let grid = run_ablation(
        &run.config.train_config(),
        &dataset,
        &run.config.forms,
        &run.config.seeds,
    )?;
    run.write("ablation.csv", |w| write_ablation_csv(&grid, w))?;
    run.write_json("ablation.json", &grid)?;
    let seed = run.config.seed;
    run.finish(seed)?;
    Ok(0)
}

fn sweep(a: &SweepArgs) -> Result<i32> {
    let flags = Flags::default()
        .data(&a.data)
        .training(&a.training)
        .put("alphas", &a.alphas)
        .put("seeds", &a.seeds)
        .take();
    let mut run = Run::start("sweep-alpha", &a.common, flags)?;
    let dataset = run.dataset()?;
    let rows = alpha_sweep(
        &run.config.train_config(),
        &dataset,
        &run.config.alphas,
        &run.config.seeds,
    )?;
    run.write("sweep.csv", |w| write_sweep_csv(&rows, w))?;
    let seed = run.config.seed;
    run.finish(seed)?;
    Ok(0)
}

fn traj(a: &TrajArgs) -> Result<i32> {
    let flags = Flags::default()
        .put("checkpoint", &a.checkpoint)
        .data(&a.data)
        .training(&a.training)
        .put("cohort_size", &a.cohort_size)
        .put("budget", &a.budget)
        .take();
    let mut run = Run::start("traj", &a.common, flags)?;
    let dataset = run.dataset()?;
    let (policy, label) = match &run.config.checkpoint {
        Some(path) => (run.checkpoint()?, path.clone()),
        None => {
            let outcome = train(&run.config.train_config(), &dataset)?;
            run.write("checkpoint.jsonl", |w| outcome.policy.write_checkpoint(w))?;
            (outcome.policy, "checkpoint.jsonl".to_string())
        }
    };
    let oracle = ExactOracle::new(run.config.budget);
    let (top, bottom) =
        eos_trajectories(&policy, &dataset, run.config.cohort_size, &label, &oracle)?;
    let mode = match top.mode {
        TrajectoryMode::Exact => "exact",
        TrajectoryMode::Sampled => "sampled",
    };
    run.details.insert("trajectory_mode".into(), mode.into());
    run.details.insert("checkpoint_label".into(), label);
    run.write("trajectories.csv", |w| {
        write_trajectories_csv(&[top, bottom], w)
    })?;
    let seed = run.config.seed;
    run.finish(seed)?;
    Ok(0)
}
