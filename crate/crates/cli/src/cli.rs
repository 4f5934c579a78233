//! Command-line surface. Every subcommand writes its outputs under
//! `--out-dir` together with a `run.json` provenance record; input paths are
//! taken as given (relative to the working directory).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use diffprobe_core::cost::{cost_guided, cost_guided_rewrites, cost_naive, reference_table, speedup, CostModel};
use diffprobe_core::data::{AttentionStack, Split};
use diffprobe_core::eval::{evaluate_probe, DispersionBaseline, EvalReport, Predictor};
use diffprobe_core::probe::{decode_probe, encode_probe, probe_mse, train_probe, ProbeConfig, ProbeParams};
use diffprobe_core::rng::{derive_seed, Rng};
use diffprobe_core::stats::{dispersion_score, stack_stats, DEFAULT_FRAGMENT_THRESHOLD};
use diffprobe_core::testbed::scene::{random_scene, SceneSpec, MAX_OBJECTS};
use diffprobe_core::testbed::synth::random_synth_record;
use diffprobe_core::testbed::toy::{decode_toy, encode_toy, toy_sample, toy_train, ToyDiffusionConfig, ToyModel};
use diffprobe_core::testbed::SynthConfig;
use diffprobe_core::workflows::{
    effective_sample_report, gate_prompt, mine_pairs, select_seed, GateAction, RelaxedPlacement, ScoredTrajectory,
    Thresholds, ToyGenerator,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{config_hash, layered, resolve, ConfigFile};
use crate::error::{CliError, CliResult};
use crate::io::{
    heatmap_pgm, image_pgm, load_checkpoint, read_bare_stack, save_checkpoint, write_bytes, write_json, Dataset,
};

#[derive(Debug, Parser)]
#[command(name = "diffprobe", version, about = "Early-step attention probes for diffusion generators")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (default: the config file's `seed`, else 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic dataset with a known dispersion-quality law.
    GenSynth(GenSynthArgs),
    /// Dataset sampled from a trained toy diffusion model.
    GenToy(GenToyArgs),
    /// Train the toy diffusion model.
    TrainToy(TrainToyArgs),
    /// Train a quality probe on one capture step of a dataset.
    TrainProbe(TrainProbeArgs),
    /// SRCC, KTC, PCC and AUC-ROC of a probe (and/or the dispersion baseline).
    Eval(EvalArgs),
    /// Per-map dispersion statistics of one stack.
    Stats(StatsArgs),
    /// Best-of-N seed selection from partial trajectories.
    SelectSeed(SelectSeedArgs),
    /// Predict a prompt's quality and rewrite it below a threshold.
    Gate(GateArgs),
    /// Mine same-prompt preference pairs from probe predictions.
    MinePairs(MinePairsArgs),
    /// FLOPs/latency ledgers for naive and guided workflows.
    Cost(CostArgs),
    /// One max-normalized graymap per block for a token of a stack.
    ExportHeatmaps(ExportHeatmapsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::GenToy(_) => "gen-toy",
            Command::TrainToy(_) => "train-toy",
            Command::TrainProbe(_) => "train-probe",
            Command::Eval(_) => "eval",
            Command::Stats(_) => "stats",
            Command::SelectSeed(_) => "select-seed",
            Command::Gate(_) => "gate",
            Command::MinePairs(_) => "mine-pairs",
            Command::Cost(_) => "cost",
            Command::ExportHeatmaps(_) => "export-heatmaps",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenSynthArgs {
    /// Dataset name; written to `<out-dir>/data/<name>`.
    #[arg(long)]
    pub name: Option<String>,
    /// Number of records [500].
    #[arg(long)]
    pub n: Option<usize>,
    /// Label noise σ_q [0.05].
    #[arg(long)]
    pub sigma_q: Option<f64>,
    /// Per-token spread of dispersion around the record's level [0.1].
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Fraction of records in the test split [0.2].
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub map_size: Option<usize>,
    #[arg(long)]
    pub capture_step: Option<u32>,
    #[arg(long)]
    pub total_steps: Option<u32>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenToyArgs {
    #[arg(long)]
    pub name: Option<String>,
    /// Toy model checkpoint (config read from its `.json` sidecar).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Number of distinct prompts [50].
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub seeds_per_prompt: Option<u64>,
    /// Capture steps [1,5,10].
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<u32>>,
    #[arg(long)]
    pub total_steps: Option<u32>,
    /// Fraction of prompts (with all their seeds) in the test split [0.2].
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainToyArgs {
    /// Number of random training scenes [2000].
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Overrides `[toy] train-iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Checkpoint file name [toy.atpw].
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainProbeArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Capture step to train on [5].
    #[arg(long)]
    pub step: Option<u32>,
    /// Split to train on [train].
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint file name [probe.atpw].
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Probe checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub step: Option<u32>,
    /// Split to evaluate [test].
    #[arg(long)]
    pub split: Option<String>,
    /// Also evaluate the training-free dispersion baseline.
    #[arg(long)]
    pub baseline: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct StatsArgs {
    #[arg(long)]
    pub stack: Option<PathBuf>,
    /// Fragmentation threshold as a fraction of the map maximum [0.5].
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SelectSeedArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Scene prompt text, e.g. `32x32:circle/3@12.0,8.0r5.0`.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Candidate seeds [0..n-seeds].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub n_seeds: Option<u64>,
    /// Partial-trajectory length T₀ [5].
    #[arg(long)]
    pub t0: Option<u32>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Threshold τ; defaults to the median prediction over `--dataset`'s train split.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Seed of the partial run the gate reads [0].
    #[arg(long)]
    pub gate_seed: Option<u64>,
    #[arg(long)]
    pub t0: Option<u32>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct MinePairsArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub step: Option<u32>,
    /// Restrict to one split (default: all records).
    #[arg(long)]
    pub split: Option<String>,
    /// θ⁺ (default: 70th percentile of predictions).
    #[arg(long)]
    pub theta_pos: Option<f64>,
    /// θ⁻ (default: 30th percentile of predictions).
    #[arg(long)]
    pub theta_neg: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CostArgs {
    /// Candidates per prompt [10].
    #[arg(long)]
    pub candidates: Option<u64>,
    #[arg(long)]
    pub t0: Option<u32>,
    /// Include one prompt rewrite per candidate in the guided ledger.
    #[arg(long)]
    pub rewrites: Option<bool>,
    /// Also print the reference cost table next to the model's values.
    #[arg(long)]
    pub table: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExportHeatmapsArgs {
    #[arg(long)]
    pub stack: Option<PathBuf>,
    /// Token slot to export.
    #[arg(long)]
    pub token: Option<usize>,
}

fn req<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| CliError::usage(format!("missing required --{flag}")))
}

fn fraction(v: f64, flag: &str) -> CliResult<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::usage(format!("--{flag} must lie in [0, 1]")))
    }
}

struct Ctx {
    out_dir: PathBuf,
    seed: u64,
    file: ConfigFile,
    outputs: Vec<String>,
}

impl Ctx {
    /// Output path under `--out-dir`, recorded in `run.json`.
    fn output(&mut self, rel: &str) -> PathBuf {
        self.outputs.push(rel.to_string());
        self.out_dir.join(rel)
    }

    fn settings<T: Serialize + serde::de::DeserializeOwned>(&self, section: &str, flags: &T) -> CliResult<T> {
        resolve(flags, self.file.section(section))
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    config: &'a Value,
    config_sha256: String,
    versions: Value,
    outputs: &'a [String],
}

/// Parses nothing; runs an already-parsed invocation.
pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let mut ctx = Ctx { out_dir: cli.out_dir.clone(), seed, file, outputs: Vec::new() };
    let name = cli.command.name();
    let config = match &cli.command {
        Command::GenSynth(a) => gen_synth(&mut ctx, a)?,
        Command::GenToy(a) => gen_toy(&mut ctx, a)?,
        Command::TrainToy(a) => train_toy_cmd(&mut ctx, a)?,
        Command::TrainProbe(a) => train_probe_cmd(&mut ctx, a)?,
        Command::Eval(a) => eval_cmd(&mut ctx, a)?,
        Command::Stats(a) => stats_cmd(&mut ctx, a)?,
        Command::SelectSeed(a) => select_seed_cmd(&mut ctx, a)?,
        Command::Gate(a) => gate_cmd(&mut ctx, a)?,
        Command::MinePairs(a) => mine_pairs_cmd(&mut ctx, a)?,
        Command::Cost(a) => cost_cmd(&mut ctx, a)?,
        Command::ExportHeatmaps(a) => export_heatmaps(&mut ctx, a)?,
    };
    let record = RunRecord {
        command: name,
        seed,
        config_sha256: config_hash(&config),
        config: &config,
        versions: json!({
            "diffprobe": env!("CARGO_PKG_VERSION"),
            "diffprobe-core": diffprobe_core::VERSION,
            "stack-format": diffprobe_core::format::STACK_VERSION,
            "manifest-format": crate::io::MANIFEST_VERSION,
        }),
        outputs: &ctx.outputs,
    };
    write_json(&ctx.out_dir.join("run.json"), &record)
}

fn gen_synth(ctx: &mut Ctx, flags: &GenSynthArgs) -> CliResult<Value> {
    let a = ctx.settings("gen-synth", flags)?;
    let name = a.name.clone().unwrap_or_else(|| "synth".into());
    let n = a.n.unwrap_or(500);
    let sigma_q = a.sigma_q.unwrap_or(0.05);
    let jitter = a.jitter.unwrap_or(0.1);
    let test_fraction = fraction(a.test_fraction.unwrap_or(0.2), "test-fraction")?;
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_blocks: a.n_blocks.unwrap_or(defaults.n_blocks),
        map_size: a.map_size.unwrap_or(defaults.map_size),
        capture_step: a.capture_step.unwrap_or(defaults.capture_step),
        total_steps: a.total_steps.unwrap_or(defaults.total_steps),
        ..defaults
    };
    if n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut ds = Dataset::new(ctx.out_dir.join("data").join(&name));
    for i in 0..n {
        let (record, _) = random_synth_record(ctx.seed, i as u64, sigma_q, jitter, &cfg)?;
        ds.add(&record, if i < n - n_test { Split::Train } else { Split::Test })?;
    }
    ds.save()?;
    ctx.output(&format!("data/{name}/manifest.jsonl"));
    println!("records={n} train={} test={n_test} dataset={}", n - n_test, ds.root.display());
    Ok(json!({ "gen-synth": a, "synth": { "n-blocks": cfg.n_blocks, "token-slots": cfg.token_slots,
        "map-size": cfg.map_size, "blob-sigma": cfg.blob_sigma, "capture-step": cfg.capture_step,
        "total-steps": cfg.total_steps } }))
}

fn load_toy(path: &Path) -> CliResult<ToyModel> {
    let (bytes, cfg) = load_checkpoint::<ToyDiffusionConfig>(path)?;
    Ok(decode_toy(&bytes, &cfg)?)
}

fn load_probe(path: &Path) -> CliResult<ProbeParams> {
    let (bytes, cfg) = load_checkpoint::<ProbeConfig>(path)?;
    Ok(decode_probe(&bytes, &cfg)?)
}

fn gen_toy(ctx: &mut Ctx, flags: &GenToyArgs) -> CliResult<Value> {
    let a = ctx.settings("gen-toy", flags)?;
    let model = load_toy(&req(&a.model, "model")?)?;
    let name = a.name.clone().unwrap_or_else(|| "toy".into());
    let prompts = a.prompts.unwrap_or(50);
    let per_prompt = a.seeds_per_prompt.unwrap_or(4);
    let steps = a.steps.clone().unwrap_or_else(|| vec![1, 5, 10]);
    let total = a.total_steps.unwrap_or(model.config().total_steps);
    let test_fraction = fraction(a.test_fraction.unwrap_or(0.2), "test-fraction")?;
    if prompts == 0 || per_prompt == 0 {
        return Err(CliError::usage("--prompts and --seeds-per-prompt must be positive"));
    }
    let n_test = (prompts as f64 * test_fraction).round() as usize;
    let canvas = model.config().canvas;
    let mut ds = Dataset::new(ctx.out_dir.join("data").join(&name));
    for i in 0..prompts {
        let prompt_seed = derive_seed(ctx.seed, i as u64);
        let scene = random_scene(&mut Rng::new(prompt_seed), canvas, canvas, MAX_OBJECTS);
        let split = if i < prompts - n_test { Split::Train } else { Split::Test };
        for k in 0..per_prompt {
            let record = toy_sample(&model, &scene, derive_seed(prompt_seed, k + 1), total, &steps)?;
            ds.add(&record, split)?;
        }
    }
    ds.save()?;
    ctx.output(&format!("data/{name}/manifest.jsonl"));
    println!("prompts={prompts} records={} test-prompts={n_test} dataset={}", ds.entries.len(), ds.root.display());
    Ok(json!({ "gen-toy": a, "toy": model.config() }))
}

fn train_toy_cmd(ctx: &mut Ctx, flags: &TrainToyArgs) -> CliResult<Value> {
    let a = ctx.settings("train-toy", flags)?;
    let base = ToyDiffusionConfig { seed: ctx.seed, ..ToyDiffusionConfig::default() };
    let config: ToyDiffusionConfig = layered(&base, ctx.file.section("toy"), json!({ "train-iterations": a.iterations }))?;
    let n_scenes = a.scenes.unwrap_or(2000);
    if n_scenes == 0 {
        return Err(CliError::usage("--scenes must be positive"));
    }
    let mut rng = Rng::new(derive_seed(ctx.seed, 0x70e));
    let scenes: Vec<SceneSpec> =
        (0..n_scenes).map(|_| random_scene(&mut rng, config.canvas, config.canvas, MAX_OBJECTS)).collect();
    let (model, report) = toy_train(&config, &scenes)?;
    let output = a.output.clone().unwrap_or_else(|| "toy.atpw".into());
    let path = ctx.output(&output);
    save_checkpoint(&path, &encode_toy(&model)?, &config)?;
    let losses = ctx.output("toy_losses.json");
    write_json(&losses, &report.losses)?;
    if let Some((first, last)) = report.loss_trend(100) {
        println!("iterations={} loss-first={first:.6} loss-last={last:.6} checkpoint={}", report.losses.len(), path.display());
    }
    Ok(json!({ "train-toy": a, "toy": config }))
}

/// Labeled stacks at `step` with their dataset's primary metric.
fn labeled_stacks(ds: &Dataset, split: Option<&str>, step: u32) -> CliResult<(Vec<AttentionStack>, Vec<f64>, String)> {
    let entries: Vec<_> = ds.entries_in(split).collect();
    let metric = entries
        .first()
        .and_then(|e| e.primary_metric())
        .ok_or_else(|| CliError::input(format!("dataset {} has no labeled records in the requested split", ds.root.display())))?
        .to_string();
    let mut stacks = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for e in entries {
        let q = e
            .label(&metric)
            .ok_or_else(|| CliError::runtime(format!("record ({}, {}) lacks a {metric} label", e.prompt_id, e.seed)))?;
        stacks.push(ds.stack(e, step)?);
        labels.push(q);
    }
    Ok((stacks, labels, metric))
}

fn train_probe_cmd(ctx: &mut Ctx, flags: &TrainProbeArgs) -> CliResult<Value> {
    let a = ctx.settings("train-probe", flags)?;
    let ds = Dataset::open(&req(&a.dataset, "dataset")?)?;
    let step = a.step.unwrap_or(5);
    let split = a.split.clone().unwrap_or_else(|| "train".into());
    let (stacks, labels, metric) = labeled_stacks(&ds, Some(&split), step)?;
    let shape = stacks[0].shape();
    let base = ProbeConfig { seed: ctx.seed, ..ProbeConfig::for_shape(shape) };
    let config: ProbeConfig = layered(
        &base,
        ctx.file.section("probe"),
        json!({ "epochs": a.epochs, "learning-rate": a.learning_rate, "batch-size": a.batch_size }),
    )?;
    if config.input_shape() != shape {
        return Err(CliError::usage(format!("probe input {} does not match dataset stacks {shape}", config.input_shape())));
    }
    let quality: Vec<_> = labels
        .iter()
        .map(|&q| diffprobe_core::data::QualityLabel::new(metric.clone(), q, diffprobe_core::data::Provenance::External))
        .collect::<Result<_, _>>()?;
    let samples: Vec<_> = stacks.iter().zip(&quality).collect();
    let (probe, history) = train_probe(&samples, &config)?;
    let output = a.output.clone().unwrap_or_else(|| "probe.atpw".into());
    let path = ctx.output(&output);
    save_checkpoint(&path, &encode_probe(&probe)?, &config)?;
    let train_mse = probe_mse(&probe, &samples)?;
    let hist = ctx.output("train_history.json");
    write_json(&hist, &json!({ "epoch_mse": history.epoch_mse, "pool_size": history.pool_size, "train_mse": train_mse, "metric": metric }))?;
    println!("records={} epochs={} train-mse={train_mse:.6} checkpoint={}", samples.len(), config.epochs, path.display());
    Ok(json!({ "train-probe": a, "probe": config }))
}

fn report_line(name: &str, r: &EvalReport) -> String {
    format!(
        "{name} srcc={:.4} ktc={:.4} pcc={:.4} auc_roc={:.4} n={} threshold={:.6} metric={}",
        r.srcc, r.ktc, r.pcc, r.auc_roc, r.n, r.binarization_threshold, r.metric_name
    )
}

fn eval_cmd(ctx: &mut Ctx, flags: &EvalArgs) -> CliResult<Value> {
    let a = ctx.settings("eval", flags)?;
    let ds = Dataset::open(&req(&a.dataset, "dataset")?)?;
    let step = a.step.unwrap_or(5);
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let with_baseline = a.baseline.unwrap_or(false);
    if a.checkpoint.is_none() && !with_baseline {
        return Err(CliError::usage("need --checkpoint, --baseline true, or both"));
    }
    let (stacks, labels, metric) = labeled_stacks(&ds, Some(&split), step)?;
    let score = |p: &dyn Predictor| evaluate_probe(&|s: &AttentionStack| p.predict(s), stacks.iter().zip(labels.iter().copied()), &metric);
    let probe_report = match &a.checkpoint {
        Some(path) => {
            let probe = load_probe(path)?;
            Some(score(&probe)?)
        }
        None => None,
    };
    let baseline_report = if with_baseline { Some(score(&DispersionBaseline)?) } else { None };
    for (name, r) in [("probe", &probe_report), ("baseline", &baseline_report)] {
        if let Some(r) = r {
            println!("{}", report_line(name, r));
        }
    }
    let path = ctx.output("eval.json");
    write_json(&path, &json!({ "step": step, "split": split, "probe": probe_report, "baseline": baseline_report }))?;
    Ok(json!({ "eval": a }))
}

fn stats_cmd(ctx: &mut Ctx, flags: &StatsArgs) -> CliResult<Value> {
    let a = ctx.settings("stats", flags)?;
    let mut stack = read_bare_stack(&req(&a.stack, "stack")?)?;
    if !stack.is_normalized() {
        stack = stack.normalize()?;
    }
    let threshold = a.threshold.unwrap_or(DEFAULT_FRAGMENT_THRESHOLD);
    let stats = stack_stats(&stack, threshold)?;
    let dispersion = dispersion_score(&stack)?;
    for s in &stats {
        println!(
            "block={} token={} entropy={:.6} normalized_entropy={:.6} peak_mass_1={:.6} peak_mass_5pct={:.6} fragments={}",
            s.block, s.token, s.entropy, s.normalized_entropy, s.peak_mass_1, s.peak_mass_5pct, s.fragments
        );
    }
    println!("dispersion={dispersion:.6}");
    let path = ctx.output("stats.json");
    write_json(&path, &json!({ "dispersion": dispersion, "maps": stats }))?;
    Ok(json!({ "stats": a }))
}

fn cost_model(ctx: &Ctx) -> CliResult<CostModel> {
    let model: CostModel = layered(&CostModel::reference(), ctx.file.section("cost-model"), Value::Null)?;
    model.validate()?;
    Ok(model)
}

fn select_seed_cmd(ctx: &mut Ctx, flags: &SelectSeedArgs) -> CliResult<Value> {
    let a = ctx.settings("select-seed", flags)?;
    let model = load_toy(&req(&a.model, "model")?)?;
    let probe = load_probe(&req(&a.checkpoint, "checkpoint")?)?;
    let prompt = SceneSpec::parse(&req(&a.prompt, "prompt")?).map_err(|e| CliError::usage(e.to_string()))?;
    let seeds = a.seeds.clone().unwrap_or_else(|| (0..a.n_seeds.unwrap_or(10)).collect());
    let t0 = a.t0.unwrap_or(5);
    let cost = cost_model(ctx)?;
    let generator = ToyGenerator { model: &model, total_steps: model.config().total_steps };
    let result = select_seed(&prompt, &seeds, &generator, &probe, t0, &cost)?;
    let naive = cost_naive(seeds.len() as u64, &cost)?;
    let ratio = speedup(&naive, &result.ledger)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "chosen={} predicted={:.6} realized={:.6} candidates={} speedup={ratio:.3}",
        result.chosen,
        result.chosen_prediction(),
        result.realized.value,
        result.candidates.len()
    );
    let image = ctx.output("selected.pgm");
    write_bytes(&image, &image_pgm(&result.image))?;
    let path = ctx.output("selection.json");
    write_json(
        &path,
        &json!({
            "prompt_id": result.prompt_id,
            "prompt": prompt.text(),
            "t0": t0,
            "candidates": result.candidates.iter().map(|(s, q)| json!({ "seed": s, "predicted": q })).collect::<Vec<_>>(),
            "chosen": result.chosen,
            "realized": { "metric": result.realized.metric_name, "value": result.realized.value },
            "warnings": result.warnings,
            "ledger": result.ledger,
            "naive_ledger": naive,
            "speedup": ratio,
        }),
    )?;
    Ok(json!({ "select-seed": a, "cost": cost }))
}

fn gate_cmd(ctx: &mut Ctx, flags: &GateArgs) -> CliResult<Value> {
    let a = ctx.settings("gate", flags)?;
    let model = load_toy(&req(&a.model, "model")?)?;
    let probe = load_probe(&req(&a.checkpoint, "checkpoint")?)?;
    let prompt = SceneSpec::parse(&req(&a.prompt, "prompt")?).map_err(|e| CliError::usage(e.to_string()))?;
    let t0 = a.t0.unwrap_or(5);
    let tau = match (a.tau, &a.dataset) {
        (Some(t), _) => t,
        (None, Some(d)) => {
            let ds = Dataset::open(d)?;
            let (stacks, _, _) = labeled_stacks(&ds, Some("train"), t0)?;
            let preds = stacks.iter().map(|s| probe.predict(s)).collect::<Result<Vec<_>, _>>()?;
            Thresholds::from_predictions(&preds)?.tau
        }
        (None, None) => return Err(CliError::usage("need --tau or a --dataset to derive it from")),
    };
    let generator = ToyGenerator { model: &model, total_steps: model.config().total_steps };
    let rewriter = RelaxedPlacement { seed: ctx.seed, ..RelaxedPlacement::default() };
    let d = gate_prompt(&prompt, &generator, &probe, tau, &rewriter, a.gate_seed.unwrap_or(0), t0)?;
    let action = match d.action {
        GateAction::Keep => "keep",
        GateAction::Rewrite => "rewrite",
    };
    if let Some(e) = &d.error {
        eprintln!("warning: {e}");
    }
    println!("action={action} predicted={:.6} tau={tau:.6}", d.predicted);
    if let Some((p, q)) = &d.rewritten {
        println!("rewritten={:?} rewritten_predicted={q:.6}", p.text());
    }
    let path = ctx.output("gate.json");
    write_json(
        &path,
        &json!({
            "prompt": prompt.text(),
            "tau": tau,
            "seed": d.seed,
            "predicted": d.predicted,
            "action": action,
            "rewritten": d.rewritten.as_ref().map(|(p, _)| p.text()),
            "rewritten_predicted": d.rewritten.as_ref().map(|(_, q)| *q),
            "error": d.error,
        }),
    )?;
    Ok(json!({ "gate": a, "tau": tau }))
}

fn mine_pairs_cmd(ctx: &mut Ctx, flags: &MinePairsArgs) -> CliResult<Value> {
    let a = ctx.settings("mine-pairs", flags)?;
    let ds = Dataset::open(&req(&a.dataset, "dataset")?)?;
    let probe = load_probe(&req(&a.checkpoint, "checkpoint")?)?;
    let step = a.step.unwrap_or(5);
    let entries: Vec<_> = ds.entries_in(a.split.as_deref()).collect();
    let (stacks, labels, metric) = labeled_stacks(&ds, a.split.as_deref(), step)?;
    let preds = stacks.iter().map(|s| probe.predict(s)).collect::<Result<Vec<_>, _>>()?;
    let defaults = Thresholds::from_predictions(&preds)?;
    let (theta_pos, theta_neg) = (a.theta_pos.unwrap_or(defaults.theta_pos), a.theta_neg.unwrap_or(defaults.theta_neg));
    let scored: Vec<_> =
        entries.iter().zip(&preds).map(|(e, &q)| ScoredTrajectory::new(e.prompt_id.clone(), e.seed, q)).collect();
    let mined = mine_pairs(&scored, theta_pos, theta_neg)?;
    let truth: Vec<_> =
        entries.iter().zip(&labels).map(|(e, &q)| ScoredTrajectory::new(e.prompt_id.clone(), e.seed, q)).collect();
    let kept: Vec<_> = mined.set.positive.iter().chain(&mined.set.negative).map(|&i| truth[i].clone()).collect();
    let true_thresholds = Thresholds::from_predictions(&labels)?;
    let report = if kept.is_empty() {
        None
    } else {
        Some(effective_sample_report(&kept, &truth, true_thresholds.theta_pos, true_thresholds.theta_neg)?)
    };

    let mut lines = Vec::new();
    for p in &mined.pairs {
        serde_json::to_writer(
            &mut lines,
            &json!({ "prompt_id": p.prompt_id, "seed_pos": p.seed_pos, "seed_neg": p.seed_neg, "q_pos": p.score_pos, "q_neg": p.score_neg }),
        )?;
        lines.push(b'\n');
    }
    let pairs_path = ctx.output("pairs.jsonl");
    write_bytes(&pairs_path, &lines)?;
    if let Some(d) = &mined.diagnostic {
        eprintln!("warning: {d}");
    }
    println!(
        "pairs={} positive={} negative={} theta_pos={theta_pos:.6} theta_neg={theta_neg:.6}",
        mined.pairs.len(),
        mined.set.positive.len(),
        mined.set.negative.len()
    );
    let summary = |b: &diffprobe_core::workflows::BatchSummary| {
        json!({ "n": b.n, "variance": b.variance, "frac_high": b.frac_high, "frac_low": b.frac_low,
                "usable": b.usable, "usable_fraction": b.usable_fraction })
    };
    let path = ctx.output("mine_report.json");
    write_json(
        &path,
        &json!({
            "step": step,
            "metric": metric,
            "theta_pos": theta_pos,
            "theta_neg": theta_neg,
            "positive": mined.set.positive.len(),
            "negative": mined.set.negative.len(),
            "pairs": mined.pairs.len(),
            "diagnostic": mined.diagnostic,
            "effective_samples": report.as_ref().map(|r| json!({
                "true_theta_pos": true_thresholds.theta_pos,
                "true_theta_neg": true_thresholds.theta_neg,
                "filtered": summary(&r.filtered),
                "unfiltered": summary(&r.unfiltered),
                "usable_ratio": r.usable_ratio,
            })),
        }),
    )?;
    Ok(json!({ "mine-pairs": a }))
}

fn cost_cmd(ctx: &mut Ctx, flags: &CostArgs) -> CliResult<Value> {
    let a = ctx.settings("cost", flags)?;
    let model = cost_model(ctx)?;
    let n = a.candidates.unwrap_or(10);
    let t0 = a.t0.unwrap_or(5);
    let naive = cost_naive(n, &model)?;
    let guided = if a.rewrites.unwrap_or(false) { cost_guided_rewrites(n, t0, &model)? } else { cost_guided(n, t0, &model)? };
    let ratio = speedup(&naive, &guided)?;
    println!("{:<12} {:<20} {:>6} {:>14} {:>12}", "workflow", "item", "count", "TFLOPs", "latency_s");
    for ledger in [&naive, &guided] {
        for e in &ledger.entries {
            println!("{:<12} {:<20} {:>6} {:>14.2} {:>12.3}", ledger.workflow, e.label, e.count, e.flops(), e.latency());
        }
        println!("{:<12} {:<20} {:>6} {:>14.2} {:>12.3}", ledger.workflow, "total", "", ledger.total_flops(), ledger.total_latency());
    }
    println!("speedup={ratio:.4}");
    let table = if a.table.unwrap_or(false) {
        let cells = reference_table(&model)?;
        println!("{:<36} {:<8} {:>10} {:>10} {:>8}  note", "row", "column", "published", "modeled", "rel_err");
        for c in &cells {
            println!(
                "{:<36} {:<8} {:>10.2} {:>10.2} {:>8.4}  {}",
                c.row,
                c.column,
                c.published,
                c.modeled,
                c.relative_error(),
                c.inconsistent.unwrap_or("")
            );
        }
        Some(cells)
    } else {
        None
    };
    let path = ctx.output("cost.json");
    write_json(&path, &json!({ "model": model, "naive": naive, "guided": guided, "speedup": ratio, "table": table }))?;
    Ok(json!({ "cost": a, "model": model }))
}

fn export_heatmaps(ctx: &mut Ctx, flags: &ExportHeatmapsArgs) -> CliResult<Value> {
    let a = ctx.settings("export-heatmaps", flags)?;
    let path = req(&a.stack, "stack")?;
    let token = req(&a.token, "token")?;
    let stack = read_bare_stack(&path)?;
    let shape = stack.shape();
    if token >= shape.n_tokens {
        return Err(CliError::usage(format!("--token {token} out of range for {} slots", shape.n_tokens)));
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("stack").to_string();
    for b in 0..shape.n_blocks {
        let out = ctx.output(&format!("heatmaps/{stem}_b{b}_t{token}.pgm"));
        write_bytes(&out, &heatmap_pgm(stack.slice(b, token), shape.height, shape.width))?;
    }
    println!("blocks={} token={token} dir={}", shape.n_blocks, ctx.out_dir.join("heatmaps").display());
    Ok(json!({ "export-heatmaps": a }))
}
