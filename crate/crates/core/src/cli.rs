//! The `loramerge` command line: `train-toy`, `diagnose`, `merge`, `sweep`,
//! and `eval`. Every command writes its artifacts into a fresh run directory
//! together with a `manifest.json` (resolved config, seed, SHA-256 of inputs
//! and outputs).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::adapters::{load_collection, save_collection, AdapterCollection, LayerAdapters};
use crate::diagnostics::{coverage_report, xi_protocol, BasisKind};
use crate::error::{Error, Result};
use crate::harness::{
    accuracy_covariance, evaluate, evaluate_joint, generate_suite, load_trained, parse_fixed, random_completions,
    run_method, save_trained, split_report, sweep_preferences, train_suite, two_task_grid, unseen_split_eval, FinetuneConfig,
    MergeMethod, SuiteConfig, SweepPoint, TrainedSuite,
};
use crate::linalg::Matrix;
use crate::mergers::{LegoReweight, MergeConfig};
use crate::report::{
    sha256_file, write_coverage_csv, write_eval_csv, write_json, write_layer_diagnostics_csv, write_sweep_csv,
    write_trace_csv, DiagnosticsReport, MergeReport,
};
use crate::tara::{OptimConfig, Preference, DEFAULT_ALPHA};

/// File-level configuration. Every section is optional; flags override it.
/// `seed`, when set, replaces the suite, fine-tuning, and optimizer seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub suite: SuiteConfig,
    pub finetune: FinetuneConfig,
    pub method: Option<String>,
    pub merge: Option<MergeConfig>,
    pub optim: OptimConfig,
    pub alpha: f64,
    pub preference: Option<Vec<f64>>,
    pub preferences: Option<Vec<Vec<f64>>>,
    pub tasks: Option<Vec<usize>>,
    pub seen: Option<Vec<usize>>,
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            suite: SuiteConfig::default(),
            finetune: FinetuneConfig::default(),
            method: None,
            merge: None,
            optim: OptimConfig::default(),
            alpha: DEFAULT_ALPHA,
            preference: None,
            preferences: None,
            tasks: None,
            seen: None,
            ks: vec![1, 3, 5],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.suite.seed = s;
            self.finetune.seed = s;
            self.optim.seed = s;
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "loramerge", version, about = "LoRA adapter merging with coverage and anisotropy diagnostics")]
pub struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Write artifacts here instead of a fresh timestamped directory.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Parent of the timestamped run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out_root: PathBuf,
    /// Master seed for the suite, fine-tuning, and optimization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic suite and fine-tune one LoRA adapter per task.
    TrainToy(TrainArgs),
    /// Coverage stacks, Jacobian spectra (κ), and misalignment ξ.
    Diagnose(DiagnoseArgs),
    /// Merge the suite's adapters and evaluate the result.
    Merge(MergeArgs),
    /// Merge once per preference vector and record the trade-off.
    Sweep(SweepArgs),
    /// Evaluate previously merged weights.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Number of synthetic tasks.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// LoRA rank of every adapter.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Fine-tuning steps per task.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Classes per task.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Number of adapted linear layers.
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SuiteInput {
    /// LMK1 container written by `train-toy`.
    #[arg(long)]
    pub container: PathBuf,
    /// JSON sidecar; defaults to the container path with a `.json` extension.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

impl SuiteInput {
    fn sidecar_path(&self) -> PathBuf {
        self.sidecar.clone().unwrap_or_else(|| self.container.with_extension("json"))
    }
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: SuiteInput,
    /// Effective-rank coverage stacks per layer.
    #[arg(long)]
    pub stacks: bool,
    /// ξ(uniform, one-hot) per layer at the λ = 0.3 task-arithmetic merge.
    #[arg(long)]
    pub xi: bool,
    /// Jacobian spectra and κ under the raw and shared-SVD bases.
    #[arg(long)]
    pub kappa: bool,
}

fn parse_method(s: &str) -> std::result::Result<MergeMethod, String> {
    s.parse::<MergeMethod>().map_err(|e| e.to_string())
}

#[derive(Args, Debug, Clone)]
pub struct MethodArgs {
    /// ta, ties, dare_ties, linear, svd, knots_ties, knots_dare_ties,
    /// lora_lego, adamerging, tara-a, tara-b.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<MergeMethod>,
    /// Update scale (TA/Linear/SVD default 0.3, TIES family 1.0).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fraction of each task's entries trimmed by magnitude (TIES family).
    #[arg(long)]
    pub trim: Option<f64>,
    /// DARE drop probability.
    #[arg(long)]
    pub drop_prob: Option<f64>,
    /// LoRA-LEGO cluster count (default: largest adapter rank).
    #[arg(long)]
    pub k: Option<usize>,
    /// LoRA-LEGO centroid reweighting.
    #[arg(long, value_parser = ["parameter", "output"])]
    pub reweight: Option<String>,
    /// Rank kept by the SVD merge (default: largest adapter rank).
    #[arg(long)]
    pub target_rank: Option<usize>,
    /// Seed of the stochastic baselines (DARE, LoRA-LEGO).
    #[arg(long)]
    pub merge_seed: Option<u64>,
    /// Smoothing temperature of the Tchebycheff objective.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Optimizer iterations (TARA, AdaMerging).
    #[arg(long)]
    pub iters: Option<usize>,
    /// AdamW learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adaptation samples per task per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Merge only these suite tasks (comma-separated indices).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[command(flatten)]
    pub input: SuiteInput,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Preference vector, comma-separated (defaults to uniform).
    #[arg(long, value_delimiter = ',')]
    pub preference: Option<Vec<f64>>,
    /// Merge only these tasks and evaluate all, reporting seen/unseen averages.
    #[arg(long, value_delimiter = ',')]
    pub seen: Option<Vec<usize>>,
    /// Hits@k cut-offs for the joint-label evaluation.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: SuiteInput,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Evenly spaced two-task preferences.
    #[arg(long)]
    pub points: Option<usize>,
    /// JSON file holding a list of preference vectors.
    #[arg(long)]
    pub preferences: Option<PathBuf>,
    /// Number of random simplex completions around the fixed weights.
    #[arg(long)]
    pub random: Option<usize>,
    /// Pinned weights for --random, e.g. "0:0.125,1:0.125".
    #[arg(long)]
    pub fixed: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: SuiteInput,
    /// Merged weights written by `merge`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Evaluate only these suite tasks (comma-separated indices).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<usize>>,
    /// Hits@k cut-offs for the joint-label evaluation.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

/// Exit code for a library error: validation problems are usage errors.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invalid(_) | Error::OffSimplex(_) | Error::InvalidDistribution(_) | Error::Shape(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli, &argv) {
        Ok(dir) => {
            println!("artifacts: {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Run {
    dir: PathBuf,
    argv: Vec<String>,
    command: &'static str,
    seed: u64,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<String>,
}

impl Run {
    fn create(cli: &Cli, argv: &[String], command: &'static str, seed: u64) -> Result<Self> {
        let dir = match &cli.run_dir {
            Some(d) => d.clone(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f");
                cli.out_root.join(format!("{stamp}-seed{seed}"))
            }
        };
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            argv: argv.to_vec(),
            command,
            seed,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        self.inputs.insert(p.display().to_string(), sha256_file(p)?);
        Ok(())
    }

    fn finish(self, config: &RunConfig) -> Result<PathBuf> {
        let mut artifacts = BTreeMap::new();
        for a in &self.artifacts {
            artifacts.insert(a.clone(), sha256_file(self.dir.join(a))?);
        }
        let manifest = serde_json::json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "created": chrono::Local::now().to_rfc3339(),
            "argv": self.argv,
            "seed": self.seed,
            "config": config,
            "inputs": self.inputs,
            "artifacts": artifacts,
        });
        write_json(self.dir.join("manifest.json"), &manifest)?;
        Ok(self.dir)
    }
}

#[derive(Clone, Copy)]
struct Ctx<'a> {
    cli: &'a Cli,
    argv: &'a [String],
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.apply_seed();
    Ok(cfg)
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<PathBuf> {
    let cfg = base_config(cli)?;
    let ctx = Ctx { cli, argv };
    match &cli.command {
        Command::TrainToy(a) => cmd_train_toy(ctx, cfg, a),
        Command::Diagnose(a) => cmd_diagnose(ctx, cfg, a),
        Command::Merge(a) => cmd_merge(ctx, cfg, a),
        Command::Sweep(a) => cmd_sweep(ctx, cfg, a),
        Command::Eval(a) => cmd_eval(ctx, cfg, a),
    }
}

fn cmd_train_toy(ctx: Ctx, mut cfg: RunConfig, a: &TrainArgs) -> Result<PathBuf> {
    if let Some(n) = a.tasks {
        cfg.suite.n_tasks = n;
    }
    if let Some(c) = a.classes {
        cfg.suite.classes = c;
    }
    if let Some(l) = a.layers {
        cfg.suite.n_layers = l;
    }
    if let Some(r) = a.rank {
        cfg.finetune.rank = r;
    }
    if let Some(s) = a.steps {
        cfg.finetune.steps = s;
    }
    cfg.suite.validate()?;
    cfg.finetune.validate(&cfg.suite)?;

    let mut run = Run::create(ctx.cli, ctx.argv, "train-toy", cfg.suite.seed)?;
    let suite = generate_suite(&cfg.suite)?;
    let trained = train_suite(suite, &cfg.finetune)?;
    let container = run.path("suite.lmk");
    let sidecar = run.path("suite.json");
    save_trained(&trained, &cfg.finetune, &container, &sidecar)?;
    let refs = serde_json::json!({
        "tasks": trained.collection.task_ids,
        "references": trained.references,
        "base_accuracy": trained.base_accuracy,
    });
    write_json(run.path("references.json"), &refs)?;

    println!("{:<12} {:>10} {:>10}", "task", "finetuned", "base");
    for ((t, r), b) in trained
        .collection
        .task_ids
        .iter()
        .zip(&trained.references)
        .zip(&trained.base_accuracy)
    {
        println!("{t:<12} {r:>10.2} {b:>10.2}");
    }
    run.finish(&cfg)
}

fn load_input(run: &mut Run, input: &SuiteInput, cfg: &mut RunConfig) -> Result<TrainedSuite> {
    let sidecar = input.sidecar_path();
    let (trained, finetune) = load_trained(&input.container, &sidecar)?;
    run.input(&input.container)?;
    run.input(&sidecar)?;
    cfg.suite = trained.suite.config.clone();
    cfg.finetune = finetune;
    Ok(trained)
}

fn cmd_diagnose(ctx: Ctx, mut cfg: RunConfig, a: &DiagnoseArgs) -> Result<PathBuf> {
    let all = !(a.stacks || a.xi || a.kappa);
    let mut run = Run::create(ctx.cli, ctx.argv, "diagnose", cfg.optim.seed)?;
    let trained = load_input(&mut run, &a.input, &mut cfg)?;
    let coll = &trained.collection;
    let tasks: Vec<usize> = (0..coll.num_tasks()).collect();
    let mut report = DiagnosticsReport {
        coverage: None,
        layers: Vec::new(),
    };
    if all || a.stacks {
        let cov = coverage_report(coll)?;
        write_coverage_csv(run.path("coverage.csv"), &cov)?;
        for l in &cov.layers {
            println!(
                "{}: per-task sum {:.3}, aware {}, agnostic {}",
                l.layer_id,
                l.per_task_sum,
                fmt_opt(l.aware_erank),
                fmt_opt(l.agnostic_erank)
            );
        }
        report.coverage = Some(cov);
    }
    if all || a.xi || a.kappa {
        for kind in [BasisKind::Raw, BasisKind::Shared] {
            for l in xi_protocol(coll, &trained.suite, &tasks, kind)? {
                println!("{} [{:?}]: kappa {:.4e}, xi {:?}", l.layer_id, kind, l.kappa, l.xi);
                report.layers.push(l);
            }
        }
        write_layer_diagnostics_csv(run.path("layers.csv"), &report.layers)?;
    }
    write_json(run.path("diagnostics.json"), &report)?;
    run.finish(&cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "absent".into())
}

/// Resolves the method from flags, then config; applies parameter flags.
fn resolve_method(cfg: &mut RunConfig, m: &MethodArgs, default: Option<MergeMethod>) -> Result<MergeMethod> {
    let mut method = match (&m.method, &cfg.method) {
        (Some(x), _) => x.clone(),
        (None, Some(s)) => s.parse()?,
        (None, None) => default.ok_or_else(|| Error::invalid("no merge method given (use --method)"))?,
    };
    if let MergeMethod::Baseline(base) = &mut method {
        if let Some(file_cfg) = &cfg.merge {
            if file_cfg.method != base.method {
                return Err(Error::invalid("config `merge.method` disagrees with the selected method"));
            }
            *base = file_cfg.clone();
        }
        if m.lambda.is_some() {
            base.lambda = m.lambda;
        }
        if m.trim.is_some() {
            base.trim_fraction = m.trim;
        }
        if m.drop_prob.is_some() {
            base.drop_prob = m.drop_prob;
        }
        if m.k.is_some() {
            base.k_clusters = m.k;
        }
        if let Some(r) = &m.reweight {
            base.lego_reweight = Some(if r == "parameter" {
                LegoReweight::Parameter
            } else {
                LegoReweight::Output
            });
        }
        if m.target_rank.is_some() {
            base.target_rank = m.target_rank;
        }
        if m.merge_seed.is_some() {
            base.rng_seed = m.merge_seed;
        }
        base.validate()?;
        cfg.merge = Some(base.clone());
    }
    if let Some(alpha) = m.alpha {
        cfg.alpha = alpha;
    }
    if let MergeMethod::Tara { alpha, .. } = &mut method {
        *alpha = cfg.alpha;
    }
    if let Some(i) = m.iters {
        cfg.optim.max_iters = i;
    }
    if let Some(lr) = m.lr {
        cfg.optim.optimizer.lr = lr;
    }
    if let Some(b) = m.batch_size {
        cfg.optim.batch_size = b;
    }
    if m.tasks.is_some() {
        cfg.tasks = m.tasks.clone();
    }
    cfg.optim.validate()?;
    cfg.method = Some(method.name());
    Ok(method)
}

fn task_list(cfg: &RunConfig, n: usize) -> Result<Vec<usize>> {
    let tasks = cfg.tasks.clone().unwrap_or_else(|| (0..n).collect());
    if tasks.is_empty() {
        return Err(Error::invalid("empty task list"));
    }
    if let Some(&t) = tasks.iter().find(|&&t| t >= n) {
        return Err(Error::invalid(format!("task index {t} out of range (suite has {n})")));
    }
    Ok(tasks)
}

fn quantized(weights: &[Matrix]) -> Vec<Matrix> {
    weights
        .iter()
        .map(|w| {
            let mut q = w.clone();
            q.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            q
        })
        .collect()
}

fn weights_container(layer_ids: &[String], weights: &[Matrix]) -> Result<AdapterCollection> {
    AdapterCollection::new(
        layer_ids.to_vec(),
        Vec::new(),
        weights
            .iter()
            .map(|w| LayerAdapters {
                base: w.clone(),
                adapters: Vec::new(),
            })
            .collect(),
    )
}

fn valid_ks(ks: &[usize], union: usize) -> Vec<usize> {
    ks.iter().copied().filter(|&k| k >= 1 && k <= union).collect()
}

fn cmd_merge(ctx: Ctx, mut cfg: RunConfig, a: &MergeArgs) -> Result<PathBuf> {
    let method = resolve_method(&mut cfg, &a.method, None)?;
    if a.preference.is_some() {
        cfg.preference = a.preference.clone();
    }
    if a.seen.is_some() {
        cfg.seen = a.seen.clone();
    }
    if let Some(ks) = &a.ks {
        cfg.ks = ks.clone();
    }
    let mut run = Run::create(ctx.cli, ctx.argv, "merge", cfg.optim.seed)?;
    let trained = load_input(&mut run, &a.input, &mut cfg)?;
    let n = trained.suite.num_tasks();

    let (out, rho, split, merged_tasks) = if let Some(seen) = cfg.seen.clone() {
        let (_, out) =
            unseen_split_eval(&trained.collection, &trained.suite, &trained.references, &seen, &method, &cfg.optim)?;
        (out, Preference::uniform(seen.len()), Some(seen.clone()), seen)
    } else {
        let tasks = task_list(&cfg, n)?;
        let rho = match &cfg.preference {
            Some(p) => Preference::new(p.clone())?,
            None => Preference::uniform(tasks.len()),
        };
        let sub = trained.collection.subset(&tasks)?;
        let out = run_method(&sub, &trained.suite, &tasks, &method, &rho, &cfg.optim)?;
        (out, rho, None, tasks)
    };
    let (weights, trace, resolved) = (out.weights, out.trace, out.resolved);
    if resolved.is_some() {
        cfg.merge = resolved.clone();
    }
    if cfg.seen.is_none() {
        cfg.tasks = Some(merged_tasks.clone());
        if method.uses_preference() {
            cfg.preference = Some(rho.as_slice().to_vec());
        }
    }
    let weights = quantized(&weights);
    let mut eval = match &split {
        Some(seen) => split_report(&weights, &trained.suite, &trained.references, seen)?,
        None => evaluate(&weights, &trained.suite, &trained.references, &merged_tasks)?,
    };
    let ks = valid_ks(&cfg.ks, trained.suite.union_size());
    if !ks.is_empty() {
        eval.hits = Some(evaluate_joint(&weights, &trained.suite, &ks)?);
    }
    save_collection(
        &weights_container(&trained.collection.layer_ids, &weights)?,
        run.path("merged.lmk"),
    )?;
    if let Some(tr) = &trace {
        let names: Vec<String> = merged_tasks.iter().map(|&t| trained.suite.tasks[t].name.clone()).collect();
        write_trace_csv(run.path("trace.csv"), tr, &names)?;
    }
    let report = MergeReport {
        method: method.name(),
        resolved,
        preference: method.uses_preference().then(|| rho.as_slice().to_vec()),
        final_objective: trace.as_ref().and_then(|t| t.last().map(|r| r.psi)),
        eval,
    };
    write_json(run.path("report.json"), &report)?;
    write_eval_csv(run.path("report.csv"), &report.eval)?;
    println!("{:<12} {:>10} {:>11}", "task", "accuracy", "normalized");
    for ((t, acc), norm) in report.eval.tasks.iter().zip(&report.eval.accuracy).zip(&report.eval.normalized) {
        println!("{t:<12} {acc:>10.2} {norm:>11.2}");
    }
    println!("{:<12} {:>10.2} {:>11.2}", "average", report.eval.avg_accuracy, report.eval.avg_normalized);
    info!("merged with {}", report.method);
    run.finish(&cfg)
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    method: String,
    tasks: Vec<usize>,
    points: &'a [SweepPoint],
    #[serde(skip_serializing_if = "Option::is_none")]
    focal_covariance: Option<f64>,
}

fn cmd_sweep(ctx: Ctx, mut cfg: RunConfig, a: &SweepArgs) -> Result<PathBuf> {
    let method = resolve_method(
        &mut cfg,
        &a.method,
        Some(MergeMethod::Tara {
            variant: crate::tara::Variant::B,
            alpha: DEFAULT_ALPHA,
        }),
    )?;
    let sources = [a.points.is_some(), a.preferences.is_some(), a.random.is_some()];
    if sources.iter().filter(|&&s| s).count() > 1 {
        return Err(Error::invalid("use only one of --points, --preferences, --random"));
    }
    if a.fixed.is_some() && a.random.is_none() {
        return Err(Error::invalid("--fixed requires --random"));
    }
    let mut run = Run::create(ctx.cli, ctx.argv, "sweep", cfg.optim.seed)?;
    if let Some(p) = &a.preferences {
        let text = fs::read_to_string(p)?;
        cfg.preferences =
            Some(serde_json::from_str(&text).map_err(|e| Error::invalid(format!("preference file: {e}")))?);
        run.input(p)?;
    }
    let trained = load_input(&mut run, &a.input, &mut cfg)?;
    let tasks = task_list(&cfg, trained.suite.num_tasks())?;

    let mut fixed = Vec::new();
    let prefs: Vec<Preference> = if let Some(k) = a.random {
        fixed = parse_fixed(a.fixed.as_deref().unwrap_or(""))?;
        random_completions(tasks.len(), &fixed, k, cfg.optim.seed)?
    } else if let Some(list) = &cfg.preferences {
        if list.is_empty() {
            return Err(Error::invalid("empty preference list"));
        }
        list.iter().map(|p| Preference::new(p.clone())).collect::<Result<_>>()?
    } else {
        if tasks.len() != 2 {
            return Err(Error::invalid("--points sweeps need exactly two tasks (use --tasks)"));
        }
        two_task_grid(a.points.unwrap_or(30))?
    };
    cfg.preferences = Some(prefs.iter().map(|p| p.as_slice().to_vec()).collect());

    let sub = trained.collection.subset(&tasks)?;
    let points = sweep_preferences(&sub, &trained.suite, &trained.references, &tasks, &prefs, &method, &cfg.optim)?;
    let focal_covariance = if fixed.len() == 2 {
        Some(accuracy_covariance(&points, fixed[0].0, fixed[1].0)?)
    } else {
        None
    };
    write_sweep_csv(run.path("sweep.csv"), &points)?;
    write_json(
        run.path("sweep.json"),
        &SweepSummary {
            method: method.name(),
            tasks: tasks.clone(),
            points: &points,
            focal_covariance,
        },
    )?;
    println!("{} preference points with {}", points.len(), method.name());
    if let Some(c) = focal_covariance {
        println!("covariance of focal-task accuracies: {c:.4}");
    }
    run.finish(&cfg)
}

fn cmd_eval(ctx: Ctx, mut cfg: RunConfig, a: &EvalArgs) -> Result<PathBuf> {
    if a.tasks.is_some() {
        cfg.tasks = a.tasks.clone();
    }
    if let Some(ks) = &a.ks {
        cfg.ks = ks.clone();
    }
    let mut run = Run::create(ctx.cli, ctx.argv, "eval", cfg.optim.seed)?;
    let trained = load_input(&mut run, &a.input, &mut cfg)?;
    let merged = load_collection(&a.weights)?;
    run.input(&a.weights)?;
    let weights = merged.base_weights();
    if weights.len() != trained.suite.base.len()
        || weights.iter().zip(&trained.suite.base).any(|(w, b)| w.shape() != b.shape())
    {
        return Err(Error::shape("merged weights do not fit the suite's layers"));
    }
    let tasks = task_list(&cfg, trained.suite.num_tasks())?;
    let mut report = evaluate(&weights, &trained.suite, &trained.references, &tasks)?;
    let ks = valid_ks(&cfg.ks, trained.suite.union_size());
    if !ks.is_empty() {
        report.hits = Some(evaluate_joint(&weights, &trained.suite, &ks)?);
    }
    write_json(run.path("eval.json"), &report)?;
    write_eval_csv(run.path("eval.csv"), &report)?;
    println!("average normalized accuracy {:.2}", report.avg_normalized);
    if let Some(h) = &report.hits {
        for x in h {
            println!("Hits@{} {:.2}", x.k, x.hits);
        }
    }
    run.finish(&cfg)
}
