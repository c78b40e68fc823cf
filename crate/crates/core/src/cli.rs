//! Command-line front end: `train`, `eval`, `gradcheck`, `bench`, `synth`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure (divergence, failed gradient check).
//!
//! Any long flag can also come from a `key = value` file given with
//! `--config`; flags on the command line win.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, BenchSpec};
use crate::data::{self, Dataset, SynthSpec};
use crate::graph::LabelGraph;
use crate::loss::LossConfig;
use crate::model::{ExtractorKind, ExtractorSpec, Mode, Model, ModelConfig};
use crate::oracle::{self, GradcheckOptions};
use crate::train::{self, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const SUBCOMMANDS: [&str; 5] = ["train", "eval", "gradcheck", "bench", "synth"];

#[derive(Debug, Parser)]
#[command(
    name = "bgl",
    version,
    about = "Structured softmax over bipartite-graph labels",
    args_override_self = true
)]
pub struct Cli {
    /// `key = value` file supplying defaults for any long flag
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write report.csv and model.bglm into --out
    Train(TrainArgs),
    /// Top-1 fine and coarse accuracy of a checkpoint on a dataset
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Time forward and backward passes against plain softmax
    Bench(BenchArgs),
    /// Generate a synthetic hierarchical dataset and its label graph
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "bgl1")]
    pub mode: Mode,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out dataset evaluated after training
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.97)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Strength of the hierarchical weight prior
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    /// Comma-separated weight per coarse type (default all 1)
    #[arg(long, value_delimiter = ',')]
    pub coarse_weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// identity, affine or hidden
    #[arg(long, default_value = "identity")]
    pub extractor: ExtractorKind,
    /// Output width of the feature extractor (defaults to the input width)
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Output width of the coarse extractor in bglm mode
    #[arg(long)]
    pub coarse_feature_dim: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Write 0 in the seconds column so reports are reproducible byte for byte
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, required_unless_present = "random", conflicts_with = "random")]
    pub graph: Option<PathBuf>,
    /// Random graph with K fine classes and M types of KJ classes
    #[arg(long, num_args = 3, value_names = ["K", "M", "KJ"])]
    pub random: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Corrupt the analytic gradients (negative control)
    #[arg(long)]
    pub sabotage: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1000")]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    pub m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub kj: Vec<usize>,
    #[arg(long, default_value_t = 31)]
    pub reps: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    /// Number of coarse types; 0 ignores --sizes, otherwise it must match it
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,8")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Training samples per fine class
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Held-out samples per fine class, written to test.txt
    #[arg(long, default_value_t = 0)]
    pub test_n: usize,
    #[arg(long, default_value_t = data::BENCHMARK_NOISE, allow_negative_numbers = true)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub coarse_scale: f64,
    #[arg(long, default_value_t = data::BENCHMARK_FINE_SCALE, allow_negative_numbers = true)]
    pub fine_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub random_parents: bool,
    /// Output directory for graph.txt, data.txt and test.txt
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    fn data(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            msg: msg.into(),
        }
    }

    fn numeric(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            msg: msg.into(),
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Messages go to stdout/stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            return e.code;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}

/// Splices `--key value` pairs from the `--config` file right after the
/// subcommand, so that later command-line occurrences override them.
fn merge_config(args: Vec<String>) -> Result<Vec<String>, CliError> {
    if args
        .iter()
        .any(|a| a == "-h" || a == "--help" || a == "help")
    {
        return Ok(args);
    }
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::data(format!("cannot read config file {path}: {e}")))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split_once('#').map_or(line, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::data(format!("{path}:{}: expected `key = value`", n + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match value {
            "true" => extra.push(format!("--{key}")),
            "false" => {}
            _ => {
                extra.push(format!("--{key}"));
                extra.extend(value.split_whitespace().map(str::to_string));
            }
        }
    }
    let pos = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map_or(args.len(), |p| p + 1);
    let mut merged = args[..pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[pos..]);
    Ok(merged)
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<LabelGraph, CliError> {
    LabelGraph::parse(&read_input(path)?)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    Dataset::parse(&read_input(path)?)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

fn print_eval(prefix: &str, ev: &train::Evaluation) {
    let mut line = format!("{prefix} fine_acc={:.4}", ev.fine_acc);
    for (j, a) in ev.coarse_acc.iter().enumerate() {
        line.push_str(&format!(" coarse_acc_{}={a:.4}", j + 1));
    }
    println!("{line}");
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    for p in [Some(&a.graph), Some(&a.data), a.test.as_ref()]
        .into_iter()
        .flatten()
    {
        if !p.exists() {
            return Err(CliError::data(format!(
                "input path {} does not exist",
                p.display()
            )));
        }
    }
    let graph = load_graph(&a.graph)?;
    let data = load_data(&a.data)?;
    let test = a.test.as_deref().map(load_data).transpose()?;

    let input = data.d;
    let out_dim = a.feature_dim.unwrap_or(input);
    let spec = |out: usize| match a.extractor {
        ExtractorKind::Identity => ExtractorSpec::identity(input),
        ExtractorKind::Affine => ExtractorSpec::affine(input, out),
        ExtractorKind::Hidden => ExtractorSpec::hidden(input, a.hidden_dim, out),
    };
    if a.extractor == ExtractorKind::Identity
        && (a.feature_dim.is_some_and(|d| d != input)
            || a.coarse_feature_dim.is_some_and(|d| d != input))
    {
        return Err(CliError::data(
            "identity extractor cannot change the feature width",
        ));
    }
    let mut config = ModelConfig::new(a.mode, spec(out_dim));
    if a.mode == Mode::BglM {
        config.coarse_extractor = Some(spec(a.coarse_feature_dim.unwrap_or(out_dim)));
    }
    config.loss = LossConfig {
        lambda: a.lambda,
        coarse_weights: a.coarse_weights.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let model = Model::new(config, &graph, &mut rng).map_err(|e| CliError::data(e.to_string()))?;

    create_dir(&a.out)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        lr_decay: a.lr_decay,
        weight_decay: a.weight_decay,
        seed: a.seed,
        eval_every: a.eval_every,
        checkpoint_path: Some(a.out.join("model.bglm")),
        workers: a.workers,
        record_timing: !a.no_timing,
    };
    let csv_path = a.out.join("report.csv");
    let (report, model) = match train::train(model, &graph, &data, &cfg) {
        Ok(r) => r,
        Err(TrainError::Diverged { epoch, report }) => {
            write_output(&csv_path, report.to_csv())?;
            return Err(CliError::numeric(format!(
                "training diverged in epoch {epoch}"
            )));
        }
        Err(e) => return Err(CliError::data(e.to_string())),
    };
    write_output(&csv_path, report.to_csv())?;
    if let Some(ev) = report.last_eval() {
        print_eval("train", ev);
    }
    if let Some(test) = &test {
        let ev =
            train::evaluate(&model, &graph, test).map_err(|e| CliError::data(e.to_string()))?;
        print_eval("test", &ev);
    }
    println!(
        "wrote {} and {}",
        csv_path.display(),
        a.out.join("model.bglm").display()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let graph = load_graph(&a.graph)?;
    let data = load_data(&a.data)?;
    let bytes = fs::read(&a.model)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", a.model.display())))?;
    let model = Model::read_checkpoint(&bytes[..])
        .map_err(|e| CliError::data(format!("{}: {e}", a.model.display())))?;
    let ev = train::evaluate(&model, &graph, &data).map_err(|e| CliError::data(e.to_string()))?;
    print_eval("eval", &ev);
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let graph = match (&a.graph, &a.random) {
        (Some(p), _) => load_graph(p)?,
        (None, Some(r)) => {
            let (k, m, kj) = (r[0], r[1], r[2]);
            if k == 0 || kj == 0 {
                return Err(CliError::data("--random needs positive K and KJ"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            oracle::random_graph(k, &vec![kj; m], &mut rng)
        }
        (None, None) => return Err(CliError::data("either --graph or --random is required")),
    };
    let opts = GradcheckOptions {
        instances: a.instances.max(1),
        seed: a.seed,
        step: a.step,
        sabotage: a.sabotage,
    };
    let r = oracle::gradcheck(&graph, &opts).map_err(|e| CliError::numeric(e.to_string()))?;
    println!("nll (direct path)  max relative error {:.3e}", r.nll_naive);
    println!("nll (fast path)    max relative error {:.3e}", r.nll_fast);
    println!("prior              max relative error {:.3e}", r.prior);
    println!("model (all modes)  max relative error {:.3e}", r.model);
    if r.max() < a.tolerance {
        println!("gradcheck passed (tolerance {:.1e})", a.tolerance);
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradcheck failed: max relative error {:.3e} >= {:.1e}",
            r.max(),
            a.tolerance
        )))
    }
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let spec = BenchSpec {
        ks: a.k.clone(),
        ms: a.m.clone(),
        kjs: a.kj.clone(),
        repetitions: a.reps,
        warmup: a.warmup,
        seed: a.seed,
    };
    let rows = bench::run(&spec).map_err(|e| CliError::data(e.to_string()))?;
    let csv = bench::to_csv(&rows);
    match &a.out {
        Some(p) => write_output(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    if let Some(m) = a.m {
        if m != 0 && m != a.sizes.len() {
            return Err(CliError::data(format!(
                "--m {m} disagrees with {} entries in --sizes",
                a.sizes.len()
            )));
        }
    }
    let spec = SynthSpec {
        k: a.k,
        coarse_sizes: if a.m == Some(0) {
            Vec::new()
        } else {
            a.sizes.clone()
        },
        d: a.d,
        samples_per_class: a.n,
        noise: a.sigma,
        coarse_scale: a.coarse_scale,
        fine_scale: a.fine_scale,
        seed: a.seed,
        random_parents: a.random_parents,
    };
    let out = data::generate_split(&spec, a.test_n).map_err(|e| CliError::data(e.to_string()))?;
    create_dir(&a.out)?;
    write_output(&a.out.join("graph.txt"), out.graph.to_text())?;
    write_output(&a.out.join("data.txt"), out.train.to_text())?;
    if a.test_n > 0 {
        write_output(&a.out.join("test.txt"), out.test.to_text())?;
    }
    println!(
        "wrote {} training samples ({} classes, {} coarse types) to {}",
        out.train.len(),
        spec.k,
        spec.coarse_sizes.len(),
        a.out.display()
    );
    Ok(())
}
