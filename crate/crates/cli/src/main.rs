//! `sgglab`: generate synthetic scenes, train and evaluate scene graph
//! models, run corruption benchmarks and compare reports.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 when an
//! input file (dataset, model, config, report) cannot be read or parsed,
//! 3 when `gradcheck` finds a failing check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sgg_core::eval::{
    bench_run, evaluate, gate_stats, improvement_table, BenchGrid, EvalOptions, MetricsReport,
};
use sgg_core::grad_suite::run_suite;
use sgg_core::lee::FusionMode;
use sgg_core::nrm::AttentionMode;
use sgg_core::pipeline::{load_model, save_model, train, Model, ModelConfig, Task, TrainConfig};
use sgg_core::synth::{
    generate_dataset, read_dataset, write_dataset, CorruptionKind, CorruptionSpec, GeneratorConfig,
};
use sgg_core::Error;

#[derive(Parser, Debug)]
#[command(name = "sgglab", version, about = "Scene graph robustness lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        n_scenes: usize,
        /// Generator config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write it to a model file.
    Train(TrainArgs),
    /// Evaluate one model on one cell and print metrics JSON.
    Eval(EvalArgs),
    /// Evaluate models over a corruption grid, writing CSV and JSON reports.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Seeds to run the suite with.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seed: Vec<u64>,
    },
    /// Join two single-method bench CSVs into a relative improvement table.
    Report {
        base: PathBuf,
        ours: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    enable_nrm: bool,
    #[arg(long)]
    enable_lee: bool,
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    attention: Option<AttentionMode>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch loss curve as JSON.
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CommonEval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "predcls")]
    task: Task,
    #[arg(long = "k", value_delimiter = ',', default_values_t = [20usize, 50, 100])]
    ks: Vec<usize>,
    /// Jitter input boxes by up to this fraction of their side length.
    #[arg(long)]
    perturb_bbox: Option<f64>,
    /// Seeds corruption noise and box jitter.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CommonEval {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            task: self.task,
            ks: self.ks.clone(),
            perturb_bbox: self.perturb_bbox,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    common: CommonEval,
    #[arg(long, requires = "severity")]
    corruption: Option<CorruptionKind>,
    #[arg(long, default_value_t = 0)]
    severity: u8,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Model files; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', required = true)]
    model: Vec<PathBuf>,
    #[command(flatten)]
    common: CommonEval,
    /// Corruption kinds (default: all).
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<CorruptionKind>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u8, 1, 2, 3, 4, 5])]
    severities: Vec<u8>,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    /// JSON report path (default: the CSV path with a `.json` extension).
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also write per-cell mean gate values for gated models.
    #[arg(long)]
    gate_out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct KMetrics {
    k: usize,
    recall: f64,
    mean_recall: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    method: String,
    task: Task,
    corruption: String,
    severity: u8,
    perturb_bbox: Option<f64>,
    n_scenes: usize,
    metrics: Vec<KMetrics>,
    mean_gate: Option<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> sgg_core::Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> sgg_core::Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_generate(seed: u64, n_scenes: usize, config: Option<PathBuf>, out: &Path) -> sgg_core::Result<()> {
    let cfg = match config {
        Some(p) => GeneratorConfig::from_json_file(&p)?,
        None => GeneratorConfig::default(),
    };
    let scenes = generate_dataset(seed, n_scenes, &cfg)?;
    write_dataset(out, &scenes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> sgg_core::Result<()> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.model.enable_nrm |= a.enable_nrm;
    cfg.model.enable_lee |= a.enable_lee;
    if let Some(f) = a.fusion {
        cfg.model.fusion = f;
    }
    if let Some(m) = a.attention {
        cfg.model.attention = m;
    }
    if let Some(t) = a.task {
        cfg.train.task = t;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    let scenes = read_dataset(&a.data)?;
    let mut model = Model::new(cfg.model)?;
    let report = train(&mut model, &scenes, &cfg.train)?;
    save_model(&model, &a.out)?;
    if let Some(p) = &a.loss_out {
        write_text(p, &serde_json::to_string_pretty(&report.loss_curve)?)?;
    }
    eprintln!(
        "{}: {} epochs on {} scenes, final loss {:.4}, wrote {}",
        model.config().method_label(),
        cfg.train.epochs,
        scenes.len(),
        report.loss_curve.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> sgg_core::Result<()> {
    let model = load_model(&a.model)?;
    let scenes = read_dataset(&a.common.data)?;
    let opts = a.common.options();
    let spec = match a.corruption {
        Some(kind) if a.severity > 0 => Some(CorruptionSpec::new(kind, a.severity)?),
        Some(_) => None,
        None if a.severity > 0 => {
            return Err(Error::InvalidConfig("--severity needs --corruption".into()));
        }
        None => None,
    };
    let cell = evaluate(&model, &scenes, spec, &opts)?;
    let summary = EvalSummary {
        method: model.config().method_label(),
        task: opts.task,
        corruption: spec.map_or("clean".to_string(), |s| s.kind.name().to_string()),
        severity: spec.map_or(0, |s| s.severity),
        perturb_bbox: opts.perturb_bbox,
        n_scenes: cell.n_scenes,
        metrics: cell
            .metrics
            .iter()
            .map(|&(k, recall, mean_recall)| KMetrics { k, recall, mean_recall })
            .collect(),
        mean_gate: cell.mean_gate,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    match &a.out {
        Some(p) => write_text(p, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> sgg_core::Result<()> {
    let scenes = read_dataset(&a.common.data)?;
    let opts = a.common.options();
    let grid = BenchGrid {
        kinds: if a.kinds.is_empty() { CorruptionKind::ALL.to_vec() } else { a.kinds.clone() },
        severities: a.severities.clone(),
    };
    let mut models = Vec::new();
    for path in &a.model {
        models.push(load_model(path)?);
    }
    // Same config twice gets a numeric suffix so rows stay distinguishable.
    let mut labels: Vec<String> = Vec::new();
    for m in &models {
        let base = m.config().method_label();
        let n = labels.iter().filter(|l| l.split('#').next() == Some(base.as_str())).count();
        labels.push(if n == 0 { base } else { format!("{base}#{}", n + 1) });
    }
    let named: Vec<(String, &Model)> = labels.into_iter().zip(&models).collect();
    let report = bench_run(&named, &scenes, &grid, &opts)?;
    write_text(&a.out, &report.to_csv())?;
    let json_path = a.json.clone().unwrap_or_else(|| a.out.with_extension("json"));
    write_text(&json_path, &report.to_json()?)?;
    if let Some(p) = &a.gate_out {
        let mut text = String::from("method,corruption,severity,mean_gate\n");
        for (label, model) in &named {
            match gate_stats(model, &scenes, &grid, &opts) {
                Ok(rows) => {
                    for r in rows {
                        text.push_str(&format!("{label},{},{},{:.6}\n", r.corruption, r.severity, r.mean_gate));
                    }
                }
                Err(Error::GateModeAbsent) => eprintln!("{label}: no gated fusion, skipped in gate report"),
                Err(e) => return Err(e),
            }
        }
        write_text(p, &text)?;
    }
    eprintln!("wrote {} rows to {} and {}", report.rows.len(), a.out.display(), json_path.display());
    Ok(())
}

fn cmd_gradcheck(seeds: &[u64]) -> sgg_core::Result<bool> {
    let mut all_ok = true;
    for &seed in seeds {
        for c in run_suite(seed)? {
            let status = if c.passed() { "ok" } else { "FAIL" };
            println!("seed {seed} {status:4} {:.3e} < {:.0e}  {}", c.max_rel_err, c.tolerance, c.name);
            all_ok &= c.passed();
        }
    }
    Ok(all_ok)
}

fn cmd_report(base: &Path, ours: &Path, out: Option<PathBuf>) -> sgg_core::Result<()> {
    let load = |p: &Path| -> sgg_core::Result<MetricsReport> {
        MetricsReport::from_csv(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
    };
    let table = improvement_table(&load(base)?, &load(ours)?)?;
    match out {
        Some(p) => write_text(&p, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> sgg_core::Result<ExitCode> {
    match cli.command {
        Command::Generate { seed, n_scenes, config, out } => cmd_generate(seed, n_scenes, config, &out)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Bench(a) => cmd_bench(a)?,
        Command::Gradcheck { seed } => {
            if !cmd_gradcheck(&seed)? {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Report { base, ours, out } => cmd_report(&base, &ours, out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
