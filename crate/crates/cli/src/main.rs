use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hepaas_core::approx::{fit_activation, ActivationFn};
use hepaas_core::formats::{parse_batch, parse_model, parse_params, parse_plan, plan_to_json};
use hepaas_core::mpc::transcript_to_jsonl;
use hepaas_core::pipeline::batch_sweep;
use hepaas_core::{
    plan_search, run_scenario, BootstrapMode, Deployment, Error, HeParams, Model, Scenario,
    ScenarioConfig, SearchConfig,
};

#[derive(Parser)]
#[command(
    name = "hepaas",
    version,
    about = "Plan, run and cost encrypted inference on the exact simulator"
)]
struct Cli {
    /// Print a one-line summary to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search batch size and block splits.
    Plan(PlanArgs),
    /// Run a model on a batch under one deployment scenario.
    Run(RunArgs),
    /// Predicted operation counts over a batch-size sweep, as CSV.
    Bench(BenchArgs),
    /// Chebyshev fit of an activation function.
    Approx(ApproxArgs),
}

#[derive(Args)]
struct Deploy {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    scenario: u8,
    /// Cohort size for scenario 3.
    #[arg(long, default_value_t = 3)]
    parties: u32,
    #[arg(long, value_enum)]
    bootstrap: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Centralized,
    Collective,
}

impl Deploy {
    fn scenario(&self) -> anyhow::Result<Scenario> {
        Ok(Scenario::try_from(self.scenario)?)
    }

    fn deployment(&self) -> anyhow::Result<Deployment> {
        let d = Deployment::new(self.scenario()?, self.parties)?;
        Ok(match self.bootstrap {
            Some(m) => d.with_bootstrap(mode(m))?,
            None => d,
        })
    }
}

fn mode(m: Mode) -> BootstrapMode {
    match m {
        Mode::Centralized => BootstrapMode::Centralized,
        Mode::Collective => BootstrapMode::Collective,
    }
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// Fix the batch size instead of searching it.
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[command(flatten)]
    deploy: Deploy,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON batch file or CSV with one sample per line.
    #[arg(long)]
    batch: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// Plan file; searched when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    deploy: Deploy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the protocol transcript (JSON lines).
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[command(flatten)]
    deploy: Deploy,
    /// Comma separated batch sizes.
    #[arg(long, value_delimiter = ',', conflicts_with = "max_batch")]
    sweep: Option<Vec<usize>>,
    /// Sweep every batch size from 1 to this value.
    #[arg(long)]
    max_batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ApproxArgs {
    #[arg(long)]
    function: String,
    #[arg(long)]
    degree: usize,
    /// Interval as `a,b`.
    #[arg(long, default_value = "-8,8", allow_hyphen_values = true)]
    interval: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Checks every input path before any work starts.
fn require<'a>(paths: impl IntoIterator<Item = &'a Path>) -> anyhow::Result<()> {
    for p in paths {
        if !p.is_file() {
            bail!("input file {} does not exist", p.display());
        }
    }
    Ok(())
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{}", text.trim_end()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn load(model: &Path, params: &Path) -> anyhow::Result<(Model, HeParams)> {
    let model_text = read(model)?;
    let params_text = read(params)?;
    Ok((parse_model(&model_text)?, parse_params(&params_text)?))
}

fn cmd_plan(a: PlanArgs, verbose: bool) -> anyhow::Result<()> {
    require([a.model.as_path(), a.params.as_path()])?;
    let (model, params) = load(&a.model, &a.params)?;
    let dep = a.deploy.deployment()?;
    let plan = plan_search(
        &model.stage_shapes(),
        &params,
        &dep,
        a.batch_size,
        &SearchConfig::default(),
    )?;
    if verbose {
        eprintln!(
            "batch {} with {} mults per batch",
            plan.batch,
            plan.predicted_cost.total_mults()
        );
    }
    emit(a.out.as_deref(), &plan_to_json(&plan))
}

fn cmd_run(a: RunArgs, verbose: bool) -> anyhow::Result<()> {
    require(
        [a.model.as_path(), a.batch.as_path(), a.params.as_path()]
            .into_iter()
            .chain(a.plan.as_deref()),
    )?;
    let (model, params) = load(&a.model, &a.params)?;
    let batch = parse_batch(&read(&a.batch)?)?;
    let mut cfg = ScenarioConfig::new(a.deploy.scenario()?, params);
    cfg.parties = a.deploy.parties;
    cfg.bootstrap = a.deploy.bootstrap.map(mode);
    cfg.seed = a.seed;
    if let Some(p) = &a.plan {
        cfg.plan = Some(parse_plan(&read(p)?)?);
    }
    let res = run_scenario(&cfg, &model, &batch)?;
    if let Some(t) = &a.transcript {
        fs::write(t, transcript_to_jsonl(&res.transcript))
            .with_context(|| format!("cannot write {}", t.display()))?;
    }
    if verbose {
        eprintln!(
            "{} samples in {} sub-batches, {} mults, {} bootstraps",
            batch.rows(),
            res.sub_batches,
            res.counters.total_mults(),
            res.counters.bootstraps
        );
    }
    let doc = serde_json::json!({
        "predictions": res.predictions.to_rows(),
        "counters": res.counters,
        "transcript_path": a.transcript.as_ref().map(|p| p.display().to_string()),
    });
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&doc)?)
}

fn cmd_bench(a: BenchArgs, verbose: bool) -> anyhow::Result<()> {
    require([a.model.as_path(), a.params.as_path()])?;
    let (model, params) = load(&a.model, &a.params)?;
    let dep = a.deploy.deployment()?;
    let mut cfg = ScenarioConfig::new(dep.scenario, params);
    cfg.parties = dep.parties;
    cfg.bootstrap = Some(dep.bootstrap);
    let batches = match (a.sweep, a.max_batch) {
        (Some(v), _) => v,
        (None, Some(max)) => (1..=max).collect(),
        (None, None) => {
            let free = plan_search(&model.stage_shapes(), &params, &dep, None, &cfg.search)?;
            (1..=2 * free.batch).collect()
        }
    };
    if batches.is_empty() {
        bail!("empty batch sweep");
    }
    let points = batch_sweep(&model, &cfg, &batches)?;
    let mut csv = String::from("batch,total_mults,amortized_mults,bootstraps,rounds\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.batch,
            p.total.total_mults(),
            p.amortized_mults(),
            p.total.bootstraps,
            p.total.protocol_rounds
        ));
    }
    if verbose {
        eprintln!("{} batch sizes", points.len());
    }
    emit(a.out.as_deref(), &csv)
}

fn cmd_approx(a: ApproxArgs) -> anyhow::Result<()> {
    let function: ActivationFn = a.function.parse()?;
    let (lo, hi) = a
        .interval
        .split_once(',')
        .and_then(|(l, h)| Some((l.trim().parse::<f64>().ok()?, h.trim().parse::<f64>().ok()?)))
        .ok_or_else(|| Error::Parse(format!("interval must be `a,b`, got {:?}", a.interval)))?;
    let fit = fit_activation(function, (lo, hi), a.degree)?;
    let doc = serde_json::json!({
        "degree": fit.degree,
        "interval": [fit.interval.0, fit.interval.1],
        "coeffs": fit.coeffs,
        "max_abs_error": fit.max_abs_error,
    });
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&doc)?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Infeasible(_) | Error::CapacityExceeded { .. } | Error::LevelExhausted { .. },
        ) => 2,
        Some(
            Error::AccessViolation(_)
            | Error::WrongKey(_)
            | Error::KeyMismatch { .. }
            | Error::NotEncrypted,
        ) => 3,
        Some(Error::Shape(_) | Error::Parse(_) | Error::Domain(_)) => 4,
        Some(Error::ProtocolAborted(_)) => 5,
        Some(Error::Config(_)) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let verbose = cli.verbose;
    let res = match cli.cmd {
        Command::Plan(a) => cmd_plan(a, verbose),
        Command::Run(a) => cmd_run(a, verbose),
        Command::Bench(a) => cmd_bench(a, verbose),
        Command::Approx(a) => cmd_approx(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
