//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input or
//! configuration, 3 propensity fit did not converge.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{load_pair, read_table, CohortSample, Method, ModelSpec, SurveySample};
use crate::error::{Error, Result};
use crate::estimation::{estimate, sea_diagnostic, sea_scores, EstimateOptions};
use crate::par::{init_threads, Execution};
use crate::simulation::{run_replications, write_metrics_csv, ScenarioConfig, SimModel};
use crate::weights::{compute_pseudoweights, BandwidthRule, KernelKind, KernelSpec, WeightConfig};

#[derive(Debug, Parser)]
#[command(name = "pseudoweight", version, about = "Propensity-score pseudo-weights for non-probability cohorts")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write pseudo-weights for each requested method.
    Weight(WeightArgs),
    /// Estimate the cohort outcome mean with variance and interval.
    Estimate(EstimateArgs),
    /// Check whether the unweighted-fit score is a function of the weighted-fit score.
    Diagnose(DiagnoseArgs),
    /// Run the Monte Carlo simulation.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Cohort CSV (covariates, optional `__outcome`, optional `__id`).
    #[arg(long)]
    pub cohort: PathBuf,
    /// Survey CSV (covariates, `__weight`, optional `__stratum`/`__psu`).
    #[arg(long)]
    pub survey: PathBuf,
    /// Model terms: `a`, `a^2` or `a:b`. Defaults to every covariate column.
    #[arg(long, value_delimiter = ',')]
    pub model_cols: Vec<String>,
    /// Columns to treat as categorical even if numeric.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    #[arg(long, default_value = "triangular")]
    pub kernel: String,
    /// `silverman` or a positive number.
    #[arg(long, default_value = "silverman")]
    pub bandwidth: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep going when a propensity fit does not converge.
    #[arg(long)]
    pub allow_nonconverged: bool,
}

#[derive(Debug, Args)]
pub struct WeightArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Comma-separated methods (IPSW, IPSW.S, KW, KW.W, KW.S).
    #[arg(long, value_delimiter = ',', default_value = "IPSW,IPSW.S,KW,KW.W,KW.S")]
    pub methods: Vec<String>,
    /// `on` maps IPSW and KW.W to their scaled forms; `off` maps back.
    #[arg(long, value_enum)]
    pub scale: Option<Switch>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub weight: WeightArgs,
    /// Jackknife group count; omit to skip the jackknife.
    #[arg(long)]
    pub groups: Option<usize>,
    /// Cohort column defining domains; one report per level.
    #[arg(long)]
    pub by: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = crate::estimation::DEFAULT_SEA_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = crate::estimation::DEFAULT_SEA_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `scenario1` or `scenario2`.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Scenario configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Propensity covariate set: T, U, M1 or M2.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub population: Option<usize>,
    /// Jackknife groups per replicate (0 = off).
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub bandwidth: Option<String>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotConverged { .. } => 3,
        Error::Validation(_)
        | Error::DimensionMismatch(_)
        | Error::NonPositiveWeight { .. }
        | Error::NonFinite { .. }
        | Error::Empty(_)
        | Error::UnknownMethod { .. }
        | Error::InvalidArgument(_)
        | Error::Design(_)
        | Error::Csv(_)
        | Error::Json(_) => 2,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

/// Parses arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PSEUDOWEIGHT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads);
    match cli.command {
        Command::Weight(a) => run_weight(&a),
        Command::Estimate(a) => run_estimate(&a),
        Command::Diagnose(a) => run_diagnose(&a),
        Command::Simulate(a) => run_simulate(&a),
    }
}

fn parse_bandwidth(s: &str) -> Result<BandwidthRule> {
    if s.eq_ignore_ascii_case("silverman") {
        return Ok(BandwidthRule::Silverman);
    }
    match s.parse::<f64>() {
        Ok(h) if h > 0.0 && h.is_finite() => Ok(BandwidthRule::Fixed(h)),
        _ => Err(Error::InvalidArgument(format!("bandwidth must be `silverman` or a positive number, got `{s}`"))),
    }
}

fn weight_config(input: &InputArgs) -> Result<WeightConfig> {
    Ok(WeightConfig {
        kernel: KernelSpec { kind: input.kernel.parse()?, bandwidth: parse_bandwidth(&input.bandwidth)? },
        exec: Execution::Parallel,
        ..Default::default()
    })
}

fn parse_methods(names: &[String], scale: Option<Switch>) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for name in names.iter().filter(|n| !n.trim().is_empty()) {
        let m: Method = name.parse()?;
        let m = match scale {
            Some(Switch::On) => m.scaled(),
            Some(Switch::Off) => m.unscaled(),
            None => m,
        };
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no methods requested".into()));
    }
    Ok(out)
}

fn load(input: &InputArgs) -> Result<(CohortSample, SurveySample)> {
    let mut spec = ModelSpec::parse(&input.model_cols);
    spec.categorical = input.categorical.clone();
    load_pair(&input.cohort, &input.survey, &spec)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Records what is needed to reproduce a run: the effective configuration,
/// its hash, the seed, input file hashes and the tool version.
fn write_manifest(out: &Path, command: &str, config: &serde_json::Value, seed: Option<u64>, inputs: &[&Path]) -> Result<()> {
    let canonical = serde_json::to_vec(config)?;
    let inputs = inputs
        .iter()
        .map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": sha256_hex(&fs::read(p)?) })))
        .collect::<Result<Vec<_>>>()?;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config_sha256": sha256_hex(&canonical),
        "config": config,
        "inputs": inputs,
        "parallel_feature": cfg!(feature = "parallel"),
    });
    write_json(&out.join("manifest.json"), &manifest)
}

fn input_config(input: &InputArgs) -> serde_json::Value {
    json!({
        "model_cols": input.model_cols,
        "categorical": input.categorical,
        "kernel": input.kernel,
        "bandwidth": input.bandwidth,
        "allow_nonconverged": input.allow_nonconverged,
    })
}

fn run_weight(args: &WeightArgs) -> Result<()> {
    let methods = parse_methods(&args.methods, args.scale)?;
    let cfg = weight_config(&args.input)?;
    let (cohort, survey) = load(&args.input)?;
    let out = &args.input.out;
    fs::create_dir_all(out)?;
    for &method in &methods {
        let (fit, set) = compute_pseudoweights(method, &cohort, &survey, &WeightConfig { jacobian: false, ..cfg })?;
        if !fit.converged && !args.input.allow_nonconverged {
            return Err(Error::NotConverged { iterations: fit.iterations });
        }
        let mut w = csv::Writer::from_path(out.join(format!("weights_{method}.csv")))?;
        w.write_record(["id", "method", "weight"])?;
        for (id, wi) in cohort.ids.iter().zip(&set.w) {
            w.write_record([id.as_str(), method.as_str(), &wi.to_string()])?;
        }
        w.flush()?;
        let meta = json!({
            "method": method,
            "n_cohort": cohort.len(),
            "n_survey": survey.len(),
            "sum_weights": set.total(),
            "survey_weight_total": survey.weight_total(),
            "scale_a": fit.scale_a,
            "kernel": set.kernel,
            "bandwidth": set.bandwidth,
            "fallback_count": set.fallback_count,
            "fit": {
                "columns": cohort.x.names(),
                "beta": fit.beta,
                "mode": fit.mode,
                "converged": fit.converged,
                "iterations": fit.iterations,
                "score_norm": fit.score_norm,
                "log_likelihood": fit.log_likelihood,
            },
            "warnings": set.warnings,
        });
        write_json(&out.join(format!("weights_{method}.json")), &meta)?;
        println!("{method}: sum of weights {:.6} over {} cohort units", set.total(), cohort.len());
    }
    let mut config = input_config(&args.input);
    config["methods"] = json!(methods);
    write_manifest(out, "weight", &config, None, &[&args.input.cohort, &args.input.survey])
}

fn run_estimate(args: &EstimateArgs) -> Result<()> {
    let input = &args.weight.input;
    let methods = parse_methods(&args.weight.methods, args.weight.scale)?;
    let cfg = weight_config(input)?;
    let (cohort, survey) = load(input)?;
    let labels = match &args.by {
        None => None,
        Some(col) => {
            let table = read_table(&input.cohort)?;
            let values = table
                .column(col)
                .ok_or_else(|| Error::InvalidArgument(format!("group column `{col}` not found in the cohort file")))?;
            Some(values.into_iter().map(str::to_string).collect::<Vec<String>>())
        }
    };
    let opts = EstimateOptions { jackknife_groups: args.groups, seed: args.seed, allow_nonconverged: input.allow_nonconverged };
    let reports = estimate(&methods, &cohort, &survey, labels.as_deref(), &cfg, &opts)?;
    fs::create_dir_all(&input.out)?;
    write_json(&input.out.join("estimates.json"), &reports)?;
    for r in &reports {
        let group = r.group.as_deref().map(|g| format!(" [{g}]")).unwrap_or_default();
        let jk = r.var_jk.map(|v| format!(" var_jk={v:.6e}")).unwrap_or_default();
        println!("{}{group}: mu={:.6} var_tl={:.6e}{jk} ci=({:.6}, {:.6})", r.method, r.mu_hat, r.var_tl, r.ci.0, r.ci.1);
    }
    let mut config = input_config(input);
    config["methods"] = json!(methods);
    config["groups"] = json!(args.groups);
    config["by"] = json!(args.by);
    write_manifest(&input.out, "estimate", &config, Some(args.seed), &[&input.cohort, &input.survey])
}

fn run_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let input = &args.input;
    let cfg = weight_config(input)?;
    let (cohort, survey) = load(input)?;
    let (q, q_tilde) = sea_scores(&cohort, &survey, &cfg)?;
    let report = sea_diagnostic(&q, &q_tilde, args.bins, args.threshold)?;
    fs::create_dir_all(&input.out)?;
    let mut w = csv::Writer::from_path(input.out.join("sea_pairs.csv"))?;
    w.write_record(["q", "q_tilde"])?;
    for (a, b) in q.iter().zip(&q_tilde) {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    write_json(&input.out.join("sea_summary.json"), &report)?;
    println!(
        "R2_func = {:.4} (threshold {}): {}",
        report.r2_func,
        report.threshold,
        if report.compatible { "compatible" } else { "exchangeability violated" }
    );
    let mut config = input_config(input);
    config["bins"] = json!(args.bins);
    config["threshold"] = json!(args.threshold);
    write_manifest(&input.out, "diagnose", &config, None, &[&input.cohort, &input.survey])
}

fn scenario_config(args: &SimulateArgs) -> Result<ScenarioConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => serde_json::from_str(&fs::read_to_string(path)?)?,
        (None, Some(p)) => ScenarioConfig::preset(p)?,
        (None, None) => ScenarioConfig::scenario1(),
    };
    cfg.seed = args.seed;
    if let Some(m) = &args.model {
        cfg.model = m.parse::<SimModel>()?;
    }
    if let Some(b) = args.replicates {
        cfg.replicates = b;
    }
    if let Some(n) = args.population {
        cfg.population_size = n;
    }
    if let Some(g) = args.groups {
        cfg.jackknife_groups = g;
    }
    if let Some(k) = &args.kernel {
        cfg.kernel.kind = k.parse::<KernelKind>()?;
    }
    if let Some(h) = &args.bandwidth {
        cfg.kernel.bandwidth = parse_bandwidth(h)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = scenario_config(args)?;
    let report = run_replications(&cfg, Execution::Parallel)?;
    fs::create_dir_all(&args.out)?;
    write_metrics_csv(&report.rows, fs::File::create(args.out.join("metrics.csv"))?)?;
    write_json(&args.out.join("metrics.json"), &report)?;
    println!(
        "model {} | mu = {:.4} | {} replicates ({} failed)",
        cfg.model, report.mu_true, report.replicates_used, report.replicates_failed
    );
    println!("{:<8} {:>8} {:>9} {:>7} {:>7} {:>7} {:>7} {:>9}", "", "%RB", "V x10^3", "VR(TL)", "VR(JK)", "CP(TL)", "CP(JK)", "MSE x10^3");
    for r in &report.rows {
        println!(
            "{:<8} {:>8.2} {:>9.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>9.3}",
            r.estimator,
            r.rb_pct,
            r.v * 1e3,
            r.vr_tl,
            r.vr_jk,
            r.cp_tl,
            r.cp_jk,
            r.mse * 1e3
        );
    }
    let inputs: Vec<&Path> = args.config.iter().map(PathBuf::as_path).collect();
    write_manifest(&args.out, "simulate", &serde_json::to_value(&cfg)?, Some(cfg.seed), &inputs)
}
