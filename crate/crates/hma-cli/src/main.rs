//! `hma`: fit cohort endpoint models, pool the effects within and across
//! cohorts, draw forest plots, and run the coverage simulation grid.
//!
//! Exit codes: 0 success, 2 input or validation problem, 3 numerical
//! failure, 4 the fit ran out of iterations (results are still written).

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hma_core::data::{
    detect_endpoints, load_cohort_csv, standardize_responses, CohortData, CsvSchema, EffectBlock,
};
use hma_core::forest::{forest_svg, ForestOptions, ForestRow};
use hma_core::onestage::{fit_onestage, OneStageOptions};
use hma_core::report::{
    global_text, pool_text, stage1_text, CohortPoolReport, GlobalReport, Stage1Report,
};
use hma_core::sim::{grid_to_csv, run_scenario_grid, Methods, Scenario, ScenarioResult};
use hma_core::stage1::fit_cohort;
use hma_core::stage2::{pool_within_cohort, ConvergenceOptions};
use hma_core::stage3::{pool_across_cohorts, CohortSummary};
use hma_core::{Error, Result};

use config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "hma", version)]
#[command(about = "Pooling of correlated endpoint effects within and across cohorts")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// TOML config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit per-endpoint models for one cohort and write its effect report.
    Stage1(Stage1Args),
    /// Pool effects within each cohort, then across cohorts.
    Pool(PoolArgs),
    /// Draw a forest plot from a saved pool or global report.
    Forest(ForestArgs),
    /// Run the simulation grid and summarize bias, SE calibration, coverage.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct SchemaArgs {
    /// Column holding the exposure variable.
    #[arg(long = "exposure-col")]
    exposure_col: Option<String>,
    /// Column holding the adjustment score.
    #[arg(long = "propensity-col")]
    propensity_col: Option<String>,
    /// Endpoint column; repeat once per endpoint. When none are named,
    /// every other numeric column in the file is used.
    #[arg(long = "endpoint")]
    endpoints: Vec<String>,
    /// Cell content treated as missing; repeat to allow several.
    #[arg(long = "missing-token")]
    missing_tokens: Vec<String>,
    /// Field delimiter, a single character.
    #[arg(long)]
    delimiter: Option<String>,
}

#[derive(Args, Debug)]
struct Stage1Args {
    /// Cohort CSV file.
    #[arg(long)]
    input: PathBuf,
    /// Cohort label; defaults to the input file stem.
    #[arg(long = "cohort-id")]
    cohort_id: Option<String>,
    /// Keep endpoints on their original scales instead of mean 100, sd 15.
    #[arg(long = "no-standardize")]
    no_standardize: bool,
    /// Directory reports are written into.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
}

#[derive(Args, Debug)]
struct PoolArgs {
    /// Cohort CSV file; repeat once per cohort.
    #[arg(long = "input", conflicts_with = "from_reports")]
    inputs: Vec<PathBuf>,
    /// Saved first-stage JSON report; repeat once per cohort.
    #[arg(long = "from-reports")]
    from_reports: Vec<PathBuf>,
    /// Estimator to run.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Keep endpoints on their original scales instead of mean 100, sd 15.
    #[arg(long = "no-standardize")]
    no_standardize: bool,
    /// Directory reports are written into.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Tolerance on successive pooled-effect values.
    #[arg(long = "tol-beta")]
    tol_beta: Option<f64>,
    /// Tolerance on successive heterogeneity values.
    #[arg(long = "tol-phi")]
    tol_phi: Option<f64>,
    /// Iteration budget for the alternating updates.
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
    /// Seed for the one-stage restart perturbations.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    schema: SchemaArgs,
}

#[derive(Args, Debug)]
struct ForestArgs {
    /// Pool or global report JSON.
    #[arg(long)]
    input: PathBuf,
    /// Output SVG path; defaults to forest.svg in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Plot width in pixels.
    #[arg(long)]
    width: Option<u32>,
    /// Title drawn above the rows.
    #[arg(long)]
    title: Option<String>,
    /// Axis label under the effect scale.
    #[arg(long = "effect-label")]
    effect_label: Option<String>,
    /// Directory the default output lands in.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Monte Carlo replicates per cell.
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed for the replicate streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Individuals per replicate.
    #[arg(long)]
    n: Option<usize>,
    /// Estimator to run in every cell.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Directory the CSV and JSON summaries are written into.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    TwoStage,
    OneStage,
    Both,
}

impl MethodArg {
    fn runs_two_stage(self) -> bool {
        matches!(self, MethodArg::TwoStage | MethodArg::Both)
    }
    fn runs_one_stage(self) -> bool {
        matches!(self, MethodArg::OneStage | MethodArg::Both)
    }
    fn to_sim(self) -> Methods {
        match self {
            MethodArg::TwoStage => Methods::TwoStage,
            MethodArg::OneStage => Methods::OneStage,
            MethodArg::Both => Methods::Both,
        }
    }
}

fn method_from_str(s: &str) -> Result<MethodArg> {
    match s {
        "two-stage" => Ok(MethodArg::TwoStage),
        "one-stage" => Ok(MethodArg::OneStage),
        "both" => Ok(MethodArg::Both),
        other => Err(Error::Validation(format!(
            "unknown method '{other}' (expected two-stage, one-stage, or both)"
        ))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = config::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Stage1(a) => cmd_stage1(a, &cfg),
        Command::Pool(a) => cmd_pool(a, &cfg),
        Command::Forest(a) => cmd_forest(a, &cfg),
        Command::Simulate(a) => cmd_simulate(a, &cfg),
    }
}

fn cmd_stage1(args: &Stage1Args, cfg: &FileConfig) -> Result<ExitCode> {
    let mut schema = resolve_schema(&args.schema, &cfg.schema)?;
    schema.cohort_id = args.cohort_id.clone();
    if schema.endpoint_cols.is_empty() {
        schema.endpoint_cols = detect_endpoints(&args.input, &schema)?;
    }
    let raw = load_cohort_csv(&args.input, &schema)?;
    let (data, record) = maybe_standardize(raw, args.no_standardize, cfg)?;
    let out = fit_cohort(&data)?;
    let report = Stage1Report::new(&out, record);

    let out_dir = resolve_out_dir(args.out_dir.as_ref(), cfg)?;
    let json_path = out_dir.join(format!("{}_stage1.json", report.cohort_id));
    write_json(&json_path, &report)?;
    let gamma_path = out_dir.join(format!("{}_gamma.csv", report.cohort_id));
    std::fs::write(&gamma_path, gamma_csv(&report))?;

    print!("{}", stage1_text(&report));
    println!("wrote {}", json_path.display());
    println!("wrote {}", gamma_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_pool(args: &PoolArgs, cfg: &FileConfig) -> Result<ExitCode> {
    let method = match (args.method, &cfg.pool.method) {
        (Some(m), _) => m,
        (None, Some(s)) => method_from_str(s)?,
        (None, None) => MethodArg::TwoStage,
    };
    if args.inputs.is_empty() && args.from_reports.is_empty() {
        return Err(Error::Validation(
            "no cohorts given; pass --input CSVs or --from-reports JSONs".into(),
        ));
    }
    if !args.from_reports.is_empty() && method.runs_one_stage() {
        return Err(Error::Validation(
            "one-stage fitting needs raw cohort CSVs; saved reports only carry \
             the pooled-effect inputs"
                .into(),
        ));
    }
    let opts = resolve_convergence(args, cfg);
    let out_dir = resolve_out_dir(args.out_dir.as_ref(), cfg)?;

    let mut failures: Vec<String> = Vec::new();
    let mut worst = 0i32;
    let mut note = |label: &str, e: &Error, worst: &mut i32| {
        failures.push(format!("{label}: {e}"));
        *worst = (*worst).max(e.exit_code());
    };

    // gather one effect block per cohort, keeping raw data when one-stage
    // fitting will need it
    let mut cohorts: Vec<(EffectBlock, Option<CohortData>)> = Vec::new();
    if !args.from_reports.is_empty() {
        for path in &args.from_reports {
            match read_stage1_report(path) {
                Ok(rep) => cohorts.push((rep.to_effect_block(), None)),
                Err(e) => note(&path.display().to_string(), &e, &mut worst),
            }
        }
    } else {
        let schema = resolve_schema(&args.schema, &cfg.schema)?;
        for path in &args.inputs {
            match load_and_fit(path, &schema, args.no_standardize, cfg) {
                Ok(pair) => cohorts.push(pair),
                Err(e) => note(&path.display().to_string(), &e, &mut worst),
            }
        }
    }
    let mut seen = BTreeSet::new();
    for (block, _) in &cohorts {
        if !seen.insert(block.cohort_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate cohort id '{}'; pass distinct files or labels",
                block.cohort_id
            )));
        }
    }

    let mut reports: Vec<CohortPoolReport> = Vec::new();
    let mut unconverged = false;
    for (block, data) in &cohorts {
        let two = if method.runs_two_stage() {
            match pool_within_cohort(block, &opts) {
                Ok(p) => {
                    unconverged |= !p.converged;
                    Some(p)
                }
                Err(e) => {
                    note(
                        &format!("cohort {} (two-stage)", block.cohort_id),
                        &e,
                        &mut worst,
                    );
                    None
                }
            }
        } else {
            None
        };
        let one = if method.runs_one_stage() {
            let data = data.as_ref().expect("raw data kept for one-stage runs");
            let mut oopts = OneStageOptions::default();
            if let Some(seed) = args.seed.or(cfg.pool.seed) {
                oopts.seed = seed;
            }
            match fit_onestage(data, &oopts) {
                Ok(f) => {
                    unconverged |= !f.converged;
                    Some(f)
                }
                Err(e) => {
                    note(
                        &format!("cohort {} (one-stage)", block.cohort_id),
                        &e,
                        &mut worst,
                    );
                    None
                }
            }
        } else {
            None
        };
        if two.is_some() || one.is_some() {
            reports.push(CohortPoolReport::new(block, two, one));
        }
    }

    let two_global = if method.runs_two_stage() {
        let summaries: Vec<CohortSummary> = reports
            .iter()
            .filter_map(|r| r.two_stage.as_ref())
            .map(CohortSummary::from)
            .collect();
        pool_global(
            &summaries,
            &opts,
            "global (two-stage)",
            &mut note,
            &mut worst,
            &mut unconverged,
        )
    } else {
        None
    };
    let one_global = if method.runs_one_stage() {
        let summaries: Vec<CohortSummary> = reports
            .iter()
            .filter_map(|r| r.one_stage.as_ref())
            .map(|f| CohortSummary {
                label: f.cohort_id.clone(),
                beta: f.beta,
                variance: f.se * f.se,
            })
            .collect();
        pool_global(
            &summaries,
            &opts,
            "global (one-stage)",
            &mut note,
            &mut worst,
            &mut unconverged,
        )
    } else {
        None
    };

    for r in &reports {
        write_json(&out_dir.join(format!("{}_pooled.json", r.cohort_id)), r)?;
    }
    let global = GlobalReport {
        two_stage: two_global,
        one_stage: one_global,
        failures: failures.clone(),
    };
    write_json(&out_dir.join("global.json"), &global)?;

    print!("{}", pool_text(&reports));
    print!("{}", global_text(&global));
    for f in &failures {
        eprintln!("failed: {f}");
    }
    if worst > 0 {
        return Ok(ExitCode::from(worst as u8));
    }
    if unconverged {
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

fn pool_global(
    summaries: &[CohortSummary],
    opts: &ConvergenceOptions,
    label: &str,
    note: &mut impl FnMut(&str, &Error, &mut i32),
    worst: &mut i32,
    unconverged: &mut bool,
) -> Option<hma_core::stage3::GlobalPooled> {
    if summaries.is_empty() {
        return None;
    }
    match pool_across_cohorts(summaries, opts) {
        Ok(g) => {
            *unconverged |= !g.converged;
            Some(g)
        }
        Err(e) => {
            note(label, &e, worst);
            None
        }
    }
}

fn cmd_forest(args: &ForestArgs, cfg: &FileConfig) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.input)?;
    let (rows, pooled) = forest_inputs(&text).ok_or_else(|| {
        Error::Validation(format!(
            "{}: not a pool or global report, or it holds no pooled results",
            args.input.display()
        ))
    })?;
    let opts = ForestOptions {
        width: args.width.or(cfg.plot.width).unwrap_or(720),
        title: args
            .title
            .clone()
            .or_else(|| cfg.plot.title.clone())
            .unwrap_or_default(),
        x_label: args
            .effect_label
            .clone()
            .or_else(|| cfg.plot.effect_label.clone())
            .unwrap_or_else(|| "effect".into()),
    };
    let svg = forest_svg(&rows, pooled.as_ref(), &opts);
    let out = match &args.output {
        Some(p) => p.clone(),
        None => resolve_out_dir(args.out_dir.as_ref(), cfg)?.join("forest.svg"),
    };
    std::fs::write(&out, svg)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

/// Rows and pooled diamond from whichever report kind the JSON holds.
fn forest_inputs(text: &str) -> Option<(Vec<ForestRow>, Option<ForestRow>)> {
    if let Ok(rep) = serde_json::from_str::<CohortPoolReport>(text) {
        let rows = rep
            .endpoints
            .iter()
            .map(|e| ForestRow {
                label: e.name.clone(),
                estimate: e.effect,
                se: e.se,
            })
            .collect();
        let pooled = rep
            .two_stage
            .as_ref()
            .map(|p| (p.beta, p.se))
            .or_else(|| rep.one_stage.as_ref().map(|f| (f.beta, f.se)))
            .map(|(beta, se)| ForestRow {
                label: "pooled".into(),
                estimate: beta,
                se,
            });
        return Some((rows, pooled));
    }
    if let Ok(rep) = serde_json::from_str::<GlobalReport>(text) {
        let g = rep.two_stage.as_ref().or(rep.one_stage.as_ref())?;
        let rows = g
            .cohorts
            .iter()
            .map(|c| ForestRow {
                label: c.label.clone(),
                estimate: c.beta,
                se: c.variance.sqrt(),
            })
            .collect();
        let pooled = ForestRow {
            label: "pooled".into(),
            estimate: g.beta,
            se: g.se,
        };
        return Some((rows, Some(pooled)));
    }
    None
}

fn cmd_simulate(args: &SimulateArgs, cfg: &FileConfig) -> Result<ExitCode> {
    let mut template = Scenario::new(3, 0.10);
    template.reps = args.reps.or(cfg.simulate.reps).unwrap_or(1000);
    template.seed = args.seed.or(cfg.simulate.seed).unwrap_or(42);
    template.n = args.n.or(cfg.simulate.n).unwrap_or(500);
    template.methods = match (args.method, &cfg.simulate.method) {
        (Some(m), _) => m.to_sim(),
        (None, Some(s)) => method_from_str(s)?.to_sim(),
        (None, None) => Methods::Both,
    };
    let results = run_scenario_grid(&template)?;

    let out_dir = resolve_out_dir(args.out_dir.as_ref(), cfg)?;
    let csv_path = out_dir.join("simulation.csv");
    std::fs::write(&csv_path, grid_to_csv(&results))?;
    let json_path = out_dir.join("simulation.json");
    write_json(&json_path, &results)?;

    print!("{}", grid_text(&results));
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    Ok(ExitCode::SUCCESS)
}

fn grid_text(results: &[ScenarioResult]) -> String {
    let mut out = format!(
        "{:<4} {:>5} {:>10} {:>9} {:>8} {:>8} {:>7} {:>9} {:>5}\n",
        "k", "tau2", "method", "ebias", "ase", "ese", "cp", "mean_phi", "fail"
    );
    for r in results {
        for m in [r.two_stage.as_ref(), r.one_stage.as_ref()]
            .into_iter()
            .flatten()
        {
            out.push_str(&format!(
                "{:<4} {:>5.2} {:>10} {:>9.4} {:>8.4} {:>8.4} {:>7.3} {:>9.4} {:>5}\n",
                r.scenario.k,
                r.scenario.tau2,
                m.method,
                m.ebias,
                m.ase,
                m.ese,
                m.cp,
                m.mean_phi,
                m.n_failed
            ));
        }
    }
    out
}

fn resolve_schema(args: &SchemaArgs, cfg: &config::SchemaConfig) -> Result<CsvSchema> {
    let exposure = args
        .exposure_col
        .clone()
        .or_else(|| cfg.exposure.clone())
        .ok_or_else(|| {
            Error::Validation(
                "exposure column not named; pass --exposure-col or set schema.exposure".into(),
            )
        })?;
    let propensity = args
        .propensity_col
        .clone()
        .or_else(|| cfg.propensity.clone())
        .ok_or_else(|| {
            Error::Validation(
                "adjustment column not named; pass --propensity-col or set schema.propensity"
                    .into(),
            )
        })?;
    // an empty endpoint list means "detect per file" at the load site
    let endpoints = if !args.endpoints.is_empty() {
        args.endpoints.clone()
    } else {
        cfg.endpoints.clone().unwrap_or_default()
    };
    let mut schema = CsvSchema::new(exposure, propensity, endpoints);
    if !args.missing_tokens.is_empty() {
        schema.missing_tokens = args.missing_tokens.clone();
    } else if let Some(tokens) = &cfg.missing_tokens {
        schema.missing_tokens = tokens.clone();
    }
    if let Some(d) = args.delimiter.as_deref().or(cfg.delimiter.as_deref()) {
        let bytes = d.as_bytes();
        if bytes.len() != 1 {
            return Err(Error::Validation(format!(
                "delimiter must be a single character, got '{d}'"
            )));
        }
        schema.delimiter = bytes[0];
    }
    Ok(schema)
}

fn resolve_convergence(args: &PoolArgs, cfg: &FileConfig) -> ConvergenceOptions {
    let mut opts = ConvergenceOptions::default();
    if let Some(t) = args.tol_beta.or(cfg.convergence.tol_beta) {
        opts.tol_beta = t;
    }
    if let Some(t) = args.tol_phi.or(cfg.convergence.tol_phi) {
        opts.tol_phi = t;
    }
    if let Some(m) = args.max_iter.or(cfg.convergence.max_iter) {
        opts.max_iter = m;
    }
    opts
}

fn maybe_standardize(
    raw: CohortData,
    no_standardize_flag: bool,
    cfg: &FileConfig,
) -> Result<(CohortData, Option<hma_core::data::StandardizationRecord>)> {
    let standardize = !no_standardize_flag && cfg.standardize.unwrap_or(true);
    if standardize {
        let (data, record) = standardize_responses(&raw)?;
        Ok((data, Some(record)))
    } else {
        Ok((raw, None))
    }
}

fn load_and_fit(
    path: &Path,
    schema: &CsvSchema,
    no_standardize_flag: bool,
    cfg: &FileConfig,
) -> Result<(EffectBlock, Option<CohortData>)> {
    let mut schema = schema.clone();
    if schema.endpoint_cols.is_empty() {
        schema.endpoint_cols = detect_endpoints(path, &schema)?;
    }
    let raw = load_cohort_csv(path, &schema)?;
    let (data, _) = maybe_standardize(raw, no_standardize_flag, cfg)?;
    let out = fit_cohort(&data)?;
    Ok((out.block, Some(data)))
}

fn read_stage1_report(path: &Path) -> Result<Stage1Report> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Validation(format!("{}: not a first-stage report: {e}", path.display()))
    })
}

fn resolve_out_dir(flag: Option<&PathBuf>, cfg: &FileConfig) -> Result<PathBuf> {
    let dir = flag
        .cloned()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// The scaled effect covariance as CSV with endpoint names on both axes.
fn gamma_csv(report: &Stage1Report) -> String {
    let k = report.endpoints.len();
    let mut out = String::from("endpoint");
    for e in &report.endpoints {
        out.push(',');
        out.push_str(&csv_field(&e.name));
    }
    out.push('\n');
    for (i, e) in report.endpoints.iter().enumerate() {
        out.push_str(&csv_field(&e.name));
        for j in 0..k {
            out.push_str(&format!(",{}", report.gamma[i * k + j]));
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
