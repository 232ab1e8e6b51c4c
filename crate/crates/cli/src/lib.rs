//! Command-line front end for the callback ELR library.
//!
//! Every subcommand reads an optional `key = value` config file; flags given
//! on the command line override its entries.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use callback_elr::baseline::{self, TwoSampleData};
use callback_elr::data::{Basis, CallbackDataset, ModelSpec};
use callback_elr::elr::{bic_select, elr_test, ElrOptions};
use callback_elr::em::{fit_full, FitProblem};
use callback_elr::io::{self, FitDump, FitSummary, Format, KeyValues, Report, TestReport};
use callback_elr::sim::{self, BootstrapOptions};
use callback_elr::{Error, Execution, Result};
use clap::{Args, Parser, Subcommand};

/// Exit code for usage and configuration errors.
pub const USAGE_ERROR: i32 = 2;
/// Exit code for failures while running a valid command.
pub const RUN_ERROR: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "cbelr", version, about = "Two-sample homogeneity testing with callback data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// ELR test of equal outcome distributions, optionally with baselines.
    Test(TestArgs),
    /// Unrestricted and null fits with constraint residuals.
    Fit(FitArgs),
    /// BIC table over candidate r(y) and q(y) bases.
    Select(SelectArgs),
    /// Generate a callback CSV from a generator configuration.
    Simulate(SimulateArgs),
    /// Monte Carlo size or power experiment.
    Experiment(ExperimentArgs),
    /// Parametric bootstrap comparison of the two response models.
    Bootstrap(BootstrapArgs),
    /// Recode raw attempt counts to two callback categories.
    Categorize(CategorizeArgs),
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Write results here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Output format: json, table or csv.
    #[arg(long, default_value = "json", value_parser = parse_format)]
    format: Format,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Key-value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Callback CSV with header `group,d,y`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Number of callback attempts; inferred from the data when absent.
    #[arg(long)]
    m: Option<u32>,
    /// Convergence threshold on the log-EL increment.
    #[arg(long)]
    epsilon: Option<f64>,
    /// EM iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// EM starting points; extra starts are random perturbations.
    #[arg(long)]
    starts: Option<usize>,
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// DRM basis q(y): y, log, y+log, or bic to select it.
    #[arg(long)]
    q_basis: Option<String>,
    /// Response basis r(y): y, log, y+log, or bic to select it.
    #[arg(long)]
    r_basis: Option<String>,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    spec: SpecArgs,
    /// Significance level in (0, 1).
    #[arg(long)]
    level: Option<f64>,
    /// Also run the t, Wilcoxon, KS and complete-case ELR tests on respondents.
    #[arg(long)]
    baselines: bool,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    spec: SpecArgs,
    /// Write the fitted F0 and F1 step functions as CSV.
    #[arg(long)]
    cdf_output: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// r(y) candidates separated by spaces or semicolons.
    #[arg(long)]
    r_candidates: Option<String>,
    /// q(y) candidates separated by spaces or semicolons.
    #[arg(long)]
    q_candidates: Option<String>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct GeneratorArgs {
    /// Key-value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Group 0 outcome family, e.g. exp(0.8), ln(0,1), gamma(2.5,1).
    #[arg(long)]
    f0: Option<String>,
    /// Group 1 outcome family; defaults to f0.
    #[arg(long)]
    f1: Option<String>,
    /// Units per group.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    n1: Option<usize>,
    /// Group 0 response parameters: alphas then slopes, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    phi0: Option<String>,
    /// Group 1 response parameters: alphas then slopes, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    phi1: Option<String>,
    /// Response basis r(y).
    #[arg(long)]
    r_basis: Option<String>,
    /// Number of callback attempts.
    #[arg(long)]
    m: Option<u32>,
    /// Random seed; required.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    gen: GeneratorArgs,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[command(flatten)]
    gen: GeneratorArgs,
    /// DRM basis q(y); defaults to the natural basis of f1.
    #[arg(long)]
    q_basis: Option<String>,
    /// Comma-separated methods: elr, t, wilcoxon, ks, cai.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// Significance level in (0, 1).
    #[arg(long)]
    level: Option<f64>,
    /// asymptotic or empirical-null.
    #[arg(long)]
    calibration: Option<String>,
    /// Null replications for empirical-null calibration; defaults to reps.
    #[arg(long)]
    null_reps: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    starts: Option<usize>,
    /// Run replications on one thread.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    spec: SpecArgs,
    /// Bootstrap replications.
    #[arg(long)]
    bootstrap_b: Option<usize>,
    /// Random seed; required.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct CategorizeArgs {
    /// CSV with header `group,attempts,y`; empty attempts mark nonrespondents.
    #[arg(long)]
    input: PathBuf,
    /// Attempts up to this count map to d = 1.
    #[arg(long, default_value_t = 3)]
    cut: u32,
    /// Largest valid attempt count; larger counts are errors.
    #[arg(long, default_value_t = 6)]
    max_attempts: u32,
    /// Write the recoded CSV here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    Format::from_str(s).map_err(|e| e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { USAGE_ERROR } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => USAGE_ERROR,
                _ => RUN_ERROR,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Test(a) => run_test(a),
        Command::Fit(a) => run_fit(a),
        Command::Select(a) => run_select(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Experiment(a) => run_experiment(a),
        Command::Bootstrap(a) => run_bootstrap(a),
        Command::Categorize(a) => run_categorize(a),
    }
}

// ---------------------------------------------------------------------------
// Configuration merging

const DATA_KEYS: &[&str] = &["input", "m", "epsilon", "max_iter", "starts"];
const SPEC_KEYS: &[&str] = &["q_basis", "r_basis"];

fn load_config(path: Option<&Path>) -> Result<KeyValues> {
    path.map_or_else(|| Ok(KeyValues::default()), KeyValues::read)
}

fn set<T: ToString>(kv: &mut KeyValues, key: &str, value: Option<T>) {
    if let Some(v) = value {
        kv.set(key, v.to_string());
    }
}

fn data_config(a: &DataArgs) -> Result<KeyValues> {
    let mut kv = load_config(a.config.as_deref())?;
    set(&mut kv, "input", a.input.as_ref().map(|p| p.display()));
    set(&mut kv, "m", a.m);
    set(&mut kv, "epsilon", a.epsilon);
    set(&mut kv, "max_iter", a.max_iter);
    set(&mut kv, "starts", a.starts);
    Ok(kv)
}

fn spec_config(kv: &mut KeyValues, a: &SpecArgs) {
    set(kv, "q_basis", a.q_basis.as_ref());
    set(kv, "r_basis", a.r_basis.as_ref());
}

fn allow(kv: &KeyValues, groups: &[&[&str]]) -> Result<()> {
    let allowed: Vec<&str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    kv.check_keys(&allowed)
}

fn read_input(kv: &KeyValues) -> Result<CallbackDataset> {
    let path = kv.get("input").ok_or_else(|| Error::Config("--input is required".into()))?;
    io::read_callback_csv(Path::new(path), kv.parsed("m")?)
}

fn level(kv: &KeyValues) -> Result<f64> {
    let level = kv.parsed("level")?.unwrap_or(0.05);
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level must lie in (0, 1), got {level}")));
    }
    Ok(level)
}

fn require_seed(kv: &KeyValues) -> Result<u64> {
    kv.parsed("seed")?
        .ok_or_else(|| Error::Config("--seed is required for stochastic commands".into()))
}

fn elr_options(kv: &KeyValues) -> Result<ElrOptions> {
    Ok(ElrOptions {
        em: io::em_options(kv)?,
        ..ElrOptions::default()
    })
}

/// A basis setting: fixed, or chosen by BIC over every candidate.
fn basis_choice(kv: &KeyValues, key: &str, default: Basis) -> Result<Vec<Basis>> {
    match kv.get(key) {
        Some(v) if v.trim().eq_ignore_ascii_case("bic") => Ok(Basis::ALL.to_vec()),
        Some(v) => Ok(vec![v.parse()?]),
        None => Ok(vec![default]),
    }
}

/// Resolves the model specification, running a BIC search when either basis
/// is set to `bic`.
fn resolve_spec(ds: &CallbackDataset, kv: &KeyValues, opts: &ElrOptions) -> Result<ModelSpec> {
    let r = basis_choice(kv, "r_basis", Basis::Log)?;
    let q = basis_choice(kv, "q_basis", Basis::Identity)?;
    if r.len() == 1 && q.len() == 1 {
        return Ok(ModelSpec::new(r[0], q[0], ds.m));
    }
    Ok(bic_select(ds, ds.m, &r, &q, opts)?.selected)
}

fn emit<R: Report>(report: &R, out: &OutputArgs) -> Result<()> {
    write_text(&io::render(report, out.format)?, out.output.as_deref())
}

fn write_text(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands

fn run_test(a: TestArgs) -> Result<()> {
    let mut kv = data_config(&a.data)?;
    spec_config(&mut kv, &a.spec);
    set(&mut kv, "level", a.level);
    if a.baselines {
        kv.set("baselines", "true");
    }
    allow(&kv, &[DATA_KEYS, SPEC_KEYS, &["level", "baselines", "seed"]])?;
    let level = level(&kv)?;
    let ds = read_input(&kv)?;
    let opts = elr_options(&kv)?;
    let spec = resolve_spec(&ds, &kv, &opts)?;
    let elr = elr_test(&ds, &spec, &opts)?;
    let mut tests = vec![elr.test_result()];
    if kv.parsed::<bool>("baselines")?.unwrap_or(false) {
        let data = TwoSampleData::from_dataset(&ds)?;
        tests.push(baseline::t_test(&data)?);
        tests.push(baseline::wilcoxon_test(&data)?);
        tests.push(baseline::ks_test(&data)?);
        tests.push(baseline::cai_elr_test(&data, spec.q_basis)?);
    }
    emit(&TestReport { spec, level, tests }, &a.out)
}

fn run_fit(a: FitArgs) -> Result<()> {
    let mut kv = data_config(&a.data)?;
    spec_config(&mut kv, &a.spec);
    allow(&kv, &[DATA_KEYS, SPEC_KEYS, &["seed"]])?;
    let ds = read_input(&kv)?;
    let opts = elr_options(&kv)?;
    let spec = resolve_spec(&ds, &kv, &opts)?;
    let problem = FitProblem::new(&ds, &spec)?;
    let full = problem.fit(false, &opts.em)?;
    let null = problem.fit(true, &opts.em)?;
    if let Some(path) = &a.cdf_output {
        fs::write(path, io::cdf_csv(&ds, &full)?)?;
    }
    let dump = FitDump {
        spec,
        fits: vec![FitSummary::from(&full), FitSummary::from(&null)],
    };
    emit(&dump, &a.out)
}

fn basis_list(kv: &KeyValues, key: &str) -> Result<Vec<Basis>> {
    match kv.get(key) {
        None => Ok(Basis::ALL.to_vec()),
        // Bases such as `y,log` contain commas, so candidates split on ';'
        // when one is present.
        Some(v) => {
            let sep = if v.contains(';') { ';' } else { ' ' };
            v.split(sep)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(Basis::from_str)
                .collect()
        }
    }
}

fn run_select(a: SelectArgs) -> Result<()> {
    let mut kv = data_config(&a.data)?;
    set(&mut kv, "r_candidates", a.r_candidates.as_ref());
    set(&mut kv, "q_candidates", a.q_candidates.as_ref());
    allow(&kv, &[DATA_KEYS, &["r_candidates", "q_candidates", "seed"]])?;
    let ds = read_input(&kv)?;
    let opts = elr_options(&kv)?;
    let r = basis_list(&kv, "r_candidates")?;
    let q = basis_list(&kv, "q_candidates")?;
    emit(&bic_select(&ds, ds.m, &r, &q, &opts)?, &a.out)
}

fn generator_config(a: &GeneratorArgs) -> Result<KeyValues> {
    let mut kv = load_config(a.config.as_deref())?;
    set(&mut kv, "f0", a.f0.as_ref());
    set(&mut kv, "f1", a.f1.as_ref());
    set(&mut kv, "n", a.n);
    set(&mut kv, "n0", a.n0);
    set(&mut kv, "n1", a.n1);
    set(&mut kv, "phi0", a.phi0.as_ref());
    set(&mut kv, "phi1", a.phi1.as_ref());
    set(&mut kv, "r_basis", a.r_basis.as_ref());
    set(&mut kv, "m", a.m);
    set(&mut kv, "seed", a.seed);
    Ok(kv)
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let kv = generator_config(&a.gen)?;
    allow(&kv, &[io::GENERATOR_KEYS])?;
    require_seed(&kv)?;
    let ds = io::generator_config(&kv)?.simulate()?;
    let mut buf = Vec::new();
    io::write_callback_csv_to(&ds, &mut buf)?;
    write_text(&String::from_utf8_lossy(&buf), a.output.as_deref())
}

fn run_experiment(a: ExperimentArgs) -> Result<()> {
    let mut kv = generator_config(&a.gen)?;
    set(&mut kv, "q_basis", a.q_basis.as_ref());
    set(&mut kv, "methods", a.methods.as_ref());
    set(&mut kv, "reps", a.reps);
    set(&mut kv, "level", a.level);
    set(&mut kv, "calibration", a.calibration.as_ref());
    set(&mut kv, "null_reps", a.null_reps);
    set(&mut kv, "epsilon", a.epsilon);
    set(&mut kv, "max_iter", a.max_iter);
    set(&mut kv, "starts", a.starts);
    require_seed(&kv)?;
    level(&kv)?;
    let mut cfg = io::experiment_config(&kv)?;
    if a.sequential {
        cfg.execution = Execution::Sequential;
    }
    emit(&sim::size_power_experiment(&cfg)?, &a.out)
}

fn run_bootstrap(a: BootstrapArgs) -> Result<()> {
    let mut kv = data_config(&a.data)?;
    spec_config(&mut kv, &a.spec);
    set(&mut kv, "bootstrap_b", a.bootstrap_b);
    set(&mut kv, "seed", a.seed);
    allow(&kv, &[DATA_KEYS, SPEC_KEYS, &["bootstrap_b", "seed"]])?;
    let seed = require_seed(&kv)?;
    let ds = read_input(&kv)?;
    let opts = elr_options(&kv)?;
    let spec = resolve_spec(&ds, &kv, &opts)?;
    let full = fit_full(&ds, &spec, &opts.em)?;
    let boot = BootstrapOptions {
        b: kv.parsed("bootstrap_b")?.unwrap_or(BootstrapOptions::default().b),
        seed,
        em: opts.em,
        ..BootstrapOptions::default()
    };
    emit(&sim::bootstrap_response_comparison(&ds, &full, &boot)?, &a.out)
}

fn run_categorize(a: CategorizeArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim().replace(' ', "") == "group,attempts,y" => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header 'group,attempts,y'".into(),
            })
        }
    }
    let mut rows = Vec::new();
    let mut raw = Vec::new();
    for (i, line) in lines {
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", cols.len())));
        }
        let attempts = match cols[1] {
            "" => None,
            s => Some(s.parse::<u32>().map_err(|e| bad(format!("attempts '{s}': {e}")))?),
        };
        raw.push(attempts);
        rows.push((cols[0].to_string(), cols[2].to_string()));
    }
    let d = sim::categorize_callbacks(&raw, a.cut, a.max_attempts)?;
    let mut out = String::from("group,d,y\n");
    for ((group, y), d) in rows.iter().zip(d) {
        out.push_str(&format!("{group},{d},{y}\n"));
    }
    // Reparse so malformed groups or outcomes surface here.
    io::parse_callback_csv(out.as_bytes(), Some(2))?;
    write_text(&out, a.output.as_deref())
}
