//! File formats: callback CSV, key-value configs, and result rendering as
//! JSON, aligned tables or CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::data::{
    Basis, CallbackDataset, CallbackUnit, ConstraintResiduals, DrmParams, FittedModel, Group, ModelSpec,
    ResponseParams, TestResult,
};
use crate::drm::{self, PooledSupport};
use crate::elr::BicSelection;
use crate::em::EmOptions;
use crate::error::{Error, Result};
use crate::sim::{BootstrapReport, Calibration, ExperimentConfig, ExperimentReport, Family, GeneratorConfig, Method};

// ---------------------------------------------------------------------------
// Callback CSV

/// Parses `group,d,y` rows. `m` is taken from `m_override` when given;
/// otherwise it is the largest d minus one if any row lacks an outcome, and
/// the largest d if every unit responded.
pub fn parse_callback_csv<R: Read>(reader: R, m_override: Option<u32>) -> Result<CallbackDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    if header != ["group", "d", "y"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header 'group,d,y', found '{}'", header.join(",")),
        });
    }
    let mut rows: Vec<(usize, Group, u32, Option<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| Error::Parse { line, msg };
        if rec.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", rec.len())));
        }
        let group = match &rec[0] {
            "0" => Group::Zero,
            "1" => Group::One,
            g => return Err(err(format!("group must be 0 or 1, found '{g}'"))),
        };
        let d: u32 = rec[1]
            .parse()
            .map_err(|_| err(format!("d must be a positive integer, found '{}'", &rec[1])))?;
        if d == 0 {
            return Err(err("d must be a positive integer, found '0'".into()));
        }
        let y = match &rec[2] {
            "" => None,
            s => {
                let v: f64 = s.parse().map_err(|_| err(format!("y must be numeric, found '{s}'")))?;
                if !v.is_finite() {
                    return Err(err(format!("y must be finite, found '{s}'")));
                }
                Some(v)
            }
        };
        rows.push((line, group, d, y));
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("no data rows".into()));
    }
    let max_d = rows.iter().map(|r| r.2).max().unwrap_or(1);
    let m = match m_override {
        Some(m) => m,
        None if rows.iter().any(|r| r.3.is_none()) => max_d - 1,
        None => max_d,
    };
    if m < 1 {
        return Err(Error::InvalidData("m must be at least 1".into()));
    }
    let mut units = Vec::with_capacity(rows.len());
    for (line, group, d, y) in rows {
        let err = |msg: &str| Error::Parse { line, msg: msg.into() };
        let unit = match (d, y) {
            (d, _) if d > m + 1 => return Err(err(&format!("d = {d} exceeds m + 1 = {}", m + 1))),
            (d, Some(_)) if d == m + 1 => return Err(err("outcome present for nonrespondent")),
            (d, None) if d <= m => return Err(err("missing outcome for respondent")),
            (d, Some(y)) => CallbackUnit::respondent(group, d, y),
            (_, None) => CallbackUnit::nonrespondent(group, m),
        };
        units.push(unit);
    }
    Ok(CallbackDataset::new(units, m))
}

pub fn read_callback_csv(path: &Path, m_override: Option<u32>) -> Result<CallbackDataset> {
    parse_callback_csv(fs::File::open(path)?, m_override)
}

/// Writes `group,d,y` with shortest round-trip float formatting.
pub fn write_callback_csv_to<W: Write>(dataset: &CallbackDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "d", "y"])?;
    for u in &dataset.units {
        let y = u.y.map(|y| format!("{y:?}")).unwrap_or_default();
        w.write_record([u.group.index().to_string(), u.d.to_string(), y])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_callback_csv(dataset: &CallbackDataset, path: &Path) -> Result<()> {
    write_callback_csv_to(dataset, fs::File::create(path)?)
}

// ---------------------------------------------------------------------------
// JSON

/// Pretty JSON with every float printed to 17 significant digits.
struct SeventeenDigits<'a>(PrettyFormatter<'a>);

impl Formatter for SeventeenDigits<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_array(writer)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array(writer)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(writer, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array_value(writer)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object(writer)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object(writer)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(writer, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object_value(writer)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_value(writer)
    }
}

/// Deterministic JSON: struct field order, 17 significant digits, trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

// ---------------------------------------------------------------------------
// Tables

/// Four decimals, or scientific notation for small nonzero magnitudes.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else if v.is_infinite() {
        if v > 0.0 { "Inf".into() } else { "-Inf".into() }
    } else if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), fmt_num)
}

/// Left-aligned first column, right-aligned numeric columns.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let mut parts = Vec::new();
        for (i, c) in cells.enumerate() {
            if i == 0 {
                parts.push(format!("{c:<w$}", w = widths[0]));
            } else {
                parts.push(format!("{c:>w$}", w = widths[i]));
            }
        }
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &mut header.iter().copied());
    let total: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
    let _ = writeln!(out, "{}", "-".repeat(total));
    for row in rows {
        line(&mut out, &mut row.iter().map(String::as_str));
    }
    out
}

fn render_csv(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv emits UTF-8"))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Json,
    Table,
    Csv,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "table" | "text" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            _ => Err(Error::Config(format!("unknown format '{s}'"))),
        }
    }
}

/// A result that can be rendered in every output format.
pub trait Report: Serialize {
    fn header(&self) -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;
    /// Lines printed under the table.
    fn notes(&self) -> Vec<String> {
        Vec::new()
    }
}

pub fn render<R: Report + ?Sized>(result: &R, format: Format) -> Result<String> {
    match format {
        Format::Json => to_json(result),
        Format::Csv => render_csv(&result.header(), &result.rows()),
        Format::Table => {
            let mut out = render_table(&result.header(), &result.rows());
            for n in result.notes() {
                let _ = writeln!(out, "{n}");
            }
            Ok(out)
        }
    }
}

/// Renders `result` into `path`.
pub fn write_results<R: Report + ?Sized>(result: &R, path: &Path, format: Format) -> Result<()> {
    fs::write(path, render(result, format)?)?;
    Ok(())
}

/// Results of several homogeneity tests on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TestReport {
    pub spec: ModelSpec,
    pub level: f64,
    pub tests: Vec<TestResult>,
}

impl Report for TestReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["method", "statistic", "df", "p_value", "reject"]
    }
    fn rows(&self) -> Vec<Vec<String>> {
        self.tests
            .iter()
            .map(|t| {
                vec![
                    t.method.clone(),
                    fmt_num(t.statistic),
                    fmt_opt(t.df),
                    fmt_num(t.p_value),
                    (t.p_value <= self.level).to_string(),
                ]
            })
            .collect()
    }
    fn notes(&self) -> Vec<String> {
        self.tests
            .iter()
            .flat_map(|t| t.warnings.iter().map(move |w| format!("warning ({}): {w}", t.method)))
            .collect()
    }
}

impl Report for ExperimentReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["method", "rate", "rejections", "successes", "failures", "critical_p"]
    }
    fn rows(&self) -> Vec<Vec<String>> {
        self.methods
            .iter()
            .map(|s| {
                vec![
                    s.method.to_string(),
                    fmt_opt(s.rejection_rate),
                    s.rejections.to_string(),
                    s.successes.to_string(),
                    s.failures.to_string(),
                    fmt_opt(s.critical_p_value),
                ]
            })
            .collect()
    }
    fn notes(&self) -> Vec<String> {
        vec![format!(
            "{}, N0={} N1={}, q={}, {} reps, level {}, {} calibration, {:.1}s on {} thread(s)",
            self.design,
            self.n0,
            self.n1,
            self.q_basis,
            self.reps,
            self.level,
            self.calibration,
            self.runtime.seconds,
            self.runtime.threads
        )]
    }
}

impl Report for BicSelection {
    fn header(&self) -> Vec<&'static str> {
        vec!["r", "q", "k", "log_el", "bic", "selected"]
    }
    fn rows(&self) -> Vec<Vec<String>> {
        self.cells
            .iter()
            .map(|c| {
                let chosen = c.r_basis == self.selected.r_basis && c.q_basis == self.selected.q_basis;
                vec![
                    c.r_basis.to_string(),
                    c.q_basis.to_string(),
                    c.k.to_string(),
                    fmt_opt(c.log_el),
                    c.bic.map_or_else(|| "failed".into(), fmt_num),
                    if chosen { "*".into() } else { String::new() },
                ]
            })
            .collect()
    }
    fn notes(&self) -> Vec<String> {
        let mut notes = vec!["k = dim q + 2 (m + dim r); BIC = -2 log-EL + k log N".to_string()];
        notes.extend(self.warnings.iter().map(|w| format!("warning: {w}")));
        notes
    }
}

impl Report for BootstrapReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["component", "estimate", "se", "p_value"]
    }
    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    format!("{} (0 - 1)", r.component),
                    fmt_num(r.estimate),
                    fmt_num(r.se),
                    fmt_num(r.p_value),
                ]
            })
            .collect()
    }
    fn notes(&self) -> Vec<String> {
        let mut notes = vec![format!("{} of {} bootstrap refits succeeded", self.succeeded, self.requested)];
        notes.extend(self.warnings.iter().map(|w| format!("warning: {w}")));
        notes
    }
}

/// Parameter estimates and constraint residuals of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FitSummary {
    pub null_restricted: bool,
    pub theta: DrmParams,
    pub phi0: ResponseParams,
    pub phi1: ResponseParams,
    pub eta0: f64,
    pub eta1: f64,
    pub log_el: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(flatten)]
    pub residuals: ConstraintResiduals,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub messages: Vec<String>,
}

impl From<&FittedModel> for FitSummary {
    fn from(f: &FittedModel) -> Self {
        Self {
            null_restricted: f.null_restricted,
            theta: f.theta.clone(),
            phi0: f.phi0.clone(),
            phi1: f.phi1.clone(),
            eta0: f.eta0,
            eta1: f.eta1,
            log_el: f.log_el,
            iterations: f.iterations,
            converged: f.converged,
            residuals: f.diagnostics.residuals,
            messages: f.diagnostics.messages.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FitDump {
    pub spec: ModelSpec,
    pub fits: Vec<FitSummary>,
}

impl Report for FitDump {
    fn header(&self) -> Vec<&'static str> {
        vec!["parameter", "value"]
    }
    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for f in &self.fits {
            let tag = if f.null_restricted { "null" } else { "full" };
            let mut push = |name: String, v: f64| rows.push(vec![format!("{tag}.{name}"), fmt_num(v)]);
            for (j, t) in f.theta.to_vec().iter().enumerate() {
                push(format!("theta_{j}"), *t);
            }
            for (g, phi) in [(0, &f.phi0), (1, &f.phi1)] {
                for (label, v) in phi.labels().iter().zip(phi.to_vec()) {
                    push(format!("phi{g}.{label}"), v);
                }
            }
            push("eta0".into(), f.eta0);
            push("eta1".into(), f.eta1);
            push("log_el".into(), f.log_el);
            push("c1_sum".into(), f.residuals.c1_sum);
            push("c1_tilted_sum".into(), f.residuals.c1_tilted_sum);
            push("c2_eta0".into(), f.residuals.c2_eta0);
            push("c2_eta1".into(), f.residuals.c2_eta1);
            rows.push(vec![format!("{tag}.iterations"), f.iterations.to_string()]);
            rows.push(vec![format!("{tag}.converged"), f.converged.to_string()]);
        }
        rows
    }
    fn notes(&self) -> Vec<String> {
        self.fits
            .iter()
            .flat_map(|f| f.messages.iter().map(|m| format!("note: {m}")))
            .collect()
    }
}

/// Step-function CSV of the fitted F0 and F1: columns `y,F0,F1`.
pub fn cdf_csv(dataset: &CallbackDataset, fit: &FittedModel) -> Result<String> {
    let support = PooledSupport::from_dataset(dataset, fit.spec.q_basis)?;
    if support.len() != fit.masses.len() {
        return Err(Error::MismatchedFits);
    }
    let (f0, f1) = drm::cdf_estimates(&fit.masses, &fit.theta, &support);
    let rows: Vec<Vec<String>> = f0
        .points
        .iter()
        .zip(&f0.values)
        .map(|(&y, &v0)| vec![format!("{y:?}"), format!("{v0:.16e}"), format!("{:.16e}", f1.eval(y))])
        .collect();
    render_csv(&["y", "F0", "F1"], &rows)
}

// ---------------------------------------------------------------------------
// Key-value configuration

/// `key = value` pairs; `#` starts a comment. Later inserts override earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected 'key = value', found '{line}'"),
            })?;
            let key = normalize_key(k);
            if kv.entries.contains_key(&key) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key '{key}'"),
                });
            }
            kv.entries.insert(key, v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(normalize_key(key), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(&normalize_key(key)).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parsed value of `key`, if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| Error::Config(format!("bad value '{s}' for {key}: {e}")))
            })
            .transpose()
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !allowed.contains(&k) {
                return Err(Error::Config(format!("unknown configuration key '{k}'")));
            }
        }
        Ok(())
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('-', "_")
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| Error::Config(format!("bad {what} '{p}': {e}"))))
        .collect()
}

pub const GENERATOR_KEYS: &[&str] = &["f0", "f1", "phi0", "phi1", "r_basis", "m", "n", "n0", "n1", "seed"];
pub const EXPERIMENT_KEYS: &[&str] = &[
    "q_basis",
    "methods",
    "reps",
    "level",
    "calibration",
    "null_reps",
    "epsilon",
    "max_iter",
    "starts",
];

/// Generator from keys `f0, f1, phi0, phi1, r_basis, m, n | n0, n1, seed`.
/// Unspecified response parameters default to the two-callback log design.
pub fn generator_config(kv: &KeyValues) -> Result<GeneratorConfig> {
    let f0: Family = kv.parsed("f0")?.ok_or_else(|| Error::Config("f0 is required".into()))?;
    let f1: Family = kv.parsed("f1")?.unwrap_or(f0);
    let seed: u64 = kv
        .parsed("seed")?
        .ok_or_else(|| Error::Config("seed is required for simulation".into()))?;
    let n: Option<usize> = kv.parsed("n")?;
    let mut g = GeneratorConfig::reference_design(f0, f1, n.unwrap_or(500), seed);
    if let Some(n0) = kv.parsed("n0")? {
        g.n0 = n0;
    }
    if let Some(n1) = kv.parsed("n1")? {
        g.n1 = n1;
    }
    if let Some(r) = kv.parsed::<Basis>("r_basis")? {
        g.r_basis = r;
    }
    if let Some(m) = kv.parsed::<u32>("m")? {
        g.m = m;
    }
    let dim_r = g.r_basis.dim();
    for (key, slot) in [("phi0", &mut g.phi0), ("phi1", &mut g.phi1)] {
        if let Some(s) = kv.get(key) {
            let v: Vec<f64> = parse_list(s, key)?;
            if v.len() != g.m as usize + dim_r {
                return Err(Error::Config(format!("{key} needs {} values", g.m as usize + dim_r)));
            }
            *slot = ResponseParams::from_slice(&v, g.m as usize);
        }
    }
    g.validate()?;
    Ok(g)
}

pub fn em_options(kv: &KeyValues) -> Result<EmOptions> {
    let mut em = EmOptions::default();
    if let Some(e) = kv.parsed::<f64>("epsilon")? {
        if e.is_nan() || e <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        em.epsilon = e;
    }
    if let Some(i) = kv.parsed("max_iter")? {
        em.max_iter = i;
    }
    if let Some(s) = kv.parsed::<usize>("starts")? {
        em.starts = s.max(1);
    }
    if let Some(seed) = kv.parsed("seed")? {
        em.seed = seed;
    }
    Ok(em)
}

/// Experiment from generator keys plus `q_basis, methods, reps, level,
/// calibration, null_reps, epsilon, max_iter, starts`.
pub fn experiment_config(kv: &KeyValues) -> Result<ExperimentConfig> {
    let mut allowed = GENERATOR_KEYS.to_vec();
    allowed.extend_from_slice(EXPERIMENT_KEYS);
    kv.check_keys(&allowed)?;
    let g = generator_config(kv)?;
    let mut cfg = ExperimentConfig::new(g, kv.parsed("reps")?.unwrap_or(500));
    if let Some(q) = kv.parsed("q_basis")? {
        cfg.q_basis = q;
    }
    if let Some(s) = kv.get("methods") {
        cfg.methods = parse_list::<Method>(s, "method")?;
    }
    if let Some(l) = kv.parsed("level")? {
        cfg.level = l;
    }
    if let Some(c) = kv.parsed::<Calibration>("calibration")? {
        cfg.calibration = c;
    }
    cfg.null_reps = kv.parsed("null_reps")?;
    cfg.em = em_options(kv)?;
    cfg.validate()?;
    Ok(cfg)
}
