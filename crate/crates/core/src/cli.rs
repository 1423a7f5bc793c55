//! Run configuration, the pipelines behind the `lrqc` binary, and table output.
//!
//! A run is described by a TOML file and/or command-line flags; flags win. Every
//! mode produces a [`Table`] that is written as CSV or JSON with fixed column order.

use std::fmt::Write as _;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Deserialize;
use toml::Spanned;

use crate::bounds::{
    a_exact_profile, a_star_estimate, long_time_bound, lower_estimate_sweep, short_time_bound, spatial_correction,
    BoundMeta, BoundSeries, RegimeConstants,
};
use crate::error::{Error, Result};
use crate::lattice::ChainGeometry;
use crate::moments::{r2_image, MomentMatrix, R2Evolution};
use crate::montecarlo::{
    eta_mc_grid, light_cone_sweep, one_step_coefficients_mc, one_step_r2_check, twirl_estimate, DENSE_LIMIT,
};
use crate::operators::{model_constants, LocalOperator};
use crate::swapcalc::OverlapTable;
use crate::Time;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Bound,
    Short,
    Long,
    Mc,
    Check,
    Astar,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bound" => Ok(Mode::Bound),
            "short" => Ok(Mode::Short),
            "long" => Ok(Mode::Long),
            "mc" => Ok(Mode::Mc),
            "check" => Ok(Mode::Check),
            "astar" => Ok(Mode::Astar),
            other => Err(format!("unknown mode {other:?} (expected bound, short, long, mc, check or astar)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown output format {other:?} (expected csv or json)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QSelection {
    All,
    Sites(Vec<usize>),
}

/// Options of the check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub sites: Vec<usize>,
    /// Test hook: perturb the `∅` diagonal entry of `M` before the fixed-point check.
    pub corrupt_sink_diagonal: bool,
}

/// A validated run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub geom: ChainGeometry,
    pub op_p: LocalOperator,
    pub op_q: LocalOperator,
    pub p: usize,
    pub q: QSelection,
    pub times: Vec<Time>,
    pub n_samples: usize,
    pub master_seed: u64,
    pub output: Option<PathBuf>,
    pub format: Format,
    pub signed_axis: bool,
    pub meta: Option<PathBuf>,
    pub check: CheckOptions,
}

impl RunConfig {
    /// Probe sites for the run; `all` skips `p` where the mode needs `D >= 1`.
    pub fn probe_sites(&self) -> Vec<usize> {
        match &self.q {
            QSelection::Sites(s) => s.clone(),
            QSelection::All => {
                let skip_p = matches!(self.mode, Mode::Short | Mode::Long);
                (0..self.geom.sites()).filter(|&q| !(skip_p && q == self.p)).collect()
            }
        }
    }
}

// ---- file layer ----

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawTime {
    Step(u64),
    Word(String),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawQ {
    Word(String),
    Sites(Vec<usize>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    mode: Option<Spanned<String>>,
    geometry: Option<GeometrySection>,
    observables: Option<ObservablesSection>,
    time: Option<TimeSection>,
    sampling: Option<SamplingSection>,
    output: Option<OutputSection>,
    check: Option<CheckSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometrySection {
    sites: Option<Spanned<usize>>,
    local_dim: Option<Spanned<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservablesSection {
    p: Option<Spanned<usize>>,
    q: Option<Spanned<RawQ>>,
    op_p: Option<Spanned<Vec<[f64; 2]>>>,
    op_q: Option<Spanned<Vec<[f64; 2]>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometricSchedule {
    start: u64,
    stop: u64,
    count: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimeSection {
    points: Option<Spanned<Vec<RawTime>>>,
    geometric: Option<Spanned<GeometricSchedule>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplingSection {
    n_samples: Option<Spanned<usize>>,
    master_seed: Option<Spanned<u64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    path: Option<Spanned<PathBuf>>,
    format: Option<Spanned<String>>,
    signed_axis: Option<bool>,
    meta: Option<Spanned<PathBuf>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckSection {
    sites: Option<Spanned<Vec<usize>>>,
    corrupt_sink_diagonal: Option<bool>,
}

/// A value plus the config line it came from (`None` for flags and defaults).
#[derive(Debug, Clone)]
struct Sourced<T> {
    value: T,
    line: Option<usize>,
}

fn line_of(source: &str, span: Range<usize>) -> usize {
    source[..span.start.min(source.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn config_error<T>(line: Option<usize>, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Config(match line {
        Some(l) => format!("line {l}: {msg}"),
        None => msg.to_string(),
    }))
}

/// Command-line flags. Any flag given overrides the same setting in `--config`.
#[derive(Debug, Default, Parser)]
#[command(
    name = "lrqc",
    version,
    about = "Correlation bounds and Monte Carlo checks for local random quantum circuits"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// bound | short | long | mc | check | astar
    #[arg(long)]
    pub mode: Option<String>,
    /// Ring length L.
    #[arg(long)]
    pub sites: Option<usize>,
    /// Local dimension d.
    #[arg(long)]
    pub local_dim: Option<usize>,
    /// Site of O_p.
    #[arg(long)]
    pub p: Option<usize>,
    /// Probe sites: "all" or a comma-separated list.
    #[arg(long)]
    pub q: Option<String>,
    /// O_p as row-major entries "re" or "re:im", comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    pub op_p: Option<String>,
    /// O_q, same layout as --op-p.
    #[arg(long, allow_hyphen_values = true)]
    pub op_q: Option<String>,
    /// Time points, comma-separated; "inf" allowed in bound, short and long modes.
    #[arg(long)]
    pub t: Option<String>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// csv | json
    #[arg(long)]
    pub format: Option<String>,
    /// Report q as a signed offset from p instead of the ring distance.
    #[arg(long)]
    pub signed_axis: bool,
    /// Write the run constants to this JSON file.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Cap on worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

fn parse_time_word(word: &str, line: Option<usize>) -> Result<Time> {
    let w = word.trim();
    if w == "inf" {
        return Ok(Time::Infinite);
    }
    match w.parse::<u64>() {
        Ok(t) => Ok(Time::Steps(t)),
        Err(_) => config_error(line, format!("time point {w:?} is neither a non-negative integer nor \"inf\"")),
    }
}

fn parse_flag_entries(text: &str) -> Result<Vec<[f64; 2]>> {
    text.split(',')
        .map(|item| {
            let item = item.trim();
            let (re, im) = item.split_once(':').unwrap_or((item, "0"));
            match (re.trim().parse::<f64>(), im.trim().parse::<f64>()) {
                (Ok(re), Ok(im)) => Ok([re, im]),
                _ => config_error(None, format!("operator entry {item:?} is not \"re\" or \"re:im\"")),
            }
        })
        .collect()
}

fn parse_q(word: &str, line: Option<usize>) -> Result<QSelection> {
    if word.trim() == "all" {
        return Ok(QSelection::All);
    }
    word.split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(QSelection::Sites)
        .or_else(|_| config_error(line, format!("q must be \"all\" or a list of sites, got {word:?}")))
}

fn geometric_schedule(start: u64, stop: u64, count: usize, line: Option<usize>) -> Result<Vec<Time>> {
    if start == 0 || stop < start || count == 0 {
        return config_error(line, "geometric schedule needs 1 <= start <= stop and count >= 1");
    }
    if count == 1 {
        return Ok(vec![Time::Steps(start)]);
    }
    let ratio = (stop as f64 / start as f64).ln() / (count - 1) as f64;
    let mut out: Vec<u64> = (0..count).map(|k| (start as f64 * (ratio * k as f64).exp()).round() as u64).collect();
    out.dedup();
    Ok(out.into_iter().map(Time::Steps).collect())
}

fn build_operator(entries: &[[f64; 2]], d: usize, name: &str, line: Option<usize>) -> Result<LocalOperator> {
    if entries.len() != d * d {
        return config_error(line, format!("{name} has {} entries, a {d}x{d} matrix needs {}", entries.len(), d * d));
    }
    let pairs: Vec<(f64, f64)> = entries.iter().map(|e| (e[0], e[1])).collect();
    LocalOperator::from_row_major(d, &pairs).or_else(|e| config_error(line, format!("{name}: {e}")))
}

fn sourced<T>(value: T) -> Sourced<T> {
    Sourced { value, line: None }
}

fn from_file<T>(src: &str, field: Option<Spanned<T>>) -> Option<Sourced<T>> {
    field.map(|s| {
        let line = Some(line_of(src, s.span()));
        Sourced { value: s.into_inner(), line }
    })
}

/// Default operators: `diag(0.5, 0.3)` and `diag(0.7, 0.1)`.
fn default_entries(a: f64, b: f64) -> Vec<[f64; 2]> {
    vec![[a, 0.0], [0.0, 0.0], [0.0, 0.0], [b, 0.0]]
}

/// Merges the optional config file with flags and validates the result.
pub fn resolve(cli: &Cli, file_text: Option<&str>) -> Result<RunConfig> {
    let src = file_text.unwrap_or("");
    let file: FileConfig = match file_text {
        Some(text) => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        None => FileConfig::default(),
    };
    let geometry = file.geometry.unwrap_or_default();
    let observables = file.observables.unwrap_or_default();
    let time = file.time.unwrap_or_default();
    let sampling = file.sampling.unwrap_or_default();
    let output = file.output.unwrap_or_default();
    let check = file.check.unwrap_or_default();

    let mode_raw = cli.mode.clone().map(sourced).or_else(|| from_file(src, file.mode));
    let mode = match mode_raw {
        Some(m) => m.value.parse::<Mode>().or_else(|e| config_error(m.line, e))?,
        None => Mode::Bound,
    };

    let sites = cli.sites.map(sourced).or_else(|| from_file(src, geometry.sites)).unwrap_or(sourced(15));
    let local_dim = cli.local_dim.map(sourced).or_else(|| from_file(src, geometry.local_dim)).unwrap_or(sourced(2));
    let geom =
        ChainGeometry::new(sites.value, local_dim.value).or_else(|e| config_error(sites.line.or(local_dim.line), e))?;
    let d = geom.local_dim();

    let p = cli.p.map(sourced).or_else(|| from_file(src, observables.p)).unwrap_or(sourced(0));
    if p.value >= geom.sites() {
        return config_error(p.line, format!("p = {} outside ring of {} sites", p.value, geom.sites()));
    }

    let q = match &cli.q {
        Some(word) => parse_q(word, None)?,
        None => match from_file(src, observables.q) {
            Some(Sourced { value: RawQ::Word(w), line }) => parse_q(&w, line)?,
            Some(Sourced { value: RawQ::Sites(s), .. }) => QSelection::Sites(s),
            None => QSelection::All,
        },
    };
    if let QSelection::Sites(list) = &q {
        if list.is_empty() {
            return config_error(None, "q list is empty");
        }
        if let Some(bad) = list.iter().find(|&&s| s >= geom.sites()) {
            return config_error(None, format!("q = {bad} outside ring of {} sites", geom.sites()));
        }
        if matches!(mode, Mode::Short | Mode::Long) && list.contains(&p.value) {
            return config_error(None, "short and long modes need q != p (distance D >= 1)");
        }
    }

    let op_entries = |flag: &Option<String>, field: Option<Spanned<Vec<[f64; 2]>>>, default: Vec<[f64; 2]>| {
        Ok::<_, Error>(match flag {
            Some(text) => sourced(parse_flag_entries(text)?),
            None => from_file(src, field).unwrap_or(sourced(default)),
        })
    };
    let op_p_raw = op_entries(&cli.op_p, observables.op_p, default_entries(0.5, 0.3))?;
    let op_q_raw = op_entries(&cli.op_q, observables.op_q, default_entries(0.7, 0.1))?;
    let op_p = build_operator(&op_p_raw.value, d, "op_p", op_p_raw.line)?;
    let op_q = build_operator(&op_q_raw.value, d, "op_q", op_q_raw.line)?;

    let (times, times_line) = match &cli.t {
        Some(text) => {
            let ts = if text.trim().is_empty() {
                Vec::new()
            } else {
                text.split(',').map(|w| parse_time_word(w, None)).collect::<Result<Vec<_>>>()?
            };
            (ts, None)
        }
        None => {
            let points = from_file(src, time.points);
            let geometric = from_file(src, time.geometric);
            match (points, geometric) {
                (Some(_), Some(g)) => {
                    return config_error(g.line, "give either time.points or time.geometric, not both")
                }
                (Some(pts), None) => {
                    let ts = pts
                        .value
                        .iter()
                        .map(|raw| match raw {
                            RawTime::Step(t) => Ok(Time::Steps(*t)),
                            RawTime::Word(w) => parse_time_word(w, pts.line),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (ts, pts.line)
                }
                (None, Some(g)) => (geometric_schedule(g.value.start, g.value.stop, g.value.count, g.line)?, g.line),
                (None, None) => (Vec::new(), None),
            }
        }
    };
    if times.is_empty() && !matches!(mode, Mode::Check) {
        return config_error(times_line, "time list is empty; give at least one time point");
    }
    if matches!(mode, Mode::Mc | Mode::Astar) && times.contains(&Time::Infinite) {
        return config_error(times_line, "\"inf\" is only available in bound, short and long modes");
    }

    let n_samples = cli.n_samples.map(sourced).or_else(|| from_file(src, sampling.n_samples)).unwrap_or(sourced(2000));
    if matches!(mode, Mode::Mc | Mode::Check) && n_samples.value < 2 {
        return config_error(n_samples.line, format!("n_samples must be at least 2, got {}", n_samples.value));
    }
    let master_seed = cli.seed.or(sampling.master_seed.map(Spanned::into_inner)).unwrap_or(0);

    if mode == Mode::Mc && geom.hilbert_dim().is_none_or(|n| n > DENSE_LIMIT) {
        return config_error(
            sites.line,
            format!(
                "mc mode evolves dense d^L matrices and needs d^L <= {DENSE_LIMIT} (d={d}, L={}); \
                 reduce geometry.sites or use mode = \"bound\"",
                geom.sites()
            ),
        );
    }

    let format_raw = cli.format.clone().map(sourced).or_else(|| from_file(src, output.format));
    let format = match format_raw {
        Some(f) => f.value.parse::<Format>().or_else(|e| config_error(f.line, e))?,
        None => Format::Csv,
    };

    let check_sites = from_file(src, check.sites).map(|s| s.value).unwrap_or_else(|| vec![4, 5]);
    if let Some(&bad) = check_sites.iter().find(|&&l| {
        l < 3 || ChainGeometry::new(l, d).ok().and_then(|g| g.hilbert_dim()).is_none_or(|n| n > DENSE_LIMIT)
    }) {
        return config_error(None, format!("check.sites entry {bad} needs 3 <= L and d^L <= {DENSE_LIMIT}"));
    }

    Ok(RunConfig {
        mode,
        geom,
        op_p,
        op_q,
        p: p.value,
        q,
        times,
        n_samples: n_samples.value,
        master_seed,
        output: cli.output.clone().or(output.path.map(Spanned::into_inner)),
        format,
        signed_axis: cli.signed_axis || output.signed_axis.unwrap_or(false),
        meta: cli.meta.clone().or(output.meta.map(Spanned::into_inner)),
        check: CheckOptions { sites: check_sites, corrupt_sink_diagonal: check.corrupt_sink_diagonal.unwrap_or(false) },
    })
}

// ---- tables ----

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Time(Time),
    Bool(bool),
    Text(String),
    Empty,
}

/// Nine significant digits; scientific notation for magnitudes below `1e-4`.
pub fn format_number(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    if x.abs() < 1e-4 {
        return format!("{x:.8e}");
    }
    // exponent after rounding to nine significant digits
    let sci = format!("{x:.8e}");
    let exponent: i32 = sci[sci.find('e').expect("scientific format") + 1..].parse().expect("integer exponent");
    let decimals = (8 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) => format_number(*x),
            Cell::Time(t) => t.to_string(),
            Cell::Bool(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) if x.is_finite() => format_number(*x),
            Cell::Num(_) | Cell::Empty => "null".into(),
            Cell::Time(Time::Steps(t)) => t.to_string(),
            Cell::Time(Time::Infinite) => "\"inf\"".into(),
            Cell::Bool(b) => b.to_string(),
            Cell::Text(s) => serde_json::to_string(s).expect("string serializes"),
        }
    }
}

/// Rows under a fixed list of columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Table { columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&self.columns)?;
                for row in &self.rows {
                    w.write_record(row.iter().map(Cell::csv))?;
                }
                let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
                Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
            }
            Format::Json => {
                let mut out = String::from("[");
                for (k, row) in self.rows.iter().enumerate() {
                    out.push_str(if k == 0 { "\n  {" } else { ",\n  {" });
                    for (i, (col, cell)) in self.columns.iter().zip(row).enumerate() {
                        if i > 0 {
                            out.push_str(", ");
                        }
                        let _ = write!(out, "\"{col}\": {}", cell.json());
                    }
                    out.push('}');
                }
                out.push_str(if self.rows.is_empty() { "]\n" } else { "\n]\n" });
                Ok(out)
            }
        }
    }
}

fn uint(x: usize) -> Cell {
    Cell::Int(x as i64)
}

/// `q` as reported in the `D` column.
fn axis_value(cfg: &RunConfig, q: usize) -> Cell {
    let l = cfg.geom.sites();
    if cfg.signed_axis {
        let offset = (q + l - cfg.p) % l;
        let signed = if offset >= l.div_ceil(2) { offset as i64 - l as i64 } else { offset as i64 };
        Cell::Int(signed)
    } else {
        uint(cfg.geom.distance(cfg.p, q))
    }
}

fn prefix(cfg: &RunConfig, q: usize) -> Vec<Cell> {
    vec![uint(cfg.geom.sites()), uint(cfg.geom.local_dim()), uint(cfg.p), uint(q), axis_value(cfg, q)]
}

// ---- pipelines ----

pub fn cmd_bound(cfg: &RunConfig) -> Result<Table> {
    let qs = cfg.probe_sites();
    let series = BoundSeries::evaluate(&cfg.op_p, &cfg.op_q, &cfg.geom, cfg.p, &qs, &cfg.times)?;
    let mut table = Table::new(&["L", "d", "p", "q", "D", "t", "eta_max_scaled"]);
    for pt in &series.points {
        let mut row = prefix(cfg, pt.q);
        row.push(Cell::Time(pt.t));
        row.push(Cell::Num(pt.value));
        table.push(row);
    }
    Ok(table)
}

fn cmd_closed_form(cfg: &RunConfig, long: bool) -> Result<Table> {
    let consts = RegimeConstants::new(&cfg.op_p, &cfg.op_q, &cfg.geom)?;
    let model = model_constants(&cfg.op_p, &cfg.geom)?;
    let column = if long { "long_time_scaled" } else { "short_time_scaled" };
    let mut table = Table::new(&["L", "d", "p", "q", "D", "t", column, "in_regime"]);
    for &t in &cfg.times {
        for q in cfg.probe_sites() {
            let distance = cfg.geom.distance(cfg.p, q);
            let b = if long {
                long_time_bound(&consts, &model, &cfg.geom, distance, t)?
            } else {
                short_time_bound(&consts, &model, distance, t)?
            };
            let mut row = prefix(cfg, q);
            row.extend([Cell::Time(t), Cell::Num(b.value), Cell::Bool(b.in_regime)]);
            table.push(row);
        }
    }
    Ok(table)
}

pub fn cmd_short(cfg: &RunConfig) -> Result<Table> {
    cmd_closed_form(cfg, false)
}

pub fn cmd_long(cfg: &RunConfig) -> Result<Table> {
    cmd_closed_form(cfg, true)
}

fn finite_times(cfg: &RunConfig) -> Result<Vec<u64>> {
    cfg.times
        .iter()
        .map(|t| t.steps().ok_or_else(|| Error::InvalidArgument("\"inf\" is not a finite depth".into())))
        .collect()
}

pub fn cmd_mc(cfg: &RunConfig) -> Result<Table> {
    let times = finite_times(cfg)?;
    let qs = cfg.probe_sites();
    let points = eta_mc_grid(&cfg.op_p, &cfg.op_q, &cfg.geom, cfg.p, &qs, &times, cfg.n_samples, cfg.master_seed)?;
    let mut table = Table::new(&["L", "d", "p", "q", "D", "t", "eta_mc_scaled", "stderr", "n_samples", "master_seed"]);
    for pt in points {
        let mut row = prefix(cfg, pt.q);
        row.extend([
            Cell::Time(Time::Steps(pt.t)),
            Cell::Num(pt.estimate.mean),
            Cell::Num(pt.estimate.stderr),
            uint(pt.estimate.n_samples),
            Cell::Text(cfg.master_seed.to_string()),
        ]);
        table.push(row);
    }
    Ok(table)
}

pub fn cmd_astar(cfg: &RunConfig) -> Result<Table> {
    let model = model_constants(&cfg.op_p, &cfg.geom)?;
    let mut table = Table::new(&["L", "d", "D", "t", "a_star", "a_exact"]);
    for t in finite_times(cfg)? {
        let exact = if t >= 1 { a_exact_profile(&cfg.geom, cfg.p, t)? } else { vec![None; cfg.geom.sites()] };
        for (distance, a) in exact.iter().enumerate() {
            table.push(vec![
                uint(cfg.geom.sites()),
                uint(cfg.geom.local_dim()),
                uint(distance),
                Cell::Time(Time::Steps(t)),
                Cell::Num(a_star_estimate(&model, distance, Time::Steps(t))),
                a.map_or(Cell::Empty, Cell::Num),
            ]);
        }
    }
    Ok(table)
}

/// One line of the check report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        CheckResult { name: name.into(), passed: measured <= threshold, measured, threshold }
    }

    fn below(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        CheckResult { name: name.into(), passed: measured < threshold, measured, threshold }
    }
}

fn z_score(mean: f64, expect: f64, stderr: f64) -> f64 {
    let excess = ((mean - expect).abs() - 1e-12).max(0.0);
    if excess == 0.0 {
        0.0
    } else {
        excess / stderr
    }
}

fn fixed_point_defect(m: &MomentMatrix) -> f64 {
    let dim = m.dim();
    let mut worst: f64 = 0.0;
    for sink in [0, dim - 1] {
        let mut e = vec![0.0; dim];
        e[sink] = 1.0;
        let image = m.apply(&e);
        for (i, v) in image.iter().enumerate() {
            worst = worst.max((v - e[i]).abs());
        }
    }
    worst
}

fn trace_defect(cfg: &RunConfig, geom: &ChainGeometry, t_max: u64) -> Result<f64> {
    let m = MomentMatrix::build(geom);
    let model = model_constants(&cfg.op_p, geom)?;
    let mut evo = R2Evolution::new(&m, &cfg.op_p, 0)?;
    let mut worst: f64 = 0.0;
    for _ in 0..t_max {
        evo.step();
        let c = evo.coefficients();
        for (lhs, rhs) in [c.trace_balance(geom, &model), c.swap_trace_balance(geom, &model)] {
            worst = worst.max((lhs - rhs).abs() / rhs.abs());
        }
    }
    Ok(worst)
}

/// Runs every oracle on each ring length in `check.sites`.
pub fn run_checks(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let d = cfg.geom.local_dim();
    let n = cfg.n_samples;
    let seed = cfg.master_seed;
    let mut out = Vec::new();

    let tw = twirl_estimate(d, n, seed)?;
    out.push(CheckResult::below("twirl_identity_z", z_score(tw.identity.mean, tw.expected, tw.identity.stderr), 3.0));
    out.push(CheckResult::below("twirl_swap_z", z_score(tw.swap.mean, tw.expected, tw.swap.stderr), 3.0));
    if d.pow(4) <= DENSE_LIMIT {
        let rep = one_step_r2_check(&cfg.op_p, n, seed)?;
        out.push(CheckResult::below("one_edge_twirl_max_z", rep.max_z, 3.0));
        let proj = (rep.symmetric_weight.0 - rep.symmetric_weight.1)
            .abs()
            .max((rep.antisymmetric_weight.0 - rep.antisymmetric_weight.1).abs());
        out.push(CheckResult::at_most("one_edge_projector_weights", proj, 1e-10));
    }

    for &l in &cfg.check.sites {
        let geom = ChainGeometry::new(l, d)?;
        let mut m = MomentMatrix::build(&geom);
        if cfg.check.corrupt_sink_diagonal {
            m = m.perturbed(0, 0, -0.5);
        }
        out.push(CheckResult::at_most(format!("L{l}_sink_fixed_points"), fixed_point_defect(&m), 1e-15));

        let spectrum = m.sink_deleted().symmetric_eigen().eigenvalues;
        let hi = spectrum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
        out.push(CheckResult::below(format!("L{l}_reduced_spectral_radius"), hi, 1.0));
        out.push(CheckResult {
            name: format!("L{l}_reduced_spectrum_min"),
            passed: lo > 0.0,
            measured: lo,
            threshold: 0.0,
        });

        out.push(CheckResult::at_most(format!("L{l}_trace_preservation"), trace_defect(cfg, &geom, 200)?, 1e-9));

        let sweep = lower_estimate_sweep(&geom, 0, 60)?;
        out.push(CheckResult::at_most(format!("L{l}_binomial_lower_bound"), sweep.binomial_violation, 1e-12));
        out.push(CheckResult::at_most(format!("L{l}_a_star_lower_bound"), sweep.a_star_violation, 1e-12));

        if d.pow(4) <= DENSE_LIMIT {
            let checks = one_step_coefficients_mc(&cfg.op_p, &geom, 0, n, seed)?;
            let worst = checks
                .iter()
                .map(|c| (c.deviation() - 1e-10).max(0.0) / c.sampled.stderr.max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max);
            out.push(CheckResult::at_most(format!("L{l}_one_step_coefficients_z"), worst, 3.0));
        }

        // dominance of the exact bound over sampled commutator norms
        let qs: Vec<usize> = (1..l).collect();
        let times: Vec<u64> = (1..=30).collect();
        let mc = eta_mc_grid(&cfg.op_p, &cfg.op_q, &geom, 0, &qs, &times, n, seed)?;
        let exact_times: Vec<Time> = times.iter().map(|&t| Time::Steps(t)).collect();
        let exact = BoundSeries::evaluate(&cfg.op_p, &cfg.op_q, &geom, 0, &qs, &exact_times)?;
        let excess = mc
            .iter()
            .zip(&exact.points)
            .map(|(s, e)| s.estimate.mean - e.value - 3.0 * s.estimate.stderr)
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(CheckResult::at_most(format!("L{l}_dominance_excess"), excess, 0.0));

        // light cone: sampled circuits and the exact correction
        let q = l / 2;
        let t = q.saturating_sub(1).max(1);
        let lc = light_cone_sweep(&cfg.op_p, &cfg.op_q, &geom, 0, q, t, n, seed)?;
        out.push(CheckResult::below(format!("L{l}_light_cone_sampled"), lc.max_disconnected_norm, 1e-12));
        let mut corr: f64 = 0.0;
        for tt in 0..geom.distance(0, q) as u64 {
            let coeffs = r2_image(&cfg.op_p, &geom, 0, Time::Steps(tt))?;
            let table = OverlapTable::new(&geom, q, &cfg.op_q)?;
            corr = corr.max(spatial_correction(&geom, &coeffs, &table).abs());
        }
        out.push(CheckResult::at_most(format!("L{l}_light_cone_exact"), corr, 0.0));
    }
    Ok(out)
}

pub fn check_table(results: &[CheckResult]) -> Table {
    let mut table = Table::new(&["name", "status", "measured", "threshold"]);
    for r in results {
        table.push(vec![
            Cell::Text(r.name.clone()),
            Cell::Text(if r.passed { "pass" } else { "fail" }.into()),
            Cell::Num(r.measured),
            Cell::Num(r.threshold),
        ]);
    }
    table
}

pub fn meta_json(cfg: &RunConfig) -> Result<String> {
    let meta = BoundMeta::new(&cfg.op_p, &cfg.op_q, &cfg.geom)?;
    let mut value = serde_json::to_value(meta)?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("L".into(), cfg.geom.sites().into());
        map.insert("d".into(), cfg.geom.local_dim().into());
        map.insert("p".into(), cfg.p.into());
    }
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

/// Process exit status of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChecksFailed,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::ChecksFailed => 2,
        }
    }
}

fn emit(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.output {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    let (table, outcome) = match cfg.mode {
        Mode::Bound => (cmd_bound(cfg)?, Outcome::Success),
        Mode::Short => (cmd_short(cfg)?, Outcome::Success),
        Mode::Long => (cmd_long(cfg)?, Outcome::Success),
        Mode::Mc => (cmd_mc(cfg)?, Outcome::Success),
        Mode::Astar => (cmd_astar(cfg)?, Outcome::Success),
        Mode::Check => {
            let results = run_checks(cfg)?;
            let outcome = if results.iter().all(|r| r.passed) { Outcome::Success } else { Outcome::ChecksFailed };
            (check_table(&results), outcome)
        }
    };
    emit(cfg, &table.render(cfg.format)?)?;
    if let Some(path) = &cfg.meta {
        std::fs::write(path, meta_json(cfg)?)?;
    }
    Ok(outcome)
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

/// Entry point shared by the binary and the tests; returns the exit status.
pub fn run(cli: &Cli) -> i32 {
    if let Some(threads) = cli.threads {
        // a second call in the same process keeps the first pool, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    let result = cli
        .config
        .as_deref()
        .map(read_config)
        .transpose()
        .and_then(|text| resolve(cli, text.as_deref()))
        .and_then(|cfg| execute(&cfg));
    match result {
        Ok(outcome) => outcome.code(),
        Err(e) => {
            eprintln!("lrqc: {e}");
            1
        }
    }
}
