//! Benchmarks over example sets, distortion / success-rate curves and their
//! CSV / JSON rendering.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{attack, AttackConfig, AttackError, ControllerConfig, LogRecord, RunLog, RunSummary, Start, StartConfig, StartRecord};
use crate::dsl::TacProgram;
use crate::oracle::{Example, Oracle, OracleError};
use crate::rng::{stream, tag};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("{program} on example {example}: {error}")]
    Attack { program: String, example: usize, error: AttackError },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Median,
    Mean,
}

impl std::str::FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "median" => Ok(Aggregate::Median),
            "mean" => Ok(Aggregate::Mean),
            _ => Err(format!("expected median or mean, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Queries per run, starting-point search included.
    pub budget: u64,
    pub epsilon: f64,
    pub aggregate: Aggregate,
    pub checkpoints: Vec<u64>,
    pub adapt: bool,
    pub seed: u64,
    pub workers: usize,
    pub start: StartConfig,
    pub controller: ControllerConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            budget: 20_000,
            epsilon: 1.0,
            aggregate: Aggregate::Median,
            checkpoints: vec![2_000, 4_000, 20_000],
            adapt: true,
            seed: 0,
            workers: 1,
            start: StartConfig::default(),
            controller: ControllerConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), ReportError> {
        if !(self.epsilon > 0.0) {
            return Err(ReportError::Config("epsilon must be positive".into()));
        }
        if self.workers == 0 {
            return Err(ReportError::Config("workers must be at least 1".into()));
        }
        self.controller.validate().map_err(|e| ReportError::Config(e.to_string()))
    }
}

/// All runs of one program.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramRuns {
    pub name: String,
    /// Indices of examples already adversarial before any query.
    pub excluded: Vec<usize>,
    /// `(example index, log)` for every included example.
    pub logs: Vec<(usize, RunLog)>,
}

/// Attacks every example with every program. Runs for the same example
/// share their random stream, so programs see the same starting point and
/// noise draws.
pub fn benchmark(
    programs: &[(String, TacProgram)],
    oracle: &Oracle,
    examples: &[Example],
    cfg: &BenchConfig,
) -> Result<Vec<ProgramRuns>, ReportError> {
    cfg.validate()?;
    let mut excluded = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        if oracle.peek(&e.x0)? {
            excluded.push(i);
        }
    }
    let included: Vec<usize> = (0..examples.len()).filter(|i| !excluded.contains(i)).collect();
    let attack_cfg = AttackConfig { adapt: cfg.adapt, controller: cfg.controller.clone(), ..AttackConfig::with_query_budget(cfg.budget) };
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| ReportError::Config(e.to_string()))?;
    let pairs: Vec<(usize, usize)> =
        (0..programs.len()).flat_map(|p| included.iter().map(move |&e| (p, e))).collect();
    let logs = threads.install(|| {
        pairs
            .par_iter()
            .map(|&(p, i)| {
                let e = &examples[i];
                let mut rng = stream(cfg.seed, &[tag::BENCH, i as u64]);
                let start = Start::Search { fallback: &e.fallback, cfg: cfg.start.clone() };
                attack(&programs[p].1, oracle, &e.x0, None, start, &attack_cfg, &mut rng).map_err(|f| {
                    ReportError::Attack { program: programs[p].0.clone(), example: i, error: f.error }
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut logs = logs.into_iter();
    Ok(programs
        .iter()
        .map(|(name, _)| ProgramRuns {
            name: name.clone(),
            excluded: excluded.clone(),
            logs: included.iter().map(|&i| (i, logs.next().expect("one log per pair"))).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub queries: u64,
    /// Aggregated best distance; infinite while some run has no starting
    /// point yet and the aggregate depends on it.
    pub distortion: f64,
    pub success_rate: f64,
}

/// Right-continuous step functions of the query count, with one point per
/// query count at which any run changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    /// Value at the greatest recorded query count `<= q`.
    pub fn at(&self, q: u64) -> Option<&CurvePoint> {
        let idx = self.points.partition_point(|p| p.queries <= q);
        idx.checked_sub(1).map(|i| &self.points[i])
    }
}

fn aggregate(values: &mut [f64], how: Aggregate) -> f64 {
    match how {
        Aggregate::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregate::Median => {
            values.sort_by(f64::total_cmp);
            let n = values.len();
            if n % 2 == 1 {
                values[n / 2]
            } else {
                (values[n / 2 - 1] + values[n / 2]) / 2.0
            }
        }
    }
}

pub fn curve(name: &str, logs: &[RunLog], epsilon: f64, how: Aggregate) -> Curve {
    let mut qs: Vec<u64> = logs
        .iter()
        .flat_map(|l| l.start.iter().map(|s| s.queries).chain(l.updates.iter().map(|u| u.q)))
        .collect();
    qs.sort_unstable();
    qs.dedup();
    let mut buf = Vec::with_capacity(logs.len());
    let points = qs
        .into_iter()
        .map(|q| {
            buf.clear();
            buf.extend(logs.iter().map(|l| l.distance_at(q).unwrap_or(f64::INFINITY)));
            let success = buf.iter().filter(|&&d| d < epsilon).count() as f64 / logs.len() as f64;
            CurvePoint { queries: q, distortion: aggregate(&mut buf, how), success_rate: success }
        })
        .collect();
    Curve { name: name.to_string(), points }
}

/// Data floats use 17 significant digits.
pub fn format_data_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn curve_csv(c: &Curve) -> String {
    let mut out = String::from("queries,median_distortion,success_rate\n");
    for p in &c.points {
        writeln!(out, "{},{},{}", p.queries, format_data_float(p.distortion), format_data_float(p.success_rate)).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointValue {
    pub queries: u64,
    pub success_rate: f64,
    pub distortion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramSummary {
    pub name: String,
    pub runs: usize,
    pub excluded: Vec<usize>,
    pub checkpoints: Vec<CheckpointValue>,
}

pub fn checkpoints(c: &Curve, at: &[u64]) -> Vec<CheckpointValue> {
    at.iter()
        .map(|&q| match c.at(q) {
            Some(p) => CheckpointValue {
                queries: q,
                success_rate: p.success_rate,
                distortion: p.distortion.is_finite().then_some(p.distortion),
            },
            None => CheckpointValue { queries: q, success_rate: 0.0, distortion: None },
        })
        .collect()
}

/// Writes `<name>.csv` per curve and `summary.json`.
pub fn emit_reports(
    dir: &Path,
    curves: &[(Curve, ProgramSummary)],
) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    for (c, _) in curves {
        fs::write(dir.join(format!("{}.csv", c.name)), curve_csv(c))?;
    }
    let summary: Vec<&ProgramSummary> = curves.iter().map(|(_, s)| s).collect();
    let mut text = serde_json::to_string_pretty(&summary).map_err(io::Error::from)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    Ok(())
}

/// Curves and summaries for benchmark results.
pub fn summarize(runs: &[ProgramRuns], cfg: &BenchConfig) -> Vec<(Curve, ProgramSummary)> {
    runs.iter()
        .map(|r| {
            let logs: Vec<RunLog> = r.logs.iter().map(|(_, l)| l.clone()).collect();
            let c = curve(&r.name, &logs, cfg.epsilon, cfg.aggregate);
            let s = ProgramSummary {
                name: r.name.clone(),
                runs: logs.len(),
                excluded: r.excluded.clone(),
                checkpoints: checkpoints(&c, &cfg.checkpoints),
            };
            (c, s)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// RunLog persistence

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: SummaryBody,
}

#[derive(Serialize, Deserialize)]
struct SummaryBody {
    start: Option<StartRecord>,
    #[serde(flatten)]
    run: RunSummary,
}

/// One `{"q", "d"}` line per accepted update, then a `{"summary": ...}`
/// line that also carries the starting point record.
pub fn write_run_log(mut w: impl Write, log: &RunLog) -> io::Result<()> {
    for u in &log.updates {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    let line = SummaryLine { summary: SummaryBody { start: log.start.clone(), run: log.summary.clone() } };
    serde_json::to_writer(&mut w, &line)?;
    w.write_all(b"\n")
}

pub fn read_run_log(r: impl BufRead, path: &str) -> Result<RunLog, ReportError> {
    let mut updates = Vec::new();
    let mut summary = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| ReportError::Format { path: path.to_string(), line: i + 1, msg };
        if summary.is_some() {
            return Err(err("content after summary record".into()));
        }
        if line.contains("\"summary\"") {
            let s: SummaryLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            summary = Some(s.summary);
        } else {
            let u: LogRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            updates.push(u);
        }
    }
    let s = summary.ok_or_else(|| ReportError::Format { path: path.to_string(), line: 0, msg: "missing summary record".into() })?;
    Ok(RunLog { start: s.start, updates, summary: s.run })
}

/// Persists runs as `<dir>/<program>/<example>.jsonl`.
pub fn save_runs(dir: &Path, runs: &[ProgramRuns]) -> Result<(), ReportError> {
    for r in runs {
        let sub = dir.join(&r.name);
        fs::create_dir_all(&sub)?;
        for (i, log) in &r.logs {
            let mut f = io::BufWriter::new(fs::File::create(sub.join(format!("{i:05}.jsonl")))?);
            write_run_log(&mut f, log)?;
            f.flush()?;
        }
        let mut excluded = serde_json::to_string(&r.excluded).map_err(io::Error::from)?;
        excluded.push('\n');
        fs::write(sub.join("excluded.json"), excluded)?;
    }
    Ok(())
}

/// Inverse of [`save_runs`]; programs are returned in name order.
pub fn load_runs(dir: &Path) -> Result<Vec<ProgramRuns>, ReportError> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let sub = dir.join(&name);
        let mut files: Vec<_> = fs::read_dir(&sub)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        let mut logs = Vec::new();
        for f in files {
            let stem = f.file_stem().unwrap().to_string_lossy();
            let i: usize = stem.parse().map_err(|_| ReportError::Format {
                path: f.display().to_string(),
                line: 0,
                msg: "file name is not an example index".into(),
            })?;
            let log = read_run_log(BufReader::new(fs::File::open(&f)?), &f.display().to_string())?;
            logs.push((i, log));
        }
        let excluded = match fs::read_to_string(sub.join("excluded.json")) {
            Ok(t) => serde_json::from_str(&t).map_err(|e| ReportError::Format {
                path: sub.join("excluded.json").display().to_string(),
                line: 1,
                msg: e.to_string(),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        out.push(ProgramRuns { name, excluded, logs });
    }
    Ok(out)
}
