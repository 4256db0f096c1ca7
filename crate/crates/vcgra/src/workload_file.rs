// SPDX-License-Identifier: Apache-2.0

//! Workload files, version 1.
//!
//! ```text
//! # vcgra-workload v1
//! # seed = 42
//! # provenance = ga generation=7 fitness=31.25
//! # grid = 4x4
//! kind,h,w,it_total,cycles_per_iter,bw_demand,tcdm_bytes,restartable,arrival_offset
//! gemm,2,2,16384,16,0.3,65536,true,0
//! ```
//!
//! The first line is fixed. Header lines are `# key = value`; `seed`,
//! `provenance` (`manual`, `random`, or `ga generation=N fitness=X`) and
//! `grid` are required, unknown keys are rejected. Records follow as CSV
//! with the column header shown. Kernel ids are the record index, starting
//! at zero. At least one record is required.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vcgra_core::{Job, KernelId, KernelSpec, Provenance, Workload};

pub const MAGIC: &str = "# vcgra-workload v1";
pub const COLUMNS: [&str; 9] =
    ["kind", "h", "w", "it_total", "cycles_per_iter", "bw_demand", "tcdm_bytes", "restartable", "arrival_offset"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    /// 1-based line in the file.
    pub line: usize,
    pub field: Option<String>,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, field: Option<&str>, message: impl Into<String>) -> Self {
        Self { line, field: field.map(str::to_string), message: message.into() }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "line {}, field `{}`: {}", self.line, field, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, thiserror::Error)]
pub enum WorkloadFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: ParseError },
    #[error("cannot write workload: {0}")]
    Unwritable(String),
}

#[derive(Serialize, Deserialize)]
struct Record {
    kind: String,
    h: usize,
    w: usize,
    it_total: u64,
    cycles_per_iter: u64,
    bw_demand: f64,
    tcdm_bytes: u64,
    restartable: bool,
    arrival_offset: u64,
}

fn format_provenance(p: &Provenance) -> String {
    match p {
        Provenance::Manual => "manual".into(),
        Provenance::Random => "random".into(),
        Provenance::Ga { generation, fitness } => format!("ga generation={generation} fitness={fitness}"),
    }
}

fn parse_provenance(s: &str) -> Option<Provenance> {
    match s {
        "manual" => return Some(Provenance::Manual),
        "random" => return Some(Provenance::Random),
        _ => {}
    }
    let mut parts = s.split_whitespace();
    if parts.next() != Some("ga") {
        return None;
    }
    let generation = parts.next()?.strip_prefix("generation=")?.parse().ok()?;
    let fitness = parts.next()?.strip_prefix("fitness=")?.parse().ok()?;
    parts.next().is_none().then_some(Provenance::Ga { generation, fitness })
}

fn parse_grid(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once('x')?;
    let grid = (h.trim().parse().ok()?, w.trim().parse().ok()?);
    (grid.0 > 0 && grid.1 > 0).then_some(grid)
}

pub fn to_string(w: &Workload) -> Result<String, WorkloadFileError> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "# seed = {}", w.seed).unwrap();
    writeln!(out, "# provenance = {}", format_provenance(&w.provenance)).unwrap();
    writeln!(out, "# grid = {}x{}", w.grid.0, w.grid.1).unwrap();
    let mut csv = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    for job in &w.jobs {
        let s = &job.spec;
        if s.kind.is_empty() || s.kind.contains([',', '"', '\n', '\r']) || s.kind.starts_with('#') {
            return Err(WorkloadFileError::Unwritable(format!("kind {:?} cannot be stored", s.kind)));
        }
        csv.serialize(Record {
            kind: s.kind.clone(),
            h: s.height,
            w: s.width,
            it_total: s.it_total,
            cycles_per_iter: s.cycles_per_iter,
            bw_demand: s.bw_demand,
            tcdm_bytes: s.tcdm_bytes,
            restartable: s.restartable,
            arrival_offset: job.arrival,
        })
        .map_err(|e| WorkloadFileError::Unwritable(e.to_string()))?;
    }
    let bytes = csv.into_inner().map_err(|e| WorkloadFileError::Unwritable(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse(text: &str) -> Result<Workload, ParseError> {
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, l)) if l.trim_end() == MAGIC => {}
        Some(_) => return Err(ParseError::new(1, None, format!("expected `{MAGIC}`"))),
        None => return Err(ParseError::new(1, None, "empty file")),
    }
    let (mut seed, mut provenance, mut grid) = (None, None, None);
    let mut header_lines = 1;
    while let Some(&(i, line)) = lines.peek() {
        let Some(rest) = line.strip_prefix('#') else { break };
        lines.next();
        header_lines += 1;
        let lineno = i + 1;
        let Some((key, value)) = rest.split_once('=') else {
            return Err(ParseError::new(lineno, None, "header lines are `# key = value`"));
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| ParseError::new(lineno, Some(key), format!("invalid {what}: `{value}`"));
        match key {
            "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad("seed"))?),
            "provenance" => provenance = Some(parse_provenance(value).ok_or_else(|| bad("provenance"))?),
            "grid" => grid = Some(parse_grid(value).ok_or_else(|| bad("grid, expected HxW"))?),
            _ => return Err(ParseError::new(lineno, Some(key), "unknown header key")),
        }
    }
    let missing = |k: &str| ParseError::new(header_lines, Some(k), "missing header");
    let seed = seed.ok_or_else(|| missing("seed"))?;
    let provenance = provenance.ok_or_else(|| missing("provenance"))?;
    let grid = grid.ok_or_else(|| missing("grid"))?;

    let body: Vec<&str> = lines.map(|(_, l)| l).collect();
    let body = body.join("\n");
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let first_record_line = header_lines + 1;
    let headers = reader.headers().map_err(|e| ParseError::new(first_record_line, None, e.to_string()))?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(ParseError::new(first_record_line, None, format!("expected columns `{}`", COLUMNS.join(","))));
    }

    let mut jobs = Vec::new();
    for (i, row) in reader.deserialize::<Record>().enumerate() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(first_record_line + 1 + i, |p| header_lines + p.line() as usize);
            let field = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.field().map(|f| COLUMNS[f as usize]),
                _ => None,
            };
            let message = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.kind().to_string(),
                _ => e.to_string(),
            };
            ParseError::new(line, field, message)
        })?;
        let line = first_record_line + 1 + i;
        let spec = KernelSpec {
            id: KernelId(u32::try_from(i).map_err(|_| ParseError::new(line, None, "too many records"))?),
            kind: row.kind,
            height: row.h,
            width: row.w,
            it_total: row.it_total,
            cycles_per_iter: row.cycles_per_iter,
            bw_demand: row.bw_demand,
            tcdm_bytes: row.tcdm_bytes,
            restartable: row.restartable,
        };
        if let Err(e) = spec.validate() {
            let field = match () {
                _ if spec.height == 0 => "h",
                _ if spec.width == 0 => "w",
                _ if spec.it_total == 0 => "it_total",
                _ if spec.cycles_per_iter == 0 => "cycles_per_iter",
                _ => "bw_demand",
            };
            return Err(ParseError::new(line, Some(field), e.to_string()));
        }
        jobs.push(Job { spec, arrival: row.arrival_offset });
    }
    if jobs.is_empty() {
        return Err(ParseError::new(first_record_line, None, "no jobs"));
    }
    Ok(Workload { jobs, seed, provenance, grid })
}

pub fn save(w: &Workload, path: &Path) -> Result<(), WorkloadFileError> {
    let text = to_string(w)?;
    std::fs::write(path, text).map_err(|source| WorkloadFileError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<Workload, WorkloadFileError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| WorkloadFileError::Io { path: path.display().to_string(), source })?;
    parse(&text).map_err(|source| WorkloadFileError::Parse { path: path.display().to_string(), source })
}
