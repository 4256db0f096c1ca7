// SPDX-License-Identifier: Apache-2.0

//! Run reports and trace files.
//!
//! * `report.json`: schema `vcgra-report/1`, a [`RunReport`].
//! * `kernels.csv`: one row per completed kernel, columns [`KERNEL_COLUMNS`].
//! * `trace.csv`: one row per trace record, columns [`TRACE_COLUMNS`].
//!   `kernel_id`, `row`, `col`, `to_row` and `to_col` are empty when not
//!   applicable. `value` and `aux` depend on `kind`:
//!
//!   | kind | value | aux |
//!   |---|---|---|
//!   | arrival | height | width |
//!   | enqueued | queue length | 0 |
//!   | placed | height | width |
//!   | placement_failed | free area | 1 if the failure counts as fragmentation |
//!   | compaction_invoked | free area | requested area |
//!   | halt, resume | iterations done | 0 |
//!   | migration | total migration cost | stall cycles |
//!   | hypervisor_delay | interval end | interval length |
//!   | others | 0 | 0 |
//!
//!   `hypervisor_delay` rows carry the interval start as `time`, which can
//!   lie ahead of the rows around them.
//!
//! Both CSV files begin with one `#` line naming the format version,
//! config hash, seed and mode.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use vcgra_core::engine::{RunStats, TraceRecord};
use vcgra_core::{MetricsReport, Provenance, SchedulingMode, SimOutcome, Workload};

pub const REPORT_SCHEMA: &str = "vcgra-report/1";
pub const KERNEL_COLUMNS: &str =
    "kernel_id,kind,height,width,t_arrival,t_wait,t_config,t_exec,t_total,induced_delay,tat,migrations,lost_cycles";
pub const TRACE_COLUMNS: &str = "time,seq,kind,kernel_id,row,col,to_row,to_col,value,aux";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub mode: String,
    pub provenance: Provenance,
    pub jobs: usize,
    pub end_time: u64,
    pub metrics: MetricsReport,
    pub stats: RunStats,
}

impl RunReport {
    pub fn new(
        config_hash: &str,
        mode: SchedulingMode,
        workload: &Workload,
        outcome: &SimOutcome,
        metrics: MetricsReport,
    ) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            config_hash: config_hash.into(),
            seed: workload.seed,
            mode: mode.label(),
            provenance: workload.provenance,
            jobs: workload.len(),
            end_time: outcome.end_time,
            metrics,
            stats: outcome.stats,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let r: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if r.schema != REPORT_SCHEMA {
            return Err(format!("unsupported report schema `{}`", r.schema));
        }
        Ok(r)
    }

    fn banner(&self, format: &str) -> String {
        format!("# {format} config_hash={} seed={} mode={}\n", self.config_hash, self.seed, self.mode)
    }

    /// Per-kernel table. Kernels that never completed are absent.
    pub fn kernels_csv(&self, outcome: &SimOutcome) -> String {
        let mut s = self.banner("vcgra-kernels v1");
        s.push_str(KERNEL_COLUMNS);
        s.push('\n');
        for t in &self.metrics.per_kernel {
            let k = outcome.kernels.iter().find(|k| k.id() == t.kernel).expect("per-kernel entry has an instance");
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                t.kernel.0,
                k.spec.kind,
                k.spec.height,
                k.spec.width,
                k.t_arrival.unwrap_or(0),
                t.t_wait,
                t.t_config,
                t.t_exec,
                t.t_total,
                t.induced_delay,
                t.tat,
                t.migrations,
                k.lost_cycles
            )
            .unwrap();
        }
        s
    }

    pub fn trace_csv(&self, trace: &[TraceRecord]) -> String {
        let mut s = self.banner("vcgra-trace v1");
        s.push_str(TRACE_COLUMNS);
        s.push('\n');
        for r in trace {
            let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.time,
                r.seq,
                r.kind.name(),
                r.kernel.map(|k| k.0.to_string()).unwrap_or_default(),
                opt(r.at.map(|c| c.row)),
                opt(r.at.map(|c| c.col)),
                opt(r.to.map(|c| c.row)),
                opt(r.to.map(|c| c.col)),
                r.value,
                r.aux
            )
            .unwrap();
        }
        s
    }

    /// Human-readable summary.
    pub fn table(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        writeln!(s, "mode {}  seed {}  config {}  jobs {}", self.mode, self.seed, self.config_hash, self.jobs).unwrap();
        let rows: [(&str, String); 12] = [
            ("makespan", m.makespan.to_string()),
            ("mean TAT (geometric)", format!("{:.1}", m.mean_tat_geometric)),
            ("mean TAT (arithmetic)", format!("{:.1}", m.mean_tat_arithmetic)),
            ("P95 TAT", m.tail_latency_p95.to_string()),
            ("mean wait", format!("{:.1}", m.mean_wait)),
            ("mean config", format!("{:.1}", m.mean_config)),
            ("mean exec", format!("{:.1}", m.mean_exec)),
            ("completed / rejected", format!("{} / {}", m.completed, m.rejected)),
            ("migrations", m.migration_count.to_string()),
            ("fragmentation events", m.fragmentation_events.to_string()),
            ("compactions applied / aborted", format!("{} / {}", m.compactions_applied, m.compactions_aborted)),
            ("lost work cycles", m.lost_work_cycles.to_string()),
        ];
        for (k, v) in rows {
            writeln!(s, "  {k:<30} {v}").unwrap();
        }
        s
    }
}

/// Reads a trace file written by [`RunReport::trace_csv`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>, String> {
    use vcgra_core::engine::TraceKind;
    use vcgra_core::{KernelId, RegionCoord};
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.starts_with("# vcgra-trace v1") => {}
        _ => return Err("missing trace banner".into()),
    }
    if lines.next() != Some(TRACE_COLUMNS) {
        return Err("unexpected trace columns".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let err = |what: &str| format!("line {}: bad {what}", i + 3);
            if f.len() != 10 {
                return Err(err("column count"));
            }
            let num = |j: usize, name: &str| f[j].parse::<u64>().map_err(|_| err(name));
            let opt = |j: usize, name: &str| -> Result<Option<usize>, String> {
                if f[j].is_empty() {
                    Ok(None)
                } else {
                    f[j].parse().map(Some).map_err(|_| err(name))
                }
            };
            let coord = |a: Option<usize>, b: Option<usize>| a.zip(b).map(|(r, c)| RegionCoord::new(r, c));
            Ok(TraceRecord {
                time: num(0, "time")?,
                seq: num(1, "seq")?,
                kind: TraceKind::from_name(f[2]).ok_or_else(|| err("kind"))?,
                kernel: opt(3, "kernel_id")?.map(|k| KernelId(k as u32)),
                at: coord(opt(4, "row")?, opt(5, "col")?),
                to: coord(opt(6, "to_row")?, opt(7, "to_col")?),
                value: num(8, "value")?,
                aux: num(9, "aux")?,
            })
        })
        .collect()
}
