// SPDX-License-Identifier: Apache-2.0

//! Single runs, mode comparisons and seed sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vcgra_core::engine::SimError;
use vcgra_core::metrics::MetricsError;
use vcgra_core::workloads::{fragmentation_fitness, ga_evolve_with, generate_random_with, GaHistory, WorkloadError};
use vcgra_core::{simulate, KernelCatalog, MetricsReport, SchedulingMode, SimOutcome, Workload};

use crate::config::RunConfig;
use crate::stats::{pearson, summarize, Correlation, Summary};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("workload generation: {0}")]
    Workload(#[from] WorkloadError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Random,
    Ga,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Ga => "ga",
        }
    }
}

/// Fitness of each workload, evaluated in parallel.
fn parallel_fitness(ws: &[Workload], hole_weight: f64) -> Vec<f64> {
    ws.par_iter().map(|w| fragmentation_fitness(w, hole_weight)).collect()
}

pub fn generate(
    cfg: &RunConfig,
    catalog: &KernelCatalog,
    generator: Generator,
    seed: u64,
) -> Result<Workload, ExperimentError> {
    match generator {
        Generator::Random => Ok(generate_random_with(catalog, &cfg.random_config(), seed)?),
        Generator::Ga => Ok(generate_ga(cfg, catalog, seed)?.0),
    }
}

pub fn generate_ga(
    cfg: &RunConfig,
    catalog: &KernelCatalog,
    seed: u64,
) -> Result<(Workload, GaHistory), ExperimentError> {
    let ga = cfg.ga_config();
    Ok(ga_evolve_with(catalog, &ga, seed, |ws| parallel_fitness(ws, ga.hole_weight))?)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: SchedulingMode,
    pub outcome: SimOutcome,
    pub metrics: MetricsReport,
}

pub fn run(cfg: &RunConfig, mode: SchedulingMode, workload: &Workload) -> Result<RunResult, ExperimentError> {
    let outcome = simulate(cfg.sim_config(mode), workload)?;
    let metrics = MetricsReport::from_outcome(&outcome)?;
    Ok(RunResult { mode, outcome, metrics })
}

/// Relative improvement over the baseline: positive means `value` is lower.
pub fn gain(baseline: f64, value: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        (baseline - value) / baseline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: String,
    pub makespan: u64,
    pub mean_tat: f64,
    pub p95: u64,
    pub mean_exec: f64,
    pub mean_wait: f64,
    pub migrations: u64,
    pub fragmentation_events: u64,
    pub lost_work_cycles: u64,
    pub gain_makespan: f64,
    pub gain_tat: f64,
    pub gain_p95: f64,
}

/// Kernels grouped by how often they migrated, with their TAT gain over
/// the same kernel in the baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationGroup {
    pub mode: String,
    pub migrations: u32,
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub baseline: String,
    pub rows: Vec<ModeRow>,
    pub groups: Vec<MigrationGroup>,
}

impl Comparison {
    pub fn row(&self, mode: &str) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

fn labels_unique(modes: &[SchedulingMode]) -> Result<(), ExperimentError> {
    let mut seen = std::collections::BTreeSet::new();
    for m in modes {
        if !seen.insert(m.label()) {
            return Err(ExperimentError::Usage(format!("mode `{m}` listed twice")));
        }
    }
    Ok(())
}

/// Runs every mode on the same workload. The baseline must be one of them.
pub fn compare(
    cfg: &RunConfig,
    workload: &Workload,
    modes: &[SchedulingMode],
    baseline: SchedulingMode,
) -> Result<(Comparison, Vec<RunResult>), ExperimentError> {
    if modes.len() < 2 {
        return Err(ExperimentError::Usage("compare needs at least two modes".into()));
    }
    labels_unique(modes)?;
    let base_idx = modes
        .iter()
        .position(|m| *m == baseline)
        .ok_or_else(|| ExperimentError::Usage(format!("baseline `{baseline}` is not among the modes")))?;
    let runs: Vec<RunResult> = modes.iter().map(|&m| run(cfg, m, workload)).collect::<Result<_, _>>()?;
    let base = &runs[base_idx].metrics;
    let base_tat: BTreeMap<_, _> = base.per_kernel.iter().map(|t| (t.kernel, t.tat)).collect();

    let rows = runs
        .iter()
        .map(|r| {
            let m = &r.metrics;
            ModeRow {
                mode: r.mode.label(),
                makespan: m.makespan,
                mean_tat: m.mean_tat_geometric,
                p95: m.tail_latency_p95,
                mean_exec: m.mean_exec,
                mean_wait: m.mean_wait,
                migrations: m.migration_count,
                fragmentation_events: m.fragmentation_events,
                lost_work_cycles: m.lost_work_cycles,
                gain_makespan: gain(base.makespan as f64, m.makespan as f64),
                gain_tat: gain(base.mean_tat_geometric, m.mean_tat_geometric),
                gain_p95: gain(base.tail_latency_p95 as f64, m.tail_latency_p95 as f64),
            }
        })
        .collect();

    let mut groups = Vec::new();
    for r in runs.iter().filter(|r| r.mode.migration().is_some()) {
        let mut by_count: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for t in &r.metrics.per_kernel {
            if let Some(&b) = base_tat.get(&t.kernel) {
                by_count.entry(t.migrations).or_default().push(gain(b as f64, t.tat as f64));
            }
        }
        groups.extend(by_count.into_iter().map(|(migrations, gains)| MigrationGroup {
            mode: r.mode.label(),
            migrations,
            gains,
        }));
    }

    Ok((Comparison { seed: workload.seed, baseline: baseline.label(), rows, groups }, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub mode: String,
    pub makespan: Summary,
    pub mean_tat: Summary,
    pub p95: Summary,
    pub mean_exec: Summary,
    pub migrations: Summary,
    pub gain_makespan: Summary,
    pub gain_tat: Summary,
    pub gain_p95: Summary,
}

/// Gain distribution for one migration count. `level` is `workload` (one
/// point per seed, total migrations of the run) or `kernel` (one point per
/// kernel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainGroup {
    pub mode: String,
    pub level: String,
    pub migrations: u64,
    pub gain_tat: Summary,
}

/// Correlation of migration count against TAT gain; `None` when not
/// applicable (too few points or no variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub mode: String,
    pub level: String,
    pub points: usize,
    pub correlation: Option<Correlation>,
}

pub const SWEEP_SCHEMA: &str = "vcgra-sweep/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub config_hash: String,
    pub generator: Generator,
    pub baseline: String,
    pub seeds: Vec<u64>,
    pub comparisons: Vec<Comparison>,
    pub per_mode: Vec<ModeAggregate>,
    pub gain_groups: Vec<GainGroup>,
    pub correlations: Vec<CorrelationRow>,
}

/// Generates one workload per seed and compares all modes on it. Seeds run
/// in parallel; aggregation follows seed order.
pub fn sweep(
    cfg: &RunConfig,
    catalog: &KernelCatalog,
    seeds: &[u64],
    generator: Generator,
    modes: &[SchedulingMode],
    baseline: SchedulingMode,
) -> Result<SweepReport, ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::Usage("sweep needs at least one seed".into()));
    }
    let comparisons: Vec<Comparison> = seeds
        .par_iter()
        .map(|&seed| {
            let w = match generator {
                Generator::Random => generate_random_with(catalog, &cfg.random_config(), seed)?,
                // seeds already run in parallel; evaluate serially inside
                Generator::Ga => {
                    let ga = cfg.ga_config();
                    ga_evolve_with(catalog, &ga, seed, |ws| {
                        ws.iter().map(|w| fragmentation_fitness(w, ga.hole_weight)).collect()
                    })?
                    .0
                }
            };
            compare(cfg, &w, modes, baseline).map(|(c, _)| c)
        })
        .collect::<Result<_, _>>()?;
    Ok(aggregate(cfg.hash(), generator, seeds, baseline, modes, comparisons))
}

pub fn aggregate(
    config_hash: String,
    generator: Generator,
    seeds: &[u64],
    baseline: SchedulingMode,
    modes: &[SchedulingMode],
    comparisons: Vec<Comparison>,
) -> SweepReport {
    let mut per_mode = Vec::new();
    let mut gain_groups = Vec::new();
    let mut correlations = Vec::new();
    for mode in modes {
        let label = mode.label();
        let rows: Vec<&ModeRow> = comparisons.iter().filter_map(|c| c.row(&label)).collect();
        let col = |f: fn(&ModeRow) -> f64| {
            summarize(&rows.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("at least one seed")
        };
        per_mode.push(ModeAggregate {
            mode: label.clone(),
            makespan: col(|r| r.makespan as f64),
            mean_tat: col(|r| r.mean_tat),
            p95: col(|r| r.p95 as f64),
            mean_exec: col(|r| r.mean_exec),
            migrations: col(|r| r.migrations as f64),
            gain_makespan: col(|r| r.gain_makespan),
            gain_tat: col(|r| r.gain_tat),
            gain_p95: col(|r| r.gain_p95),
        });
        if mode.migration().is_none() {
            continue;
        }

        let mut by_count: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            by_count.entry(r.migrations).or_default().push(r.gain_tat);
        }
        for (migrations, gains) in by_count {
            gain_groups.push(GainGroup {
                mode: label.clone(),
                level: "workload".into(),
                migrations,
                gain_tat: summarize(&gains).expect("non-empty group"),
            });
        }
        let xs: Vec<f64> = rows.iter().map(|r| r.migrations as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.gain_tat).collect();
        correlations.push(CorrelationRow {
            mode: label.clone(),
            level: "workload".into(),
            points: xs.len(),
            correlation: pearson(&xs, &ys),
        });

        let mut kernel_groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for g in comparisons.iter().flat_map(|c| &c.groups).filter(|g| g.mode == label) {
            kernel_groups.entry(u64::from(g.migrations)).or_default().extend(&g.gains);
        }
        let (mut kx, mut ky) = (Vec::new(), Vec::new());
        for (migrations, gains) in kernel_groups {
            kx.resize(kx.len() + gains.len(), migrations as f64);
            ky.extend(&gains);
            gain_groups.push(GainGroup {
                mode: label.clone(),
                level: "kernel".into(),
                migrations,
                gain_tat: summarize(&gains).expect("non-empty group"),
            });
        }
        correlations.push(CorrelationRow {
            mode: label.clone(),
            level: "kernel".into(),
            points: kx.len(),
            correlation: pearson(&kx, &ky),
        });
    }
    SweepReport {
        schema: SWEEP_SCHEMA.into(),
        config_hash,
        generator,
        baseline: baseline.label(),
        seeds: seeds.to_vec(),
        comparisons,
        per_mode,
        gain_groups,
        correlations,
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed {}  baseline {}", self.seed, self.baseline).unwrap();
        writeln!(
            s,
            "{:<15} {:>12} {:>12} {:>12} {:>12} {:>10} {:>9} {:>9} {:>9}",
            "mode", "makespan", "mean TAT", "P95", "mean exec", "migr.", "Δmakesp.", "ΔTAT", "ΔP95"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<15} {:>12} {:>12.1} {:>12} {:>12.1} {:>10} {:>8.2}% {:>8.2}% {:>8.2}%",
                r.mode,
                r.makespan,
                r.mean_tat,
                r.p95,
                r.mean_exec,
                r.migrations,
                100.0 * r.gain_makespan,
                100.0 * r.gain_tat,
                100.0 * r.gain_p95
            )
            .unwrap();
        }
        s
    }

    pub fn rows_csv(&self, banner: &str) -> String {
        let mut s = format!("{banner}\n{ROW_COLUMNS}\n");
        for r in &self.rows {
            push_row(&mut s, self.seed, r);
        }
        s
    }

    pub fn groups_csv(&self, banner: &str) -> String {
        let mut s =
            format!("{banner}\nmode,migrations,kernels,gain_tat_min,gain_tat_median,gain_tat_max,gain_tat_mean\n");
        for g in &self.groups {
            let sum = summarize(&g.gains).expect("non-empty group");
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                g.mode,
                g.migrations,
                sum.n,
                fmt_f(sum.min),
                fmt_f(sum.median),
                fmt_f(sum.max),
                fmt_f(sum.mean)
            )
            .unwrap();
        }
        s
    }
}

const ROW_COLUMNS: &str = "seed,mode,makespan,mean_tat,p95,mean_exec,mean_wait,migrations,fragmentation_events,lost_work_cycles,gain_makespan,gain_tat,gain_p95";

fn push_row(s: &mut String, seed: u64, r: &ModeRow) {
    writeln!(
        s,
        "{seed},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.mode,
        r.makespan,
        fmt_f(r.mean_tat),
        r.p95,
        fmt_f(r.mean_exec),
        fmt_f(r.mean_wait),
        r.migrations,
        r.fragmentation_events,
        r.lost_work_cycles,
        fmt_f(r.gain_makespan),
        fmt_f(r.gain_tat),
        fmt_f(r.gain_p95)
    )
    .unwrap();
}

impl SweepReport {
    pub fn banner(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "# vcgra-sweep v1 config_hash={} generator={} seeds={}",
            self.config_hash,
            self.generator.name(),
            seeds.join(";")
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sweep serializes");
        s.push('\n');
        s
    }

    /// Data tables, one per file name.
    pub fn csv_files(&self) -> Vec<(&'static str, String)> {
        let banner = self.banner();
        let mut per_seed = format!("{banner}\n{ROW_COLUMNS}\n");
        for c in &self.comparisons {
            for r in &c.rows {
                push_row(&mut per_seed, c.seed, r);
            }
        }

        let mut summary = format!("{banner}\nmode,metric,n,min,median,max,mean,median_ci_low,median_ci_high\n");
        for a in &self.per_mode {
            let metrics: [(&str, &Summary); 8] = [
                ("makespan", &a.makespan),
                ("mean_tat", &a.mean_tat),
                ("p95", &a.p95),
                ("mean_exec", &a.mean_exec),
                ("migrations", &a.migrations),
                ("gain_makespan", &a.gain_makespan),
                ("gain_tat", &a.gain_tat),
                ("gain_p95", &a.gain_p95),
            ];
            for (name, m) in metrics {
                writeln!(
                    summary,
                    "{},{name},{},{},{},{},{},{},{}",
                    a.mode,
                    m.n,
                    fmt_f(m.min),
                    fmt_f(m.median),
                    fmt_f(m.max),
                    fmt_f(m.mean),
                    fmt_f(m.median_ci.0),
                    fmt_f(m.median_ci.1)
                )
                .unwrap();
            }
        }

        let mut groups =
            format!("{banner}\nmode,level,migrations,n,gain_tat_min,gain_tat_median,gain_tat_max,gain_tat_mean\n");
        for g in &self.gain_groups {
            let m = &g.gain_tat;
            writeln!(
                groups,
                "{},{},{},{},{},{},{},{}",
                g.mode,
                g.level,
                g.migrations,
                m.n,
                fmt_f(m.min),
                fmt_f(m.median),
                fmt_f(m.max),
                fmt_f(m.mean)
            )
            .unwrap();
        }

        let mut corr = format!("{banner}\nmode,level,points,r,p\n");
        for c in &self.correlations {
            match c.correlation {
                Some(x) => writeln!(corr, "{},{},{},{},{}", c.mode, c.level, c.points, fmt_f(x.r), fmt_f(x.p)).unwrap(),
                None => writeln!(corr, "{},{},{},not-applicable,not-applicable", c.mode, c.level, c.points).unwrap(),
            }
        }
        vec![
            ("metrics_by_seed.csv", per_seed),
            ("mode_summary.csv", summary),
            ("gain_by_migrations.csv", groups),
            ("correlation.csv", corr),
        ]
    }

    pub fn table(&self) -> String {
        let mut s = format!("{}\n", self.banner());
        writeln!(
            s,
            "{:<15} {:>14} {:>14} {:>14} {:>10}",
            "mode", "med makespan", "med mean TAT", "med P95", "med migr."
        )
        .unwrap();
        for a in &self.per_mode {
            writeln!(
                s,
                "{:<15} {:>14.0} {:>14.1} {:>14.0} {:>10.1}",
                a.mode, a.makespan.median, a.mean_tat.median, a.p95.median, a.migrations.median
            )
            .unwrap();
        }
        writeln!(s, "migrations vs TAT gain:").unwrap();
        for c in &self.correlations {
            match c.correlation {
                Some(x) => {
                    writeln!(s, "  {:<15} {:<8} n={:<5} r={:+.4} p={:.4}", c.mode, c.level, c.points, x.r, x.p).unwrap()
                }
                None => writeln!(s, "  {:<15} {:<8} n={:<5} not applicable", c.mode, c.level, c.points).unwrap(),
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vcgra_core::{Job, KernelId, Provenance};

    fn cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.workload.n_jobs = 16;
        c.ga.population_size = 4;
        c.ga.generations = 1;
        c
    }

    fn all_modes(c: &RunConfig) -> Vec<SchedulingMode> {
        c.modes().unwrap()
    }

    #[test]
    fn single_kernel_is_mode_independent() {
        let spec = KernelCatalog::evaluation_mix().get("gemm").unwrap().instantiate(KernelId(0));
        let w =
            Workload { jobs: vec![Job { spec, arrival: 0 }], seed: 0, provenance: Provenance::Manual, grid: (4, 4) };
        let c = cfg();
        let (cmp, runs) = compare(&c, &w, &all_modes(&c), SchedulingMode::Tiled).unwrap();
        for r in &runs[1..] {
            // monolithic holds the whole grid, so only the hole statistic differs
            let mut m = r.metrics.clone();
            m.mean_holes = runs[0].metrics.mean_holes;
            assert_eq!(m, runs[0].metrics, "{}", r.mode);
        }
        assert!(cmp.rows.iter().all(|r| r.gain_tat == 0.0 && r.gain_makespan == 0.0));
    }

    #[test]
    fn compare_needs_two_modes_and_the_baseline() {
        let c = cfg();
        let w = generate(&c, &KernelCatalog::evaluation_mix(), Generator::Random, 1).unwrap();
        assert!(compare(&c, &w, &[SchedulingMode::Tiled], SchedulingMode::Tiled).is_err());
        assert!(compare(&c, &w, &[SchedulingMode::Tiled, SchedulingMode::TiledStateful], SchedulingMode::Monolithic)
            .is_err());
        assert!(compare(&c, &w, &[SchedulingMode::Tiled, SchedulingMode::Tiled], SchedulingMode::Tiled).is_err());
        let (cmp, _) =
            compare(&c, &w, &[SchedulingMode::Tiled, SchedulingMode::TiledStateful], SchedulingMode::Tiled).unwrap();
        assert_eq!(cmp.row("tiled").unwrap().gain_tat, 0.0);
        let kernels: usize = cmp.groups.iter().map(|g| g.gains.len()).sum();
        assert_eq!(kernels, 16);
    }

    #[test]
    fn one_seed_sweep_equals_its_comparison() {
        let c = cfg();
        let catalog = KernelCatalog::evaluation_mix();
        let modes = all_modes(&c);
        let s = sweep(&c, &catalog, &[4], Generator::Random, &modes, SchedulingMode::Tiled).unwrap();
        let w = generate(&c, &catalog, Generator::Random, 4).unwrap();
        let (cmp, _) = compare(&c, &w, &modes, SchedulingMode::Tiled).unwrap();
        assert_eq!(s.comparisons, vec![cmp.clone()]);
        for (a, r) in s.per_mode.iter().zip(&cmp.rows) {
            assert_eq!(a.makespan.median, r.makespan as f64);
            assert_eq!(a.gain_tat.median, r.gain_tat);
        }
        assert!(s.correlations.iter().filter(|c| c.level == "workload").all(|c| c.correlation.is_none()));
    }

    #[test]
    fn sweeps_are_deterministic() {
        let c = cfg();
        let catalog = KernelCatalog::evaluation_mix();
        let modes = all_modes(&c);
        for generator in [Generator::Random, Generator::Ga] {
            let a = sweep(&c, &catalog, &[1, 2, 3], generator, &modes, SchedulingMode::Tiled).unwrap();
            let b = sweep(&c, &catalog, &[1, 2, 3], generator, &modes, SchedulingMode::Tiled).unwrap();
            assert_eq!(a.to_json(), b.to_json());
            assert_eq!(a.csv_files(), b.csv_files());
        }
    }

    #[test]
    fn parallel_ga_matches_serial() {
        let c = cfg();
        let catalog = KernelCatalog::evaluation_mix();
        let (w, _) = generate_ga(&c, &catalog, 9).unwrap();
        assert_eq!(w, vcgra_core::workloads::ga_evolve(&catalog, &c.ga_config(), 9).unwrap());
    }

    #[test]
    fn constant_gains_are_not_applicable() {
        let row = |migrations| ModeRow {
            mode: "stateful".into(),
            makespan: 1,
            mean_tat: 1.0,
            p95: 1,
            mean_exec: 1.0,
            mean_wait: 0.0,
            migrations,
            fragmentation_events: 0,
            lost_work_cycles: 0,
            gain_makespan: 0.1,
            gain_tat: 0.1,
            gain_p95: 0.1,
        };
        let comparisons: Vec<Comparison> = (0..5)
            .map(|seed| Comparison { seed, baseline: "tiled".into(), rows: vec![row(seed)], groups: vec![] })
            .collect();
        let s = aggregate(
            "h".into(),
            Generator::Random,
            &[0, 1, 2, 3, 4],
            SchedulingMode::Tiled,
            &[SchedulingMode::TiledStateful],
            comparisons,
        );
        assert_eq!(s.correlations[0].correlation, None);
        assert!(s.csv_files()[3].1.contains("stateful,workload,5,not-applicable,not-applicable"));
    }
}
