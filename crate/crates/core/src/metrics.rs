// SPDX-License-Identifier: Apache-2.0

//! Per-kernel and workload-level timing metrics.
//!
//! ```text
//! t_wait   = t_scheduled − t_arrival − induced_delay
//! t_config = t_launch − t_scheduled
//! t_exec   = t_completed − t_launch
//! t_total  = t_wait + t_config + t_exec
//! tat      = t_completed − t_arrival = t_total + induced_delay
//! makespan = max t_completed − min t_arrival
//! ```
//!
//! The mean turnaround is geometric; the arithmetic mean is reported next to
//! it. P95 is nearest-rank.

use alloc::vec::Vec;

use crate::engine::SimOutcome;
use crate::kernels::{KernelId, KernelInstance};
use crate::Cycles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("kernel {0} has not completed")]
    IncompleteKernel(KernelId),
    #[error("no completed kernels")]
    EmptyWorkload,
    #[error("turnaround times must be positive")]
    NonPositiveTat,
    #[error("empty sample")]
    EmptyList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelTimes {
    pub kernel: KernelId,
    pub t_wait: Cycles,
    pub t_config: Cycles,
    pub t_exec: Cycles,
    pub t_total: Cycles,
    pub tat: Cycles,
    /// Hypervisor delay attributed to the kernel; in `tat`, not in `t_total`.
    pub induced_delay: Cycles,
    pub migrations: u32,
}

pub fn kernel_times(k: &KernelInstance) -> Result<KernelTimes, MetricsError> {
    let missing = MetricsError::IncompleteKernel(k.id());
    let (arrival, scheduled, launch, completed) = match (k.t_arrival, k.t_scheduled, k.t_launch, k.t_completed) {
        (Some(a), Some(s), Some(l), Some(c)) => (a, s, l, c),
        _ => return Err(missing),
    };
    let t_wait = (scheduled - arrival).saturating_sub(k.induced_delay);
    let t_config = launch - scheduled;
    let t_exec = completed - launch;
    Ok(KernelTimes {
        kernel: k.id(),
        t_wait,
        t_config,
        t_exec,
        t_total: t_wait + t_config + t_exec,
        tat: completed - arrival,
        induced_delay: k.induced_delay,
        migrations: k.migrations,
    })
}

/// Latest completion minus earliest arrival, over completed kernels.
pub fn makespan(kernels: &[KernelInstance]) -> Result<Cycles, MetricsError> {
    let done = kernels.iter().filter(|k| k.is_complete());
    let first = done.clone().filter_map(|k| k.t_arrival).min().ok_or(MetricsError::EmptyWorkload)?;
    let last = done.filter_map(|k| k.t_completed).max().ok_or(MetricsError::EmptyWorkload)?;
    Ok(last - first)
}

/// Geometric mean, computed in log space.
pub fn mean_tat(tats: &[Cycles]) -> Result<f64, MetricsError> {
    if tats.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    if tats.contains(&0) {
        return Err(MetricsError::NonPositiveTat);
    }
    let log_sum: f64 = tats.iter().map(|&t| libm::log(t as f64)).sum();
    Ok(libm::exp(log_sum / tats.len() as f64))
}

pub fn arithmetic_mean(values: &[Cycles]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    Ok(values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64)
}

/// The `⌈0.95 N⌉`-th smallest value.
pub fn tail_latency_p95(tats: &[Cycles]) -> Result<Cycles, MetricsError> {
    nearest_rank(tats, 95)
}

/// Nearest-rank percentile `p` in `1..=100`.
pub fn nearest_rank(values: &[Cycles], p: usize) -> Result<Cycles, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = (p * sorted.len()).div_ceil(100).max(1);
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub makespan: Cycles,
    pub mean_tat_geometric: f64,
    pub mean_tat_arithmetic: f64,
    pub tail_latency_p95: Cycles,
    pub mean_wait: f64,
    pub mean_config: f64,
    pub mean_exec: f64,
    pub mean_induced_delay: f64,
    pub completed: usize,
    pub rejected: usize,
    pub migration_count: u64,
    pub fragmentation_events: u64,
    pub compactions_applied: u64,
    pub compactions_aborted: u64,
    pub lost_work_cycles: Cycles,
    /// Time-averaged number of holes over the makespan.
    pub mean_holes: f64,
    pub per_kernel: Vec<KernelTimes>,
}

impl MetricsReport {
    pub fn from_outcome(out: &SimOutcome) -> Result<Self, MetricsError> {
        let per_kernel: Vec<KernelTimes> =
            out.kernels.iter().filter(|k| k.is_complete()).map(kernel_times).collect::<Result<_, _>>()?;
        let column = |f: fn(&KernelTimes) -> Cycles| per_kernel.iter().map(f).collect::<Vec<_>>();
        let tats = column(|t| t.tat);
        let makespan = makespan(&out.kernels)?;
        Ok(Self {
            makespan,
            mean_tat_geometric: mean_tat(&tats)?,
            mean_tat_arithmetic: arithmetic_mean(&tats)?,
            tail_latency_p95: tail_latency_p95(&tats)?,
            mean_wait: arithmetic_mean(&column(|t| t.t_wait))?,
            mean_config: arithmetic_mean(&column(|t| t.t_config))?,
            mean_exec: arithmetic_mean(&column(|t| t.t_exec))?,
            mean_induced_delay: arithmetic_mean(&column(|t| t.induced_delay))?,
            completed: per_kernel.len(),
            rejected: out.rejected.len(),
            migration_count: out.stats.migrations,
            fragmentation_events: out.stats.fragmentation_events,
            compactions_applied: out.stats.compactions_applied,
            compactions_aborted: out.stats.compactions_aborted,
            lost_work_cycles: out.stats.lost_work_cycles,
            mean_holes: out.stats.hole_cycles as f64 / makespan.max(1) as f64,
            per_kernel,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;

    fn kernel(id: u32, times: [Cycles; 4]) -> KernelInstance {
        let mut k = KernelInstance::new(KernelSpec {
            id: KernelId(id),
            kind: "k".into(),
            height: 1,
            width: 1,
            it_total: 1,
            cycles_per_iter: 1,
            bw_demand: 0.0,
            tcdm_bytes: 0,
            restartable: true,
        });
        [k.t_arrival, k.t_scheduled, k.t_launch, k.t_completed] = times.map(Some);
        k
    }

    #[test]
    fn kernel_time_examples() {
        let t = kernel_times(&kernel(1, [0, 5, 15, 115])).unwrap();
        assert_eq!((t.t_wait, t.t_config, t.t_exec, t.tat), (5, 10, 100, 115));
        assert_eq!(t.t_total, t.t_wait + t.t_config + t.t_exec);
        assert_eq!(kernel_times(&kernel(1, [7, 7, 9, 10])).unwrap().t_wait, 0);

        let mut delayed = kernel(2, [0, 50, 60, 160]);
        delayed.induced_delay = 20;
        let t = kernel_times(&delayed).unwrap();
        assert_eq!((t.t_wait, t.t_total, t.tat), (30, 140, 160));

        let mut open = kernel(3, [0, 1, 2, 3]);
        open.t_completed = None;
        assert_eq!(kernel_times(&open), Err(MetricsError::IncompleteKernel(KernelId(3))));
    }

    #[test]
    fn makespan_examples() {
        assert_eq!(makespan(&[kernel(1, [0, 0, 0, 10]), kernel(2, [5, 5, 5, 20])]), Ok(20));
        assert_eq!(makespan(&[kernel(1, [3, 3, 3, 7])]), Ok(4));
        assert_eq!(makespan(&[]), Err(MetricsError::EmptyWorkload));
    }

    #[test]
    fn geometric_mean_examples() {
        assert!((mean_tat(&[2, 8]).unwrap() - 4.0).abs() <= 4.0 * 1e-9);
        assert!((mean_tat(&[5, 5, 5]).unwrap() - 5.0).abs() <= 5.0 * 1e-9);
        assert!((mean_tat(&[1, 10, 100]).unwrap() - 10.0).abs() <= 10.0 * 1e-9);
        assert_eq!(mean_tat(&[0, 3]), Err(MetricsError::NonPositiveTat));
        assert_eq!(mean_tat(&[]), Err(MetricsError::EmptyList));
    }

    #[test]
    fn p95_examples() {
        let hundred: Vec<Cycles> = (1..=100).rev().collect();
        assert_eq!(tail_latency_p95(&hundred), Ok(95));
        let sixty_four: Vec<Cycles> = (1..=64).collect();
        assert_eq!(tail_latency_p95(&sixty_four), Ok(61));
        assert_eq!(tail_latency_p95(&[42]), Ok(42));
        assert_eq!(tail_latency_p95(&[]), Err(MetricsError::EmptyList));
    }
}
