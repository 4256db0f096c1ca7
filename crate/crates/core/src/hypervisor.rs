// SPDX-License-Identifier: Apache-2.0

//! Arrival queue, scheduling loop and reactive de-fragmentation.
//!
//! The hypervisor is a single server: enqueueing, scheduling decisions,
//! data copies, command issue and migration bookkeeping each occupy it for
//! an interval, and intervals never overlap. Delay attributed to a kernel
//! before it is scheduled is kept in [`KernelInstance::induced_delay`].
//!
//! Scheduling is strict first-come first-served: a blocked queue head blocks
//! everything behind it.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::fmt;

use crate::engine::{EventKind, SimError, Simulation, TraceKind};
use crate::fabric::{Command, ConfigRef, Rect, RegionCoord};
use crate::kernels::{validate_restartability, KernelId, MigrationMode};
use crate::migration::{plan_compaction, relocate, should_migrate_stateless};
use crate::placement::{find_placement, fragmentation_blocking, free_area, PlacementRequest};
use crate::{to_ppm, Cycles, PPM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchedulingMode {
    /// The whole fabric runs one kernel at a time.
    Monolithic,
    /// Regions are shared; no migration.
    Tiled,
    /// Tiled with restart-based compaction; kernels past `threshold`
    /// progress are never moved.
    TiledStateless { threshold: f64 },
    /// Tiled with snapshot-based compaction.
    TiledStateful,
}

impl SchedulingMode {
    pub fn migration(&self) -> Option<MigrationMode> {
        match self {
            Self::Monolithic | Self::Tiled => None,
            Self::TiledStateless { .. } => Some(MigrationMode::Stateless),
            Self::TiledStateful => Some(MigrationMode::Stateful),
        }
    }

    /// Short label: `monolithic`, `tiled`, `stateless-0.8`, `stateful`.
    pub fn label(&self) -> alloc::string::String {
        alloc::format!("{self}")
    }

    /// Parses a label as produced by [`SchedulingMode::label`]; a bare
    /// `stateless` means threshold 1.0.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "monolithic" => Some(Self::Monolithic),
            "tiled" => Some(Self::Tiled),
            "stateful" => Some(Self::TiledStateful),
            "stateless" => Some(Self::TiledStateless { threshold: 1.0 }),
            _ => {
                let f: f64 = s.strip_prefix("stateless-")?.parse().ok()?;
                (f > 0.0 && f <= 1.0).then_some(Self::TiledStateless { threshold: f })
            }
        }
    }
}

impl fmt::Display for SchedulingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Monolithic => f.write_str("monolithic"),
            Self::Tiled => f.write_str("tiled"),
            Self::TiledStateless { threshold } => write!(f, "stateless-{threshold:.1}"),
            Self::TiledStateful => f.write_str("stateful"),
        }
    }
}

/// Hypervisor latencies, in cycles.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct HypervisorDelays {
    pub enqueue: Cycles,
    pub schedule_decision: Cycles,
    /// Host-to-TCDM copy cost of a kernel's input data.
    pub data_copy_per_byte: f64,
    pub config_issue: Cycles,
}

impl Default for HypervisorDelays {
    fn default() -> Self {
        Self { enqueue: 200, schedule_decision: 500, data_copy_per_byte: 0.0625, config_issue: 200 }
    }
}

impl HypervisorDelays {
    pub const ZERO: Self = Self { enqueue: 0, schedule_decision: 0, data_copy_per_byte: 0.0, config_issue: 0 };

    pub fn data_copy(&self, bytes: u64) -> Cycles {
        (u128::from(bytes) * u128::from(to_ppm(self.data_copy_per_byte)) / u128::from(PPM)) as Cycles
    }

    /// Hypervisor time for one placement: decision, data copy, command issue.
    pub fn scheduling(&self, tcdm_bytes: u64) -> Cycles {
        self.schedule_decision + self.data_copy(tcdm_bytes) + self.config_issue
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    pub mode: SchedulingMode,
    /// Free area must be at least `alpha × h × w` before a placement failure
    /// counts as fragmentation.
    pub alpha: f64,
    pub delays: HypervisorDelays,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { mode: SchedulingMode::Tiled, alpha: 2.0, delays: HypervisorDelays::default() }
    }
}

impl SchedulerConfig {
    pub fn with_mode(mode: SchedulingMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err("alpha must be finite and >= 0");
        }
        if !(self.delays.data_copy_per_byte >= 0.0 && self.delays.data_copy_per_byte.is_finite()) {
            return Err("data_copy_per_byte must be finite and >= 0");
        }
        if let SchedulingMode::TiledStateless { threshold } = self.mode {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err("stateless threshold must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

/// FIFO of kernel slots in arrival order; equal arrivals keep submission
/// order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadyQueue {
    slots: VecDeque<usize>,
}

impl ReadyQueue {
    pub fn push(&mut self, slot: usize) {
        self.slots.push_back(slot);
    }

    pub fn head(&self) -> Option<usize> {
        self.slots.front().copied()
    }

    pub fn pop(&mut self) -> Option<usize> {
        self.slots.pop_front()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().copied()
    }
}

impl Simulation {
    /// Occupies the hypervisor for `duration` cycles starting no earlier than
    /// `at`; returns the interval end.
    pub(crate) fn reserve_hypervisor(&mut self, at: Cycles, duration: Cycles, kernel: Option<KernelId>) -> Cycles {
        let start = at.max(self.hv_busy_until);
        let end = start + duration;
        self.hv_busy_until = end;
        if duration > 0 {
            self.record(start, TraceKind::HypervisorDelay, kernel, None, None, end, duration);
        }
        end
    }

    /// Admits a submitted kernel at `clock`.
    pub fn on_arrival(&mut self, slot: usize, clock: Cycles) -> Result<(), SimError> {
        let (id, req) = {
            let k = &mut self.kernels[slot];
            if k.t_arrival.is_some() {
                return Err(SimError::DuplicateKernel(k.id()));
            }
            k.t_arrival = Some(clock);
            (k.id(), PlacementRequest::for_spec(&k.spec))
        };
        self.record(clock, TraceKind::Arrival, Some(id), None, None, req.height as u64, req.width as u64);
        if !req.fits_grid(self.grid.height(), self.grid.width()) {
            self.rejected.push(id);
            self.record(clock, TraceKind::Rejected, Some(id), None, None, 0, 0);
            return Ok(());
        }
        let end = self.reserve_hypervisor(clock, self.config.scheduler.delays.enqueue, Some(id));
        self.kernels[slot].induced_delay += end - clock;
        self.push_event(end, EventKind::Enqueued(slot));
        Ok(())
    }

    pub(crate) fn on_enqueued(&mut self, slot: usize, clock: Cycles) -> Result<(), SimError> {
        self.queue.push(slot);
        let id = self.kernels[slot].id();
        self.record(clock, TraceKind::Enqueued, Some(id), None, None, self.queue.len() as u64, 0);
        self.try_schedule(clock)
    }

    /// Places queue heads until one does not fit. A fragmentation-blocked
    /// head may trigger compaction in migration modes.
    pub fn try_schedule(&mut self, clock: Cycles) -> Result<(), SimError> {
        if self.compacting {
            return Ok(());
        }
        while let Some(slot) = self.queue.head() {
            let req = PlacementRequest::for_spec(&self.kernels[slot].spec);
            self.stats.scheduling_attempts += 1;
            let anchor = match self.config.scheduler.mode {
                SchedulingMode::Monolithic => (self.grid.allocations().next().is_none()).then_some(RegionCoord::ORIGIN),
                _ => find_placement(&self.grid, &req),
            };
            if let Some(anchor) = anchor {
                self.queue.pop();
                self.place(slot, anchor, clock)?;
                continue;
            }
            let mode = self.config.scheduler.mode;
            let fragmented = mode != SchedulingMode::Monolithic
                && fragmentation_blocking(&self.grid, &req, self.config.scheduler.alpha);
            let free = free_area(&self.grid) as u64;
            self.record(clock, TraceKind::PlacementFailed, Some(req.kernel), None, None, free, u64::from(fragmented));
            if fragmented {
                self.stats.fragmentation_events += 1;
                if let Some(migration) = mode.migration() {
                    self.compact(slot, &req, migration, clock)?;
                }
            }
            break;
        }
        Ok(())
    }

    fn place(&mut self, slot: usize, anchor: RegionCoord, clock: Cycles) -> Result<(), SimError> {
        let monolithic = self.config.scheduler.mode == SchedulingMode::Monolithic;
        let (id, spec_h, spec_w, it_total, tcdm, area) = {
            let s = &self.kernels[slot].spec;
            (s.id, s.height, s.width, s.it_total, s.tcdm_bytes, s.area())
        };
        let rect = if monolithic {
            Rect::new(RegionCoord::ORIGIN, self.grid.height(), self.grid.width())
        } else {
            Rect::new(anchor, spec_h, spec_w)
        };
        let alloc = self.grid.bind(rect, ConfigRef { kernel: id, it_total, tcdm_bytes: tcdm })?;
        self.record(clock, TraceKind::Placed, Some(id), Some(anchor), None, rect.height as u64, rect.width as u64);
        self.occupancy_changed(clock);

        let end = self.reserve_hypervisor(clock, self.config.scheduler.delays.scheduling(tcdm), Some(id));
        let config = self.config.costs.config_cycles(area);
        let k = &mut self.kernels[slot];
        k.allocation = Some(alloc);
        k.induced_delay += end - clock;
        k.t_scheduled = Some(end);
        self.push_event(end, EventKind::Scheduled(slot));
        self.push_event(end + config, EventKind::Launch(slot));
        Ok(())
    }

    pub(crate) fn on_launch(&mut self, slot: usize, clock: Cycles) -> Result<(), SimError> {
        self.advance(clock)?;
        let id = self.kernels[slot].id();
        self.grid.command(id, Command::Execute, clock)?;
        self.kernels[slot].t_launch = Some(clock);
        self.start_running(slot);
        self.record(clock, TraceKind::Launch, Some(id), None, None, 0, 0);
        self.reschedule_completions(clock);
        Ok(())
    }

    /// Retires a kernel whose last iteration finished at `clock`.
    pub fn on_completion(&mut self, slot: usize, clock: Cycles) -> Result<(), SimError> {
        self.advance(clock)?;
        let k = &self.kernels[slot];
        if k.it_now != k.spec.it_total {
            return Err(SimError::Internal("completion before the last iteration"));
        }
        let id = k.id();
        self.grid.complete(id)?;
        self.stop_running(slot);
        let k = &mut self.kernels[slot];
        k.t_completed = Some(clock);
        k.allocation = None;
        self.record(clock, TraceKind::Completion, Some(id), None, None, 0, 0);
        self.occupancy_changed(clock);
        self.reschedule_completions(clock);
        self.try_schedule(clock)
    }

    /// Halts every running kernel, relocates the planned movers and resumes
    /// everything once the hypervisor has processed each kernel.
    fn compact(
        &mut self,
        head: usize,
        req: &PlacementRequest,
        migration: MigrationMode,
        clock: Cycles,
    ) -> Result<(), SimError> {
        self.advance(clock)?;
        let threshold = match self.config.scheduler.mode {
            SchedulingMode::TiledStateless { threshold } => Some(threshold),
            _ => None,
        };
        // kernels that are already done, or that a restart would hurt too
        // much, stay where they are
        let mut pinned = Vec::new();
        let mut victims = Vec::new();
        for &slot in self.running.keys() {
            let k = &self.kernels[slot];
            let finished = k.it_now >= k.spec.it_total;
            let keep = finished
                || match threshold {
                    Some(f) => !should_migrate_stateless(k, f)? || validate_restartability(k, migration).is_err(),
                    None => false,
                };
            if keep {
                pinned.push(k.id());
            }
            if !finished {
                victims.push(slot);
            }
        }

        let free = free_area(&self.grid) as u64;
        self.record(
            clock,
            TraceKind::CompactionInvoked,
            Some(self.kernels[head].id()),
            None,
            None,
            free,
            req.area() as u64,
        );
        self.stats.compactions_invoked += 1;
        let Some(plan) = plan_compaction(&self.grid, req, &pinned) else {
            self.stats.compactions_aborted += 1;
            self.record(clock, TraceKind::CompactionAborted, Some(self.kernels[head].id()), None, None, 0, 0);
            return Ok(());
        };
        self.stats.compactions_applied += 1;

        for &slot in &victims {
            let id = self.kernels[slot].id();
            self.grid.command(id, Command::Halt, clock)?;
            self.stop_running(slot);
            self.record(clock, TraceKind::Halt, Some(id), None, None, self.kernels[slot].it_now, 0);
        }

        let mut stalls: Vec<(usize, Cycles)> = Vec::with_capacity(victims.len());
        for mv in &plan.moves {
            let slot = self.index[&mv.kernel];
            let out = relocate(&mut self.grid, &mut self.kernels[slot], mv, migration, &self.config.costs, clock)?;
            self.stats.migrations += 1;
            self.stats.lost_work_cycles += out.charge.lost;
            self.record(
                clock,
                TraceKind::Migration,
                Some(mv.kernel),
                Some(mv.from),
                Some(mv.to),
                out.charge.total(),
                out.charge.stall(),
            );
            stalls.push((slot, out.charge.stall()));
        }
        let mut unmoved: Vec<usize> = victims.iter().copied().filter(|s| !stalls.iter().any(|(m, _)| m == s)).collect();
        unmoved.sort_by_key(|&s| self.kernels[s].id());
        stalls.extend(unmoved.into_iter().map(|s| (s, 0)));
        self.occupancy_changed(clock);

        let mut done = clock;
        for (slot, stall) in stalls {
            let id = self.kernels[slot].id();
            let end = self.reserve_hypervisor(clock, self.config.costs.hypervisor_overhead + stall, Some(id));
            self.push_event(end, EventKind::Resume(slot));
            done = done.max(end);
        }
        self.compacting = true;
        self.push_event(done, EventKind::CompactionDone);
        self.reschedule_completions(clock);
        Ok(())
    }

    pub(crate) fn on_resume(&mut self, slot: usize, clock: Cycles) -> Result<(), SimError> {
        self.advance(clock)?;
        let id = self.kernels[slot].id();
        self.grid.command(id, Command::Execute, clock)?;
        self.start_running(slot);
        self.record(
            clock,
            TraceKind::Resume,
            Some(id),
            self.kernels[slot].allocation.map(|a| a.anchor()),
            None,
            self.kernels[slot].it_now,
            0,
        );
        self.reschedule_completions(clock);
        Ok(())
    }

    pub(crate) fn on_compaction_done(&mut self, clock: Cycles) -> Result<(), SimError> {
        self.compacting = false;
        self.record(clock, TraceKind::CompactionDone, None, None, None, 0, 0);
        self.try_schedule(clock)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_labels_round_trip() {
        for mode in [
            SchedulingMode::Monolithic,
            SchedulingMode::Tiled,
            SchedulingMode::TiledStateless { threshold: 0.8 },
            SchedulingMode::TiledStateless { threshold: 1.0 },
            SchedulingMode::TiledStateful,
        ] {
            assert_eq!(SchedulingMode::parse(&mode.label()), Some(mode));
        }
        assert_eq!(SchedulingMode::parse("stateless"), Some(SchedulingMode::TiledStateless { threshold: 1.0 }));
        assert_eq!(SchedulingMode::parse("stateless-0"), None);
        assert_eq!(SchedulingMode::parse("backfill"), None);
    }

    #[test]
    fn delays() {
        let d = HypervisorDelays::default();
        assert_eq!(d.data_copy(65_536), 4096);
        assert_eq!(d.scheduling(0), 700);
        assert_eq!(HypervisorDelays::ZERO.scheduling(1 << 20), 0);
    }

    #[test]
    fn config_validation() {
        assert!(SchedulerConfig::default().validate().is_ok());
        let bad = SchedulerConfig { mode: SchedulingMode::TiledStateless { threshold: 0.0 }, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(SchedulerConfig { alpha: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn queue_is_fifo() {
        let mut q = ReadyQueue::default();
        q.push(3);
        q.push(1);
        assert_eq!(q.head(), Some(3));
        assert_eq!(q.pop(), Some(3));
        assert_eq!(q.iter().collect::<Vec<_>>(), [1]);
    }
}
