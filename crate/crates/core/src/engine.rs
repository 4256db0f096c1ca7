// SPDX-License-Identifier: Apache-2.0

//! Discrete-event core: virtual clock, event queue, bandwidth contention and
//! progress integration.
//!
//! Progress is tracked in work units: one iteration costs
//! `cycles_per_iter × PPM` units and a running kernel earns `rate` units per
//! cycle, where `rate ≤ PPM` is its contended share. Rates are piecewise
//! constant and recomputed whenever the set of running kernels changes.
//! Sub-iteration work is carried across rate changes, so nothing is lost at
//! interval boundaries.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::fmt;

use crate::fabric::{FabricError, FabricGrid, RegionCoord};
use crate::hypervisor::{ReadyQueue, SchedulerConfig};
use crate::kernels::{KernelError, KernelId, KernelInstance, KernelSpec};
use crate::migration::{MigrationCostModel, MigrationError};
use crate::placement::enumerate_holes;
use crate::workloads::Workload;
use crate::{to_ppm, Cycles, PPM};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("event queue drained")]
    EmptyQueue,
    #[error("kernel {0} submitted twice")]
    DuplicateKernel(KernelId),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Migration(#[from] MigrationError),
    #[error("simulation ended with {pending} kernels unfinished")]
    Stalled { pending: usize },
    #[error("internal invariant violated: {0}")]
    Internal(&'static str),
}

/// How co-running kernels share global memory bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContentionPolicy {
    /// When total demand `D` exceeds the bus, every kernel runs at `1 / D`.
    #[default]
    FairShare,
    /// Every kernel always runs at full rate.
    Disabled,
}

impl ContentionPolicy {
    /// Per-kernel progress rates in parts-per-million of full speed.
    pub fn rates(self, demands: &[f64]) -> Vec<u64> {
        let total: u64 = demands.iter().map(|&d| to_ppm(d)).sum();
        let rate = match self {
            Self::FairShare if total > PPM => (u128::from(PPM) * u128::from(PPM) / u128::from(total)) as u64,
            _ => PPM,
        };
        alloc::vec![rate; demands.len()]
    }
}

/// Rates for a set of co-running kernels.
pub fn effective_rate(policy: ContentionPolicy, active: &[&KernelSpec]) -> Vec<u64> {
    let demands: Vec<f64> = active.iter().map(|s| s.bw_demand).collect();
    policy.rates(&demands)
}

/// Committed iterations plus the work already spent on the next one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    pub it_now: u64,
    pub partial_work: u64,
}

fn work_per_iteration(spec: &KernelSpec) -> u128 {
    u128::from(spec.cycles_per_iter) * u128::from(PPM)
}

/// Advances `p` by `elapsed` cycles at `rate_ppm`; returns iterations gained.
pub fn integrate_progress(p: &mut Progress, spec: &KernelSpec, elapsed: Cycles, rate_ppm: u64) -> u64 {
    let unit = work_per_iteration(spec);
    let work = u128::from(p.partial_work) + u128::from(elapsed) * u128::from(rate_ppm);
    let room = spec.it_total.saturating_sub(p.it_now);
    let gained = ((work / unit) as u64).min(room);
    p.it_now += gained;
    p.partial_work = if p.it_now == spec.it_total { 0 } else { (work - u128::from(gained) * unit) as u64 };
    gained
}

/// Cycles until the last iteration completes at a constant `rate_ppm`.
pub fn cycles_to_finish(p: &Progress, spec: &KernelSpec, rate_ppm: u64) -> Cycles {
    let left = u128::from(spec.it_total.saturating_sub(p.it_now)) * work_per_iteration(spec);
    let left = left.saturating_sub(u128::from(p.partial_work));
    left.div_ceil(u128::from(rate_ppm.max(1))) as Cycles
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum EventKind {
    Arrival(usize),
    Enqueued(usize),
    Scheduled(usize),
    Launch(usize),
    Completion { slot: usize, version: u64 },
    Resume(usize),
    CompactionDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Cycles,
    seq: u64,
    kind: EventKind,
}

/// Trace record kinds. The CSV name is [`TraceKind::name`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TraceKind {
    /// `value`, `aux`: requested height and width.
    Arrival,
    Rejected,
    /// `value`: queue length after the push.
    Enqueued,
    /// `row`/`col`: anchor; `value`, `aux`: allocated height and width.
    Placed,
    Scheduled,
    Launch,
    Completion,
    /// `value`: free regions; `aux`: 1 if the blocking test held.
    PlacementFailed,
    /// `value`: free regions; `aux`: requested area.
    CompactionInvoked,
    CompactionAborted,
    /// `value`: iterations completed at the halt.
    Halt,
    /// From `row`/`col` to `to_row`/`to_col`; `value`: full cost; `aux`:
    /// cycles the kernel stays halted for it.
    Migration,
    /// `value`: iterations at resume.
    Resume,
    CompactionDone,
    /// Logged when reserved; `time` is the interval start, `value` its end,
    /// `aux` its length.
    HypervisorDelay,
}

impl TraceKind {
    pub const ALL: [Self; 15] = [
        Self::Arrival,
        Self::Rejected,
        Self::Enqueued,
        Self::Placed,
        Self::Scheduled,
        Self::Launch,
        Self::Completion,
        Self::PlacementFailed,
        Self::CompactionInvoked,
        Self::CompactionAborted,
        Self::Halt,
        Self::Migration,
        Self::Resume,
        Self::CompactionDone,
        Self::HypervisorDelay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Arrival => "arrival",
            Self::Rejected => "rejected",
            Self::Enqueued => "enqueued",
            Self::Placed => "placed",
            Self::Scheduled => "scheduled",
            Self::Launch => "launch",
            Self::Completion => "completion",
            Self::PlacementFailed => "placement_failed",
            Self::CompactionInvoked => "compaction_invoked",
            Self::CompactionAborted => "compaction_aborted",
            Self::Halt => "halt",
            Self::Migration => "migration",
            Self::Resume => "resume",
            Self::CompactionDone => "compaction_done",
            Self::HypervisorDelay => "hypervisor_delay",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: Cycles,
    pub seq: u64,
    pub kind: TraceKind,
    pub kernel: Option<KernelId>,
    pub at: Option<RegionCoord>,
    pub to: Option<RegionCoord>,
    pub value: u64,
    pub aux: u64,
}

/// Counters collected while a run progresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunStats {
    pub events: u64,
    pub scheduling_attempts: u64,
    /// Attempts where the head did not fit but the free area passed the
    /// blocking test.
    pub fragmentation_events: u64,
    pub compactions_invoked: u64,
    pub compactions_applied: u64,
    pub compactions_aborted: u64,
    pub migrations: u64,
    pub lost_work_cycles: Cycles,
    /// Time integral of the number of holes, in hole-cycles.
    pub hole_cycles: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub pe_rows: usize,
    pub pe_cols: usize,
    pub scheduler: SchedulerConfig,
    pub costs: MigrationCostModel,
    pub contention: ContentionPolicy,
    /// Skip trace collection (fitness evaluation does not need it).
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid_height: 4,
            grid_width: 4,
            pe_rows: FabricGrid::DEFAULT_PE_ROWS,
            pe_cols: FabricGrid::DEFAULT_PE_COLS,
            scheduler: SchedulerConfig::default(),
            costs: MigrationCostModel::default(),
            contention: ContentionPolicy::FairShare,
            record_trace: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.grid_height == 0 || self.grid_width == 0 || self.pe_rows == 0 || self.pe_cols == 0 {
            return Err(SimError::InvalidConfig("grid and region dimensions must be positive"));
        }
        if self.grid_height * self.grid_width > 64 {
            return Err(SimError::InvalidConfig("grids are limited to 64 regions"));
        }
        self.scheduler.validate().map_err(SimError::InvalidConfig)?;
        self.costs.validate()?;
        Ok(())
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    /// Kernels in submission order.
    pub kernels: Vec<KernelInstance>,
    /// Kernels refused at admission because they exceed the grid.
    pub rejected: Vec<KernelId>,
    pub stats: RunStats,
    pub trace: Vec<TraceRecord>,
    pub end_time: Cycles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct RunSlot {
    pub rate: u64,
    /// Version of the pending completion event; `None` until one is queued.
    pub version: Option<u64>,
}

/// One simulation instance. Drive it with [`Simulation::step`] or
/// [`Simulation::run`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub(crate) config: SimConfig,
    pub(crate) grid: FabricGrid,
    pub(crate) kernels: Vec<KernelInstance>,
    pub(crate) index: BTreeMap<KernelId, usize>,
    pub(crate) queue: ReadyQueue,
    events: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    clock: Cycles,
    last_advance: Cycles,
    pub(crate) running: BTreeMap<usize, RunSlot>,
    next_version: u64,
    pub(crate) hv_busy_until: Cycles,
    pub(crate) compacting: bool,
    pub(crate) rejected: Vec<KernelId>,
    pub(crate) stats: RunStats,
    trace: Vec<TraceRecord>,
    holes: u64,
    holes_since: Cycles,
}

impl Simulation {
    pub fn new(config: SimConfig, workload: &Workload) -> Result<Self, SimError> {
        config.validate()?;
        let mut sim = Self {
            config,
            grid: FabricGrid::with_region_pes(config.grid_height, config.grid_width, config.pe_rows, config.pe_cols),
            kernels: Vec::with_capacity(workload.jobs.len()),
            index: BTreeMap::new(),
            queue: ReadyQueue::default(),
            events: BinaryHeap::new(),
            next_seq: 0,
            clock: 0,
            last_advance: 0,
            running: BTreeMap::new(),
            next_version: 0,
            hv_busy_until: 0,
            compacting: false,
            rejected: Vec::new(),
            stats: RunStats::default(),
            trace: Vec::new(),
            holes: 1,
            holes_since: 0,
        };
        // arrivals in time order; equal times keep submission order
        let mut order: Vec<usize> = (0..workload.jobs.len()).collect();
        order.sort_by_key(|&i| workload.jobs[i].arrival);
        for i in order {
            let job = &workload.jobs[i];
            job.spec.validate()?;
            if sim.index.insert(job.spec.id, sim.kernels.len()).is_some() {
                return Err(SimError::DuplicateKernel(job.spec.id));
            }
            sim.push_event(job.arrival, EventKind::Arrival(sim.kernels.len()));
            sim.kernels.push(KernelInstance::new(job.spec.clone()));
        }
        if let Some(first) = workload.jobs.iter().map(|j| j.arrival).min() {
            sim.clock = first;
            sim.last_advance = first;
            sim.holes_since = first;
        }
        Ok(sim)
    }

    pub fn clock(&self) -> Cycles {
        self.clock
    }

    pub fn grid(&self) -> &FabricGrid {
        &self.grid
    }

    pub fn kernels(&self) -> &[KernelInstance] {
        &self.kernels
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub(crate) fn push_event(&mut self, time: Cycles, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(Reverse(Event { time, seq, kind }));
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn record(
        &mut self,
        time: Cycles,
        kind: TraceKind,
        kernel: Option<KernelId>,
        at: Option<RegionCoord>,
        to: Option<RegionCoord>,
        value: u64,
        aux: u64,
    ) {
        if self.config.record_trace {
            let seq = self.trace.len() as u64;
            self.trace.push(TraceRecord { time, seq, kind, kernel, at, to, value, aux });
        }
    }

    /// Pops and applies the earliest event; returns the new clock.
    pub fn step(&mut self) -> Result<Cycles, SimError> {
        let Reverse(ev) = self.events.pop().ok_or(SimError::EmptyQueue)?;
        if ev.time < self.clock {
            return Err(SimError::Internal("event scheduled in the past"));
        }
        self.clock = ev.time;
        self.stats.events += 1;
        let t = ev.time;
        match ev.kind {
            EventKind::Arrival(slot) => self.on_arrival(slot, t)?,
            EventKind::Enqueued(slot) => self.on_enqueued(slot, t)?,
            EventKind::Scheduled(slot) => {
                let id = self.kernels[slot].id();
                self.record(t, TraceKind::Scheduled, Some(id), None, None, 0, 0);
            }
            EventKind::Launch(slot) => self.on_launch(slot, t)?,
            EventKind::Completion { slot, version } => {
                if self.running.get(&slot).and_then(|s| s.version) == Some(version) {
                    self.on_completion(slot, t)?;
                }
            }
            EventKind::Resume(slot) => self.on_resume(slot, t)?,
            EventKind::CompactionDone => self.on_compaction_done(t)?,
        }
        Ok(self.clock)
    }

    /// Runs until the event queue drains.
    pub fn run(mut self) -> Result<SimOutcome, SimError> {
        loop {
            match self.step() {
                Ok(_) => {}
                Err(SimError::EmptyQueue) => break,
                Err(e) => return Err(e),
            }
        }
        self.finish()
    }

    fn finish(mut self) -> Result<SimOutcome, SimError> {
        let pending = self.kernels.iter().filter(|k| !k.is_complete()).count() - self.rejected.len();
        if pending > 0 {
            return Err(SimError::Stalled { pending });
        }
        let end = self.kernels.iter().filter_map(|k| k.t_completed).max().unwrap_or(self.clock);
        self.occupancy_changed(end.max(self.holes_since));
        Ok(SimOutcome {
            kernels: self.kernels,
            rejected: self.rejected,
            stats: self.stats,
            trace: self.trace,
            end_time: end,
        })
    }

    /// Brings every running kernel's progress up to `now`.
    pub(crate) fn advance(&mut self, now: Cycles) -> Result<(), SimError> {
        let elapsed = now - self.last_advance;
        self.last_advance = now;
        if elapsed == 0 {
            return Ok(());
        }
        for (&slot, run) in &self.running {
            let k = &mut self.kernels[slot];
            let exec = self.grid.exec_state(k.spec.id).ok_or(SimError::Internal("running kernel not resident"))?;
            let mut p = Progress { it_now: exec.it_now, partial_work: exec.partial_work };
            integrate_progress(&mut p, &k.spec, elapsed, run.rate);
            self.grid.set_progress(k.spec.id, p.it_now, p.partial_work)?;
            k.it_now = p.it_now;
            k.productive_cycles += elapsed;
        }
        Ok(())
    }

    pub(crate) fn start_running(&mut self, slot: usize) {
        self.running.insert(slot, RunSlot { rate: 0, version: None });
    }

    pub(crate) fn stop_running(&mut self, slot: usize) {
        self.running.remove(&slot);
    }

    /// Recomputes contended rates after the running set changed and queues
    /// a completion for every kernel whose rate moved. Progress must already
    /// be advanced to `now`.
    pub(crate) fn reschedule_completions(&mut self, now: Cycles) {
        let demands: Vec<f64> = self.running.keys().map(|&s| self.kernels[s].spec.bw_demand).collect();
        let rates = self.config.contention.rates(&demands);
        let mut due = Vec::new();
        for ((&slot, run), rate) in self.running.iter_mut().zip(rates) {
            if run.rate == rate && run.version.is_some() {
                continue;
            }
            let k = &self.kernels[slot];
            let exec = self.grid.exec_state(k.spec.id).expect("running kernel is resident");
            let p = Progress { it_now: exec.it_now, partial_work: exec.partial_work };
            let version = self.next_version;
            self.next_version += 1;
            run.rate = rate;
            run.version = Some(version);
            due.push((now + cycles_to_finish(&p, &k.spec, rate), slot, version));
        }
        for (time, slot, version) in due {
            self.push_event(time, EventKind::Completion { slot, version });
        }
    }

    /// Accumulates the hole integral up to `now` and re-counts holes.
    pub(crate) fn occupancy_changed(&mut self, now: Cycles) {
        self.stats.hole_cycles += self.holes * (now - self.holes_since);
        self.holes_since = now;
        self.holes = enumerate_holes(&self.grid).len() as u64;
    }
}

/// Runs `workload` under `config` to completion.
pub fn simulate(config: SimConfig, workload: &Workload) -> Result<SimOutcome, SimError> {
    Simulation::new(config, workload)?.run()
}
