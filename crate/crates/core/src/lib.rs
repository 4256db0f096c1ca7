// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event model of a region-virtualized, multi-tenant
//! coarse-grained reconfigurable array (CGRA).
//!
//! The fabric is a 2D grid of uniform regions, each fronted by a small
//! controller that accepts `CONFIGURE`, `EXECUTE`, `HALT` and `SNAPSHOT`
//! commands. Adjacent regions are merged into rectangular allocations, one
//! kernel per allocation. A hypervisor places queued kernels with a windowed
//! scan, detects when fragmentation (rather than lack of space) blocks the
//! queue head, and can then compact the fabric towards the south-west corner
//! by live-migrating running kernels, either restarting them (stateless) or
//! resuming them from a snapshot (stateful).
//!
//! The crate is `no_std` and only needs `alloc`; file formats, the command
//! line and statistics live in the `vcgra` companion crate.
//!
//! Module map:
//!
//! - [`fabric`]: region grid, controller FSM, snapshot capture/restore.
//! - [`kernels`]: kernel descriptors, runtime instances and the kind catalog.
//! - [`placement`]: windowed scan, free space, holes and the blocking test.
//! - [`migration`]: migration cost models, thresholds and compaction.
//! - [`hypervisor`]: arrival queue and the scheduling loop.
//! - [`engine`]: event queue, bandwidth contention and progress integration.
//! - [`metrics`]: turnaround, makespan and tail-latency metrics.
//! - [`workloads`]: random and GA-evolved workload generation.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod engine;
pub mod fabric;
pub mod hypervisor;
pub mod kernels;
pub mod metrics;
pub mod migration;
pub mod placement;
pub mod workloads;

/// Simulated time, in accelerator clock cycles.
pub type Cycles = u64;

/// Fixed-point scale used for fractions that must stay exact (bandwidth
/// shares, progress rates, cost factors): one whole equals `PPM`.
pub const PPM: u64 = 1_000_000;

/// Converts a fraction to parts-per-million, rounding to nearest.
pub fn to_ppm(fraction: f64) -> u64 {
    if fraction <= 0.0 {
        0
    } else {
        libm::round(fraction * PPM as f64) as u64
    }
}

pub use engine::{simulate, ContentionPolicy, SimConfig, SimError, SimOutcome, Simulation};
pub use fabric::{FabricGrid, RegionCoord, RegionState};
pub use hypervisor::{HypervisorDelays, SchedulerConfig, SchedulingMode};
pub use kernels::{KernelCatalog, KernelId, KernelInstance, KernelSpec, MigrationMode};
pub use metrics::MetricsReport;
pub use migration::MigrationCostModel;
pub use workloads::{GaConfig, Job, Provenance, Workload};
