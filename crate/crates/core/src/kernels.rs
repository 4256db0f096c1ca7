// SPDX-License-Identifier: Apache-2.0

//! Kernel descriptors, runtime instances and the kind catalog.
//!
//! A kernel is modeled as a timed job: a rectangular footprint of `h × w`
//! regions, a number of loop iterations and a per-iteration cost at full
//! memory bandwidth. Arithmetic is never executed; progress is the iteration
//! counter the address generators would expose.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use core::fmt;

use crate::fabric::Allocation;
use crate::Cycles;

/// Unique kernel identifier within one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct KernelId(pub u32);

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "K{}", self.0)
    }
}

/// How a kernel is relocated when the fabric is compacted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MigrationMode {
    /// Discard progress and restart from iteration 0 on the target.
    Stateless,
    /// Snapshot, relocate and resume from the captured iteration.
    Stateful,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("kernel {kernel} is not restartable and has made progress ({it_now} iterations); stateless migration would corrupt its output")]
    NonRestartable { kernel: KernelId, it_now: u64 },
    #[error("invalid kernel spec for {kernel}: {reason}")]
    InvalidSpec { kernel: KernelId, reason: &'static str },
}

/// Static description of one submitted kernel.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelSpec {
    pub id: KernelId,
    /// Catalog label (`gemm`, `saxpy`, ...).
    pub kind: String,
    /// Footprint height in regions.
    pub height: usize,
    /// Footprint width in regions.
    pub width: usize,
    pub it_total: u64,
    /// Cycles per iteration when the kernel has the memory bus to itself.
    pub cycles_per_iter: u64,
    /// Fraction of global memory bandwidth consumed at full rate, in `(0, 1]`.
    /// Zero disables contention for this kernel.
    pub bw_demand: f64,
    /// Initial TCDM footprint that travels with the kernel.
    pub tcdm_bytes: u64,
    /// False for kernels that overwrite their own inputs (`Y = X + Y`).
    pub restartable: bool,
}

impl KernelSpec {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let reason = if self.height == 0 || self.width == 0 {
            "shape must be at least 1x1"
        } else if self.it_total == 0 {
            "it_total must be at least 1"
        } else if self.cycles_per_iter == 0 {
            "cycles_per_iter must be at least 1"
        } else if !(0.0..=1.0).contains(&self.bw_demand) {
            "bw_demand must lie in [0, 1]"
        } else {
            return Ok(());
        };
        Err(KernelError::InvalidSpec { kernel: self.id, reason })
    }
}

/// Uncontended execution time: `it_total × cycles_per_iter`.
pub fn base_exec_cycles(spec: &KernelSpec) -> Cycles {
    spec.it_total * spec.cycles_per_iter
}

/// Runtime record of a kernel: timestamps, progress and placement.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelInstance {
    pub spec: KernelSpec,
    pub t_arrival: Option<Cycles>,
    pub t_scheduled: Option<Cycles>,
    pub t_launch: Option<Cycles>,
    pub t_completed: Option<Cycles>,
    pub it_now: u64,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub allocation: Option<Allocation>,
    pub migrations: u32,
    /// Cycles spent running since the last (re)start; this is what a
    /// stateless migration throws away.
    pub productive_cycles: Cycles,
    /// Running cycles discarded by stateless restarts.
    pub lost_cycles: Cycles,
    /// Iterations discarded by stateless restarts.
    pub lost_iterations: u64,
    /// Hypervisor time attributed to this kernel before it was scheduled
    /// (enqueue, scheduling decision, data copy, command issue).
    pub induced_delay: Cycles,
}

impl KernelInstance {
    pub fn new(spec: KernelSpec) -> Self {
        Self {
            spec,
            t_arrival: None,
            t_scheduled: None,
            t_launch: None,
            t_completed: None,
            it_now: 0,
            allocation: None,
            migrations: 0,
            productive_cycles: 0,
            lost_cycles: 0,
            lost_iterations: 0,
            induced_delay: 0,
        }
    }

    pub fn id(&self) -> KernelId {
        self.spec.id
    }

    pub fn is_complete(&self) -> bool {
        self.t_completed.is_some()
    }
}

/// Coarse progress estimate `it_now / it_total`.
pub fn progress_ratio(k: &KernelInstance) -> f64 {
    k.it_now as f64 / k.spec.it_total as f64
}

/// Stateful relocation is always safe; stateless relocation is only safe for
/// restartable kernels or ones that have not started yet.
pub fn validate_restartability(k: &KernelInstance, mode: MigrationMode) -> Result<(), KernelError> {
    match mode {
        MigrationMode::Stateful => Ok(()),
        MigrationMode::Stateless if k.spec.restartable || k.it_now == 0 => Ok(()),
        MigrationMode::Stateless => Err(KernelError::NonRestartable { kernel: k.id(), it_now: k.it_now }),
    }
}

/// Default parameters for one kernel kind.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct KernelTemplate {
    pub kind: String,
    pub height: usize,
    pub width: usize,
    pub it_total: u64,
    pub cycles_per_iter: u64,
    pub bw_demand: f64,
    pub tcdm_bytes: u64,
    pub restartable: bool,
}

impl KernelTemplate {
    pub fn instantiate(&self, id: KernelId) -> KernelSpec {
        KernelSpec {
            id,
            kind: self.kind.clone(),
            height: self.height,
            width: self.width,
            it_total: self.it_total,
            cycles_per_iter: self.cycles_per_iter,
            bw_demand: self.bw_demand,
            tcdm_bytes: self.tcdm_bytes,
            restartable: self.restartable,
        }
    }
}

/// Kind label → default parameters. Iteration order is by kind name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KernelCatalog {
    entries: BTreeMap<String, KernelTemplate>,
}

impl KernelCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// The six evaluation kinds (gemm, 2mm, mvt, covariance, relu, saxpy).
    ///
    /// Shapes span 1×1 to 2×3 regions and uncontended durations span roughly
    /// two orders of magnitude. These are calibration values, not
    /// measurements.
    pub fn evaluation_mix() -> Self {
        let mut catalog = Self::new();
        // kind, h, w, it_total, cycles/iter, bw, tcdm bytes
        let rows: [(&str, usize, usize, u64, u64, f64, u64); 6] = [
            ("gemm", 2, 2, 16_384, 16, 0.30, 65_536),
            ("2mm", 2, 3, 32_768, 16, 0.35, 98_304),
            ("mvt", 1, 2, 4_096, 16, 0.45, 16_384),
            ("covariance", 2, 1, 2_048, 64, 0.25, 32_768),
            ("relu", 1, 1, 4_096, 2, 0.55, 16_384),
            ("saxpy", 1, 1, 4_096, 4, 0.60, 16_384),
        ];
        for (kind, height, width, it_total, cycles_per_iter, bw_demand, tcdm_bytes) in rows {
            catalog.insert(KernelTemplate {
                kind: kind.to_string(),
                height,
                width,
                it_total,
                cycles_per_iter,
                bw_demand,
                tcdm_bytes,
                restartable: true,
            });
        }
        catalog
    }

    pub fn insert(&mut self, template: KernelTemplate) -> Option<KernelTemplate> {
        self.entries.insert(template.kind.clone(), template)
    }

    pub fn get(&self, kind: &str) -> Option<&KernelTemplate> {
        self.entries.get(kind)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KernelTemplate> {
        self.entries.values()
    }

    /// Template by position in kind order.
    pub fn nth(&self, index: usize) -> Option<&KernelTemplate> {
        self.entries.values().nth(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(it_total: u64, cycles_per_iter: u64, restartable: bool) -> KernelSpec {
        KernelSpec {
            id: KernelId(1),
            kind: "saxpy".into(),
            height: 1,
            width: 1,
            it_total,
            cycles_per_iter,
            bw_demand: 0.5,
            tcdm_bytes: 0,
            restartable,
        }
    }

    #[test]
    fn progress_ratio_examples() {
        let mut k = KernelInstance::new(spec(100, 1, true));
        assert_eq!(progress_ratio(&k), 0.0);
        k.it_now = 80;
        assert_eq!(progress_ratio(&k), 0.8);
        k.it_now = 100;
        assert_eq!(progress_ratio(&k), 1.0);
    }

    #[test]
    fn base_exec_is_product() {
        assert_eq!(base_exec_cycles(&spec(1000, 4, true)), 4000);
        assert_eq!(base_exec_cycles(&spec(1, 1, true)), 1);
        let gemm = KernelCatalog::evaluation_mix().get("gemm").unwrap().instantiate(KernelId(0));
        assert_eq!(base_exec_cycles(&gemm), 16_384 * 16);
    }

    #[test]
    fn restartability() {
        let saxpy = KernelInstance::new(spec(100, 1, true));
        assert!(validate_restartability(&saxpy, MigrationMode::Stateless).is_ok());

        let mut y_eq_x_plus_y = KernelInstance::new(spec(100, 1, false));
        y_eq_x_plus_y.it_now = 10;
        assert_eq!(
            validate_restartability(&y_eq_x_plus_y, MigrationMode::Stateless),
            Err(KernelError::NonRestartable { kernel: KernelId(1), it_now: 10 })
        );
        assert!(validate_restartability(&y_eq_x_plus_y, MigrationMode::Stateful).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(spec(1, 1, true).validate().is_ok());
        assert!(spec(0, 1, true).validate().is_err());
        let mut s = spec(1, 1, true);
        s.bw_demand = 1.5;
        assert!(s.validate().is_err());
        s.bw_demand = 0.0;
        s.width = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn catalog_has_evaluation_kinds() {
        let catalog = KernelCatalog::evaluation_mix();
        for kind in ["gemm", "2mm", "mvt", "covariance", "relu", "saxpy"] {
            let t = catalog.get(kind).unwrap();
            assert!(t.height * t.width <= 6);
            t.instantiate(KernelId(0)).validate().unwrap();
        }
        let durations: alloc::vec::Vec<u64> = catalog.iter().map(|t| t.it_total * t.cycles_per_iter).collect();
        let (min, max) = (durations.iter().min().unwrap(), durations.iter().max().unwrap());
        assert!(max / min >= 50);
    }
}
