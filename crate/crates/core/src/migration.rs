// SPDX-License-Identifier: Apache-2.0

//! Live kernel migration: cost models, the stateless progress threshold,
//! gravity-point compaction and the controller-level relocation protocol.
//!
//! Costs, in cycles, for a kernel occupying `A` regions:
//!
//! ```text
//! stateless = t_config + t_lost + t_tcdm_i
//! stateful  = t_config + t_state_regs + t_tcdm_c
//! t_config     = A · t_config_per_region
//! t_state_regs = state_regs_factor · t_config      (capture and restore)
//! ```
//!
//! `t_lost` is the running time discarded by the restart. In the simulator
//! it is not stalled on the timeline; it shows up as re-executed work.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::fabric::{
    Allocation, Command, CommandKind, ConfigRef, FabricError, FabricGrid, Rect, RegionCoord, RegionState, Snapshot,
};
use crate::kernels::{progress_ratio, validate_restartability, KernelError, KernelId, KernelInstance, MigrationMode};
use crate::placement::{find_placement, largest_hole_area, OccupancyMap, PlacementRequest};
use crate::{to_ppm, Cycles, PPM};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MigrationError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("stateless threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("invalid migration cost model: {0}")]
    InvalidCostModel(&'static str),
    #[error("{kernel} is not at {expected}")]
    WrongSource { kernel: KernelId, expected: RegionCoord },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct MigrationCostModel {
    pub t_config_per_region: Cycles,
    /// Snapshot read-back plus restore, as a fraction of `t_config`.
    pub state_regs_factor: f64,
    pub tcdm_bytes_per_cycle: u64,
    /// Hypervisor bookkeeping per halted kernel (halt, resume, remap).
    pub hypervisor_overhead: Cycles,
}

impl Default for MigrationCostModel {
    fn default() -> Self {
        Self { t_config_per_region: 4_000, state_regs_factor: 0.30, tcdm_bytes_per_cycle: 16, hypervisor_overhead: 500 }
    }
}

impl MigrationCostModel {
    pub fn validate(&self) -> Result<(), MigrationError> {
        if self.state_regs_factor.is_nan() || self.state_regs_factor < 0.0 {
            return Err(MigrationError::InvalidCostModel("state_regs_factor must be >= 0"));
        }
        if self.tcdm_bytes_per_cycle == 0 {
            return Err(MigrationError::InvalidCostModel("tcdm_bytes_per_cycle must be > 0"));
        }
        Ok(())
    }

    /// Per-region configuration is distributed, so cost scales with area.
    pub fn config_cycles(&self, regions: usize) -> Cycles {
        regions as Cycles * self.t_config_per_region
    }

    pub fn state_regs_cycles(&self, t_config: Cycles) -> Cycles {
        (u128::from(t_config) * u128::from(to_ppm(self.state_regs_factor)) / u128::from(PPM)) as Cycles
    }

    pub fn tcdm_cycles(&self, bytes: u64) -> Cycles {
        bytes.div_ceil(self.tcdm_bytes_per_cycle.max(1))
    }
}

/// Breakdown of one migration's cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MigrationCharge {
    pub config: Cycles,
    pub state_regs: Cycles,
    pub tcdm: Cycles,
    pub lost: Cycles,
}

impl MigrationCharge {
    pub fn total(&self) -> Cycles {
        self.config + self.state_regs + self.tcdm + self.lost
    }

    /// Cycles the kernel sits halted while being moved.
    pub fn stall(&self) -> Cycles {
        self.config + self.state_regs + self.tcdm
    }
}

pub fn stateless_charge(k: &KernelInstance, m: &MigrationCostModel) -> MigrationCharge {
    MigrationCharge {
        config: m.config_cycles(k.spec.area()),
        state_regs: 0,
        tcdm: m.tcdm_cycles(k.spec.tcdm_bytes),
        lost: k.productive_cycles,
    }
}

pub fn stateful_charge(k: &KernelInstance, snap: &Snapshot, m: &MigrationCostModel) -> MigrationCharge {
    let config = m.config_cycles(k.spec.area());
    MigrationCharge {
        config,
        state_regs: m.state_regs_cycles(config),
        tcdm: m.tcdm_cycles(snap.tcdm_image.bytes),
        lost: 0,
    }
}

pub fn stateless_cost(k: &KernelInstance, m: &MigrationCostModel) -> Cycles {
    stateless_charge(k, m).total()
}

pub fn stateful_cost(k: &KernelInstance, snap: &Snapshot, m: &MigrationCostModel) -> Cycles {
    stateful_charge(k, snap, m).total()
}

/// Stateless relocation is only worth it while `it_now / it_total ≤ f`.
pub fn should_migrate_stateless(k: &KernelInstance, f: f64) -> Result<bool, MigrationError> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(MigrationError::InvalidThreshold(f));
    }
    Ok(progress_ratio(k) <= f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub kernel: KernelId,
    pub from: RegionCoord,
    pub to: RegionCoord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactionPlan {
    /// Moves in an order that never overlaps two live allocations.
    pub moves: Vec<Move>,
    /// Virtual image of the fabric after all moves.
    pub resulting_layout: FabricGrid,
}

/// Greedy compaction towards the south-west corner, computed on a virtual
/// image of the fabric.
///
/// Running kernels not listed in `pinned` are lifted off the image and
/// re-placed one by one, nearest to the gravity point first, at the first
/// feasible window in scan order. Everything else stays put. Returns a plan
/// only when the compacted layout admits `pending`, at least one kernel
/// actually moves, and the largest hole does not shrink.
pub fn plan_compaction(grid: &FabricGrid, pending: &PlacementRequest, pinned: &[KernelId]) -> Option<CompactionPlan> {
    let pinned: BTreeSet<KernelId> = pinned.iter().copied().collect();
    let mut movable: Vec<Allocation> = grid
        .allocations()
        .filter(|a| !pinned.contains(&a.kernel) && grid.state_of(a.kernel) == Some(RegionState::Running))
        .collect();
    movable.sort_by_key(|a| (a.anchor().gravity_distance(), a.anchor().row, a.kernel));

    let mut image = OccupancyMap::snapshot_of(grid);
    for a in &movable {
        image.set_busy(&a.rect, false);
    }
    let mut moves = Vec::new();
    for a in &movable {
        let (height, width) = a.shape();
        let to = find_placement(&image, &PlacementRequest { kernel: a.kernel, height, width })?;
        image.set_busy(&Rect::new(to, height, width), true);
        if to != a.anchor() {
            moves.push(Move { kernel: a.kernel, from: a.anchor(), to });
        }
    }
    if moves.is_empty() || find_placement(&image, pending).is_none() {
        return None;
    }
    // the greedy can trade one big hole for a better-shaped smaller one
    if largest_hole_area(&image) < largest_hole_area(grid) {
        return None;
    }

    let moves = order_moves(grid, &moves)?;
    let mut resulting_layout = grid.clone();
    for m in &moves {
        resulting_layout.relocate_virtual(m.kernel, m.to).ok()?;
    }
    Some(CompactionPlan { moves, resulting_layout })
}

/// Orders moves so each target is vacant when its move runs: a move whose
/// target overlaps another mover's source goes after that mover. `None` on
/// a dependency cycle.
fn order_moves(grid: &FabricGrid, moves: &[Move]) -> Option<Vec<Move>> {
    let rect_at = |m: &Move, at: RegionCoord| {
        let (h, w) = grid.allocation(m.kernel).expect("mover is resident").shape();
        Rect::new(at, h, w)
    };
    let deps: Vec<Vec<usize>> = moves
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let target = rect_at(m, m.to);
            (0..moves.len()).filter(|&j| j != i && target.overlaps(&rect_at(&moves[j], moves[j].from))).collect()
        })
        .collect();

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Visiting,
        Done,
    }
    fn visit(i: usize, deps: &[Vec<usize>], marks: &mut [Mark], out: &mut Vec<usize>) -> bool {
        match marks[i] {
            Mark::Done => return true,
            Mark::Visiting => return false,
            Mark::New => {}
        }
        marks[i] = Mark::Visiting;
        for &j in &deps[i] {
            if !visit(j, deps, marks, out) {
                return false;
            }
        }
        marks[i] = Mark::Done;
        out.push(i);
        true
    }

    let mut marks = alloc::vec![Mark::New; moves.len()];
    let mut order = Vec::with_capacity(moves.len());
    for i in 0..moves.len() {
        if !visit(i, &deps, &mut marks, &mut order) {
            return None;
        }
    }
    Some(order.into_iter().map(|i| moves[i]).collect())
}

/// Result of relocating one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationOutcome {
    pub charge: MigrationCharge,
    pub snapshot: Option<Snapshot>,
    pub allocation: Allocation,
    /// Controller commands issued, in order.
    pub commands: Vec<CommandKind>,
}

/// Moves a halted kernel to `mv.to` and leaves it `Configured` with its
/// execution state restored (stateful) or reset to iteration 0 (stateless).
/// The caller issues the final `Execute`.
pub fn relocate(
    grid: &mut FabricGrid,
    k: &mut KernelInstance,
    mv: &Move,
    mode: MigrationMode,
    model: &MigrationCostModel,
    clock: Cycles,
) -> Result<MigrationOutcome, MigrationError> {
    let id = k.id();
    validate_restartability(k, mode)?;
    let source = grid.allocation(id).ok_or(FabricError::UnknownKernel(id))?;
    if source.anchor() != mv.from {
        return Err(MigrationError::WrongSource { kernel: id, expected: mv.from });
    }
    let state = grid.state_of(id).unwrap_or(RegionState::Idle);
    if state != RegionState::Halted {
        return Err(FabricError::NotHalted { kernel: id, state }.into());
    }

    let mut commands = Vec::new();
    let (snapshot, charge) = match mode {
        MigrationMode::Stateful => {
            let snap = grid.capture_snapshot(id, clock)?;
            commands.push(CommandKind::Snapshot);
            let charge = stateful_charge(k, &snap, model);
            (Some(snap), charge)
        }
        MigrationMode::Stateless => (None, stateless_charge(k, model)),
    };

    grid.release(id)?;
    let config = ConfigRef { kernel: id, it_total: k.spec.it_total, tcdm_bytes: k.spec.tcdm_bytes };
    let target = match grid.bind(Rect::new(mv.to, source.rect.height, source.rect.width), config) {
        Ok(a) => a,
        Err(e) => {
            // put the source back so the caller sees an unchanged fabric
            grid.bind(source.rect, config).expect("source regions were just vacated");
            if let Some(snap) = &snapshot {
                grid.restore_snapshot(snap, &source).expect("same shape");
            }
            return Err(e.into());
        }
    };
    commands.push(CommandKind::Configure);

    match &snapshot {
        Some(snap) => grid.restore_snapshot(snap, &target)?,
        None => {
            k.lost_cycles += k.productive_cycles;
            k.lost_iterations += k.it_now;
            k.productive_cycles = 0;
            k.it_now = 0;
        }
    }
    k.migrations += 1;
    k.allocation = Some(target);
    Ok(MigrationOutcome { charge, snapshot, allocation: target, commands })
}

/// Full relocation protocol for one kernel: `Halt` (if running),
/// `Snapshot` (stateful), `Configure` at the target, restore or reset, then
/// `Execute`.
pub fn execute_migration(
    grid: &mut FabricGrid,
    k: &mut KernelInstance,
    mv: &Move,
    mode: MigrationMode,
    model: &MigrationCostModel,
    clock: Cycles,
) -> Result<MigrationOutcome, MigrationError> {
    validate_restartability(k, mode)?;
    let id = k.id();
    let mut commands = Vec::new();
    if grid.state_of(id) == Some(RegionState::Running) {
        grid.command(id, Command::Halt, clock)?;
        commands.push(CommandKind::Halt);
    }
    let mut outcome = relocate(grid, k, mv, mode, model, clock)?;
    grid.command(id, Command::Execute, clock)?;
    commands.append(&mut outcome.commands);
    commands.push(CommandKind::Execute);
    outcome.commands = commands;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::placement::{allocate, enumerate_holes};

    fn spec(id: u32, h: usize, w: usize, tcdm: u64) -> KernelSpec {
        KernelSpec {
            id: KernelId(id),
            kind: "gemm".into(),
            height: h,
            width: w,
            it_total: 1024,
            cycles_per_iter: 4,
            bw_demand: 0.5,
            tcdm_bytes: tcdm,
            restartable: true,
        }
    }

    fn place_running(grid: &mut FabricGrid, k: &KernelInstance, at: (usize, usize)) {
        let req = PlacementRequest::for_spec(&k.spec);
        let config = ConfigRef { kernel: k.id(), it_total: k.spec.it_total, tcdm_bytes: k.spec.tcdm_bytes };
        let a = allocate(grid, &req, RegionCoord::new(at.0, at.1), config).unwrap();
        grid.apply_command(&a, Command::Execute, 0).unwrap();
    }

    fn model(per_region: Cycles) -> MigrationCostModel {
        MigrationCostModel { t_config_per_region: per_region, ..Default::default() }
    }

    #[test]
    fn stateless_cost_examples() {
        let mut k = KernelInstance::new(spec(1, 1, 1, 0));
        k.productive_cycles = 500;
        assert_eq!(stateless_cost(&k, &model(100)), 600);

        k.productive_cycles = 0;
        let with_tcdm = MigrationCostModel { tcdm_bytes_per_cycle: 16, ..model(100) };
        let mut t = KernelInstance::new(spec(1, 1, 1, 100));
        t.productive_cycles = 0;
        assert_eq!(stateless_cost(&t, &with_tcdm), 100 + 7);

        let big = KernelInstance::new(spec(1, 2, 2, 0));
        assert_eq!(stateless_charge(&big, &model(1000)).config, 4000);
    }

    fn snapshot_for(k: &KernelInstance, tcdm: u64) -> Snapshot {
        Snapshot {
            kernel_id: k.id(),
            iteration_counter: k.it_now,
            partial_work: 0,
            agu_states: Vec::new(),
            fc_tokens: Vec::new(),
            tcdm_image: crate::fabric::TcdmImage { handle: 0, bytes: tcdm },
            capture_time: 0,
            height: k.spec.height,
            width: k.spec.width,
        }
    }

    #[test]
    fn stateful_cost_examples() {
        let k = KernelInstance::new(spec(1, 2, 2, 0));
        let m = model(1000);
        let snap = snapshot_for(&k, 0);
        assert_eq!(stateful_charge(&k, &snap, &m).state_regs, 1200);
        assert_eq!(stateful_cost(&k, &snap, &m), 5200);

        let mut half = k.clone();
        half.it_now = 512;
        half.productive_cycles = 2048;
        assert_eq!(stateful_cost(&half, &snap, &m), stateful_cost(&k, &snap, &m));
        assert!(stateless_cost(&half, &m) > stateless_cost(&k, &m));
    }

    #[test]
    fn threshold_examples() {
        let mut k = KernelInstance::new(spec(1, 1, 1, 0));
        k.spec.it_total = 100;
        k.it_now = 50;
        assert_eq!(should_migrate_stateless(&k, 0.8), Ok(true));
        k.it_now = 81;
        assert_eq!(should_migrate_stateless(&k, 0.8), Ok(false));
        k.it_now = 80;
        assert_eq!(should_migrate_stateless(&k, 0.8), Ok(true));
        k.it_now = 99;
        assert_eq!(should_migrate_stateless(&k, 1.0), Ok(true));
        assert_eq!(should_migrate_stateless(&k, 0.0), Err(MigrationError::InvalidThreshold(0.0)));
        assert!(should_migrate_stateless(&k, 1.5).is_err());
    }

    #[test]
    fn column_scenario_moves_middle_kernel_south() {
        // three stacked 1×1 regions, only the middle one still busy; a 2×1
        // kernel needs two contiguous regions in the column
        let mut grid = FabricGrid::new(3, 1);
        let k1 = KernelInstance::new(spec(1, 1, 1, 0));
        place_running(&mut grid, &k1, (1, 0));
        let pending = PlacementRequest { kernel: KernelId(3), height: 2, width: 1 };
        assert_eq!(find_placement(&grid, &pending), None);

        let plan = plan_compaction(&grid, &pending, &[]).unwrap();
        assert_eq!(plan.moves, [Move { kernel: KernelId(1), from: RegionCoord::new(1, 0), to: RegionCoord::ORIGIN }]);
        assert_eq!(find_placement(&plan.resulting_layout, &pending), Some(RegionCoord::new(1, 0)));
        // pinning the only mover makes compaction pointless
        assert!(plan_compaction(&grid, &pending, &[KernelId(1)]).is_none());
    }

    #[test]
    fn compact_layout_yields_no_plan() {
        let mut grid = FabricGrid::new(2, 2);
        let a = KernelInstance::new(spec(1, 1, 2, 0));
        place_running(&mut grid, &a, (0, 0));
        let pending = PlacementRequest { kernel: KernelId(9), height: 2, width: 2 };
        assert!(plan_compaction(&grid, &pending, &[]).is_none());
    }

    #[test]
    fn opposite_corners_are_gathered() {
        let mut grid = FabricGrid::new(2, 2);
        let near = KernelInstance::new(spec(1, 1, 1, 0));
        let far = KernelInstance::new(spec(2, 1, 1, 0));
        place_running(&mut grid, &near, (0, 0));
        place_running(&mut grid, &far, (1, 1));
        let pending = PlacementRequest { kernel: KernelId(3), height: 1, width: 2 };
        assert_eq!(find_placement(&grid, &pending), None);
        let plan = plan_compaction(&grid, &pending, &[]).unwrap();
        assert_eq!(
            plan.moves,
            [Move { kernel: KernelId(2), from: RegionCoord::new(1, 1), to: RegionCoord::new(0, 1) }]
        );
        assert_eq!(find_placement(&plan.resulting_layout, &pending), Some(RegionCoord::new(1, 0)));
        assert_eq!(enumerate_holes(&plan.resulting_layout), [Rect::new(RegionCoord::new(1, 0), 1, 2)]);
    }

    #[test]
    fn chained_moves_are_ordered() {
        // row of 4: kernels at cols 1 and 3, each 1×1; compaction moves
        // K1 to col 0 and K2 to col 1, and K2's target is K1's source
        let mut grid = FabricGrid::new(1, 4);
        let k1 = KernelInstance::new(spec(1, 1, 1, 0));
        let k2 = KernelInstance::new(spec(2, 1, 1, 0));
        place_running(&mut grid, &k1, (0, 1));
        place_running(&mut grid, &k2, (0, 3));
        let pending = PlacementRequest { kernel: KernelId(3), height: 1, width: 2 };
        let plan = plan_compaction(&grid, &pending, &[]).unwrap();
        let order: Vec<KernelId> = plan.moves.iter().map(|m| m.kernel).collect();
        assert_eq!(order, [KernelId(1), KernelId(2)]);
    }

    #[test]
    fn stateful_migration_preserves_progress() {
        let mut grid = FabricGrid::new(2, 2);
        let mut k = KernelInstance::new(spec(1, 1, 1, 256));
        place_running(&mut grid, &k, (1, 1));
        grid.set_progress(k.id(), 512, 0).unwrap();
        k.it_now = 512;
        let mv = Move { kernel: k.id(), from: RegionCoord::new(1, 1), to: RegionCoord::ORIGIN };
        let out = execute_migration(&mut grid, &mut k, &mv, MigrationMode::Stateful, &model(100), 10).unwrap();
        assert_eq!(
            out.commands,
            [CommandKind::Halt, CommandKind::Snapshot, CommandKind::Configure, CommandKind::Execute]
        );
        assert_eq!(k.it_now, 512);
        assert_eq!(grid.exec_state(k.id()).unwrap().it_now, 512);
        assert_eq!(grid.state_of(k.id()), Some(RegionState::Running));
        assert!(grid.is_idle(RegionCoord::new(1, 1)));
        assert_eq!(out.charge.total(), 100 + 30 + 16);
    }

    #[test]
    fn stateless_migration_restarts() {
        let mut grid = FabricGrid::new(2, 2);
        let mut k = KernelInstance::new(spec(1, 1, 1, 0));
        place_running(&mut grid, &k, (1, 1));
        grid.set_progress(k.id(), 512, 0).unwrap();
        k.it_now = 512;
        k.productive_cycles = 2048;
        let mv = Move { kernel: k.id(), from: RegionCoord::new(1, 1), to: RegionCoord::ORIGIN };
        let out = execute_migration(&mut grid, &mut k, &mv, MigrationMode::Stateless, &model(100), 10).unwrap();
        assert_eq!(out.commands, [CommandKind::Halt, CommandKind::Configure, CommandKind::Execute]);
        assert_eq!(k.it_now, 0);
        assert_eq!(grid.exec_state(k.id()).unwrap().it_now, 0);
        assert_eq!((k.lost_cycles, k.lost_iterations), (2048, 512));
        assert_eq!(out.charge.total(), 100 + 2048);
    }

    #[test]
    fn stateless_refuses_non_restartable() {
        let mut grid = FabricGrid::new(2, 2);
        let mut k = KernelInstance::new(KernelSpec { restartable: false, ..spec(1, 1, 1, 0) });
        place_running(&mut grid, &k, (1, 1));
        k.it_now = 10;
        grid.set_progress(k.id(), 10, 0).unwrap();
        let mv = Move { kernel: k.id(), from: RegionCoord::new(1, 1), to: RegionCoord::ORIGIN };
        let err = execute_migration(&mut grid, &mut k, &mv, MigrationMode::Stateless, &model(100), 10).unwrap_err();
        assert!(matches!(err, MigrationError::Kernel(KernelError::NonRestartable { .. })));
        // fabric untouched
        assert_eq!(grid.state_of(k.id()), Some(RegionState::Running));
        assert_eq!(grid.allocation(k.id()).unwrap().anchor(), RegionCoord::new(1, 1));
    }

    #[test]
    fn failed_relocation_restores_source() {
        let mut grid = FabricGrid::new(1, 3);
        let mut k = KernelInstance::new(spec(1, 1, 1, 0));
        let other = KernelInstance::new(spec(2, 1, 1, 0));
        place_running(&mut grid, &k, (0, 2));
        place_running(&mut grid, &other, (0, 0));
        grid.command(k.id(), Command::Halt, 0).unwrap();
        let mv = Move { kernel: k.id(), from: RegionCoord::new(0, 2), to: RegionCoord::ORIGIN };
        let err = relocate(&mut grid, &mut k, &mv, MigrationMode::Stateful, &model(1), 0).unwrap_err();
        assert!(matches!(err, MigrationError::Fabric(FabricError::Occupied(_))));
        assert_eq!(grid.allocation(k.id()).unwrap().anchor(), RegionCoord::new(0, 2));
        grid.check_invariants().unwrap();
    }
}
