// SPDX-License-Identifier: Apache-2.0

//! Region grid, per-region controller FSM, and snapshot capture/restore.
//!
//! Every region carries a tightly coupled controller with four states. A
//! command is accepted only in its valid state:
//!
//! | state      | Configure  | Execute | Halt   | Snapshot |
//! |------------|------------|---------|--------|----------|
//! | Idle       | Configured | illegal | illegal| illegal  |
//! | Configured | illegal    | Running | illegal| illegal  |
//! | Running    | illegal    | illegal | Halted | illegal  |
//! | Halted     | Configured | Running | illegal| Halted   |
//!
//! Completion is an internal event that returns a running allocation to
//! `Idle`. Merged regions share one logical controller: commands are
//! broadcast to every region of an allocation atomically.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::kernels::KernelId;
use crate::Cycles;

/// Region position; row 0 is the southmost row, col 0 the westmost column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegionCoord {
    pub row: usize,
    pub col: usize,
}

impl RegionCoord {
    pub const ORIGIN: RegionCoord = RegionCoord { row: 0, col: 0 };

    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Manhattan distance to the south-west corner.
    pub const fn gravity_distance(self) -> usize {
        self.row + self.col
    }
}

impl fmt::Display for RegionCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RegionState {
    Idle,
    Configured,
    Running,
    Halted,
}

impl RegionState {
    pub const ALL: [RegionState; 4] = [Self::Idle, Self::Configured, Self::Running, Self::Halted];
}

/// Reference to a kernel configuration in global memory, as passed to
/// `CONFIGURE`. It carries the loop bound and TCDM footprint the controller
/// needs to set up address generators and local memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfigRef {
    pub kernel: KernelId,
    pub it_total: u64,
    pub tcdm_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Configure(ConfigRef),
    Execute,
    Halt,
    Snapshot,
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Configure(_) => CommandKind::Configure,
            Command::Execute => CommandKind::Execute,
            Command::Halt => CommandKind::Halt,
            Command::Snapshot => CommandKind::Snapshot,
        }
    }
}

/// Command opcode without payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CommandKind {
    Configure,
    Execute,
    Halt,
    Snapshot,
}

impl CommandKind {
    pub const ALL: [CommandKind; 4] = [Self::Configure, Self::Execute, Self::Halt, Self::Snapshot];

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Configure => "CONFIGURE",
            CommandKind::Execute => "EXECUTE",
            CommandKind::Halt => "HALT",
            CommandKind::Snapshot => "SNAPSHOT",
        }
    }
}

/// The controller transition table. `None` raises the illegal-command flag.
pub const fn next_state(state: RegionState, cmd: CommandKind) -> Option<RegionState> {
    use CommandKind as C;
    use RegionState as S;
    match (state, cmd) {
        (S::Idle, C::Configure) => Some(S::Configured),
        (S::Configured, C::Execute) => Some(S::Running),
        (S::Running, C::Halt) => Some(S::Halted),
        (S::Halted, C::Snapshot) => Some(S::Halted),
        (S::Halted, C::Execute) => Some(S::Running),
        (S::Halted, C::Configure) => Some(S::Configured),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FabricError {
    #[error("illegal command {} in state {state:?}", command.name())]
    IllegalCommand { state: RegionState, command: CommandKind },
    #[error("regions allocated to {0} disagree on controller state")]
    MixedState(KernelId),
    #[error("snapshot of {kernel} requested while {state:?}")]
    NotHalted { kernel: KernelId, state: RegionState },
    #[error("target allocation is {found_h}x{found_w} but the kernel needs {expected_h}x{expected_w}")]
    ShapeMismatch { expected_h: usize, expected_w: usize, found_h: usize, found_w: usize },
    #[error("regions do not form a full rectangle")]
    NotRectangular,
    #[error("region {0} is not idle")]
    NotIdle(RegionCoord),
    #[error("region {0} is already occupied")]
    Occupied(RegionCoord),
    #[error("{0} holds no allocation")]
    UnknownKernel(KernelId),
    #[error("{0} is outside the grid")]
    OutOfBounds(RegionCoord),
    #[error("{0} is running and cannot be released")]
    StillRunning(KernelId),
    #[error("progress can only accrue while {0} is running")]
    NotRunning(KernelId),
    #[error("target allocation is configured for {found}, snapshot belongs to {expected}")]
    ConfigMismatch { expected: KernelId, found: KernelId },
}

/// Rectangle of regions anchored at its south-west corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rect {
    pub anchor: RegionCoord,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub const fn new(anchor: RegionCoord, height: usize, width: usize) -> Self {
        Self { anchor, height, width }
    }

    pub const fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, c: RegionCoord) -> bool {
        c.row >= self.anchor.row
            && c.row < self.anchor.row + self.height
            && c.col >= self.anchor.col
            && c.col < self.anchor.col + self.width
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.anchor.row >= self.anchor.row
            && other.anchor.col >= self.anchor.col
            && other.anchor.row + other.height <= self.anchor.row + self.height
            && other.anchor.col + other.width <= self.anchor.col + self.width
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.anchor.row < other.anchor.row + other.height
            && other.anchor.row < self.anchor.row + self.height
            && self.anchor.col < other.anchor.col + other.width
            && other.anchor.col < self.anchor.col + self.width
    }

    pub fn cells(&self) -> impl Iterator<Item = RegionCoord> + '_ {
        let (r0, c0) = (self.anchor.row, self.anchor.col);
        (r0..r0 + self.height).flat_map(move |row| (c0..c0 + self.width).map(move |col| RegionCoord { row, col }))
    }
}

/// A rectangle of merged regions bound to one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Allocation {
    pub kernel: KernelId,
    pub rect: Rect,
}

impl Allocation {
    pub fn anchor(&self) -> RegionCoord {
        self.rect.anchor
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rect.height, self.rect.width)
    }

    pub fn area(&self) -> usize {
        self.rect.area()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub coord: RegionCoord,
    pub state: RegionState,
    pub occupant: Option<KernelId>,
    pub pe_rows: usize,
    pub pe_cols: usize,
}

/// One loop level of an affine address generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AguLevel {
    pub base_address: u64,
    pub stride: u64,
    pub bound: u64,
    pub current_index: u64,
}

/// Progression registers of one load/store address generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AguState {
    pub level_count: u8,
    pub levels: [AguLevel; 3],
    pub last_committed_load: u64,
    pub last_committed_store: u64,
}

impl AguState {
    pub const MAX_LEVELS: usize = 3;

    /// AGU registers for a kernel with `it_total` iterations after `it_now`
    /// committed iterations. The iteration space is split into at most two
    /// nested levels (outer × inner, inner ≤ 64) so that indices read as
    /// mixed-radix digits of `it_now`.
    fn at(kernel: KernelId, it_total: u64, it_now: u64) -> Self {
        const WORD: u64 = 4;
        let inner = (1..=64u64.min(it_total)).rev().find(|d| it_total % d == 0).unwrap_or(1);
        let base = 0x1000_0000 + u64::from(kernel.0) * 0x0100_0000;
        let mut s = AguState::default();
        if inner == 1 || inner == it_total {
            s.level_count = 1;
            s.levels[0] = AguLevel { base_address: base, stride: WORD, bound: it_total, current_index: it_now };
        } else {
            let outer = it_total / inner;
            s.level_count = 2;
            // outer index reaches `outer` exactly at completion
            s.levels[0] =
                AguLevel { base_address: base, stride: WORD * inner, bound: outer, current_index: it_now / inner };
            s.levels[1] = AguLevel { base_address: 0, stride: WORD, bound: inner, current_index: it_now % inner };
        }
        let last = base + it_now.saturating_sub(1) * WORD;
        s.last_committed_load = last;
        s.last_committed_store = last + 0x0080_0000;
        s
    }

    pub fn is_valid(&self) -> bool {
        (self.level_count as usize) <= Self::MAX_LEVELS
            && self.levels[..self.level_count as usize].iter().all(|l| l.current_index <= l.bound)
    }
}

/// Handle to a TCDM image stored in global memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcdmImage {
    pub handle: u64,
    pub bytes: u64,
}

/// Captured execution state of a halted kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub kernel_id: KernelId,
    pub iteration_counter: u64,
    /// Work already pushed into the pipeline towards the next iteration, in
    /// the engine's progress units. This is what the unconsumed FC tokens
    /// represent.
    pub partial_work: u64,
    pub agu_states: Vec<AguState>,
    pub fc_tokens: Vec<u32>,
    pub tcdm_image: TcdmImage,
    pub capture_time: Cycles,
    /// Shape of the allocation the snapshot was taken from.
    pub height: usize,
    pub width: usize,
}

/// Abstract execution state held by a resident allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecState {
    pub it_now: u64,
    pub it_total: u64,
    pub partial_work: u64,
    /// State-critical register image, frozen at the last halt.
    agu_states: Vec<AguState>,
    fc_tokens: Vec<u32>,
    tcdm: TcdmImage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Resident {
    alloc: Allocation,
    config: Option<ConfigRef>,
    exec: ExecState,
    halted_at: Option<Cycles>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Two state-critical words per PE (pending token and accumulator).
fn token_image(kernel: KernelId, it_now: u64, partial: u64, pe_count: usize) -> Vec<u32> {
    let seed = splitmix64(u64::from(kernel.0) << 40 ^ it_now.rotate_left(17) ^ partial);
    (0..pe_count * 2).map(|i| splitmix64(seed ^ i as u64) as u32).collect()
}

/// The region grid: regions plus the allocation map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FabricGrid {
    height: usize,
    width: usize,
    pe_rows: usize,
    pe_cols: usize,
    regions: Vec<Region>,
    residents: BTreeMap<KernelId, Resident>,
}

impl FabricGrid {
    pub const DEFAULT_PE_ROWS: usize = 3;
    pub const DEFAULT_PE_COLS: usize = 5;

    pub fn new(height: usize, width: usize) -> Self {
        Self::with_region_pes(height, width, Self::DEFAULT_PE_ROWS, Self::DEFAULT_PE_COLS)
    }

    pub fn with_region_pes(height: usize, width: usize, pe_rows: usize, pe_cols: usize) -> Self {
        assert!(height > 0 && width > 0, "grid must have at least one region");
        let regions = (0..height)
            .flat_map(|row| (0..width).map(move |col| RegionCoord { row, col }))
            .map(|coord| Region { coord, state: RegionState::Idle, occupant: None, pe_rows, pe_cols })
            .collect();
        Self { height, width, pe_rows, pe_cols, regions, residents: BTreeMap::new() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pes_per_region(&self) -> usize {
        self.pe_rows * self.pe_cols
    }

    fn index(&self, c: RegionCoord) -> Result<usize, FabricError> {
        if c.row < self.height && c.col < self.width {
            Ok(c.row * self.width + c.col)
        } else {
            Err(FabricError::OutOfBounds(c))
        }
    }

    pub fn region(&self, c: RegionCoord) -> Option<&Region> {
        self.index(c).ok().map(|i| &self.regions[i])
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn is_idle(&self, c: RegionCoord) -> bool {
        self.region(c).is_some_and(|r| r.state == RegionState::Idle)
    }

    pub fn idle_count(&self) -> usize {
        self.regions.iter().filter(|r| r.state == RegionState::Idle).count()
    }

    pub fn allocation(&self, kernel: KernelId) -> Option<Allocation> {
        self.residents.get(&kernel).map(|r| r.alloc)
    }

    pub fn allocations(&self) -> impl Iterator<Item = Allocation> + '_ {
        self.residents.values().map(|r| r.alloc)
    }

    pub fn state_of(&self, kernel: KernelId) -> Option<RegionState> {
        let alloc = self.residents.get(&kernel)?.alloc;
        self.region(alloc.anchor()).map(|r| r.state)
    }

    pub fn exec_state(&self, kernel: KernelId) -> Option<&ExecState> {
        self.residents.get(&kernel).map(|r| &r.exec)
    }

    /// Validates that `coords` form a full rectangle of idle regions.
    pub fn merge_regions(&self, kernel: KernelId, coords: &[RegionCoord]) -> Result<Allocation, FabricError> {
        let first = *coords.first().ok_or(FabricError::NotRectangular)?;
        for &c in coords {
            self.index(c)?;
        }
        let (mut r0, mut c0, mut r1, mut c1) = (first.row, first.col, first.row, first.col);
        for c in coords {
            r0 = r0.min(c.row);
            c0 = c0.min(c.col);
            r1 = r1.max(c.row);
            c1 = c1.max(c.col);
        }
        let rect = Rect::new(RegionCoord::new(r0, c0), r1 - r0 + 1, c1 - c0 + 1);
        let mut seen = alloc::collections::BTreeSet::new();
        if coords.len() != rect.area() || !coords.iter().all(|c| seen.insert(*c)) {
            return Err(FabricError::NotRectangular);
        }
        if let Some(busy) = rect.cells().find(|c| !self.is_idle(*c)) {
            return Err(FabricError::NotIdle(busy));
        }
        Ok(Allocation { kernel, rect })
    }

    /// Claims an idle rectangle for `config.kernel` and issues `Configure`.
    pub fn bind(&mut self, rect: Rect, config: ConfigRef) -> Result<Allocation, FabricError> {
        let kernel = config.kernel;
        if rect.height == 0 || rect.width == 0 {
            return Err(FabricError::NotRectangular);
        }
        let far = RegionCoord::new(rect.anchor.row + rect.height - 1, rect.anchor.col + rect.width - 1);
        self.index(far)?;
        if self.residents.contains_key(&kernel) {
            return Err(FabricError::Occupied(self.residents[&kernel].alloc.anchor()));
        }
        if let Some(busy) = rect.cells().find(|c| !self.is_idle(*c)) {
            return Err(FabricError::Occupied(busy));
        }
        let alloc = Allocation { kernel, rect };
        let pe_count = rect.area() * self.pes_per_region();
        self.residents.insert(
            kernel,
            Resident {
                alloc,
                config: None,
                exec: ExecState {
                    it_now: 0,
                    it_total: config.it_total,
                    partial_work: 0,
                    agu_states: Vec::new(),
                    fc_tokens: alloc::vec![0; pe_count * 2],
                    tcdm: TcdmImage { handle: 0, bytes: config.tcdm_bytes },
                },
                halted_at: None,
            },
        );
        self.apply_command(&alloc, Command::Configure(config), 0)?;
        Ok(alloc)
    }

    fn shared_state(&self, alloc: &Allocation) -> Result<RegionState, FabricError> {
        let mut states = alloc.rect.cells().map(|c| self.index(c).map(|i| self.regions[i].state));
        let first = states.next().ok_or(FabricError::NotRectangular)??;
        for s in states {
            if s? != first {
                return Err(FabricError::MixedState(alloc.kernel));
            }
        }
        Ok(first)
    }

    fn set_state(&mut self, rect: Rect, state: RegionState, occupant: Option<KernelId>) {
        for c in rect.cells() {
            let i = c.row * self.width + c.col;
            self.regions[i].state = state;
            self.regions[i].occupant = occupant;
        }
    }

    /// Broadcasts `cmd` to every region of `alloc`.
    pub fn apply_command(
        &mut self,
        alloc: &Allocation,
        cmd: Command,
        clock: Cycles,
    ) -> Result<RegionState, FabricError> {
        let state = self.shared_state(alloc)?;
        let next = next_state(state, cmd.kind()).ok_or(FabricError::IllegalCommand { state, command: cmd.kind() })?;
        let pe_count = alloc.area() * self.pes_per_region();
        let resident = self.residents.get_mut(&alloc.kernel).ok_or(FabricError::UnknownKernel(alloc.kernel))?;
        match cmd {
            Command::Configure(config) => {
                // a fresh configuration resets the execution context
                resident.config = Some(config);
                resident.exec = ExecState {
                    it_now: 0,
                    it_total: config.it_total,
                    partial_work: 0,
                    agu_states: Vec::new(),
                    fc_tokens: alloc::vec![0; pe_count * 2],
                    tcdm: TcdmImage { handle: 0, bytes: config.tcdm_bytes },
                };
                resident.halted_at = None;
            }
            Command::Halt => {
                let e = &mut resident.exec;
                e.agu_states = alloc::vec![AguState::at(alloc.kernel, e.it_total, e.it_now); 2];
                e.fc_tokens = token_image(alloc.kernel, e.it_now, e.partial_work, pe_count);
                resident.halted_at = Some(clock);
            }
            Command::Execute => resident.halted_at = None,
            Command::Snapshot => {}
        }
        self.set_state(alloc.rect, next, Some(alloc.kernel));
        Ok(next)
    }

    /// Issues `cmd` to whatever allocation `kernel` holds.
    pub fn command(&mut self, kernel: KernelId, cmd: Command, clock: Cycles) -> Result<RegionState, FabricError> {
        let alloc = self.allocation(kernel).ok_or(FabricError::UnknownKernel(kernel))?;
        self.apply_command(&alloc, cmd, clock)
    }

    /// Records committed progress of a running kernel.
    pub fn set_progress(&mut self, kernel: KernelId, it_now: u64, partial_work: u64) -> Result<(), FabricError> {
        let state = self.state_of(kernel).ok_or(FabricError::UnknownKernel(kernel))?;
        if state != RegionState::Running {
            return Err(FabricError::NotRunning(kernel));
        }
        let exec = &mut self.residents.get_mut(&kernel).expect("resident").exec;
        exec.it_now = it_now.min(exec.it_total);
        exec.partial_work = partial_work;
        Ok(())
    }

    /// Reads back the state-critical registers of a halted kernel.
    pub fn capture_snapshot(&mut self, kernel: KernelId, clock: Cycles) -> Result<Snapshot, FabricError> {
        let alloc = self.allocation(kernel).ok_or(FabricError::UnknownKernel(kernel))?;
        let state = self.shared_state(&alloc)?;
        if state != RegionState::Halted {
            return Err(FabricError::NotHalted { kernel, state });
        }
        self.apply_command(&alloc, Command::Snapshot, clock)?;
        let exec = &self.residents[&kernel].exec;
        Ok(Snapshot {
            kernel_id: kernel,
            iteration_counter: exec.it_now,
            partial_work: exec.partial_work,
            agu_states: exec.agu_states.clone(),
            fc_tokens: exec.fc_tokens.clone(),
            tcdm_image: TcdmImage {
                handle: (u64::from(kernel.0) << 32) | (clock & 0xffff_ffff),
                bytes: exec.tcdm.bytes,
            },
            capture_time: clock,
            height: alloc.rect.height,
            width: alloc.rect.width,
        })
    }

    /// Loads a snapshot into a configured allocation of the same kernel and
    /// shape. The following `Execute` resumes from the snapshot.
    pub fn restore_snapshot(&mut self, snapshot: &Snapshot, target: &Allocation) -> Result<(), FabricError> {
        let (h, w) = target.shape();
        if (h, w) != (snapshot.height, snapshot.width) {
            return Err(FabricError::ShapeMismatch {
                expected_h: snapshot.height,
                expected_w: snapshot.width,
                found_h: h,
                found_w: w,
            });
        }
        let state = self.shared_state(target)?;
        if state != RegionState::Configured {
            return Err(FabricError::IllegalCommand { state, command: CommandKind::Configure });
        }
        let resident = self.residents.get_mut(&target.kernel).ok_or(FabricError::UnknownKernel(target.kernel))?;
        let configured = resident.config.map_or(target.kernel, |c| c.kernel);
        if configured != snapshot.kernel_id {
            return Err(FabricError::ConfigMismatch { expected: snapshot.kernel_id, found: configured });
        }
        let e = &mut resident.exec;
        e.it_now = snapshot.iteration_counter.min(e.it_total);
        e.partial_work = snapshot.partial_work;
        e.agu_states = snapshot.agu_states.clone();
        e.fc_tokens = snapshot.fc_tokens.clone();
        e.tcdm = snapshot.tcdm_image;
        Ok(())
    }

    /// Internal completion: a running allocation drains and returns to idle.
    pub fn complete(&mut self, kernel: KernelId) -> Result<Allocation, FabricError> {
        let alloc = self.allocation(kernel).ok_or(FabricError::UnknownKernel(kernel))?;
        let state = self.shared_state(&alloc)?;
        if state != RegionState::Running {
            return Err(FabricError::NotRunning(kernel));
        }
        self.set_state(alloc.rect, RegionState::Idle, None);
        self.residents.remove(&kernel);
        Ok(alloc)
    }

    /// Evicts a non-running allocation and returns its regions to idle.
    pub fn release(&mut self, kernel: KernelId) -> Result<Allocation, FabricError> {
        let alloc = self.allocation(kernel).ok_or(FabricError::UnknownKernel(kernel))?;
        if self.shared_state(&alloc)? == RegionState::Running {
            return Err(FabricError::StillRunning(kernel));
        }
        self.set_state(alloc.rect, RegionState::Idle, None);
        self.residents.remove(&kernel);
        Ok(alloc)
    }

    /// Moves an allocation and its state wholesale. Only meaningful on a
    /// virtual image of the fabric; the physical path goes through the
    /// migration protocol.
    pub fn relocate_virtual(&mut self, kernel: KernelId, to: RegionCoord) -> Result<Allocation, FabricError> {
        let mut resident = self.residents.remove(&kernel).ok_or(FabricError::UnknownKernel(kernel))?;
        let old = resident.alloc;
        let state = self.region(old.anchor()).map(|r| r.state).unwrap_or(RegionState::Idle);
        self.set_state(old.rect, RegionState::Idle, None);
        let rect = Rect::new(to, old.rect.height, old.rect.width);
        let far = RegionCoord::new(to.row + rect.height - 1, to.col + rect.width - 1);
        let blocked =
            self.index(far).err().or_else(|| rect.cells().find(|c| !self.is_idle(*c)).map(FabricError::Occupied));
        if let Some(err) = blocked {
            self.set_state(old.rect, state, Some(kernel));
            self.residents.insert(kernel, resident);
            return Err(err);
        }
        resident.alloc.rect = rect;
        self.set_state(rect, state, Some(kernel));
        self.residents.insert(kernel, resident);
        Ok(Allocation { kernel, rect })
    }

    /// Checks region/allocation consistency: disjoint allocations, idle iff
    /// unoccupied, and every occupied region inside its owner's rectangle.
    pub fn check_invariants(&self) -> Result<(), &'static str> {
        let allocs: Vec<Allocation> = self.allocations().collect();
        for (i, a) in allocs.iter().enumerate() {
            if allocs[i + 1..].iter().any(|b| a.rect.overlaps(&b.rect)) {
                return Err("overlapping allocations");
            }
        }
        for r in &self.regions {
            if (r.state == RegionState::Idle) != r.occupant.is_none() {
                return Err("occupant present iff region not idle");
            }
            if let Some(k) = r.occupant {
                match self.allocation(k) {
                    Some(a) if a.rect.contains(r.coord) => {}
                    _ => return Err("occupied region outside its allocation"),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: u32, it_total: u64) -> ConfigRef {
        ConfigRef { kernel: KernelId(k), it_total, tcdm_bytes: 1024 }
    }

    fn bound(grid: &mut FabricGrid, k: u32, anchor: (usize, usize), h: usize, w: usize) -> Allocation {
        grid.bind(Rect::new(RegionCoord::new(anchor.0, anchor.1), h, w), cfg(k, 1024)).unwrap()
    }

    #[test]
    fn fsm_examples() {
        assert_eq!(next_state(RegionState::Idle, CommandKind::Configure), Some(RegionState::Configured));
        assert_eq!(next_state(RegionState::Configured, CommandKind::Execute), Some(RegionState::Running));
        assert_eq!(next_state(RegionState::Idle, CommandKind::Execute), None);

        let mut grid = FabricGrid::new(2, 2);
        let a = bound(&mut grid, 1, (0, 0), 1, 1);
        assert_eq!(grid.apply_command(&a, Command::Execute, 0), Ok(RegionState::Running));
        assert_eq!(
            grid.apply_command(&a, Command::Execute, 1),
            Err(FabricError::IllegalCommand { state: RegionState::Running, command: CommandKind::Execute })
        );
    }

    #[test]
    fn merge_regions_examples() {
        let mut grid = FabricGrid::new(2, 2);
        let a = grid.merge_regions(KernelId(1), &[RegionCoord::new(0, 0), RegionCoord::new(0, 1)]).unwrap();
        assert_eq!(a.anchor(), RegionCoord::ORIGIN);
        assert_eq!(a.shape(), (1, 2));
        assert_eq!(
            grid.merge_regions(KernelId(1), &[RegionCoord::new(0, 0), RegionCoord::new(1, 1)]),
            Err(FabricError::NotRectangular)
        );
        let r = bound(&mut grid, 2, (0, 0), 1, 1);
        grid.apply_command(&r, Command::Execute, 0).unwrap();
        assert_eq!(
            grid.merge_regions(KernelId(3), &[RegionCoord::new(0, 0)]),
            Err(FabricError::NotIdle(RegionCoord::ORIGIN))
        );
        assert_eq!(
            grid.merge_regions(KernelId(3), &[RegionCoord::new(5, 0)]),
            Err(FabricError::OutOfBounds(RegionCoord::new(5, 0)))
        );
    }

    #[test]
    fn mixed_state_is_rejected() {
        let mut grid = FabricGrid::new(1, 2);
        let a = bound(&mut grid, 1, (0, 0), 1, 2);
        grid.regions[1].state = RegionState::Running;
        assert_eq!(grid.apply_command(&a, Command::Execute, 0), Err(FabricError::MixedState(KernelId(1))));
    }

    #[test]
    fn snapshot_requires_halt() {
        let mut grid = FabricGrid::new(2, 2);
        let a = bound(&mut grid, 1, (0, 0), 1, 1);
        grid.apply_command(&a, Command::Execute, 0).unwrap();
        assert!(matches!(grid.capture_snapshot(KernelId(1), 5), Err(FabricError::NotHalted { .. })));

        grid.apply_command(&a, Command::Halt, 5).unwrap();
        let s = grid.capture_snapshot(KernelId(1), 5).unwrap();
        assert_eq!(s.iteration_counter, 0);
        assert_eq!(grid.state_of(KernelId(1)), Some(RegionState::Halted));
    }

    #[test]
    fn snapshot_passes_counter_through() {
        let mut grid = FabricGrid::new(2, 2);
        let a = bound(&mut grid, 1, (0, 0), 1, 1);
        grid.apply_command(&a, Command::Execute, 0).unwrap();
        grid.set_progress(KernelId(1), 512, 7).unwrap();
        grid.apply_command(&a, Command::Halt, 100).unwrap();
        let s = grid.capture_snapshot(KernelId(1), 100).unwrap();
        assert_eq!(s.iteration_counter, 512);
        assert_eq!(s.partial_work, 7);
        assert_eq!(s.fc_tokens.len(), 15 * 2);
        assert!(s.agu_states.iter().all(AguState::is_valid));
    }

    #[test]
    fn halted_kernels_do_not_progress() {
        let mut grid = FabricGrid::new(1, 1);
        let a = bound(&mut grid, 1, (0, 0), 1, 1);
        grid.apply_command(&a, Command::Execute, 0).unwrap();
        grid.apply_command(&a, Command::Halt, 10).unwrap();
        assert_eq!(grid.set_progress(KernelId(1), 5, 0), Err(FabricError::NotRunning(KernelId(1))));
    }

    #[test]
    fn restore_round_trip_and_shape_check() {
        let mut grid = FabricGrid::new(3, 3);
        let a = bound(&mut grid, 1, (0, 0), 1, 2);
        grid.apply_command(&a, Command::Execute, 0).unwrap();
        grid.set_progress(KernelId(1), 512, 3).unwrap();
        grid.apply_command(&a, Command::Halt, 40).unwrap();
        let snap = grid.capture_snapshot(KernelId(1), 40).unwrap();
        grid.release(KernelId(1)).unwrap();

        let wrong = bound(&mut grid, 1, (1, 0), 2, 1);
        assert!(matches!(grid.restore_snapshot(&snap, &wrong), Err(FabricError::ShapeMismatch { .. })));
        grid.release(KernelId(1)).unwrap();

        let target = bound(&mut grid, 1, (2, 1), 1, 2);
        grid.restore_snapshot(&snap, &target).unwrap();
        grid.apply_command(&target, Command::Execute, 50).unwrap();
        assert_eq!(grid.exec_state(KernelId(1)).unwrap().it_now, 512);
        grid.apply_command(&target, Command::Halt, 50).unwrap();
        let again = grid.capture_snapshot(KernelId(1), 40).unwrap();
        assert_eq!(again, snap);
    }

    #[test]
    fn completion_and_release() {
        let mut grid = FabricGrid::new(2, 2);
        let a = bound(&mut grid, 1, (0, 0), 2, 1);
        assert_eq!(grid.idle_count(), 2);
        assert_eq!(grid.release(KernelId(1)), Ok(a));
        let a = bound(&mut grid, 1, (0, 0), 2, 1);
        grid.apply_command(&a, Command::Execute, 0).unwrap();
        assert_eq!(grid.release(KernelId(1)), Err(FabricError::StillRunning(KernelId(1))));
        grid.complete(KernelId(1)).unwrap();
        assert_eq!(grid.idle_count(), 4);
        assert_eq!(grid.complete(KernelId(1)), Err(FabricError::UnknownKernel(KernelId(1))));
        grid.check_invariants().unwrap();
    }

    #[test]
    fn relocate_virtual_keeps_state() {
        let mut grid = FabricGrid::new(2, 3);
        let a = bound(&mut grid, 1, (1, 1), 1, 2);
        grid.apply_command(&a, Command::Execute, 0).unwrap();
        let b = grid.relocate_virtual(KernelId(1), RegionCoord::new(0, 0)).unwrap();
        assert_eq!(b.anchor(), RegionCoord::ORIGIN);
        assert_eq!(grid.state_of(KernelId(1)), Some(RegionState::Running));
        assert!(grid.is_idle(RegionCoord::new(1, 2)));
        // overlapping itself is fine, running off the grid is not
        assert!(grid.relocate_virtual(KernelId(1), RegionCoord::new(0, 1)).is_ok());
        assert!(grid.relocate_virtual(KernelId(1), RegionCoord::new(0, 2)).is_err());
        assert_eq!(grid.allocation(KernelId(1)).unwrap().anchor(), RegionCoord::new(0, 1));
        grid.check_invariants().unwrap();
    }
}
