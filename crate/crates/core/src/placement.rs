// SPDX-License-Identifier: Apache-2.0

//! Free-space accounting, windowed-scan placement and hole analysis.
//!
//! Windows are scanned row-major from the south-west corner: anchor rows
//! ascending, then anchor columns ascending. Kernels are never rotated.

use alloc::vec::Vec;

use crate::fabric::{Allocation, ConfigRef, FabricError, FabricGrid, Rect, RegionCoord};
use crate::kernels::{KernelId, KernelSpec};

/// A maximal all-idle rectangle.
pub type Hole = Rect;

/// Read-only view of which regions are free.
pub trait Occupancy {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn is_free(&self, row: usize, col: usize) -> bool;
}

impl Occupancy for FabricGrid {
    fn height(&self) -> usize {
        FabricGrid::height(self)
    }

    fn width(&self) -> usize {
        FabricGrid::width(self)
    }

    fn is_free(&self, row: usize, col: usize) -> bool {
        self.is_idle(RegionCoord::new(row, col))
    }
}

/// Plain free/busy bitmap, row-major from the south-west corner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyMap {
    height: usize,
    width: usize,
    free: Vec<bool>,
}

impl OccupancyMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, free: alloc::vec![true; height * width] }
    }

    /// Bit `row * width + col` set means the region is busy.
    pub fn from_busy_mask(height: usize, width: usize, mask: u64) -> Self {
        let free = (0..height * width).map(|i| mask >> i & 1 == 0).collect();
        Self { height, width, free }
    }

    pub fn snapshot_of(grid: &impl Occupancy) -> Self {
        let (h, w) = (grid.height(), grid.width());
        let free = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| grid.is_free(r, c)).collect();
        Self { height: h, width: w, free }
    }

    pub fn set_busy(&mut self, rect: &Rect, busy: bool) {
        for c in rect.cells() {
            self.free[c.row * self.width + c.col] = !busy;
        }
    }
}

impl Occupancy for OccupancyMap {
    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn is_free(&self, row: usize, col: usize) -> bool {
        self.free[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementRequest {
    pub kernel: KernelId,
    pub height: usize,
    pub width: usize,
}

impl PlacementRequest {
    pub fn for_spec(spec: &KernelSpec) -> Self {
        Self { kernel: spec.id, height: spec.height, width: spec.width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Requests larger than the grid can never be placed.
    pub fn fits_grid(&self, grid_height: usize, grid_width: usize) -> bool {
        self.height >= 1 && self.width >= 1 && self.height <= grid_height && self.width <= grid_width
    }
}

/// Summed-area table of busy regions, `(h + 1) × (w + 1)`.
struct BusyPrefix {
    width: usize,
    sums: Vec<u32>,
}

impl BusyPrefix {
    fn new(grid: &impl Occupancy) -> Self {
        let (h, w) = (grid.height(), grid.width());
        let stride = w + 1;
        let mut sums = alloc::vec![0u32; (h + 1) * stride];
        for r in 0..h {
            for c in 0..w {
                let busy = u32::from(!grid.is_free(r, c));
                sums[(r + 1) * stride + c + 1] =
                    busy + sums[r * stride + c + 1] + sums[(r + 1) * stride + c] - sums[r * stride + c];
            }
        }
        Self { width: w, sums }
    }

    fn busy_in(&self, row: usize, col: usize, h: usize, w: usize) -> u32 {
        let s = self.width + 1;
        let (r1, c1) = (row + h, col + w);
        self.sums[r1 * s + c1] + self.sums[row * s + col] - self.sums[row * s + c1] - self.sums[r1 * s + col]
    }

    fn all_free(&self, row: usize, col: usize, h: usize, w: usize) -> bool {
        self.busy_in(row, col, h, w) == 0
    }
}

/// South-west anchor of the first all-free `h × w` window in scan order.
pub fn find_placement(grid: &impl Occupancy, req: &PlacementRequest) -> Option<RegionCoord> {
    if !req.fits_grid(grid.height(), grid.width()) {
        return None;
    }
    let prefix = BusyPrefix::new(grid);
    (0..=grid.height() - req.height)
        .flat_map(|row| (0..=grid.width() - req.width).map(move |col| (row, col)))
        .find(|&(row, col)| prefix.all_free(row, col, req.height, req.width))
        .map(|(row, col)| RegionCoord::new(row, col))
}

/// Number of free regions.
pub fn free_area(grid: &impl Occupancy) -> usize {
    (0..grid.height()).map(|r| (0..grid.width()).filter(|&c| grid.is_free(r, c)).count()).sum()
}

/// Aggregate-space test: `A_free ≥ α · h · w`. When it holds for a request
/// that could not be placed, fragmentation (not capacity) is the blocker.
pub fn fragmentation_blocking(grid: &impl Occupancy, req: &PlacementRequest, alpha: f64) -> bool {
    free_area(grid) as f64 >= alpha * req.area() as f64
}

/// Every maximal all-free rectangle, in scan order of anchors then by
/// (height, width).
pub fn enumerate_holes(grid: &impl Occupancy) -> Vec<Hole> {
    let (gh, gw) = (grid.height(), grid.width());
    let prefix = BusyPrefix::new(grid);
    let mut holes = Vec::new();
    for row in 0..gh {
        for col in 0..gw {
            if !grid.is_free(row, col) {
                continue;
            }
            for h in 1..=gh - row {
                if !prefix.all_free(row, col, h, 1) {
                    break;
                }
                for w in 1..=gw - col {
                    if !prefix.all_free(row, col, h, w) {
                        break;
                    }
                    let grows_south = row > 0 && prefix.all_free(row - 1, col, h + 1, w);
                    let grows_north = row + h < gh && prefix.all_free(row, col, h + 1, w);
                    let grows_west = col > 0 && prefix.all_free(row, col - 1, h, w + 1);
                    let grows_east = col + w < gw && prefix.all_free(row, col, h, w + 1);
                    if !(grows_south || grows_north || grows_west || grows_east) {
                        holes.push(Rect::new(RegionCoord::new(row, col), h, w));
                    }
                }
            }
        }
    }
    holes
}

/// Area of the largest all-free rectangle (0 on a full grid).
pub fn largest_hole_area(grid: &impl Occupancy) -> usize {
    enumerate_holes(grid).iter().map(Rect::area).max().unwrap_or(0)
}

/// Binds the window at `anchor` to the requesting kernel and configures it.
pub fn allocate(
    grid: &mut FabricGrid,
    req: &PlacementRequest,
    anchor: RegionCoord,
    config: ConfigRef,
) -> Result<Allocation, FabricError> {
    debug_assert_eq!(req.kernel, config.kernel);
    grid.bind(Rect::new(anchor, req.height, req.width), config)
}

/// Returns all regions of a (non-running) kernel to idle.
pub fn release(grid: &mut FabricGrid, kernel: KernelId) -> Result<Allocation, FabricError> {
    grid.release(kernel)
}
