// SPDX-License-Identifier: Apache-2.0

// Windowed scan, free area and hole enumeration checked against brute-force
// cell-by-cell oracles.

use proptest::prelude::*;
use vcgra_core::fabric::{Rect, RegionCoord};
use vcgra_core::placement::{
    enumerate_holes, find_placement, fragmentation_blocking, free_area, largest_hole_area, Occupancy, OccupancyMap,
    PlacementRequest,
};
use vcgra_core::KernelId;

fn busy(mask: u64, w: usize, r: usize, c: usize) -> bool {
    mask >> (r * w + c) & 1 == 1
}

fn window_free(mask: u64, w: usize, r0: usize, c0: usize, h: usize, wd: usize) -> bool {
    (r0..r0 + h).all(|r| (c0..c0 + wd).all(|c| !busy(mask, w, r, c)))
}

/// Every anchor, rows then columns, first all-free window wins.
fn oracle_placement(mask: u64, gh: usize, gw: usize, h: usize, w: usize) -> Option<RegionCoord> {
    if h > gh || w > gw {
        return None;
    }
    for r in 0..=gh - h {
        for c in 0..=gw - w {
            if window_free(mask, gw, r, c, h, w) {
                return Some(RegionCoord::new(r, c));
            }
        }
    }
    None
}

/// All free rectangles not contained in another free rectangle.
fn oracle_holes(mask: u64, gh: usize, gw: usize) -> Vec<Rect> {
    let mut free = Vec::new();
    for r in 0..gh {
        for c in 0..gw {
            for h in 1..=gh - r {
                for w in 1..=gw - c {
                    if window_free(mask, gw, r, c, h, w) {
                        free.push(Rect::new(RegionCoord::new(r, c), h, w));
                    }
                }
            }
        }
    }
    let mut holes: Vec<Rect> =
        free.iter().copied().filter(|a| !free.iter().any(|b| b != a && b.contains_rect(a))).collect();
    holes.sort_by_key(|r| (r.anchor.row, r.anchor.col, r.height, r.width));
    holes
}

fn check_pattern(mask: u64, gh: usize, gw: usize) {
    let map = OccupancyMap::from_busy_mask(gh, gw, mask);
    let free = (0..gh * gw).filter(|&i| mask >> i & 1 == 0).count();
    assert_eq!(free_area(&map), free);
    for h in 1..=gh + 1 {
        for w in 1..=gw + 1 {
            let req = PlacementRequest { kernel: KernelId(0), height: h, width: w };
            assert_eq!(
                find_placement(&map, &req),
                oracle_placement(mask, gh, gw, h, w),
                "grid {gh}x{gw} mask {mask:#b} request {h}x{w}"
            );
        }
    }
    let mut holes = enumerate_holes(&map);
    holes.sort_by_key(|r| (r.anchor.row, r.anchor.col, r.height, r.width));
    assert_eq!(holes, oracle_holes(mask, gh, gw), "grid {gh}x{gw} mask {mask:#b}");
}

#[test]
fn exhaustive_up_to_three_by_three() {
    let mut checked = 0;
    for gh in 1..=3 {
        for gw in 1..=3 {
            for mask in 0..1u64 << (gh * gw) {
                check_pattern(mask, gh, gw);
                checked += 1;
            }
        }
    }
    // 2^1 + 2·2^2 + 2·2^3 + 2^4 + 2·2^6 + 2^9
    assert_eq!(checked, 2 + 8 + 16 + 16 + 128 + 512);
}

#[test]
fn holes_cover_every_free_region() {
    for mask in 0..1u64 << 9 {
        let map = OccupancyMap::from_busy_mask(3, 3, mask);
        let holes = enumerate_holes(&map);
        for r in 0..3 {
            for c in 0..3 {
                let covered = holes.iter().any(|h| h.contains(RegionCoord::new(r, c)));
                assert_eq!(covered, map.is_free(r, c));
            }
        }
    }
}

fn grid_and_mask() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=5, 1usize..=5).prop_flat_map(|(h, w)| (Just(h), Just(w), 0u64..1u64 << (h * w)))
}

proptest! {
    #[test]
    fn scan_matches_oracle_up_to_five_by_five((gh, gw, mask) in grid_and_mask()) {
        check_pattern(mask, gh, gw);
    }

    #[test]
    fn free_area_conservation((gh, gw, mask) in grid_and_mask(), h in 1usize..=3, w in 1usize..=3) {
        let mut map = OccupancyMap::from_busy_mask(gh, gw, mask);
        let req = PlacementRequest { kernel: KernelId(1), height: h, width: w };
        let before = free_area(&map);
        if let Some(at) = find_placement(&map, &req) {
            let rect = Rect::new(at, h, w);
            map.set_busy(&rect, true);
            prop_assert_eq!(free_area(&map), before - h * w);
            map.set_busy(&rect, false);
            prop_assert_eq!(free_area(&map), before);
        }
    }

    #[test]
    fn freeing_regions_never_hurts((gh, gw, mask) in grid_and_mask(), extra in any::<u64>(), h in 1usize..=5, w in 1usize..=5) {
        // clearing busy bits can only make requests fit and holes grow
        let fewer = mask & extra;
        let (a, b) = (OccupancyMap::from_busy_mask(gh, gw, mask), OccupancyMap::from_busy_mask(gh, gw, fewer));
        let req = PlacementRequest { kernel: KernelId(1), height: h, width: w };
        if find_placement(&a, &req).is_some() {
            prop_assert!(find_placement(&b, &req).is_some());
        }
        prop_assert!(largest_hole_area(&b) >= largest_hole_area(&a));
        if fragmentation_blocking(&a, &req, 2.0) {
            prop_assert!(fragmentation_blocking(&b, &req, 2.0));
        }
    }

    #[test]
    fn a_placement_failure_with_enough_area_means_no_hole_fits((gh, gw, mask) in grid_and_mask(), h in 1usize..=3, w in 1usize..=3) {
        let map = OccupancyMap::from_busy_mask(gh, gw, mask);
        let req = PlacementRequest { kernel: KernelId(1), height: h, width: w };
        let fits_some_hole = enumerate_holes(&map).iter().any(|r| r.height >= h && r.width >= w);
        prop_assert_eq!(find_placement(&map, &req).is_some(), fits_some_hole);
    }
}
