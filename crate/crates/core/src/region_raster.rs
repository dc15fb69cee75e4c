//! Rasterize normalized boxes onto latent grids.
//!
//! Masks are flattened row-major: cell `(r, c)` lives at `r * width + c`.
//! Every level is rasterized directly from the normalized boxes; coarser
//! levels are never derived from finer ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::box_prep::PreparedRegions;
use crate::scene_io::BoundingBox;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RasterError {
    #[error("mask {index} has length {actual}, expected {expected}")]
    LengthMismatch { index: usize, actual: usize, expected: usize },
    #[error("invalid grid spec {0:?} (expected N or HxW with N, H, W >= 1)")]
    BadGrid(String),
    #[error("unknown coverage rule {0:?} (expected center or overlap)")]
    BadRule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub level_id: u32,
}

impl GridSpec {
    /// Square grid labelled by its side length.
    pub fn square(side: usize) -> Self {
        Self { height: side, width: side, level_id: side as u32 }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn unflatten(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }
}

impl FromStr for GridSpec {
    type Err = RasterError;

    /// `"16"` is a 16x16 grid with level id 16; `"12x16"` is 12 rows by 16
    /// columns with level id 12.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RasterError::BadGrid(s.to_owned());
        let parse = |t: &str| t.trim().parse::<usize>().ok().filter(|&v| v >= 1).ok_or_else(bad);
        match s.split_once(['x', 'X']) {
            None => Ok(GridSpec::square(parse(s)?)),
            Some((h, w)) => {
                let (height, width) = (parse(h)?, parse(w)?);
                Ok(GridSpec { height, width, level_id: height as u32 })
            }
        }
    }
}

/// How a box claims latent cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageRule {
    /// A cell is inside iff its center lies in the closed box.
    #[default]
    Center,
    /// A cell is inside iff it overlaps the box with positive area.
    Overlap,
}

impl FromStr for CoverageRule {
    type Err = RasterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "center" => Ok(Self::Center),
            "overlap" => Ok(Self::Overlap),
            other => Err(RasterError::BadRule(other.to_owned())),
        }
    }
}

fn covers(rule: CoverageRule, lo: f64, hi: f64, cell: usize, n: usize) -> bool {
    let n = n as f64;
    let cell = cell as f64;
    match rule {
        CoverageRule::Center => {
            let c = (cell + 0.5) / n;
            lo <= c && c <= hi
        }
        CoverageRule::Overlap => lo < (cell + 1.0) / n && hi > cell / n,
    }
}

pub fn rasterize_box(bbox: &BoundingBox, grid: &GridSpec, rule: CoverageRule) -> Vec<bool> {
    let cols: Vec<bool> = (0..grid.width).map(|c| covers(rule, bbox.x0, bbox.x1, c, grid.width)).collect();
    let mut out = Vec::with_capacity(grid.cells());
    for r in 0..grid.height {
        let row_in = covers(rule, bbox.y0, bbox.y1, r, grid.height);
        out.extend(cols.iter().map(|&c| row_in && c));
    }
    out
}

/// Complement of the union of all region masks.
pub fn background_mask(region_masks: &[Vec<bool>], grid: &GridSpec) -> Result<Vec<bool>, RasterError> {
    let n = grid.cells();
    for (index, m) in region_masks.iter().enumerate() {
        if m.len() != n {
            return Err(RasterError::LengthMismatch { index, actual: m.len(), expected: n });
        }
    }
    Ok((0..n).map(|i| !region_masks.iter().any(|m| m[i])).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionGridMasks {
    pub grid: GridSpec,
    pub region_masks: Vec<Vec<bool>>,
    /// Prepared-slot index each entry of `region_masks` came from.
    pub slot_ids: Vec<usize>,
    pub background: Vec<bool>,
}

impl RegionGridMasks {
    pub fn region_count(&self) -> usize {
        self.region_masks.len()
    }

    /// Build from already-rasterized masks; derives the background.
    pub fn from_masks(grid: GridSpec, region_masks: Vec<Vec<bool>>) -> Result<Self, RasterError> {
        let background = background_mask(&region_masks, &grid)?;
        let slot_ids = (0..region_masks.len()).collect();
        Ok(Self { grid, region_masks, slot_ids, background })
    }

    /// `RMASK v1` text dump: header, one line per region, background last.
    pub fn to_rmask(&self) -> String {
        let mut s = format!(
            "RMASK v1 {} {} {}\n",
            self.grid.height,
            self.grid.width,
            self.region_masks.len()
        );
        for m in self.region_masks.iter().chain(std::iter::once(&self.background)) {
            s.extend(m.iter().map(|&b| if b { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }

    pub fn from_rmask(text: &str, level_id: u32) -> Option<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next()?.split(' ').collect();
        if header.len() != 5 || header[0] != "RMASK" || header[1] != "v1" {
            return None;
        }
        let height: usize = header[2].parse().ok()?;
        let width: usize = header[3].parse().ok()?;
        let count: usize = header[4].parse().ok()?;
        let grid = GridSpec { height, width, level_id };
        let mut masks = Vec::with_capacity(count + 1);
        for line in lines {
            if line.len() != grid.cells() {
                return None;
            }
            let m: Option<Vec<bool>> = line
                .bytes()
                .map(|b| match b {
                    b'0' => Some(false),
                    b'1' => Some(true),
                    _ => None,
                })
                .collect();
            masks.push(m?);
        }
        if masks.len() != count + 1 {
            return None;
        }
        let background = masks.pop()?;
        Some(Self { grid, slot_ids: (0..count).collect(), region_masks: masks, background })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DropRecord {
    pub level_id: u32,
    pub slot: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SceneRaster {
    pub levels: BTreeMap<u32, RegionGridMasks>,
    pub drops: Vec<DropRecord>,
}

/// Rasterize every active slot at every level. Regions with no covered cell
/// at a level are left out of that level and logged.
pub fn rasterize_scene(prepared: &PreparedRegions, grids: &[GridSpec], rule: CoverageRule) -> SceneRaster {
    let mut out = SceneRaster::default();
    for grid in grids {
        let mut region_masks = Vec::new();
        let mut slot_ids = Vec::new();
        for (slot, region) in prepared.active().iter().enumerate() {
            let m = rasterize_box(&region.bbox, grid, rule);
            if m.iter().any(|&b| b) {
                region_masks.push(m);
                slot_ids.push(slot);
            } else {
                log::debug!("slot {slot} covers no cell at level {}", grid.level_id);
                out.drops.push(DropRecord { level_id: grid.level_id, slot });
            }
        }
        // lengths are correct by construction
        let background = background_mask(&region_masks, grid).expect("masks sized to grid");
        out.levels.insert(grid.level_id, RegionGridMasks { grid: *grid, region_masks, slot_ids, background });
    }
    out
}

/// Render a flattened mask as ASCII art, one grid row per line.
pub fn ascii_grid(mask: &[bool], grid: &GridSpec) -> String {
    let mut s = String::with_capacity(mask.len() + grid.height);
    for r in 0..grid.height {
        for c in 0..grid.width {
            s.push(if mask[grid.index(r, c)] { '#' } else { '.' });
        }
        let _ = writeln!(s);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::box_prep::{prepare, PrepConfig};
    use crate::scene_io::RegionAnnotation;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox { x0, y0, x1, y1, confidence: 0.9 }
    }

    #[test]
    fn left_half() {
        let g = GridSpec::square(8);
        let m = rasterize_box(&bx(0.0, 0.0, 0.5, 1.0), &g, CoverageRule::Center);
        assert_eq!(m.iter().filter(|&&b| b).count(), 32);
        for (i, &v) in m.iter().enumerate() {
            assert_eq!(v, g.unflatten(i).1 < 4);
        }
    }

    #[test]
    fn full_cover() {
        for g in [GridSpec::square(1), GridSpec::square(7), GridSpec { height: 3, width: 5, level_id: 3 }] {
            assert!(rasterize_box(&bx(0.0, 0.0, 1.0, 1.0), &g, CoverageRule::Center).iter().all(|&b| b));
        }
    }

    #[test]
    fn tiny_box_between_centers() {
        let g = GridSpec::square(8);
        // enumerate centers: none of (k + 0.5) / 8 falls in [0.49, 0.51]
        let hits = (0..8).filter(|k| (0.49..=0.51).contains(&((*k as f64 + 0.5) / 8.0))).count();
        assert_eq!(hits, 0);
        let m = rasterize_box(&bx(0.49, 0.49, 0.51, 0.51), &g, CoverageRule::Center);
        assert!(m.iter().all(|&b| !b));
        // overlap rule catches the four cells around the center
        let m = rasterize_box(&bx(0.49, 0.49, 0.51, 0.51), &g, CoverageRule::Overlap);
        assert_eq!(m.iter().filter(|&&b| b).count(), 4);
    }

    #[test]
    fn background_cases() {
        let g = GridSpec::square(4);
        assert!(background_mask(&[], &g).unwrap().iter().all(|&b| b));
        let all = vec![true; 16];
        assert!(background_mask(&[all], &g).unwrap().iter().all(|&b| !b));
        let top = rasterize_box(&bx(0.0, 0.0, 1.0, 0.5), &g, CoverageRule::Center);
        let bottom = rasterize_box(&bx(0.0, 0.5, 1.0, 1.0), &g, CoverageRule::Center);
        // top covers rows 0-1 (centers .125, .375), bottom rows 2-3
        assert!(top.iter().zip(&bottom).all(|(a, b)| a ^ b));
        assert!(background_mask(&[top, bottom], &g).unwrap().iter().all(|&b| !b));
        let err = background_mask(&[vec![true; 3]], &g).unwrap_err();
        assert_eq!(err, RasterError::LengthMismatch { index: 0, actual: 3, expected: 16 });
    }

    fn prepared(boxes: &[BoundingBox]) -> PreparedRegions {
        let c: Vec<_> = boxes.iter().map(|b| RegionAnnotation::new(*b, "r", 2)).collect();
        prepare(&c, &PrepConfig::default())
    }

    #[test]
    fn scene_levels_and_drops() {
        // 0.02 wide around 0.25: at 64x64 centers (k+.5)/64 hit 0.2421875..; at 8x8 none
        let tiny = bx(0.24, 0.24, 0.26, 0.26);
        let big = bx(0.5, 0.5, 1.0, 1.0);
        let p = prepared(&[big, tiny]);
        let grids = [GridSpec::square(64), GridSpec::square(8)];
        let r = rasterize_scene(&p, &grids, CoverageRule::Center);
        assert_eq!(r.levels[&64].region_count(), 2);
        assert_eq!(r.levels[&8].region_count(), 1);
        assert_eq!(r.levels[&8].slot_ids, vec![0]);
        assert_eq!(r.drops, vec![DropRecord { level_id: 8, slot: 1 }]);
        for lv in r.levels.values() {
            let union: Vec<bool> = (0..lv.grid.cells()).map(|i| lv.region_masks.iter().any(|m| m[i])).collect();
            assert!(union.iter().zip(&lv.background).all(|(u, b)| u ^ b));
        }
    }

    #[test]
    fn all_padded() {
        let p = prepared(&[]);
        let r = rasterize_scene(&p, &[GridSpec::square(4), GridSpec::square(2)], CoverageRule::Center);
        for lv in r.levels.values() {
            assert_eq!(lv.region_count(), 0);
            assert!(lv.background.iter().all(|&b| b));
        }
        assert!(r.drops.is_empty());
    }

    #[test]
    fn rmask_round_trip() {
        let g = GridSpec { height: 2, width: 3, level_id: 2 };
        let m = RegionGridMasks::from_masks(g, vec![vec![true, false, false, true, false, false]]).unwrap();
        let text = m.to_rmask();
        assert_eq!(text, "RMASK v1 2 3 1\n100100\n011011\n");
        assert_eq!(RegionGridMasks::from_rmask(&text, 2).unwrap(), m);
    }

    #[test]
    fn grid_parse() {
        assert_eq!("16".parse::<GridSpec>().unwrap(), GridSpec::square(16));
        assert_eq!("12x16".parse::<GridSpec>().unwrap(), GridSpec { height: 12, width: 16, level_id: 12 });
        assert!("0".parse::<GridSpec>().is_err());
        assert!("ax3".parse::<GridSpec>().is_err());
        assert_eq!("overlap".parse::<CoverageRule>().unwrap(), CoverageRule::Overlap);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)
            .prop_map(|(a, b, c, d)| bx(a.min(c), b.min(d), a.max(c), b.max(d)))
    }

    proptest! {
        #[test]
        fn enlarging_never_unsets(b in arb_box(), grow in (0.0..0.3f64, 0.0..0.3f64, 0.0..0.3f64, 0.0..0.3f64),
                                  h in 1usize..20, w in 1usize..20, overlap in any::<bool>()) {
            let rule = if overlap { CoverageRule::Overlap } else { CoverageRule::Center };
            let g = GridSpec { height: h, width: w, level_id: 0 };
            let big = bx((b.x0 - grow.0).max(0.0), (b.y0 - grow.1).max(0.0), (b.x1 + grow.2).min(1.0), (b.y1 + grow.3).min(1.0));
            let small_m = rasterize_box(&b, &g, rule);
            let big_m = rasterize_box(&big, &g, rule);
            prop_assert!(small_m.iter().zip(&big_m).all(|(s, l)| !s || *l));
        }

        #[test]
        fn partition(boxes in prop::collection::vec(arb_box(), 0..6), h in 1usize..17, w in 1usize..17) {
            let g = GridSpec { height: h, width: w, level_id: 0 };
            let masks: Vec<_> = boxes.iter().map(|b| rasterize_box(b, &g, CoverageRule::Center)).collect();
            let bg = background_mask(&masks, &g).unwrap();
            for i in 0..g.cells() {
                let u = masks.iter().any(|m| m[i]);
                prop_assert!(u || bg[i]);
                prop_assert!(!(u && bg[i]));
            }
        }

        #[test]
        fn levels_are_independent(b in arb_box(), sides in prop::collection::vec(1usize..24, 1..4)) {
            let p = prepared(&[b]);
            let grids: Vec<_> = sides.iter().map(|&s| GridSpec { height: s, width: s + 1, level_id: s as u32 }).collect();
            let all = rasterize_scene(&p, &grids, CoverageRule::Center);
            for g in &grids {
                let alone = rasterize_scene(&p, &[*g], CoverageRule::Center);
                prop_assert_eq!(&alone.levels[&g.level_id], &all.levels[&g.level_id]);
            }
        }

        #[test]
        fn flatten_bijective(h in 1usize..30, w in 1usize..30) {
            let g = GridSpec { height: h, width: w, level_id: 0 };
            for i in 0..g.cells() {
                let (r, c) = g.unflatten(i);
                prop_assert!(r < h && c < w);
                prop_assert_eq!(g.index(r, c), i);
            }
        }
    }
}
