//! Detection post-processing: drop low-confidence boxes, keep the best few,
//! pad the rest with empty slots.

use crate::scene_io::{RegionAnnotation, Scene};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.4;
pub const DEFAULT_MAX_REGIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepConfig {
    /// Candidates scoring strictly below this are discarded.
    pub confidence_threshold: f64,
    pub max_regions: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD, max_regions: DEFAULT_MAX_REGIONS }
    }
}

impl PrepConfig {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.confidence_threshold) && self.max_regions >= 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRegions {
    pub slots: Vec<RegionAnnotation>,
    pub active_count: usize,
}

impl PreparedRegions {
    pub fn active(&self) -> &[RegionAnnotation] {
        &self.slots[..self.active_count]
    }

    /// Slots of an already-preprocessed scene, taken as is.
    pub fn from_scene(scene: &Scene) -> Self {
        let active_count = scene.regions.iter().take_while(|r| !r.is_padding()).count();
        Self { slots: scene.regions.clone(), active_count }
    }
}

/// Filter by confidence, sort descending (stable on ties), truncate to
/// `max_regions` and pad. Padded candidates in the input are ignored.
pub fn prepare(candidates: &[RegionAnnotation], cfg: &PrepConfig) -> PreparedRegions {
    let mut kept: Vec<&RegionAnnotation> = candidates
        .iter()
        .filter(|c| !c.is_padding() && c.confidence() >= cfg.confidence_threshold)
        .collect();
    // sort_by is stable, so equal scores keep input order
    kept.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));
    kept.truncate(cfg.max_regions);

    let active_count = kept.len();
    let mut slots: Vec<RegionAnnotation> = kept.into_iter().cloned().collect();
    slots.resize_with(cfg.max_regions, RegionAnnotation::padding);
    PreparedRegions { slots, active_count }
}

/// Scene whose regions are replaced by the prepared slots.
pub fn prepare_scene(scene: &Scene, cfg: &PrepConfig) -> Scene {
    let prepared = prepare(&scene.regions, cfg);
    Scene { regions: prepared.slots, ..scene.clone() }
}
