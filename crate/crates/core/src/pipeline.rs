//! Desk-scale denoising loop with injection-step gating, and the
//! artifact builders behind the CLI.
//!
//! The loop does not generate images. Each step runs the global stage on
//! the current latent, optionally refines it with the regional stage, and
//! blends the result back in with `x <- alpha_s * x + beta_s * prediction`,
//! where `beta_s` ramps linearly from [`BETA_START`] to [`BETA_END`] and
//! `alpha_s = 1 - beta_s`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::attention::{global_stage_forward, regional_block_forward, AttentionError, BlockWeights, Mat, RegionalBlockInput};
use crate::box_prep::{prepare, prepare_scene, PrepConfig, PreparedRegions};
use crate::imageio::{grid_pgm, mask_pgm};
use crate::mask_assembly::{build_regional_mask, MaskError, RegionalMask, TextLayout};
use crate::region_raster::{rasterize_scene, CoverageRule, DropRecord, GridSpec};
use crate::rng;
use crate::scene_io::{load_scene, save_scene, Scene, SceneError, TokenPolicy};

pub const BETA_START: f64 = 0.02;
pub const BETA_END: f64 = 0.2;
/// Token budget for the global caption (one token per word).
pub const GLOBAL_TOKEN_LIMIT: usize = 77;

const LATENT_STREAM: u64 = 1;
const GLOBAL_WEIGHTS_STREAM: u64 = 2;
const REGIONAL_WEIGHTS_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("scene_io: {0}")]
    Scene(#[from] SceneError),
    #[error("mask_assembly: {0}")]
    Mask(#[from] MaskError),
    #[error("attention: {0}")]
    Attention(#[from] AttentionError),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn write(path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(&path, bytes).map_err(|source| PipelineError::Io { path, source })
}

/// Whether the regional stage exists in the loop at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionalMode {
    /// Applied on the first `injection_steps` steps.
    Gated,
    /// Never invoked, regardless of `injection_steps`.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopConfig {
    pub total_steps: usize,
    pub injection_steps: usize,
    /// Latent grid the loop runs on.
    pub latent: GridSpec,
    pub model_dim: usize,
    pub heads: usize,
    pub seed: u64,
    pub regional: RegionalMode,
    /// Prepend the global caption tokens to the regional sequence.
    pub global_tokens_in_regional: bool,
    pub rule: CoverageRule,
    #[serde(skip)]
    pub prep: PrepConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            total_steps: 50,
            injection_steps: 50,
            latent: GridSpec::square(16),
            model_dim: 8,
            heads: 2,
            seed: 0,
            regional: RegionalMode::Gated,
            global_tokens_in_regional: false,
            rule: CoverageRule::Center,
            prep: PrepConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.total_steps < 1 {
            return Err(PipelineError::Config("total_steps must be >= 1".into()));
        }
        if self.injection_steps > self.total_steps {
            return Err(PipelineError::Config(format!(
                "injection steps {} exceed total steps {}",
                self.injection_steps, self.total_steps
            )));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(PipelineError::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn gate(&self, step: usize) -> bool {
        step < self.injection_steps
    }

    /// `(alpha_s, beta_s)` for a step.
    pub fn schedule(&self, step: usize) -> (f64, f64) {
        let frac = if self.total_steps > 1 { step as f64 / (self.total_steps - 1) as f64 } else { 0.0 };
        let beta = BETA_START + (BETA_END - BETA_START) * frac;
        (1.0 - beta, beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopWeights {
    pub global: BlockWeights,
    pub regional: BlockWeights,
}

impl LoopWeights {
    pub fn seeded(model_dim: usize, heads: usize, seed: u64) -> Self {
        use rand::Rng as _;
        let mut g = rng::stream(seed, GLOBAL_WEIGHTS_STREAM);
        let global = BlockWeights::seeded(model_dim, heads, true, g.random());
        let mut r = rng::stream(seed, REGIONAL_WEIGHTS_STREAM);
        let regional = BlockWeights::seeded(model_dim, heads, true, r.random());
        Self { global, regional }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub index: usize,
    pub regional_applied: bool,
    pub mean: f64,
    pub variance: f64,
    pub l2_norm: f64,
}

impl StepRecord {
    fn summarize(index: usize, regional_applied: bool, x: &Mat) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let variance = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let l2_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { index, regional_applied, mean, variance, l2_norm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub steps: Vec<StepRecord>,
}

impl StepTrace {
    pub fn regional_count(&self) -> usize {
        self.steps.iter().filter(|s| s.regional_applied).count()
    }

    /// True if the applied steps form a prefix of the trace.
    pub fn is_prefix_gate(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].regional_applied || !w[1].regional_applied)
    }
}

#[derive(Debug, Clone)]
pub struct LoopResult {
    pub trace: StepTrace,
    pub latent: Mat,
    /// Regions that survived rasterization on the latent grid.
    pub regions_on_latent: usize,
}

/// Deterministic stand-in embeddings for `count` tokens of a caption.
pub fn embed_tokens(caption: &str, count: usize, dim: usize, seed: u64) -> Mat {
    let mut g = rng::stream(seed, rng::fnv1a(caption.as_bytes()));
    Mat::from_shape_fn((count, dim), |_| rng::gaussian(&mut g))
}

fn global_token_count(caption: &str) -> usize {
    if caption.trim().is_empty() {
        0
    } else {
        TokenPolicy::Words { max: GLOBAL_TOKEN_LIMIT }.tokens_for(caption)
    }
}

/// Mask, caption embeddings and global embeddings for one latent grid.
struct Conditioning {
    regions: usize,
    mask: RegionalMask,
    text: Mat,
    global: Mat,
}

fn conditioning(prepared: &PreparedRegions, scene: &Scene, cfg: &LoopConfig) -> Result<Conditioning, PipelineError> {
    let raster = rasterize_scene(prepared, &[cfg.latent], cfg.rule);
    let masks = &raster.levels[&cfg.latent.level_id];
    let layout = TextLayout::for_level(prepared, masks)?;
    let mask = build_regional_mask(masks, &layout)?;
    let mut text = Mat::zeros((layout.total_tokens(), cfg.model_dim));
    for (&slot, span) in masks.slot_ids.iter().zip(layout.spans()) {
        let region = &prepared.slots[slot];
        let e = embed_tokens(&region.caption, span.length, cfg.model_dim, cfg.seed);
        text.slice_mut(ndarray::s![span.offset..span.offset + span.length, ..]).assign(&e);
    }
    let g = global_token_count(&scene.global_caption);
    let global = embed_tokens(&scene.global_caption, g, cfg.model_dim, cfg.seed);
    Ok(Conditioning { regions: masks.region_count(), mask, text, global })
}

/// Run the gated loop. The scene's regions go through box preparation
/// first (a no-op on an already-prepared scene).
pub fn run_loop(scene: &Scene, cfg: &LoopConfig, weights: &LoopWeights) -> Result<LoopResult, PipelineError> {
    cfg.validate()?;
    let prepared = prepare(&scene.regions, &cfg.prep);
    let cond = conditioning(&prepared, scene, cfg)?;
    let regions_on_latent = cond.regions;
    let prefix = cfg.global_tokens_in_regional.then_some(&cond.global);

    let mut g = rng::stream(cfg.seed, LATENT_STREAM);
    let mut x = Mat::from_shape_fn((cfg.latent.cells(), cfg.model_dim), |_| rng::gaussian(&mut g));
    let mut steps = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let gated = cfg.gate(step);
        let mut pred = global_stage_forward(&x, &cond.global, &weights.global)?;
        // With no surviving region there is nothing to align, so the
        // regional stage is skipped even while the gate is open.
        if cfg.regional == RegionalMode::Gated && gated && regions_on_latent > 0 {
            let input = RegionalBlockInput {
                image_hidden: &pred,
                text_hidden: &cond.text,
                mask: &cond.mask,
                global_prefix: prefix,
            };
            pred = regional_block_forward(&input, &weights.regional)?;
        }
        let (alpha, beta) = cfg.schedule(step);
        x = x * alpha + pred * beta;
        let applied = gated && cfg.regional == RegionalMode::Gated;
        steps.push(StepRecord::summarize(step, applied, &x));
    }
    Ok(LoopResult { trace: StepTrace { steps }, latent: x, regions_on_latent })
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub levels: Vec<GridSpec>,
    pub rule: CoverageRule,
    pub prep: PrepConfig,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            levels: [64, 32, 16, 8].into_iter().map(GridSpec::square).collect(),
            rule: CoverageRule::Center,
            prep: PrepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level_id: u32,
    pub height: usize,
    pub width: usize,
    pub region_count: usize,
    pub slots: Vec<usize>,
    pub text_tokens: usize,
    pub image_tokens: usize,
    pub background_cells: usize,
    pub i2i_all_ones: bool,
    pub files: Vec<String>,
}

/// Contents of `report.json`. Wall-clock timings are kept out of the file
/// so reruns stay byte-identical; they are returned alongside.
#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub source_id: String,
    pub rule: CoverageRule,
    pub candidate_count: usize,
    pub active_count: usize,
    pub levels: Vec<LevelReport>,
    pub drop_log: Vec<DropRecord>,
    #[serde(skip)]
    pub timings: Vec<(String, Duration)>,
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.to_owned(), source })
}

/// Build and persist every per-level mask for one scene file.
///
/// Writes `scene.prepared.json`, and per level `level_<id>.rmask`,
/// `level_<id>.rattn`, `level_<id>_joint.pgm`, `level_<id>_background.pgm`,
/// then `report.json`.
pub fn build_all(scene_path: &Path, cfg: &BuildConfig, out_dir: &Path) -> Result<BuildReport, PipelineError> {
    let mut timings = Vec::new();
    let t0 = Instant::now();
    let scene = load_scene(scene_path)?;
    let prepared = prepare(&scene.regions, &cfg.prep);
    timings.push(("load_and_prepare".to_owned(), t0.elapsed()));

    ensure_dir(out_dir)?;
    save_scene(&prepare_scene(&scene, &cfg.prep), out_dir.join("scene.prepared.json"))?;

    let t1 = Instant::now();
    let raster = rasterize_scene(&prepared, &cfg.levels, cfg.rule);
    timings.push(("rasterize".to_owned(), t1.elapsed()));

    let mut levels = Vec::new();
    for (&level_id, masks) in &raster.levels {
        let t = Instant::now();
        let layout = TextLayout::for_level(&prepared, masks)?;
        let mask = build_regional_mask(masks, &layout)?;
        let stem = format!("level_{level_id}");
        let files = vec![
            format!("{stem}.rmask"),
            format!("{stem}.rattn"),
            format!("{stem}_joint.pgm"),
            format!("{stem}_background.pgm"),
        ];
        write(out_dir.join(&files[0]), masks.to_rmask())?;
        write(out_dir.join(&files[1]), mask.to_rattn())?;
        write(out_dir.join(&files[2]), mask_pgm(&mask.joint))?;
        write(out_dir.join(&files[3]), grid_pgm(&masks.background, masks.grid.height, masks.grid.width))?;
        levels.push(LevelReport {
            level_id,
            height: masks.grid.height,
            width: masks.grid.width,
            region_count: masks.region_count(),
            slots: masks.slot_ids.clone(),
            text_tokens: mask.text_tokens(),
            image_tokens: mask.image_tokens(),
            background_cells: masks.background.iter().filter(|&&b| b).count(),
            i2i_all_ones: mask.i2i.count_ones() == mask.image_tokens() * mask.image_tokens(),
            files,
        });
        timings.push((format!("level_{level_id}"), t.elapsed()));
    }

    let report = BuildReport {
        source_id: scene.source_id.clone(),
        rule: cfg.rule,
        candidate_count: scene.regions.iter().filter(|r| !r.is_padding()).count(),
        active_count: prepared.active_count,
        levels,
        drop_log: raster.drops,
        timings,
    };
    write(out_dir.join("report.json"), to_json(&report))?;
    Ok(report)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub source_id: String,
    pub config: LoopConfig,
    pub regions_on_latent: usize,
    pub regional_steps: usize,
    pub final_mean: f64,
    pub final_l2_norm: f64,
}

/// Run the loop on a scene file and write `trace.json`,
/// `final_latent.json` and `simulate.json`.
pub fn simulate(scene_path: &Path, cfg: &LoopConfig, out_dir: &Path) -> Result<(SimulateReport, LoopResult), PipelineError> {
    let scene = load_scene(scene_path)?;
    let weights = LoopWeights::seeded(cfg.model_dim, cfg.heads, cfg.seed);
    let result = run_loop(&scene, cfg, &weights)?;
    ensure_dir(out_dir)?;
    write(out_dir.join("trace.json"), to_json(&result.trace))?;
    let rows: Vec<Vec<f64>> = result.latent.rows().into_iter().map(|r| r.to_vec()).collect();
    write(out_dir.join("final_latent.json"), to_json(&rows))?;
    let last = result.trace.steps.last().copied();
    let report = SimulateReport {
        source_id: scene.source_id,
        config: cfg.clone(),
        regions_on_latent: result.regions_on_latent,
        regional_steps: result.trace.regional_count(),
        final_mean: last.map_or(0.0, |s| s.mean),
        final_l2_norm: last.map_or(0.0, |s| s.l2_norm),
    };
    write(out_dir.join("simulate.json"), to_json(&report))?;
    Ok((report, result))
}
