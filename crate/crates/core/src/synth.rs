//! Synthetic streams of boxes moving at constant velocity, with a perfect
//! and a degraded detector output.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{canonical_categories, AnnId, CategoryId, Dataset, FrameRecord, GtAnnotation, ImageId, SequenceId, DEFAULT_FPS};
use crate::detection::{save_results, Detection};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const FRAME_WIDTH: u32 = 1920;
pub const FRAME_HEIGHT: u32 = 1200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub objects: usize,
    pub frames: usize,
    pub fps: f64,
    /// Per-frame velocity bounds in pixels, inclusive.
    pub vx_range: (f64, f64),
    pub vy_range: (f64, f64),
    /// Box side bounds in whole pixels, inclusive.
    pub size_range: (u32, u32),
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub degrade: DegradeConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            objects: 3,
            frames: 60,
            fps: DEFAULT_FPS,
            vx_range: (0.0, 0.0),
            vy_range: (0.0, 0.0),
            size_range: (32, 160),
            width: FRAME_WIDTH,
            height: FRAME_HEIGHT,
            seed: 0,
            degrade: DegradeConfig::default(),
        }
    }
}

/// Noise model for the degraded detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    /// Std-dev of the Gaussian jitter on every box coordinate, in pixels.
    pub jitter: f64,
    pub drop_probability: f64,
    /// Chance per frame of one spurious box.
    pub false_positive_rate: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            jitter: 3.0,
            drop_probability: 0.1,
            false_positive_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub object: usize,
    pub category_id: CategoryId,
    pub initial: BBox,
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

impl Trajectory {
    pub fn at(&self, frame: usize) -> BBox {
        let f = frame as f64;
        self.initial.translate(self.velocity.0 * f, self.velocity.1 * f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub config: SynthConfig,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub gt: Dataset,
    pub perfect: Vec<Detection>,
    pub degraded: Vec<Detection>,
    pub meta: ScenarioMeta,
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidArgument(format!("{name} range {lo},{hi} is empty or not finite")));
    }
    Ok(())
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Whole-pixel start positions keeping `[p, p + len]` inside `[0, extent]`
/// over `frames` frames of motion at `v`.
fn start_range(extent: u32, len: u32, v: f64, frames: usize) -> Option<(i64, i64)> {
    let travel = v * (frames.saturating_sub(1)) as f64;
    let lo = (-travel).max(0.0).ceil() as i64;
    let hi = (extent as f64 - len as f64 - travel.max(0.0)).floor() as i64;
    (lo <= hi).then_some((lo, hi))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidArgument("frame count must be at least 1".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {}", self.fps)));
        }
        check_range("vx", self.vx_range)?;
        check_range("vy", self.vy_range)?;
        let (smin, smax) = self.size_range;
        if smin == 0 || smin > smax || smax > self.width.min(self.height) {
            return Err(Error::InvalidArgument(format!("box size range {smin},{smax} does not fit the frame")));
        }
        let d = &self.degrade;
        if !(d.jitter >= 0.0) || !(0.0..=1.0).contains(&d.drop_probability) || !(0.0..=1.0).contains(&d.false_positive_rate) {
            return Err(Error::InvalidArgument("degradation parameters out of range".into()));
        }
        Ok(())
    }
}

/// Builds the scenario; the same config always yields the same scenario.
pub fn generate(cfg: &SynthConfig) -> Result<Scenario> {
    cfg.validate()?;
    let categories = canonical_categories();
    let n_classes = categories.len() as u64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trajectories = Vec::with_capacity(cfg.objects);
    for object in 0..cfg.objects {
        let w = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let h = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let vx = draw(&mut rng, cfg.vx_range);
        let vy = draw(&mut rng, cfg.vy_range);
        let (Some(xr), Some(yr)) = (
            start_range(cfg.width, w, vx, cfg.frames),
            start_range(cfg.height, h, vy, cfg.frames),
        ) else {
            return Err(Error::InvalidArgument(format!(
                "object {object} ({w}x{h} at {vx},{vy} px/frame) cannot stay inside the frame for {} frames",
                cfg.frames
            )));
        };
        let x = rng.random_range(xr.0..=xr.1) as f64;
        let y = rng.random_range(yr.0..=yr.1) as f64;
        trajectories.push(Trajectory {
            object,
            category_id: CategoryId(rng.random_range(0..n_classes)),
            initial: BBox::new(x, y, w as f64, h as f64),
            velocity: (vx, vy),
        });
    }

    let mut images = Vec::with_capacity(cfg.frames);
    let mut annotations = Vec::with_capacity(cfg.frames * cfg.objects);
    let mut perfect = Vec::with_capacity(cfg.frames * cfg.objects);
    for f in 0..cfg.frames {
        let image_id = ImageId(f as u64 + 1);
        images.push(FrameRecord {
            image_id,
            file_name: format!("frame_{f:06}.jpg"),
            sequence_id: SequenceId(0),
            frame_index: f as u64,
            timestamp: f as f64 / cfg.fps,
            width: cfg.width,
            height: cfg.height,
            source: None,
        });
        for t in &trajectories {
            let bbox = t.at(f);
            annotations.push(GtAnnotation {
                ann_id: AnnId(annotations.len() as u64 + 1),
                image_id,
                category_id: t.category_id,
                bbox,
                area: bbox.area(),
            });
            perfect.push(Detection {
                image_id,
                category_id: t.category_id,
                bbox,
                score: 1.0,
            });
        }
    }

    let degraded = degrade(&perfect, cfg)?;
    let gt = Dataset::new(images, annotations, categories)?;
    Ok(Scenario {
        gt,
        perfect,
        degraded,
        meta: ScenarioMeta {
            config: *cfg,
            trajectories,
        },
    })
}

fn degrade(perfect: &[Detection], cfg: &SynthConfig) -> Result<Vec<Detection>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let d = cfg.degrade;
    let noise = Normal::new(0.0, d.jitter).map_err(|e| Error::InvalidArgument(format!("jitter: {e}")))?;
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    let mut out = Vec::with_capacity(perfect.len());
    let mut frames = perfect.chunk_by(|a, b| a.image_id == b.image_id).peekable();
    for f in 0..cfg.frames {
        let image_id = ImageId(f as u64 + 1);
        let group: &[Detection] = match frames.peek() {
            Some(g) if g[0].image_id == image_id => frames.next().unwrap_or_default(),
            _ => &[],
        };
        for det in group {
            if rng.random::<f64>() < d.drop_probability {
                continue;
            }
            let b = det.bbox;
            let x = (b.x + noise.sample(&mut rng)).clamp(0.0, fw - 1.0);
            let y = (b.y + noise.sample(&mut rng)).clamp(0.0, fh - 1.0);
            let w = (b.w + noise.sample(&mut rng)).clamp(1.0, fw - x);
            let h = (b.h + noise.sample(&mut rng)).clamp(1.0, fh - y);
            out.push(Detection {
                bbox: BBox::new(x, y, w, h),
                score: rng.random_range(0.3..=1.0),
                ..*det
            });
        }
        if rng.random::<f64>() < d.false_positive_rate {
            let (smin, smax) = cfg.size_range;
            let w = rng.random_range(smin..=smax) as f64;
            let h = rng.random_range(smin..=smax) as f64;
            out.push(Detection {
                image_id,
                category_id: CategoryId(rng.random_range(0..8)),
                bbox: BBox::new(rng.random_range(0.0..=fw - w), rng.random_range(0.0..=fh - h), w, h),
                score: rng.random_range(0.05..=0.5),
            });
        }
    }
    Ok(out)
}

pub const GT_FILE: &str = "gt.json";
pub const PERFECT_FILE: &str = "dets_perfect.json";
pub const DEGRADED_FILE: &str = "dets_degraded.json";
pub const META_FILE: &str = "meta.json";

impl Scenario {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.gt.save_coco(dir.join(GT_FILE))?;
        save_results(dir.join(PERFECT_FILE), &self.perfect)?;
        save_results(dir.join(DEGRADED_FILE), &self.degraded)?;
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        fs::write(dir.join(META_FILE), meta)?;
        Ok(())
    }
}

/// Annotation-free frames for several sequences, `lengths[i]` frames in
/// sequence `i`, with globally increasing image ids starting at 1.
pub fn sequence_layout(lengths: &[u64], fps: f64) -> Dataset {
    let mut images = Vec::with_capacity(lengths.iter().sum::<u64>() as usize);
    for (sid, &n) in lengths.iter().enumerate() {
        for fid in 0..n {
            images.push(FrameRecord {
                image_id: ImageId(images.len() as u64 + 1),
                file_name: format!("seq{sid:03}/frame_{fid:06}.jpg"),
                sequence_id: SequenceId(sid as u64),
                frame_index: fid,
                timestamp: fid as f64 / fps,
                width: FRAME_WIDTH,
                height: FRAME_HEIGHT,
                source: None,
            });
        }
    }
    Dataset {
        images,
        annotations: Vec::new(),
        categories: canonical_categories(),
    }
}
