//! Mosaic and Mixup as seedable transforms on annotated images.
//!
//! Box bookkeeping is always performed; pixel grids are carried along when
//! every input has one.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::dataset::CategoryId;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DEFAULT_MIN_BOX_AREA: f64 = 4.0;
pub const DEFAULT_MIXUP_PROBABILITY: f64 = 0.24;
pub const DEFAULT_MIXUP_BETA: f64 = 32.0;
/// Canvas fill where no source image lands.
pub const MOSAIC_FILL: f64 = 114.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub category_id: CategoryId,
}

/// Row-major pixel grid with interleaved channels (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<f64>,
}

impl PixelGrid {
    pub fn filled(width: u32, height: u32, channels: u8, value: f64) -> Self {
        PixelGrid {
            width,
            height,
            channels,
            data: vec![value; width as usize * height as usize * channels as usize],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::mismatch("pixel channels", "1 or 3", self.channels));
        }
        let n = self.width as usize * self.height as usize * self.channels as usize;
        if self.data.len() != n {
            return Err(Error::mismatch("pixel data", n, self.data.len()));
        }
        Ok(())
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    pub fn get(&self, x: u32, y: u32, c: u8) -> f64 {
        self.data[self.offset(x, y) + c as usize]
    }

    /// Reads a PGM or PPM file.
    pub fn load_pnm(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()?;
        let (width, height) = (img.width(), img.height());
        let (channels, raw) = if img.color().has_color() {
            (3, img.to_rgb8().into_raw())
        } else {
            (1, img.to_luma8().into_raw())
        };
        Ok(PixelGrid {
            width,
            height,
            channels,
            data: raw.into_iter().map(f64::from).collect(),
        })
    }

    /// Writes binary PGM (gray) or PPM (RGB), rounding to 8 bits.
    pub fn save_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(path, &bytes, self.width, self.height, color, image::ImageFormat::Pnm)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<LabeledBox>,
    #[serde(skip)]
    pub pixels: Option<PixelGrid>,
}

impl AnnotatedImage {
    /// Clips boxes to the image and drops those left without area.
    pub fn new(width: u32, height: u32, boxes: Vec<LabeledBox>, pixels: Option<PixelGrid>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image size {width}x{height} must be positive")));
        }
        if let Some(p) = &pixels {
            p.validate()?;
            if (p.width, p.height) != (width, height) {
                return Err(Error::mismatch("pixel grid size", format!("{width}x{height}"), format!("{}x{}", p.width, p.height)));
            }
        }
        let (w, h) = (width as f64, height as f64);
        let mut kept = Vec::with_capacity(boxes.len());
        for b in boxes {
            b.bbox.validate()?;
            let clipped = b.bbox.clip(0.0, 0.0, w, h);
            if clipped.area() > 0.0 {
                kept.push(LabeledBox { bbox: clipped, ..b });
            }
        }
        Ok(AnnotatedImage {
            width,
            height,
            boxes: kept,
            pixels,
        })
    }

    /// Re-validates a deserialized record.
    pub fn normalized(self) -> Result<Self> {
        AnnotatedImage::new(self.width, self.height, self.boxes, self.pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosaicConfig {
    /// Mosaic center on the 2W×2H canvas; drawn from the seed when absent.
    pub center: Option<(u32, u32)>,
    pub min_box_area: f64,
}

impl Default for MosaicConfig {
    fn default() -> Self {
        MosaicConfig {
            center: None,
            min_box_area: DEFAULT_MIN_BOX_AREA,
        }
    }
}

/// Integer center drawn uniformly from `[W/2, 3W/2] × [H/2, 3H/2]`.
pub fn mosaic_center(width: u32, height: u32, seed: u64) -> (u32, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cx = rng.random_range(width.div_ceil(2)..=3 * width / 2);
    let cy = rng.random_range(height.div_ceil(2)..=3 * height / 2);
    (cx, cy)
}

/// Canvas placement of one mosaic tile: the canvas rectangle it occupies
/// and the source offset that maps into it.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tile {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    /// canvas = source + pad
    pad_x: i64,
    pad_y: i64,
}

fn tiles(w: i64, h: i64, cx: i64, cy: i64) -> [Tile; 4] {
    let (cw, ch) = (2 * w, 2 * h);
    let tl = {
        let (x0, y0, x1, y1) = ((cx - w).max(0), (cy - h).max(0), cx, cy);
        Tile { x0, y0, x1, y1, pad_x: x0 - (w - (x1 - x0)), pad_y: y0 - (h - (y1 - y0)) }
    };
    let tr = {
        let (x0, y0, x1, y1) = (cx, (cy - h).max(0), (cx + w).min(cw), cy);
        Tile { x0, y0, x1, y1, pad_x: x0, pad_y: y0 - (h - (y1 - y0)) }
    };
    let bl = {
        let (x0, y0, x1, y1) = ((cx - w).max(0), cy, cx, (cy + h).min(ch));
        Tile { x0, y0, x1, y1, pad_x: x0 - (w - (x1 - x0)), pad_y: y0 }
    };
    let br = {
        let (x0, y0, x1, y1) = (cx, cy, (cx + w).min(cw), (cy + h).min(ch));
        Tile { x0, y0, x1, y1, pad_x: x0, pad_y: y0 }
    };
    [tl, tr, bl, br]
}

/// Four-image mosaic on a 2W×2H canvas.
///
/// Inputs go top-left, top-right, bottom-left, bottom-right around the
/// center: the top-left image's bottom-right corner sits on the center, and
/// so on. Each image is cropped to its quadrant; boxes are shifted,
/// clipped to the quadrant, and a box cut by the crop is dropped when what
/// remains is smaller than `min_box_area`.
pub fn mosaic(imgs: &[AnnotatedImage], cfg: &MosaicConfig, seed: u64) -> Result<AnnotatedImage> {
    if imgs.len() != 4 {
        return Err(Error::InvalidArgument(format!("mosaic needs 4 images, got {}", imgs.len())));
    }
    let (w, h) = (imgs[0].width, imgs[0].height);
    for img in &imgs[1..] {
        if (img.width, img.height) != (w, h) {
            return Err(Error::mismatch("mosaic input size", format!("{w}x{h}"), format!("{}x{}", img.width, img.height)));
        }
    }
    let (cx, cy) = match cfg.center {
        Some((cx, cy)) => {
            let in_range = |c: u32, n: u32| 2 * c >= n && 2 * c <= 3 * n;
            if !in_range(cx, w) || !in_range(cy, h) {
                return Err(Error::InvalidArgument(format!(
                    "mosaic center ({cx}, {cy}) outside [{}, {}] x [{}, {}]",
                    w as f64 / 2.0, 1.5 * w as f64, h as f64 / 2.0, 1.5 * h as f64
                )));
            }
            (cx, cy)
        }
        None => mosaic_center(w, h, seed),
    };
    let (cw, ch) = (2 * w, 2 * h);
    let layout = tiles(w as i64, h as i64, cx as i64, cy as i64);

    let mut boxes = Vec::new();
    for (img, t) in imgs.iter().zip(&layout) {
        for b in &img.boxes {
            let moved = b.bbox.translate(t.pad_x as f64, t.pad_y as f64);
            let (x0, y0, x1, y1) = (t.x0 as f64, t.y0 as f64, t.x1 as f64, t.y1 as f64);
            let clipped = moved.clip(x0, y0, x1, y1);
            let cut = clipped != moved;
            let area = clipped.area();
            if area <= 0.0 || (cut && area < cfg.min_box_area) {
                continue;
            }
            boxes.push(LabeledBox { bbox: clipped, category_id: b.category_id });
        }
    }

    let pixels = match imgs.iter().map(|i| i.pixels.as_ref()).collect::<Option<Vec<_>>>() {
        Some(grids) => {
            let channels = grids[0].channels;
            if grids.iter().any(|g| g.channels != channels) {
                return Err(Error::mismatch("mosaic channels", channels, "mixed"));
            }
            let mut canvas = PixelGrid::filled(cw, ch, channels, MOSAIC_FILL);
            for (g, t) in grids.iter().zip(&layout) {
                for y in t.y0..t.y1 {
                    for x in t.x0..t.x1 {
                        let (sx, sy) = ((x - t.pad_x) as u32, (y - t.pad_y) as u32);
                        let (dst, src) = (canvas.offset(x as u32, y as u32), g.offset(sx, sy));
                        let n = channels as usize;
                        canvas.data[dst..dst + n].copy_from_slice(&g.data[src..src + n]);
                    }
                }
            }
            Some(canvas)
        }
        None => None,
    };

    AnnotatedImage::new(cw, ch, boxes, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSource {
    Beta { a: f64, b: f64 },
    Fixed { lambda: f64 },
}

impl Default for LambdaSource {
    fn default() -> Self {
        LambdaSource::Beta {
            a: DEFAULT_MIXUP_BETA,
            b: DEFAULT_MIXUP_BETA,
        }
    }
}

impl LambdaSource {
    pub fn draw(&self, seed: u64) -> Result<f64> {
        match *self {
            LambdaSource::Fixed { lambda } if (0.0..=1.0).contains(&lambda) => Ok(lambda),
            LambdaSource::Fixed { lambda } => Err(Error::InvalidArgument(format!("mixup lambda {lambda} outside [0, 1]"))),
            LambdaSource::Beta { a, b } => {
                let dist = Beta::new(a, b).map_err(|e| Error::InvalidArgument(format!("beta({a}, {b}): {e}")))?;
                Ok(dist.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub lambda: LambdaSource,
    pub probability: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            lambda: LambdaSource::default(),
            probability: DEFAULT_MIXUP_PROBABILITY,
        }
    }
}

/// Blends pixels as `λ·a + (1−λ)·b` and takes the union of both box sets.
pub fn mixup(a: &AnnotatedImage, b: &AnnotatedImage, cfg: &MixupConfig, seed: u64) -> Result<AnnotatedImage> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::mismatch("mixup input size", format!("{}x{}", a.width, a.height), format!("{}x{}", b.width, b.height)));
    }
    let lambda = cfg.lambda.draw(seed)?;
    let pixels = match (&a.pixels, &b.pixels) {
        (Some(pa), Some(pb)) => {
            if pa.channels != pb.channels {
                return Err(Error::mismatch("mixup channels", pa.channels, pb.channels));
            }
            let data = pa
                .data
                .iter()
                .zip(&pb.data)
                .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                .collect();
            Some(PixelGrid { data, ..pa.clone() })
        }
        _ => None,
    };
    let mut boxes = a.boxes.clone();
    boxes.extend_from_slice(&b.boxes);
    AnnotatedImage::new(a.width, a.height, boxes, pixels)
}

/// Deterministic Bernoulli trial; each `trial_index` is an independent
/// stream of the seeded generator.
pub fn gate(probability: f64, seed: u64, trial_index: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_index);
    rng.random::<f64>() < probability
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PipelineOrder {
    /// Mixup blends two finished mosaics.
    #[default]
    MixupOfMosaics,
    /// Each mosaic tile is a mixup of two inputs.
    MosaicOfMixups,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pipeline {
    pub mosaic: MosaicConfig,
    pub mixup: MixupConfig,
    pub order: PipelineOrder,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

impl Pipeline {
    /// Mosaic always; Mixup when the gate for `sample_index` fires. Needs
    /// eight inputs: the first four form the primary mosaic and the rest
    /// are the mixup partners.
    pub fn apply(&self, imgs: &[AnnotatedImage], seed: u64, sample_index: u64) -> Result<AnnotatedImage> {
        if imgs.len() != 8 {
            return Err(Error::InvalidArgument(format!("pipeline needs 8 images, got {}", imgs.len())));
        }
        if !(0.0..=1.0).contains(&self.mixup.probability) {
            return Err(Error::InvalidArgument(format!("mixup probability {} outside [0, 1]", self.mixup.probability)));
        }
        let sample_seed = sub_seed(seed, sample_index);
        let fire = gate(self.mixup.probability, seed, sample_index);
        let (s_mosaic, s_partner, s_mix) = (sub_seed(sample_seed, 0), sub_seed(sample_seed, 1), sub_seed(sample_seed, 2));
        if !fire {
            return mosaic(&imgs[..4], &self.mosaic, s_mosaic);
        }
        match self.order {
            PipelineOrder::MixupOfMosaics => {
                let a = mosaic(&imgs[..4], &self.mosaic, s_mosaic)?;
                let b = mosaic(&imgs[4..], &self.mosaic, s_partner)?;
                mixup(&a, &b, &self.mixup, s_mix)
            }
            PipelineOrder::MosaicOfMixups => {
                let mixed = (0..4)
                    .map(|q| mixup(&imgs[q], &imgs[q + 4], &self.mixup, sub_seed(s_mix, q as u64)))
                    .collect::<Result<Vec<_>>>()?;
                mosaic(&mixed, &self.mosaic, s_mosaic)
            }
        }
    }
}
