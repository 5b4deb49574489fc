//! COCO-style datasets: ingestion, validation, stride subsampling,
//! multi-source merging and per-class statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Frame rate assumed for datasets whose frames carry no explicit clock.
pub const DEFAULT_FPS: f64 = 30.0;

/// The eight driving classes, in alphabetical order; their position is the
/// canonical category id used when merging sources.
pub const CANONICAL_CLASSES: [&str; 8] = [
    "bicycle",
    "bus",
    "car",
    "motorcycle",
    "person",
    "stop sign",
    "traffic light",
    "truck",
];

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(ImageId);
id_type!(CategoryId);
id_type!(AnnId);
id_type!(SequenceId);

pub type Categories = BTreeMap<CategoryId, String>;

pub fn canonical_categories() -> Categories {
    CANONICAL_CLASSES
        .iter()
        .enumerate()
        .map(|(i, n)| (CategoryId(i as u64), n.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image_id: ImageId,
    pub file_name: String,
    pub sequence_id: SequenceId,
    pub frame_index: u64,
    /// Seconds on the stream clock, `frame_index / fps`.
    pub timestamp: f64,
    pub width: u32,
    pub height: u32,
    /// Originating source name, set by [`merge`].
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtAnnotation {
    pub ann_id: AnnId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub area: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<FrameRecord>,
    pub annotations: Vec<GtAnnotation>,
    pub categories: Categories,
}

// On-disk COCO layout.

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sid: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fid: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

impl Dataset {
    pub fn new(
        images: Vec<FrameRecord>,
        annotations: Vec<GtAnnotation>,
        categories: Categories,
    ) -> Result<Self> {
        let d = Dataset {
            images,
            annotations,
            categories,
        };
        d.validate()?;
        Ok(d)
    }

    /// Checks referential integrity: unique image and annotation ids, and
    /// every annotation pointing at a known image and category.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.images.len());
        for img in &self.images {
            if !ids.insert(img.image_id) {
                return Err(Error::Integrity(format!("duplicate image id {}", img.image_id)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::Malformed(format!(
                    "image {} has zero width or height",
                    img.image_id
                )));
            }
        }
        let mut ann_ids = HashSet::with_capacity(self.annotations.len());
        for ann in &self.annotations {
            if !ann_ids.insert(ann.ann_id) {
                return Err(Error::Integrity(format!("duplicate annotation id {}", ann.ann_id)));
            }
            if !ids.contains(&ann.image_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references unknown image {}",
                    ann.ann_id, ann.image_id
                )));
            }
            if !self.categories.contains_key(&ann.category_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references unknown category {}",
                    ann.ann_id, ann.category_id
                )));
            }
        }
        Ok(())
    }

    pub fn load_coco(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_coco_with_fps(path, DEFAULT_FPS)
    }

    pub fn load_coco_with_fps(path: impl AsRef<Path>, fps: f64) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        Self::from_coco_reader(BufReader::new(file), fps)
    }

    pub fn from_coco_str(s: &str, fps: f64) -> Result<Self> {
        Self::from_coco_reader(s.as_bytes(), fps)
    }

    fn from_coco_reader<R: std::io::Read>(reader: R, fps: f64) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        let raw: CocoFile = serde_json::from_reader(reader)?;

        let mut categories = Categories::new();
        for c in raw.categories {
            if categories.insert(CategoryId(c.id), c.name).is_some() {
                return Err(Error::Integrity(format!("duplicate category id {}", c.id)));
            }
        }

        // frames without an explicit fid are numbered in file order per sequence
        let mut next_ordinal: HashMap<u64, u64> = HashMap::new();
        let images: Vec<FrameRecord> = raw
            .images
            .into_iter()
            .map(|im| {
                let sid = im.sid.unwrap_or(0);
                let ordinal = next_ordinal.entry(sid).or_insert(0);
                let frame_index = im.fid.unwrap_or(*ordinal);
                *ordinal = (*ordinal).max(frame_index) + 1;
                FrameRecord {
                    image_id: ImageId(im.id),
                    file_name: im.file_name,
                    sequence_id: SequenceId(sid),
                    frame_index,
                    timestamp: frame_index as f64 / fps,
                    width: im.width,
                    height: im.height,
                    source: im.source,
                }
            })
            .collect();

        let dims: HashMap<ImageId, (u32, u32)> = images
            .iter()
            .map(|f| (f.image_id, (f.width, f.height)))
            .collect();
        let annotations = raw
            .annotations
            .into_iter()
            .map(|a| {
                let image_id = ImageId(a.image_id);
                let bbox = match dims.get(&image_id) {
                    Some(&(w, h)) => a.bbox.clip(0.0, 0.0, w as f64, h as f64),
                    None => a.bbox,
                };
                GtAnnotation {
                    ann_id: AnnId(a.id),
                    image_id,
                    category_id: CategoryId(a.category_id),
                    bbox,
                    area: a.area.unwrap_or_else(|| bbox.area()),
                }
            })
            .collect();

        Dataset::new(images, annotations, categories)
    }

    pub fn to_coco_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_coco())?)
    }

    pub fn save_coco(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        serde_json::to_writer_pretty(&mut w, &self.to_coco())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn to_coco(&self) -> CocoFile {
        CocoFile {
            images: self
                .images
                .iter()
                .map(|f| CocoImage {
                    id: f.image_id.0,
                    file_name: f.file_name.clone(),
                    width: f.width,
                    height: f.height,
                    sid: Some(f.sequence_id.0),
                    fid: Some(f.frame_index),
                    source: f.source.clone(),
                })
                .collect(),
            annotations: self
                .annotations
                .iter()
                .map(|a| CocoAnnotation {
                    id: a.ann_id.0,
                    image_id: a.image_id.0,
                    category_id: a.category_id.0,
                    bbox: a.bbox,
                    area: Some(a.area),
                })
                .collect(),
            categories: self
                .categories
                .iter()
                .map(|(id, name)| CocoCategory {
                    id: id.0,
                    name: name.clone(),
                })
                .collect(),
        }
    }

    /// Recomputes every frame timestamp as `frame_index / fps`.
    pub fn retime(&mut self, fps: f64) {
        for f in &mut self.images {
            f.timestamp = f.frame_index as f64 / fps;
        }
    }

    pub fn image(&self, id: ImageId) -> Option<&FrameRecord> {
        self.images.iter().find(|f| f.image_id == id)
    }

    /// Annotations grouped by image, preserving file order within each image.
    pub fn annotations_by_image(&self) -> HashMap<ImageId, Vec<&GtAnnotation>> {
        let mut map: HashMap<ImageId, Vec<&GtAnnotation>> = HashMap::new();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    /// Frames of each sequence, ordered by frame index.
    pub fn sequences(&self) -> BTreeMap<SequenceId, Vec<&FrameRecord>> {
        let mut map: BTreeMap<SequenceId, Vec<&FrameRecord>> = BTreeMap::new();
        for f in &self.images {
            map.entry(f.sequence_id).or_default().push(f);
        }
        for frames in map.values_mut() {
            frames.sort_by_key(|f| f.frame_index);
        }
        map
    }

    /// Drops annotations (and categories) not in `keep`.
    pub fn retain_categories(&mut self, keep: &BTreeSet<CategoryId>) {
        self.annotations.retain(|a| keep.contains(&a.category_id));
        self.categories.retain(|id, _| keep.contains(id));
    }

    /// Every annotation box, in file order.
    pub fn boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }
}

/// Keeps frames with `frame_index % stride == 0`, independently per
/// sequence, together with their annotations.
pub fn subsample_stride(d: &Dataset, stride: u64) -> Result<Dataset> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let images: Vec<FrameRecord> = d
        .images
        .iter()
        .filter(|f| f.frame_index % stride == 0)
        .cloned()
        .collect();
    let kept: HashSet<ImageId> = images.iter().map(|f| f.image_id).collect();
    let annotations = d
        .annotations
        .iter()
        .filter(|a| kept.contains(&a.image_id))
        .cloned()
        .collect();
    Ok(Dataset {
        images,
        annotations,
        categories: d.categories.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapEntry {
    pub source: String,
    pub from_id: u64,
    pub to_id: u64,
}

/// Mapping from `(source, category)` onto a unified category set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    map: HashMap<(String, CategoryId), CategoryId>,
    pub categories: Categories,
}

impl ClassMap {
    /// Builds a map onto the eight canonical classes.
    pub fn canonical(entries: &[ClassMapEntry]) -> Result<Self> {
        Self::with_categories(entries, canonical_categories())
    }

    pub fn with_categories(entries: &[ClassMapEntry], categories: Categories) -> Result<Self> {
        let mut map = HashMap::with_capacity(entries.len());
        for e in entries {
            if !categories.contains_key(&CategoryId(e.to_id)) {
                return Err(Error::Integrity(format!(
                    "class map target {} is not a unified category",
                    e.to_id
                )));
            }
            map.insert((e.source.clone(), CategoryId(e.from_id)), CategoryId(e.to_id));
        }
        Ok(ClassMap { map, categories })
    }

    /// Reads a JSON array of `{source, from_id, to_id}` onto the canonical classes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let entries: Vec<ClassMapEntry> =
            serde_json::from_reader(BufReader::new(File::open(path.as_ref())?))?;
        Self::canonical(&entries)
    }

    pub fn get(&self, source: &str, from: CategoryId) -> Option<CategoryId> {
        self.map.get(&(source.to_string(), from)).copied()
    }
}

/// Concatenates sources into one dataset over the unified categories.
///
/// Image, annotation and sequence ids are reassigned sequentially (starting
/// at 1 for images and annotations) so sources can never collide; the
/// originating source name is kept on each frame and prefixed to its file
/// name.
pub fn merge(parts: &[(&str, &Dataset)], class_map: &ClassMap) -> Result<Dataset> {
    let mut seen = HashSet::new();
    for (name, _) in parts {
        if !seen.insert(*name) {
            return Err(Error::NamespaceCollision(name.to_string()));
        }
    }

    let total_images = parts.iter().map(|(_, d)| d.images.len()).sum();
    let total_anns = parts.iter().map(|(_, d)| d.annotations.len()).sum();
    let mut images = Vec::with_capacity(total_images);
    let mut annotations = Vec::with_capacity(total_anns);
    let mut next_image = 1u64;
    let mut next_ann = 1u64;
    let mut next_seq = 0u64;

    for (name, part) in parts {
        let mut image_ids = HashMap::with_capacity(part.images.len());
        let mut seq_ids: BTreeMap<SequenceId, SequenceId> = BTreeMap::new();
        for f in &part.images {
            let new_id = ImageId(next_image);
            next_image += 1;
            image_ids.insert(f.image_id, new_id);
            let seq = *seq_ids.entry(f.sequence_id).or_insert_with(|| {
                next_seq += 1;
                SequenceId(next_seq - 1)
            });
            images.push(FrameRecord {
                image_id: new_id,
                file_name: format!("{name}/{}", f.file_name),
                sequence_id: seq,
                source: Some(name.to_string()),
                ..f.clone()
            });
        }
        for a in &part.annotations {
            let category_id =
                class_map
                    .get(name, a.category_id)
                    .ok_or_else(|| Error::UnmappedCategory {
                        source_name: name.to_string(),
                        from_id: a.category_id.0,
                    })?;
            let image_id = *image_ids.get(&a.image_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "annotation {} of '{name}' references unknown image {}",
                    a.ann_id, a.image_id
                ))
            })?;
            annotations.push(GtAnnotation {
                ann_id: AnnId(next_ann),
                image_id,
                category_id,
                ..a.clone()
            });
            next_ann += 1;
        }
    }

    Ok(Dataset {
        images,
        annotations,
        categories: class_map.categories.clone(),
    })
}

/// Per-category annotation counts; every declared category is present.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: BTreeMap<CategoryId, u64>,
}

impl ClassHistogram {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

impl FromIterator<(CategoryId, u64)> for ClassHistogram {
    fn from_iter<I: IntoIterator<Item = (CategoryId, u64)>>(iter: I) -> Self {
        ClassHistogram {
            counts: iter.into_iter().collect(),
        }
    }
}

pub fn class_histogram(d: &Dataset) -> ClassHistogram {
    let mut counts: BTreeMap<CategoryId, u64> = d.categories.keys().map(|&c| (c, 0)).collect();
    for a in &d.annotations {
        *counts.entry(a.category_id).or_insert(0) += 1;
    }
    ClassHistogram { counts }
}

fn require_nonzero(h: &ClassHistogram) -> Result<()> {
    match h.counts.iter().find(|(_, &n)| n == 0) {
        Some((c, _)) => Err(Error::ZeroCount(c.0)),
        None if h.counts.is_empty() => {
            Err(Error::InvalidArgument("histogram has no categories".into()))
        }
        None => Ok(()),
    }
}

/// Class sampling probabilities proportional to `1 / count`, summing to 1.
pub fn inverse_freq_sample_weights(h: &ClassHistogram) -> Result<BTreeMap<CategoryId, f64>> {
    require_nonzero(h)?;
    let norm: f64 = h.counts.values().map(|&n| 1.0 / n as f64).sum();
    Ok(h
        .counts
        .iter()
        .map(|(&c, &n)| (c, (1.0 / n as f64) / norm))
        .collect())
}

/// Loss weights `N / (C · count_c)`, giving every class the same total
/// contribution `N / C`.
pub fn class_loss_weights(h: &ClassHistogram) -> Result<BTreeMap<CategoryId, f64>> {
    require_nonzero(h)?;
    let total = h.total() as f64;
    let classes = h.counts.len() as f64;
    Ok(h
        .counts
        .iter()
        .map(|(&c, &n)| (c, total / (classes * n as f64)))
        .collect())
}

/// Per-image sampling weight: the sum of its annotations' class weights.
/// Images without annotations get weight 0.
pub fn image_sample_weights(
    d: &Dataset,
    class_weights: &BTreeMap<CategoryId, f64>,
) -> Vec<(ImageId, f64)> {
    let by_image = d.annotations_by_image();
    d.images
        .iter()
        .map(|f| {
            let w = by_image
                .get(&f.image_id)
                .map(|anns| {
                    anns.iter()
                        .map(|a| class_weights.get(&a.category_id).copied().unwrap_or(0.0))
                        .sum()
                })
                .unwrap_or(0.0);
            (f.image_id, w)
        })
        .collect()
}

/// Draws `n` image ids with replacement according to `weights`.
pub fn resample_images(weights: &[(ImageId, f64)], n: usize, seed: u64) -> Result<Vec<ImageId>> {
    let dist = WeightedIndex::new(weights.iter().map(|(_, w)| *w))
        .map_err(|e| Error::InvalidArgument(format!("cannot sample from weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| weights[dist.sample(&mut rng)].0).collect())
}
