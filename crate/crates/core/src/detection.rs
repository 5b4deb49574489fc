//! Scored detections in the COCO results layout.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryId, ImageId};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Malformed(format!(
                "detection score {} on image {} is outside [0, 1]",
                self.score, self.image_id
            )));
        }
        Ok(())
    }
}

/// Detections grouped per image, each group in file order.
pub type DetectionMap = HashMap<ImageId, Vec<Detection>>;

pub fn group_by_image(dets: impl IntoIterator<Item = Detection>) -> DetectionMap {
    let mut map = DetectionMap::new();
    for d in dets {
        map.entry(d.image_id).or_default().push(d);
    }
    map
}

pub fn parse_results(s: &str) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = serde_json::from_str(s)?;
    dets.iter().try_for_each(Detection::validate)?;
    Ok(dets)
}

/// Reads a COCO results array `[{image_id, category_id, bbox, score}]`.
pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    dets.iter().try_for_each(Detection::validate)?;
    Ok(dets)
}

pub fn save_results(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, dets)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
