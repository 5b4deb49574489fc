//! Discrete-event simulation of a single detector fed by a fixed-rate
//! frame stream.
//!
//! Frames arrive at `frame_index / fps`. The detector runs one frame at a
//! time; each run takes a latency drawn from a [`LatencyModel`] and emits a
//! [`PredictionSnapshot`] when it completes. The resulting
//! [`PredictionTimeline`] is what streaming evaluation pairs against ground
//! truth.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FrameRecord, ImageId, DEFAULT_FPS};
use crate::detection::{Detection, DetectionMap};
use crate::error::{Error, Result};

/// Absolute tolerance for comparing instants on the stream clock.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// On completion, start the newest frame already arrived; skip the rest.
    #[default]
    LatestBlocking,
    /// FIFO over every frame, unbounded queue, no drops.
    EveryFrameQueue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub fps: f64,
    pub frame_count: usize,
    pub policy: SchedulePolicy,
}

impl StreamConfig {
    pub fn new(frame_count: usize) -> Self {
        StreamConfig {
            fps: DEFAULT_FPS,
            frame_count,
            policy: SchedulePolicy::LatestBlocking,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frame_count == 0 {
            return Err(Error::InvalidArgument("frame_count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatencyModel {
    /// Fixed seconds per frame. Zero is allowed as an idealized detector.
    Constant(f64),
    Trace(HashMap<ImageId, f64>),
    /// `exp(mu + sigma · z)`, `z` standard normal drawn from an independent
    /// seeded stream per draw index.
    LogNormal { mu: f64, sigma: f64, seed: u64 },
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    image_id: u64,
    latency_seconds: f64,
}

impl LatencyModel {
    /// Reads a CSV with header `image_id,latency_seconds`.
    pub fn load_trace(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        Self::trace_from_reader(&mut rdr)
    }

    pub fn trace_from_csv(s: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(s.as_bytes());
        Self::trace_from_reader(&mut rdr)
    }

    fn trace_from_reader<R: std::io::Read>(rdr: &mut csv::Reader<R>) -> Result<Self> {
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["image_id", "latency_seconds"] {
            return Err(Error::Malformed(format!(
                "latency trace header must be 'image_id,latency_seconds', got '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut table = HashMap::new();
        for row in rdr.deserialize() {
            let row: TraceRow = row?;
            if !(row.latency_seconds > 0.0 && row.latency_seconds.is_finite()) {
                return Err(Error::NonPositiveLatency(row.latency_seconds));
            }
            table.insert(ImageId(row.image_id), row.latency_seconds);
        }
        Ok(LatencyModel::Trace(table))
    }

    /// Latency in seconds for one detector run.
    pub fn sample(&self, image_id: ImageId, draw_index: u64) -> Result<f64> {
        let v = match self {
            LatencyModel::Constant(c) => {
                if !(*c >= 0.0 && c.is_finite()) {
                    return Err(Error::NonPositiveLatency(*c));
                }
                return Ok(*c);
            }
            LatencyModel::Trace(table) => *table
                .get(&image_id)
                .ok_or(Error::MissingTrace(image_id.0))?,
            LatencyModel::LogNormal { mu, sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(draw_index);
                let z: f64 = StandardNormal.sample(&mut rng);
                (mu + sigma * z).exp()
            }
        };
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonPositiveLatency(v))
        }
    }
}

pub fn sample_latency(m: &LatencyModel, image_id: ImageId, draw_index: u64) -> Result<f64> {
    m.sample(image_id, draw_index)
}

/// Arrival instant of frame `i` at `fps`.
pub fn frame_time(i: u64, fps: f64) -> f64 {
    i as f64 / fps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSnapshot {
    pub source_image_id: ImageId,
    pub start_time: f64,
    pub emission_time: f64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTimeline {
    pub snapshots: Vec<PredictionSnapshot>,
    /// Present for simulated timelines; absent when loaded from a dump.
    pub config: Option<StreamConfig>,
}

impl PredictionTimeline {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.snapshots)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.snapshots)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let snapshots: Vec<PredictionSnapshot> =
            serde_json::from_reader(BufReader::new(File::open(path)?))?;
        for s in &snapshots {
            if !(s.emission_time >= s.start_time) {
                return Err(Error::Malformed(format!(
                    "snapshot of image {} is emitted before it starts",
                    s.source_image_id
                )));
            }
            s.detections.iter().try_for_each(Detection::validate)?;
        }
        Ok(PredictionTimeline {
            snapshots,
            config: None,
        })
    }
}

/// Runs one stream through the detector model.
///
/// `frames` must be ordered by frame index; only the first
/// `cfg.frame_count` are used. Frames without an entry in `detections`
/// yield empty snapshots.
///
/// Under [`SchedulePolicy::LatestBlocking`] the stream ends one period
/// after the last arrival; a run completing at or after that instant is
/// still emitted, but no further frame is started.
pub fn simulate(
    frames: &[FrameRecord],
    detections: &DetectionMap,
    model: &LatencyModel,
    cfg: &StreamConfig,
) -> Result<PredictionTimeline> {
    cfg.validate()?;
    let frames = &frames[..frames.len().min(cfg.frame_count)];
    if frames.is_empty() {
        return Err(Error::EmptyStream);
    }
    if frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
        return Err(Error::InvalidArgument(
            "frames must be strictly ordered by frame index".into(),
        ));
    }

    let arrival = |pos: usize| frame_time(frames[pos].frame_index, cfg.fps);
    let snapshot = |pos: usize, start: f64, emission: f64| PredictionSnapshot {
        source_image_id: frames[pos].image_id,
        start_time: start,
        emission_time: emission,
        detections: detections
            .get(&frames[pos].image_id)
            .cloned()
            .unwrap_or_default(),
    };

    let mut snapshots = Vec::new();
    match cfg.policy {
        SchedulePolicy::LatestBlocking => {
            let last = frames.len() - 1;
            let stream_end = arrival(last) + 1.0 / cfg.fps;
            let mut pos = 0;
            let mut start = arrival(0);
            loop {
                let latency = model.sample(frames[pos].image_id, pos as u64)?;
                let done = start + latency;
                snapshots.push(snapshot(pos, start, done));
                if done + TIME_EPS >= stream_end {
                    break;
                }
                // newest frame arrived by `done`, closed comparison
                let newest = frames.partition_point(|f| {
                    frame_time(f.frame_index, cfg.fps) <= done + TIME_EPS
                }) - 1;
                if newest > pos {
                    pos = newest;
                    start = done;
                } else if pos < last {
                    pos += 1;
                    start = arrival(pos);
                } else {
                    break;
                }
            }
        }
        SchedulePolicy::EveryFrameQueue => {
            let mut free_at = f64::NEG_INFINITY;
            for pos in 0..frames.len() {
                let start = arrival(pos).max(free_at);
                let done = start + model.sample(frames[pos].image_id, pos as u64)?;
                snapshots.push(snapshot(pos, start, done));
                free_at = done;
            }
        }
    }

    Ok(PredictionTimeline {
        snapshots,
        config: Some(*cfg),
    })
}

/// Simulates every sequence of `gt` independently and concatenates the
/// snapshots, sequence by sequence. `cfg.frame_count` is ignored; each
/// sequence runs to its full length.
pub fn simulate_dataset(
    gt: &Dataset,
    detections: &DetectionMap,
    model: &LatencyModel,
    cfg: &StreamConfig,
) -> Result<PredictionTimeline> {
    let mut snapshots = Vec::new();
    let sequences = gt.sequences();
    if sequences.is_empty() {
        return Err(Error::EmptyStream);
    }
    for frames in sequences.values() {
        let owned: Vec<FrameRecord> = frames.iter().map(|f| (*f).clone()).collect();
        let seq_cfg = StreamConfig {
            frame_count: owned.len(),
            ..*cfg
        };
        snapshots.extend(simulate(&owned, detections, model, &seq_cfg)?.snapshots);
    }
    Ok(PredictionTimeline {
        snapshots,
        config: Some(StreamConfig {
            frame_count: gt.images.len(),
            ..*cfg
        }),
    })
}
