//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamap::dataset::{AnnId, Categories, CategoryId, Dataset, FrameRecord, GtAnnotation, ImageId, SequenceId};
use streamap::detection::{group_by_image, Detection, DetectionMap};
use streamap::geometry::BBox;

pub const THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// AP summary in percent, -1 for strata without ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleAp {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

fn inter(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let h = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    w.max(0.0) * h.max(0.0)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let i = inter(a, b);
    let u = a.w * a.h + b.w * b.h - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

fn in_range(area: f64, r: usize) -> bool {
    match r {
        0 => true,
        1 => area < 1024.0,
        2 => (1024.0..9216.0).contains(&area),
        _ => area >= 9216.0,
    }
}

/// (score, counted, true positive) for every detection of one cell.
fn match_frame(gts: &[(BBox, f64)], dets: &[Detection], thr: f64, r: usize) -> (Vec<(f64, bool, bool)>, usize) {
    let mut gts: Vec<(BBox, bool)> = gts.iter().map(|(b, a)| (*b, !in_range(*a, r))).collect();
    gts.sort_by_key(|g| g.1);
    let n_gt = gts.iter().filter(|g| !g.1).count();
    let mut dets: Vec<&Detection> = dets.iter().collect();
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in dets {
        let pick = |ignored: bool| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                if taken[i] || g.1 != ignored {
                    continue;
                }
                let v = iou(&d.bbox, &g.0);
                if v >= thr && best.is_none_or(|(_, b)| v >= b) {
                    best = Some((i, v));
                }
            }
            best.map(|(i, _)| i)
        };
        match pick(false).or_else(|| pick(true)) {
            Some(i) => {
                taken[i] = true;
                out.push((d.score, !gts[i].1, true));
            }
            None => out.push((d.score, in_range(d.bbox.w * d.bbox.h, r), false)),
        }
    }
    (out, n_gt)
}

/// Mean of 101-point interpolated precision, or `None` without ground truth.
fn class_ap(gt: &Dataset, dets: &DetectionMap, cat: CategoryId, thr: f64, r: usize) -> Option<f64> {
    let mut all = Vec::new();
    let mut n_gt = 0;
    for f in &gt.images {
        let g: Vec<(BBox, f64)> = gt
            .annotations
            .iter()
            .filter(|a| a.image_id == f.image_id && a.category_id == cat)
            .map(|a| (a.bbox, a.area))
            .collect();
        let d: Vec<Detection> = dets
            .get(&f.image_id)
            .map(|v| v.iter().filter(|d| d.category_id == cat).copied().collect())
            .unwrap_or_default();
        let (m, n) = match_frame(&g, &d, thr, r);
        all.extend(m);
        n_gt += n;
    }
    if n_gt == 0 {
        return None;
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    // (recall, precision) after every prefix
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, counted, hit) in &all {
        if counted {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        points.push((tp as f64 / n_gt as f64, p));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let level = i as f64 / 100.0;
        sum += points
            .iter()
            .filter(|(rc, _)| *rc >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

fn mean_pct(v: &[f64]) -> f64 {
    if v.is_empty() {
        -1.0
    } else {
        100.0 * v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Brute-force offline COCO AP over all classes and the standard thresholds.
pub fn brute_force_ap(gt: &Dataset, dets: &DetectionMap) -> OracleAp {
    let cats: Vec<CategoryId> = gt.categories.keys().copied().collect();
    let stratum = |r: usize, thresholds: &[f64]| {
        let mut vals = Vec::new();
        for &t in thresholds {
            for &c in &cats {
                vals.extend(class_ap(gt, dets, c, t, r));
            }
        }
        mean_pct(&vals)
    };
    OracleAp {
        ap: stratum(0, &THRESHOLDS),
        ap50: stratum(0, &[0.5]),
        ap75: stratum(0, &[0.75]),
        small: stratum(1, &THRESHOLDS),
        medium: stratum(2, &THRESHOLDS),
        large: stratum(3, &THRESHOLDS),
    }
}

/// Independent max-scan pairing: the newest snapshot emitted no later than
/// each frame's timestamp, per sequence; detections re-attributed.
pub fn max_scan_pairing(gt: &Dataset, timeline: &streamap::stream::PredictionTimeline) -> DetectionMap {
    let mut out = DetectionMap::new();
    for f in &gt.images {
        let mut best: Option<(f64, u64, usize)> = None;
        for (i, s) in timeline.snapshots.iter().enumerate() {
            let src = gt.images.iter().find(|g| g.image_id == s.source_image_id).unwrap();
            if src.sequence_id != f.sequence_id || s.emission_time > f.timestamp + 1e-9 {
                continue;
            }
            let key = (s.emission_time, src.frame_index, i);
            if best.is_none_or(|b| (key.0, key.1) >= (b.0, b.1)) {
                best = Some(key);
            }
        }
        if let Some((_, _, i)) = best {
            let dets = timeline.snapshots[i]
                .detections
                .iter()
                .map(|d| Detection { image_id: f.image_id, ..*d })
                .collect();
            out.insert(f.image_id, dets);
        }
    }
    out
}

pub fn frame(id: u64, seq: u64, index: u64, fps: f64) -> FrameRecord {
    FrameRecord {
        image_id: ImageId(id),
        file_name: format!("{id}.jpg"),
        sequence_id: SequenceId(seq),
        frame_index: index,
        timestamp: index as f64 / fps,
        width: 640,
        height: 480,
        source: None,
    }
}

pub fn categories(n: u64) -> Categories {
    (0..n).map(|c| (CategoryId(c), format!("class{c}"))).collect()
}

/// Small random evaluation instance: up to 3 classes, 10 detections and
/// 5 ground-truth boxes over 1 to 3 frames, with distinct scores.
pub fn micro_instance(seed: u64) -> (Dataset, DetectionMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cat = rng.random_range(1..=3u64);
    let n_frames = rng.random_range(1..=3u64);
    let n_gt = rng.random_range(0..=5usize);
    let n_det = rng.random_range(0..=10usize);

    let images: Vec<FrameRecord> = (0..n_frames).map(|i| frame(i + 1, 0, i, 30.0)).collect();
    let rand_box = |rng: &mut ChaCha8Rng| {
        let side = |rng: &mut ChaCha8Rng| match rng.random_range(0..3) {
            0 => rng.random_range(4..32) as f64,
            1 => rng.random_range(32..96) as f64,
            _ => rng.random_range(96..140) as f64,
        };
        BBox::new(rng.random_range(0..60) as f64, rng.random_range(0..60) as f64, side(rng), side(rng))
    };
    let annotations: Vec<GtAnnotation> = (0..n_gt)
        .map(|i| {
            let bbox = rand_box(&mut rng);
            GtAnnotation {
                ann_id: AnnId(i as u64 + 1),
                image_id: ImageId(rng.random_range(1..=n_frames)),
                category_id: CategoryId(rng.random_range(0..n_cat)),
                area: bbox.w * bbox.h,
                bbox,
            }
        })
        .collect();

    let mut dets = Vec::with_capacity(n_det);
    for _ in 0..n_det {
        let d = if !annotations.is_empty() && rng.random_bool(0.7) {
            // jittered copy of a ground-truth box, sometimes with the wrong class
            let g = &annotations[rng.random_range(0..annotations.len())];
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-6..=6) as f64;
            let bbox = BBox::new(
                g.bbox.x + j(&mut rng),
                g.bbox.y + j(&mut rng),
                (g.bbox.w + j(&mut rng)).max(1.0),
                (g.bbox.h + j(&mut rng)).max(1.0),
            );
            let category_id = if rng.random_bool(0.85) {
                g.category_id
            } else {
                CategoryId(rng.random_range(0..n_cat))
            };
            Detection { image_id: g.image_id, category_id, bbox, score: 0.0 }
        } else {
            Detection {
                image_id: ImageId(rng.random_range(1..=n_frames)),
                category_id: CategoryId(rng.random_range(0..n_cat)),
                bbox: rand_box(&mut rng),
                score: 0.0,
            }
        };
        dets.push(d);
    }
    // distinct scores so ranking is unambiguous
    let mut scores: Vec<f64> = (0..n_det).map(|i| (i as f64 + 1.0) / (n_det as f64 + 1.0)).collect();
    for i in (1..scores.len()).rev() {
        scores.swap(i, rng.random_range(0..=i));
    }
    for (d, s) in dets.iter_mut().zip(scores) {
        d.score = s;
    }

    let gt = Dataset::new(images, annotations, categories(n_cat)).expect("valid micro instance");
    (gt, group_by_image(dets))
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
