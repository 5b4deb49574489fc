//! COCO-style average precision over `(frame, ground truth, detections)`
//! pairs.
//!
//! Two pairing modes feed the same scorer:
//!
//! * offline: every frame is scored against its own detections;
//! * streaming: every frame is scored against the newest snapshot emitted
//!   at or before the frame's timestamp, so stale output is penalized.
//!
//! Scoring follows the COCO reference evaluator: per class and IoU
//! threshold, detections are ranked by score (stable across frames in
//! pairing order), greedily matched to the unmatched ground truth with the
//! highest IoU, and precision is read off its monotone envelope at evenly
//! spaced recall points.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::{Categories, CategoryId, Dataset, GtAnnotation, ImageId, SequenceId};
use crate::detection::{Detection, DetectionMap};
use crate::error::{Error, Result};
use crate::geometry::SizeClass;
use crate::stream::{PredictionTimeline, TIME_EPS};

/// Reported for strata without ground truth.
pub const NO_GT: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            // exact decimal grid 0.50, 0.55, ..., 0.95
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            max_dets: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() {
            return Err(Error::InvalidArgument("at least one IoU threshold is required".into()));
        }
        if t.iter().any(|&v| !(v > 0.0 && v <= 1.0)) || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "IoU thresholds must be strictly increasing within (0, 1]".into(),
            ));
        }
        if self.recall_points < 2 {
            return Err(Error::InvalidArgument("recall_points must be at least 2".into()));
        }
        if self.max_dets == 0 {
            return Err(Error::InvalidArgument("max_dets must be at least 1".into()));
        }
        Ok(())
    }

    pub fn recall_grid(&self) -> Vec<f64> {
        let steps = (self.recall_points - 1) as f64;
        (0..self.recall_points).map(|i| i as f64 / steps).collect()
    }

    fn threshold_index(&self, thr: f64) -> Option<usize> {
        self.iou_thresholds
            .iter()
            .position(|&t| (t - thr).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub const ALL: [AreaRange; 4] = [
        AreaRange::All,
        AreaRange::Small,
        AreaRange::Medium,
        AreaRange::Large,
    ];

    pub fn contains(&self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => SizeClass::from_area(area) == SizeClass::Small,
            AreaRange::Medium => SizeClass::from_area(area) == SizeClass::Medium,
            AreaRange::Large => SizeClass::from_area(area) == SizeClass::Large,
        }
    }
}

/// One ground-truth frame with the detections it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub image_id: ImageId,
    pub sequence_id: SequenceId,
    pub frame_index: u64,
    pub gt: Vec<GtAnnotation>,
    pub detections: Vec<Detection>,
    /// Frame whose output was used; `None` when no snapshot was available.
    pub source_image_id: Option<ImageId>,
}

/// Ground-truth frames in evaluation order: by sequence, then frame index,
/// file order breaking ties.
fn ordered_frames(gt: &Dataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gt.images.len()).collect();
    order.sort_by_key(|&i| (gt.images[i].sequence_id, gt.images[i].frame_index));
    order
}

pub fn pair_offline(gt: &Dataset, dets: &DetectionMap) -> Vec<FramePair> {
    let anns = gt.annotations_by_image();
    ordered_frames(gt)
        .into_iter()
        .map(|i| {
            let f = &gt.images[i];
            let detections = dets.get(&f.image_id).cloned().unwrap_or_default();
            FramePair {
                image_id: f.image_id,
                sequence_id: f.sequence_id,
                frame_index: f.frame_index,
                gt: anns
                    .get(&f.image_id)
                    .map(|v| v.iter().map(|a| (*a).clone()).collect())
                    .unwrap_or_default(),
                source_image_id: dets.contains_key(&f.image_id).then_some(f.image_id),
                detections,
            }
        })
        .collect()
}

/// Pairs every frame with the snapshot of its own sequence that has the
/// largest emission time not after the frame's timestamp (ties go to the
/// newest source frame). Paired detections are re-attributed to the
/// query frame.
pub fn pair_streaming(gt: &Dataset, timeline: &PredictionTimeline) -> Result<Vec<FramePair>> {
    let frame_of: HashMap<ImageId, (SequenceId, u64)> = gt
        .images
        .iter()
        .map(|f| (f.image_id, (f.sequence_id, f.frame_index)))
        .collect();

    // (emission, source frame index, snapshot) per sequence
    let mut per_seq: BTreeMap<SequenceId, Vec<(f64, u64, usize)>> = BTreeMap::new();
    for (i, s) in timeline.snapshots.iter().enumerate() {
        let &(seq, fid) = frame_of.get(&s.source_image_id).ok_or_else(|| {
            Error::Integrity(format!(
                "timeline snapshot references image {} absent from ground truth",
                s.source_image_id
            ))
        })?;
        per_seq.entry(seq).or_default().push((s.emission_time, fid, i));
    }
    for v in per_seq.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }

    let anns = gt.annotations_by_image();
    Ok(ordered_frames(gt)
        .into_iter()
        .map(|i| {
            let f = &gt.images[i];
            let snapshot = per_seq.get(&f.sequence_id).and_then(|v| {
                let n = v.partition_point(|&(t, _, _)| t <= f.timestamp + TIME_EPS);
                n.checked_sub(1).map(|k| &timeline.snapshots[v[k].2])
            });
            let detections = snapshot
                .map(|s| {
                    s.detections
                        .iter()
                        .map(|d| Detection {
                            image_id: f.image_id,
                            ..*d
                        })
                        .collect()
                })
                .unwrap_or_default();
            FramePair {
                image_id: f.image_id,
                sequence_id: f.sequence_id,
                frame_index: f.frame_index,
                gt: anns
                    .get(&f.image_id)
                    .map(|v| v.iter().map(|a| (*a).clone()).collect())
                    .unwrap_or_default(),
                detections,
                source_image_id: snapshot.map(|s| s.source_image_id),
            }
        })
        .collect())
}

/// Interpolated precision sampled on the recall grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub category_id: CategoryId,
    pub iou_threshold: f64,
    pub precision: Vec<f64>,
}

/// AP values on a 0–100 scale; [`NO_GT`] marks strata without ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    /// AP at each configured IoU threshold, all areas.
    pub per_threshold: Vec<f64>,
    pub per_class: BTreeMap<CategoryId, f64>,
    #[serde(skip)]
    pub pr_curves: Vec<PrCurve>,
}

impl EvalResult {
    /// CSV rows `category_id,iou_threshold,recall,precision` for plotting.
    pub fn pr_curves_csv(&self, cfg: &EvalConfig) -> String {
        let grid = cfg.recall_grid();
        let mut out = String::from("category_id,iou_threshold,recall,precision\n");
        for c in &self.pr_curves {
            for (r, p) in grid.iter().zip(&c.precision) {
                out.push_str(&format!("{},{},{},{}\n", c.category_id, c.iou_threshold, r, p));
            }
        }
        out
    }
}

/// Matching outcome of one detection, per threshold.
struct ScoredDet {
    score: f64,
    matched: Vec<bool>,
    ignored: Vec<bool>,
}

/// Greedy matching for one (frame, class, area) cell.
fn evaluate_cell(
    gts: &[&GtAnnotation],
    dets: &[&Detection],
    area: AreaRange,
    cfg: &EvalConfig,
    out: &mut Vec<ScoredDet>,
) -> usize {
    // non-ignored ground truth first, stable
    let mut gt_sorted: Vec<(&GtAnnotation, bool)> =
        gts.iter().map(|g| (*g, !area.contains(g.area))).collect();
    gt_sorted.sort_by_key(|&(_, ignored)| ignored);
    let non_ignored = gt_sorted.iter().filter(|(_, ig)| !ig).count();

    let mut dt_sorted: Vec<&Detection> = dets.to_vec();
    dt_sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    dt_sorted.truncate(cfg.max_dets);

    let ious: Vec<Vec<f64>> = dt_sorted
        .iter()
        .map(|d| gt_sorted.iter().map(|(g, _)| d.bbox.iou(&g.bbox)).collect())
        .collect();

    let t_count = cfg.iou_thresholds.len();
    let mut dets_out: Vec<ScoredDet> = dt_sorted
        .iter()
        .map(|d| ScoredDet {
            score: d.score,
            matched: vec![false; t_count],
            ignored: vec![false; t_count],
        })
        .collect();

    for (t, &thr) in cfg.iou_thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; gt_sorted.len()];
        for (di, d) in dt_sorted.iter().enumerate() {
            let mut best_iou = thr.min(1.0 - 1e-10);
            let mut best: Option<usize> = None;
            for (gi, &(_, g_ignored)) in gt_sorted.iter().enumerate() {
                if gt_taken[gi] {
                    continue;
                }
                // once a regular match exists, stop at the ignored tail
                if let Some(m) = best {
                    if !gt_sorted[m].1 && g_ignored {
                        break;
                    }
                }
                if ious[di][gi] < best_iou {
                    continue;
                }
                best_iou = ious[di][gi];
                best = Some(gi);
            }
            match best {
                Some(gi) => {
                    gt_taken[gi] = true;
                    dets_out[di].matched[t] = true;
                    dets_out[di].ignored[t] = gt_sorted[gi].1;
                }
                None => dets_out[di].ignored[t] = !area.contains(d.bbox.area()),
            }
        }
    }
    out.extend(dets_out);
    non_ignored
}

/// Precision envelope sampled on `grid`; `None` without ground truth.
fn interpolated_precision(
    dets: &[ScoredDet],
    order: &[usize],
    t: usize,
    n_gt: usize,
    grid: &[f64],
) -> Option<Vec<f64>> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &i in order {
        let d = &dets[i];
        if !d.ignored[t] {
            if d.matched[t] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        });
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    Some(
        grid.iter()
            .map(|&r| {
                let j = recall.partition_point(|&rc| rc < r);
                precision.get(j).copied().unwrap_or(0.0)
            })
            .collect(),
    )
}

fn mean_valid(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|&v| v != NO_GT)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        NO_GT
    } else {
        sum / n as f64
    }
}

pub fn coco_ap(pairs: &[FramePair], categories: &Categories, cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.validate()?;
    for p in pairs {
        if let Some(d) = p.detections.iter().find(|d| !categories.contains_key(&d.category_id)) {
            return Err(Error::UnknownCategory(d.category_id.0));
        }
    }

    let grid = cfg.recall_grid();
    let t_count = cfg.iou_thresholds.len();
    // class_ap[area][class][t], fraction in [0, 1] or NO_GT
    let mut class_ap = vec![vec![vec![NO_GT; t_count]; categories.len()]; AreaRange::ALL.len()];
    let mut pr_curves = Vec::new();

    for (k, &cat) in categories.keys().enumerate() {
        let cells: Vec<(Vec<&GtAnnotation>, Vec<&Detection>)> = pairs
            .iter()
            .map(|p| {
                (
                    p.gt.iter().filter(|g| g.category_id == cat).collect(),
                    p.detections.iter().filter(|d| d.category_id == cat).collect(),
                )
            })
            .collect();

        for (a, &area) in AreaRange::ALL.iter().enumerate() {
            let mut dets = Vec::new();
            let mut n_gt = 0;
            for (gts, ds) in &cells {
                n_gt += evaluate_cell(gts, ds, area, cfg, &mut dets);
            }
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));

            for t in 0..t_count {
                if let Some(q) = interpolated_precision(&dets, &order, t, n_gt, &grid) {
                    class_ap[a][k][t] = q.iter().sum::<f64>() / q.len() as f64;
                    if area == AreaRange::All {
                        pr_curves.push(PrCurve {
                            category_id: cat,
                            iou_threshold: cfg.iou_thresholds[t],
                            precision: q,
                        });
                    }
                }
            }
        }
    }

    let to_pct = |v: f64| if v == NO_GT { NO_GT } else { 100.0 * v };
    let per_threshold_for = |a: usize| -> Vec<f64> {
        (0..t_count)
            .map(|t| mean_valid(class_ap[a].iter().map(|c| c[t])))
            .collect()
    };
    let area_ap = |a: usize| to_pct(mean_valid(per_threshold_for(a)));

    let per_threshold_all = per_threshold_for(0);
    let at = |thr: f64| {
        cfg.threshold_index(thr)
            .map(|t| to_pct(per_threshold_all[t]))
            .unwrap_or(NO_GT)
    };

    Ok(EvalResult {
        ap: area_ap(0),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_small: area_ap(1),
        ap_medium: area_ap(2),
        ap_large: area_ap(3),
        per_threshold: per_threshold_all.iter().map(|&v| to_pct(v)).collect(),
        per_class: categories
            .keys()
            .enumerate()
            .map(|(k, &c)| (c, to_pct(mean_valid(class_ap[0][k].iter().copied()))))
            .collect(),
        pr_curves,
    })
}

pub fn offline_ap(gt: &Dataset, dets: &DetectionMap, cfg: &EvalConfig) -> Result<EvalResult> {
    coco_ap(&pair_offline(gt, dets), &gt.categories, cfg)
}

pub fn streaming_ap(
    gt: &Dataset,
    timeline: &PredictionTimeline,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    coco_ap(&pair_streaming(gt, timeline)?, &gt.categories, cfg)
}
