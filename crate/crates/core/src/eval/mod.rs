//! Evaluation: non-interpolated average precision under three pooling
//! protocols — per sound effect, per video, and per moment class — at
//! configurable IoU thresholds.

pub mod sliding;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{MomentClass, VideoRecord};
use crate::error::{DmError, Result};
use crate::matching::{temporal_iou, Interval, Prediction};

/// Non-interpolated AP: sum of precision at each true-positive rank over
/// the number of ground truths.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Result<f64> {
    let tp_total = flags.iter().filter(|&&f| f).count();
    if tp_total > num_gt {
        return Err(DmError::TpExceedsGt { tp: tp_total, gt: num_gt });
    }
    if num_gt == 0 {
        return Ok(0.0);
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank0, &flag) in flags.iter().enumerate() {
        if flag {
            tp += 1;
            sum += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / num_gt as f64)
}

/// A ground truth eligible for matching within one ranking pool.
#[derive(Debug, Clone, Copy)]
pub struct GtSpan {
    pub video: usize,
    pub start: u32,
    pub end: u32,
    pub sfx_id: u32,
}

/// A ranked prediction within one ranking pool.
#[derive(Debug, Clone, Copy)]
pub struct RankedPred {
    pub video: usize,
    pub start: u32,
    pub end: u32,
    pub sfx_id: u32,
    pub confidence: f64,
}

fn frame_interval(start: u32, end: u32) -> Result<Interval> {
    Interval::new(start as f64, end as f64)
}

/// Greedy one-to-one matching in the given (already ranked) order: each
/// prediction is a true positive iff some still-unmatched ground truth in
/// the same video reaches the IoU threshold (and the same sfx_id when
/// required); among several the highest IoU wins, ties to the lowest index.
pub fn match_predictions(
    preds: &[RankedPred],
    gts: &[GtSpan],
    iou_t: f64,
    require_sfx_match: bool,
) -> Result<Vec<bool>> {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    for p in preds {
        let pi = frame_interval(p.start, p.end)?;
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.video != p.video {
                continue;
            }
            if require_sfx_match && g.sfx_id != p.sfx_id {
                continue;
            }
            let iou = temporal_iou(pi, frame_interval(g.start, g.end)?);
            if iou >= iou_t {
                let better = match best {
                    None => true,
                    Some((_, b)) => iou > b,
                };
                if better {
                    best = Some((gi, iou));
                }
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    Ok(flags)
}

/// Canonical ranking order: confidence descending, then video, span and
/// sfx id so evaluation never depends on input file order.
pub fn rank(preds: &mut [RankedPred]) {
    preds.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.video.cmp(&b.video))
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
            .then(a.sfx_id.cmp(&b.sfx_id))
    });
}

/// Borrowed evaluation inputs resolved against a video list.
pub struct EvalInputs {
    preds: Vec<RankedPred>,
    gts: Vec<GtSpan>,
    classes: Vec<Option<MomentClass>>,
    num_videos: usize,
}

impl EvalInputs {
    /// Resolve prediction video ids against the evaluation split. Unknown
    /// video ids are an error; missing predictions for a video are fine.
    pub fn resolve(preds: &[Prediction], videos: &[&VideoRecord]) -> Result<Self> {
        let index: BTreeMap<&str, usize> = videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.video_id.as_str(), i))
            .collect();
        let mut ranked = Vec::with_capacity(preds.len());
        for p in preds {
            let video = *index.get(p.video_id.as_str()).ok_or_else(|| DmError::Validation {
                record: p.video_id.clone(),
                reason: "prediction references a video outside the evaluation split".into(),
            })?;
            if p.start >= p.end {
                return Err(DmError::DegenerateInterval { start: p.start as f64, end: p.end as f64 });
            }
            ranked.push(RankedPred {
                video,
                start: p.start,
                end: p.end,
                sfx_id: p.sfx_id,
                confidence: p.confidence,
            });
        }
        let mut gts = Vec::new();
        let mut classes = Vec::new();
        for (vi, v) in videos.iter().enumerate() {
            for m in &v.moments {
                gts.push(GtSpan { video: vi, start: m.start, end: m.end, sfx_id: m.sfx_id });
                classes.push(m.class);
            }
        }
        Ok(EvalInputs { preds: ranked, gts, classes, num_videos: videos.len() })
    }
}

/// Pool per sound effect: rank all predictions carrying that sfx across the
/// split, match against that sfx's ground truths, average AP over the sfx
/// ids that occur in the ground truth.
pub fn evaluate_map_sfx(inputs: &EvalInputs, iou_t: f64) -> Result<f64> {
    let mut gt_ids: Vec<u32> = inputs.gts.iter().map(|g| g.sfx_id).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    if gt_ids.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &sfx_id in &gt_ids {
        let gts: Vec<GtSpan> = inputs.gts.iter().filter(|g| g.sfx_id == sfx_id).copied().collect();
        let mut pool: Vec<RankedPred> =
            inputs.preds.iter().filter(|p| p.sfx_id == sfx_id).copied().collect();
        rank(&mut pool);
        let flags = match_predictions(&pool, &gts, iou_t, true)?;
        total += average_precision(&flags, gts.len())?;
    }
    Ok(total / gt_ids.len() as f64)
}

/// Pool per video: rank each video's predictions; a true positive needs
/// both the IoU threshold and the right sound effect. Averages over every
/// video in the split.
pub fn evaluate_map_vid(inputs: &EvalInputs, iou_t: f64) -> Result<f64> {
    if inputs.num_videos == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for vi in 0..inputs.num_videos {
        let gts: Vec<GtSpan> = inputs.gts.iter().filter(|g| g.video == vi).copied().collect();
        let mut pool: Vec<RankedPred> =
            inputs.preds.iter().filter(|p| p.video == vi).copied().collect();
        rank(&mut pool);
        let flags = match_predictions(&pool, &gts, iou_t, true)?;
        total += average_precision(&flags, gts.len())?;
    }
    Ok(total / inputs.num_videos as f64)
}

/// Pool per moment class, localization only: rank the whole prediction
/// pool; a true positive matches an unmatched ground truth of the class
/// regardless of sound effect. Returns `None` without class annotations.
pub fn evaluate_map_key(inputs: &EvalInputs, iou_t: f64) -> Result<Option<f64>> {
    if inputs.classes.iter().all(|c| c.is_none()) {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in MomentClass::ALL {
        let gts: Vec<GtSpan> = inputs
            .gts
            .iter()
            .zip(&inputs.classes)
            .filter(|(_, c)| **c == Some(class))
            .map(|(g, _)| *g)
            .collect();
        if gts.is_empty() {
            continue;
        }
        let mut pool = inputs.preds.clone();
        rank(&mut pool);
        let flags = match_predictions(&pool, &gts, iou_t, false)?;
        total += average_precision(&flags, gts.len())?;
        counted += 1;
    }
    Ok(Some(if counted == 0 { 0.0 } else { total / counted as f64 }))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub iou: f64,
    pub map_sfx: f64,
    pub map_vid: f64,
    pub map_key: Option<f64>,
    /// Mean of map_sfx and map_vid, the headline number.
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub fn evaluate(
    preds: &[Prediction],
    videos: &[&VideoRecord],
    iou_thresholds: &[f64],
) -> Result<EvalReport> {
    let inputs = EvalInputs::resolve(preds, videos)?;
    let mut rows = Vec::with_capacity(iou_thresholds.len());
    for &iou in iou_thresholds {
        let map_sfx = evaluate_map_sfx(&inputs, iou)?;
        let map_vid = evaluate_map_vid(&inputs, iou)?;
        let map_key = evaluate_map_key(&inputs, iou)?;
        rows.push(EvalRow { iou, map_sfx, map_vid, map_key, mean: 0.5 * (map_sfx + map_vid) });
    }
    Ok(EvalReport { rows })
}

impl EvalReport {
    pub fn to_table(&self, label: &str) -> String {
        let mut out = String::new();
        let header_iou: Vec<String> = self.rows.iter().map(|r| format!("@{}", r.iou)).collect();
        out.push_str(&format!(
            "{:<14} {:>10} {:>10} {:>10} {:>10}\n",
            "method", "mAP_SFX", "mAP_vid", "mAP_key", "mean"
        ));
        for (r, iou) in self.rows.iter().zip(&header_iou) {
            let key = r
                .map_key
                .map(|v| format!("{:.4}", v))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "{:<14} {:>10.4} {:>10.4} {:>10} {:>10.4}  ({iou})\n",
                label, r.map_sfx, r.map_vid, key, r.mean
            ));
        }
        out
    }

    pub fn row_at(&self, iou: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| (r.iou - iou).abs() < 1e-12)
    }
}
