//! Sliding-window baseline: exhaustively enumerated windows scored by the
//! pre-trained matching model instead of decoded moments.
//!
//! A window's suppression score is its best cosine against any normal sound
//! effect minus its cosine against the no-SFX embedding. Every surviving
//! window is emitted with its best normal sound effect; background windows
//! rank low through their softmax confidence rather than being cut.

use crate::data::VideoRecord;
use crate::error::Result;
use crate::matching::{build_similarity_matrix, nms, Interval, Prediction, SfxIndex};
use crate::model::video_encoder::embed_video;
use crate::model::{DmModel, ModalityMask};
use crate::tensor::blocks::Dropout;
use crate::tensor::Tape;

#[derive(Debug, Clone)]
pub struct SlidingWinConfig {
    /// Window lengths in frames.
    pub scales: Vec<u32>,
    pub stride: u32,
}

impl Default for SlidingWinConfig {
    fn default() -> Self {
        // Matches the default synthetic moment lengths.
        SlidingWinConfig { scales: vec![2, 3, 4, 5, 6], stride: 1 }
    }
}

/// Enumerate candidate windows; a video shorter than every scale yields a
/// single full-length window.
pub fn enumerate_windows(n: u32, cfg: &SlidingWinConfig) -> Vec<(u32, u32)> {
    let stride = cfg.stride.max(1);
    let mut out = Vec::new();
    for &scale in &cfg.scales {
        if scale == 0 || scale > n {
            continue;
        }
        let mut start = 0;
        while start + scale <= n {
            out.push((start, start + scale));
            start += stride;
        }
    }
    if out.is_empty() {
        out.push((0, n));
    }
    out
}

pub fn sliding_window_baseline(
    model: &DmModel,
    video: &VideoRecord,
    index: &SfxIndex,
    cfg: &SlidingWinConfig,
) -> Result<Vec<Prediction>> {
    let d = model.cfg.d_model;
    let mut tape = Tape::<f32>::new();
    let encoded = embed_video(
        &mut tape,
        &model.store,
        &model.cfg,
        video,
        ModalityMask::default(),
        &mut Dropout::off(),
    )?;
    let tokens: Vec<f64> = tape.value(encoded.tokens).iter().map(|&v| v as f64).collect();

    let windows = enumerate_windows(video.n, cfg);
    let mut spans = Vec::new();
    let mut embs: Vec<f64> = Vec::new();
    for &(start, end) in &windows {
        let Some((b, e)) = encoded.token_range(start, end) else {
            continue;
        };
        let count = (e - b) as f64;
        for j in 0..d {
            let mut acc = 0.0;
            for tok in b..e {
                acc += tokens[tok * d + j];
            }
            embs.push(acc / count);
        }
        spans.push((start, end));
    }
    if spans.is_empty() {
        return Ok(Vec::new());
    }

    let sims = build_similarity_matrix(&index.values, &embs, d)?;
    // Best normal sound effect per window (ties to the lowest id), plus the
    // margin over the no-SFX row used to rank windows for suppression.
    let tau = model.cfg.conf_temperature;
    let mut best_normal = Vec::with_capacity(sims.cols);
    let mut margins = Vec::with_capacity(sims.cols);
    for c in 0..sims.cols {
        let col = sims.column(c);
        let mut best = 1usize;
        for (r, &v) in col.iter().enumerate().skip(1) {
            if v > col[best] {
                best = r;
            }
        }
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = col.iter().map(|&v| ((v - mx) / tau).exp()).sum();
        let confidence = ((col[best] - mx) / tau).exp() / denom;
        best_normal.push((best, confidence));
        margins.push(col[best] - col[0]);
    }

    let candidates: Vec<(Interval, f64)> = spans
        .iter()
        .zip(&margins)
        .map(|(&(s, e), &m)| Ok((Interval::new(s as f64, e as f64)?, m)))
        .collect::<Result<_>>()?;
    let kept = nms(&candidates, model.cfg.nms_iou);

    let mut preds: Vec<Prediction> = kept
        .into_iter()
        .map(|w| Prediction {
            video_id: video.video_id.clone(),
            start: spans[w].0,
            end: spans[w].1,
            sfx_id: index.ids[best_normal[w].0 - 1],
            confidence: best_normal[w].1,
        })
        .collect();
    preds.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    Ok(preds)
}
