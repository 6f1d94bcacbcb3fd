//! Moment-SFX matching: similarity matrix, per-moment best SFX, NMS and
//! no-SFX filtering — the full inference path from a video to predictions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SfxEntry, VideoRecord};
use crate::error::{DmError, Result};
use crate::model::decoder::{decode_moments, span_to_frames};
use crate::model::sfx_encoder::embed_sfx_set;
use crate::model::video_encoder::embed_video;
use crate::model::{DmModel, ModalityMask};
use crate::tensor::blocks::Dropout;
use crate::tensor::tape::COSINE_NORM_EPS;
use crate::tensor::Tape;

/// Proper interval with start < end; construction enforces it so IoU and
/// NMS never see degenerate inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    start: f64,
    end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start < end) || !start.is_finite() || !end.is_finite() {
            return Err(DmError::DegenerateInterval { start, end });
        }
        Ok(Interval { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Intersection over union of two proper intervals; in [0, 1].
pub fn temporal_iou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.len() + b.len() - inter;
    inter / union
}

/// (l+1) x p cosine similarities; row 0 is the no-SFX embedding.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }
}

/// Pairwise cosine similarity between SFX embeddings ((l+1) x d, row-major)
/// and moment embeddings (p x d).
pub fn build_similarity_matrix(
    sfx_embs: &[f64],
    moment_embs: &[f64],
    d: usize,
) -> Result<SimilarityMatrix> {
    if d == 0 || sfx_embs.len() % d != 0 || moment_embs.len() % d != 0 {
        return Err(DmError::Shape {
            op: "build_similarity_matrix",
            lhs: (sfx_embs.len(), d),
            rhs: (moment_embs.len(), d),
        });
    }
    let rows = sfx_embs.len() / d;
    let cols = moment_embs.len() / d;
    let norm_of = |v: &[f64]| -> Result<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < COSINE_NORM_EPS {
            return Err(DmError::DegenerateEmbedding { norm: n, eps: COSINE_NORM_EPS });
        }
        Ok(n)
    };
    let sfx_norms: Vec<f64> = (0..rows)
        .map(|r| norm_of(&sfx_embs[r * d..(r + 1) * d]))
        .collect::<Result<_>>()?;
    let mom_norms: Vec<f64> = (0..cols)
        .map(|c| norm_of(&moment_embs[c * d..(c + 1) * d]))
        .collect::<Result<_>>()?;
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let dot: f64 = (0..d).map(|j| sfx_embs[r * d + j] * moment_embs[c * d + j]).sum();
            data[r * cols + c] = dot / (sfx_norms[r] * mom_norms[c]);
        }
    }
    Ok(SimilarityMatrix { rows, cols, data })
}

#[derive(Debug, Clone, Copy)]
pub struct BestSfx {
    /// Row index of the column max; 0 means the no-SFX embedding won.
    pub row: usize,
    pub raw_sim: f64,
    /// Softmax over the column at the confidence temperature, taken at the
    /// winning row.
    pub confidence: f64,
}

/// Column-wise max pooling with softmax confidences. Ties pick the lowest
/// row index.
pub fn select_best_sfx(m: &SimilarityMatrix, temperature: f64) -> Vec<BestSfx> {
    (0..m.cols)
        .map(|c| {
            let col = m.column(c);
            let mut best = 0usize;
            for (r, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = r;
                }
            }
            let mx = col[best];
            let denom: f64 = col.iter().map(|&v| ((v - mx) / temperature).exp()).sum();
            BestSfx { row: best, raw_sim: mx, confidence: 1.0 / denom }
        })
        .collect()
}

/// Greedy non-maximum suppression. Candidates are ranked by confidence
/// descending with earlier starts breaking ties; a candidate is kept iff
/// its IoU with every kept candidate stays within the threshold. Returns
/// indices into `candidates` in rank order.
pub fn nms(candidates: &[(Interval, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ia, ca) = candidates[a];
        let (ib, cb) = candidates[b];
        cb.partial_cmp(&ca)
            .unwrap()
            .then(ia.start.partial_cmp(&ib.start).unwrap())
            .then(ia.end.partial_cmp(&ib.end).unwrap())
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept
            .iter()
            .all(|&k| temporal_iou(candidates[i].0, candidates[k].0) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Final output row: a frame interval, its sound effect and confidence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Prediction {
    pub video_id: String,
    pub start: u32,
    pub end: u32,
    pub sfx_id: u32,
    pub confidence: f64,
}

/// SFX embeddings evaluated once per model so batch inference does not
/// recompute them per video.
pub struct SfxIndex {
    /// (l+1) x d values, row 0 is the no-SFX embedding.
    pub values: Vec<f64>,
    /// sfx_id for rows 1..=l.
    pub ids: Vec<u32>,
    pub d: usize,
}

pub fn embed_sfx_index(model: &DmModel, sfx: &[SfxEntry], mask: ModalityMask) -> Result<SfxIndex> {
    let mut tape = Tape::<f32>::new();
    let set = embed_sfx_set(&mut tape, &model.store, &model.cfg, sfx, mask)?;
    let values: Vec<f64> = tape.value(set).iter().map(|&v| v as f64).collect();
    let mut ids: Vec<u32> = sfx.iter().map(|s| s.sfx_id).collect();
    ids.sort_unstable();
    Ok(SfxIndex { values, ids, d: model.cfg.d_model })
}

/// Run the full inference path for one video against a prepared SFX index.
pub fn infer_with_index(
    model: &DmModel,
    video: &VideoRecord,
    index: &SfxIndex,
    mask: ModalityMask,
) -> Result<Vec<Prediction>> {
    let cfg = &model.cfg;
    let mut tape = Tape::<f32>::new();
    let mut dropout = Dropout::off();
    let encoded = embed_video(&mut tape, &model.store, cfg, video, mask, &mut dropout)?;
    let decoded = decode_moments(&mut tape, &model.store, cfg, encoded.tokens, &mut dropout)?;

    let moment_embs: Vec<f64> = tape.value(decoded.embeddings).iter().map(|&v| v as f64).collect();
    let m = build_similarity_matrix(&index.values, &moment_embs, cfg.d_model)?;
    let best = select_best_sfx(&m, cfg.conf_temperature);

    let spans = decoded.span_values(&tape);
    let candidates: Vec<(Interval, f64)> = spans
        .iter()
        .zip(&best)
        .map(|(&(s, e), b)| Ok((Interval::new(s, e)?, b.confidence)))
        .collect::<Result<_>>()?;

    // NMS over all p moments first, then drop the ones the no-SFX row won.
    let kept = nms(&candidates, cfg.nms_iou);
    let mut preds: Vec<Prediction> = kept
        .into_iter()
        .filter(|&j| best[j].row != 0)
        .map(|j| {
            let (s, e) = spans[j];
            let (start, end) = span_to_frames(s, e, video.n);
            Prediction {
                video_id: video.video_id.clone(),
                start,
                end,
                sfx_id: index.ids[best[j].row - 1],
                confidence: best[j].confidence,
            }
        })
        .collect();
    preds.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
            .then(a.sfx_id.cmp(&b.sfx_id))
    });
    Ok(preds)
}

pub fn infer(model: &DmModel, video: &VideoRecord, sfx: &[SfxEntry]) -> Result<Vec<Prediction>> {
    let index = embed_sfx_index(model, sfx, ModalityMask::default())?;
    infer_with_index(model, video, &index, ModalityMask::default())
}

/// Write predictions as JSONL sorted by video id, then confidence
/// descending.
pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut sorted: Vec<&Prediction> = preds.iter().collect();
    sorted.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(b.confidence.partial_cmp(&a.confidence).unwrap())
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
            .then(a.sfx_id.cmp(&b.sfx_id))
    });
    let mut w = BufWriter::new(File::create(path)?);
    for p in sorted {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line).map_err(|e| DmError::Format {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        if p.start >= p.end {
            return Err(DmError::Validation {
                record: p.video_id.clone(),
                reason: format!("prediction span [{}, {}) degenerate", p.start, p.end),
            });
        }
        if p.sfx_id == 0 {
            return Err(DmError::Validation {
                record: p.video_id.clone(),
                reason: "prediction carries the reserved sfx_id 0".into(),
            });
        }
        out.push(p);
    }
    Ok(out)
}
