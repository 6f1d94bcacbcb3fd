//! Loss primitives: InfoNCE, 1-D GIoU, span losses on the tape, and the
//! pooled moment embeddings used by matching-based pre-training.

use crate::error::{DmError, Result};
use crate::matching::{temporal_iou, Interval};
use crate::model::video_encoder::EncodedVideo;
use crate::tensor::{Scalar, Tape, TensorId};

/// Closed-form InfoNCE over one positive and K negative similarities:
/// -ln( exp(pos/t) / (exp(pos/t) + sum_i exp(neg_i/t)) ), always >= 0.
pub fn info_nce(pos_sim: f64, neg_sims: &[f64], tau: f64) -> f64 {
    let logits: Vec<f64> = std::iter::once(pos_sim)
        .chain(neg_sims.iter().copied())
        .map(|s| s / tau)
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// Generalized IoU for intervals: IoU minus the hull fraction not covered
/// by the union; in [-1, 1], equal to IoU exactly when the hull equals the
/// union.
pub fn giou_1d(pred: Interval, gt: Interval) -> f64 {
    let iou = temporal_iou(pred, gt);
    let inter = (pred.end().min(gt.end()) - pred.start().max(gt.start())).max(0.0);
    let union = pred.len() + gt.len() - inter;
    let hull = pred.end().max(gt.end()) - pred.start().min(gt.start());
    iou - (hull - union) / hull
}

/// InfoNCE on the tape from a similarity row: `sims` must hold the positive
/// at `pos_idx` and the negatives at `neg_idx`, all flat indices into any
/// tensor of cosine similarities.
pub fn info_nce_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    sims: TensorId,
    pos_idx: usize,
    neg_idx: &[usize],
    tau: f64,
) -> Result<TensorId> {
    let mut idx = Vec::with_capacity(1 + neg_idx.len());
    idx.push(pos_idx);
    idx.extend_from_slice(neg_idx);
    let row = tape.select(sims, idx)?;
    let logits = tape.scale(row, T::from_f64(1.0 / tau));
    let lse = tape.log_sum_exp_rows(logits);
    let pos = tape.select(logits, vec![0])?;
    tape.sub(lse, pos)
}

/// L1 distance between a predicted span (rows of a (p, 2) tensor) and a
/// ground-truth span, on the tape.
pub fn l1_span_loss<T: Scalar>(
    tape: &mut Tape<T>,
    spans: TensorId,
    query: usize,
    gt: (f64, f64),
) -> Result<TensorId> {
    let pred = tape.select(spans, vec![query * 2, query * 2 + 1])?;
    let target = tape.constant(1, 2, vec![T::from_f64(gt.0), T::from_f64(gt.1)]);
    let diff = tape.sub(pred, target)?;
    let a = tape.abs(diff);
    Ok(tape.sum_all(a))
}

/// 1 - GIoU between a predicted span and a ground-truth span, on the tape.
pub fn giou_span_loss<T: Scalar>(
    tape: &mut Tape<T>,
    spans: TensorId,
    query: usize,
    gt: (f64, f64),
) -> Result<TensorId> {
    let ps = tape.select(spans, vec![query * 2])?;
    let pe = tape.select(spans, vec![query * 2 + 1])?;
    let gs = tape.constant_scalar(T::from_f64(gt.0));
    let ge = tape.constant_scalar(T::from_f64(gt.1));
    let zero = tape.constant_scalar(T::zero());
    let one = tape.constant_scalar(T::one());

    let min_end = tape.min(pe, ge)?;
    let max_start = tape.max(ps, gs)?;
    let overlap = tape.sub(min_end, max_start)?;
    let inter = tape.max(overlap, zero)?;

    let pred_len = tape.sub(pe, ps)?;
    let gt_len = tape.sub(ge, gs)?;
    let lens = tape.add(pred_len, gt_len)?;
    let union = tape.sub(lens, inter)?;

    let hull_end = tape.max(pe, ge)?;
    let hull_start = tape.min(ps, gs)?;
    let hull = tape.sub(hull_end, hull_start)?;

    let iou = tape.div(inter, union)?;
    let slack = tape.sub(hull, union)?;
    let penalty = tape.div(slack, hull)?;
    let giou = tape.sub(iou, penalty)?;
    tape.sub(one, giou)
}

/// Mean-pool the encoder output over a frame-token range [b, e).
pub fn moment_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    encoded: &EncodedVideo,
    b: usize,
    e: usize,
) -> Result<TensorId> {
    if b >= e || e > encoded.n_frame_tokens {
        return Err(DmError::Empty("moment token range"));
    }
    let slice = tape.slice_rows(encoded.tokens, b, e)?;
    tape.mean_over_rows(slice)
}

/// Mean-pool over frame tokens not covered by any ground-truth moment.
/// Returns `None` when every frame token is covered, in which case the
/// video contributes no background pair.
pub fn sfx0_moment_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    encoded: &EncodedVideo,
    moments: &[(u32, u32)],
) -> Result<Option<TensorId>> {
    let uncovered: Vec<usize> = (0..encoded.n_frame_tokens)
        .filter(|&tok| {
            let src = encoded.frame_src[tok];
            !moments.iter().any(|&(s, e)| s <= src && src < e)
        })
        .collect();
    if uncovered.is_empty() {
        return Ok(None);
    }
    let rows: Vec<TensorId> = uncovered
        .iter()
        .map(|&tok| tape.slice_rows(encoded.tokens, tok, tok + 1))
        .collect::<Result<_>>()?;
    let stacked = tape.concat_rows(&rows)?;
    Ok(Some(tape.mean_over_rows(stacked)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::new(s, e).unwrap()
    }

    #[test]
    fn uniform_similarities_give_ln_k_plus_one() {
        for k in [1usize, 5, 15, 63] {
            let loss = info_nce(0.37, &vec![0.37; k], 0.07);
            assert!((loss - ((k + 1) as f64).ln()).abs() < 1e-6, "k={k}");
        }
    }

    #[test]
    fn info_nce_hand_value() {
        // pos=1, negs=[0,0], tau=1: -ln(e / (e + 2)).
        let loss = info_nce(1.0, &[0.0, 0.0], 1.0);
        let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn info_nce_vanishes_with_a_huge_margin() {
        let loss = info_nce(60.0, &[0.0, -0.5, 0.2], 1.0);
        assert!(loss >= 0.0 && loss < 1e-12, "{loss}");
    }

    #[test]
    fn tape_info_nce_matches_closed_form() {
        let mut tape = Tape::<f64>::new();
        let sims = tape.input(1, 4, vec![0.6, 0.1, -0.3, 0.4]);
        let loss = info_nce_on_tape(&mut tape, sims, 0, &[1, 2, 3], 0.07).unwrap();
        let direct = info_nce(0.6, &[0.1, -0.3, 0.4], 0.07);
        assert!((tape.scalar(loss) - direct).abs() < 1e-12);
    }

    #[test]
    fn giou_identical_intervals_is_one() {
        assert!((giou_1d(iv(0.2, 0.6), iv(0.2, 0.6)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_disjoint_hand_value() {
        // [0.2, 0.4] vs [0.6, 0.8]: 0 - 0.2/0.6 = -1/3.
        let g = giou_1d(iv(0.2, 0.4), iv(0.6, 0.8));
        assert!((g + 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn giou_equals_iou_when_hull_equals_union() {
        // Overlapping or touching intervals: union covers the hull.
        for (a, b) in [
            (iv(0.1, 0.5), iv(0.3, 0.8)),
            (iv(0.0, 0.4), iv(0.4, 0.9)),
            (iv(0.2, 0.9), iv(0.3, 0.5)),
        ] {
            assert!((giou_1d(a, b) - temporal_iou(a, b)).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_never_exceeds_iou() {
        let mut rng = crate::rngutil::rng_for(31, 0);
        for _ in 0..500 {
            let s1 = crate::rngutil::uniform(&mut rng, 0.0, 0.8);
            let e1 = s1 + crate::rngutil::uniform(&mut rng, 0.01, 0.2);
            let s2 = crate::rngutil::uniform(&mut rng, 0.0, 0.8);
            let e2 = s2 + crate::rngutil::uniform(&mut rng, 0.01, 0.2);
            let (a, b) = (iv(s1, e1), iv(s2, e2));
            assert!(giou_1d(a, b) <= temporal_iou(a, b) + 1e-12);
        }
    }

    #[test]
    fn tape_giou_matches_scalar_giou() {
        let cases = [
            ((0.2, 0.4), (0.6, 0.8)),
            ((0.1, 0.5), (0.3, 0.7)),
            ((0.25, 0.45), (0.25, 0.45)),
        ];
        for (p, g) in cases {
            let mut tape = Tape::<f64>::new();
            let spans = tape.input(1, 2, vec![p.0, p.1]);
            let loss = giou_span_loss(&mut tape, spans, 0, g).unwrap();
            let direct = 1.0 - giou_1d(iv(p.0, p.1), iv(g.0, g.1));
            assert!((tape.scalar(loss) - direct).abs() < 1e-12, "{p:?} {g:?}");
        }
    }

    #[test]
    fn l1_span_loss_hand_value() {
        let mut tape = Tape::<f64>::new();
        let spans = tape.input(2, 2, vec![0.1, 0.4, 0.5, 0.9]);
        let loss = l1_span_loss(&mut tape, spans, 1, (0.45, 0.8)).unwrap();
        assert!((tape.scalar(loss) - (0.05 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn perfect_span_has_zero_l1_and_zero_giou_loss() {
        let mut tape = Tape::<f64>::new();
        let spans = tape.input(1, 2, vec![0.3, 0.7]);
        let l1 = l1_span_loss(&mut tape, spans, 0, (0.3, 0.7)).unwrap();
        let gl = giou_span_loss(&mut tape, spans, 0, (0.3, 0.7)).unwrap();
        assert_eq!(tape.scalar(l1), 0.0);
        assert!(tape.scalar(gl).abs() < 1e-12);
    }

    mod pooling {
        use super::*;
        use crate::tensor::TensorId;

        fn encoded(tape: &mut Tape<f64>, rows: usize, d: usize, data: Vec<f64>) -> EncodedVideo {
            let tokens = tape.input(rows, d, data);
            EncodedVideo {
                tokens,
                n_frame_tokens: rows,
                m_subtitle_tokens: 0,
                frame_src: (0..rows as u32).collect(),
                n_frames: rows as u32,
            }
        }

        #[test]
        fn single_token_moment_is_that_token() {
            let mut tape = Tape::<f64>::new();
            let enc = encoded(&mut tape, 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
            let u = moment_embedding(&mut tape, &enc, 1, 2).unwrap();
            assert_eq!(tape.value(u), &[3.0, 4.0]);
        }

        #[test]
        fn range_mean_matches_hand_arithmetic() {
            let mut tape = Tape::<f64>::new();
            let enc = encoded(&mut tape, 4, 2, vec![1.0, 0.0, 2.0, 1.0, 3.0, 5.0, 9.0, 9.0]);
            let u = moment_embedding(&mut tape, &enc, 0, 3).unwrap();
            assert_eq!(tape.value(u), &[2.0, 2.0]);
        }

        #[test]
        fn empty_range_is_an_error() {
            let mut tape = Tape::<f64>::new();
            let enc = encoded(&mut tape, 3, 2, vec![0.0; 6]);
            assert!(moment_embedding(&mut tape, &enc, 2, 2).is_err());
        }

        #[test]
        fn background_pool_skips_covered_tokens() {
            // Moment [2, 4) over 6 frames leaves tokens {0, 1, 4, 5}.
            let mut tape = Tape::<f64>::new();
            let data: Vec<f64> = (0..6).flat_map(|i| vec![i as f64, 0.0]).collect();
            let enc = encoded(&mut tape, 6, 2, data);
            let u = sfx0_moment_embedding(&mut tape, &enc, &[(2, 4)]).unwrap().unwrap();
            assert_eq!(tape.value(u)[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        }

        #[test]
        fn no_moments_pools_every_frame_token() {
            let mut tape = Tape::<f64>::new();
            let data: Vec<f64> = (0..4).flat_map(|i| vec![i as f64, 1.0]).collect();
            let enc = encoded(&mut tape, 4, 2, data);
            let u = sfx0_moment_embedding(&mut tape, &enc, &[]).unwrap().unwrap();
            assert_eq!(tape.value(u), &[1.5, 1.0]);
        }

        #[test]
        fn fully_covered_video_yields_none() {
            let mut tape = Tape::<f64>::new();
            let enc = encoded(&mut tape, 4, 2, vec![0.5; 8]);
            assert!(sfx0_moment_embedding(&mut tape, &enc, &[(0, 4)]).unwrap().is_none());
            let _ = TensorId(0);
        }
    }
}
