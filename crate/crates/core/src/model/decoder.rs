//! Query-based moment decoding: learnable queries cross-attend into the
//! fused video tokens; one MLP head emits spans, the other emits moment
//! embeddings.
//!
//! Spans are parameterized as sigmoid (center, width) and converted to
//! clamped (start, end), which guarantees 0 <= start < end <= 1 for every
//! possible parameter value rather than relying on training.

use super::ModelConfig;
use crate::error::{DmError, Result};
use crate::tensor::blocks::{self, Dropout};
use crate::tensor::{ParamStore, Scalar, Tape, TensorId};

pub const MIN_WIDTH: f64 = 1e-4;

/// Decoded set: p spans plus p moment embeddings, still on the tape.
pub struct DecodedMoments {
    /// (p, 2) start/end in [0, 1].
    pub spans: TensorId,
    /// (p, d_model).
    pub embeddings: TensorId,
}

impl DecodedMoments {
    pub fn span_values<T: Scalar>(&self, tape: &Tape<T>) -> Vec<(f64, f64)> {
        let (p, _) = tape.shape(self.spans);
        let v = tape.value(self.spans);
        (0..p).map(|j| (v[j * 2].to_f64(), v[j * 2 + 1].to_f64())).collect()
    }
}

fn mlp_head<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: TensorId,
    name: &str,
) -> Result<TensorId> {
    let h = blocks::linear(tape, store, x, &format!("{name}.1"))?;
    let a = tape.gelu(h);
    blocks::linear(tape, store, a, &format!("{name}.2"))
}

/// Decode a batch of encoded videos on one tape; the two prediction heads
/// run over the row-concatenated decoder outputs.
pub fn decode_moments_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    memories: &[TensorId],
    dropout: &mut Dropout,
) -> Result<Vec<DecodedMoments>> {
    if memories.is_empty() {
        return Err(DmError::Empty("decode_moments batch"));
    }
    for &m in memories {
        if tape.shape(m).0 == 0 {
            return Err(DmError::Empty("decode_moments memory"));
        }
    }
    let queries = tape.param(store, "decoder.queries")?;
    let query_sets = vec![queries; memories.len()];
    let decoded = blocks::transformer_decode_batch(
        tape,
        store,
        "decoder",
        &query_sets,
        memories,
        &cfg.decoder_block(),
        dropout,
    )?;
    let stacked = tape.concat_rows(&decoded)?;

    let raw = mlp_head(tape, store, stacked, "decoder.mlp_loc")?;
    let sig = tape.sigmoid(raw);
    let center = tape.slice_cols(sig, 0, 1)?;
    let width_raw = tape.slice_cols(sig, 1, 2)?;
    // Affine floor rather than a clamp: a clamped width would stop getting
    // gradient once it saturated below the minimum and could never regrow.
    let rows = tape.shape(width_raw).0;
    let width_span = tape.scale(width_raw, T::from_f64(1.0 - MIN_WIDTH));
    let floor = tape.constant(rows, 1, vec![T::from_f64(MIN_WIDTH); rows]);
    let width = tape.add(width_span, floor)?;
    let half = tape.scale(width, T::from_f64(0.5));
    let start_raw = tape.sub(center, half)?;
    let end_raw = tape.add(center, half)?;
    let start = tape.clamp(start_raw, T::zero(), T::one());
    let end = tape.clamp(end_raw, T::zero(), T::one());
    let spans = tape.concat_cols(&[start, end])?;
    let embeddings = mlp_head(tape, store, stacked, "decoder.mlp_emb")?;

    let p = cfg.n_queries;
    (0..memories.len())
        .map(|v| {
            Ok(DecodedMoments {
                spans: tape.slice_rows(spans, v * p, (v + 1) * p)?,
                embeddings: tape.slice_rows(embeddings, v * p, (v + 1) * p)?,
            })
        })
        .collect()
}

pub fn decode_moments<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: TensorId,
    dropout: &mut Dropout,
) -> Result<DecodedMoments> {
    Ok(decode_moments_batch(tape, store, cfg, &[memory], dropout)?.remove(0))
}

/// Convert a normalized span to frame indices in [0, n], rounding to the
/// nearest frame and keeping at least one frame of length.
pub fn span_to_frames(start: f64, end: f64, n: u32) -> (u32, u32) {
    let nf = n as f64;
    let mut s = (start * nf).round().clamp(0.0, nf) as u32;
    let mut e = (end * nf).round().clamp(0.0, nf) as u32;
    if e <= s {
        if s >= n {
            s = n - 1;
        }
        e = s + 1;
    }
    (s, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SubtitleSpan, VideoRecord};
    use crate::model::video_encoder::embed_video;
    use crate::model::{DmModel, ModalityMask};
    use crate::rngutil;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_v: 8,
            d_t: 6,
            d_a: 5,
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            enc_layers: 1,
            dec_layers: 1,
            n_queries: 10,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn video(seed: u64, n: u32) -> VideoRecord {
        let mut rng = rngutil::rng_for(seed, 0);
        VideoRecord {
            video_id: format!("v{seed}"),
            n,
            frame_features: (0..n as usize * 8).map(|_| rngutil::randn(&mut rng) as f32).collect(),
            subtitles: vec![SubtitleSpan {
                begin: 0,
                end: n,
                feature: (0..6).map(|_| rngutil::randn(&mut rng) as f32).collect(),
            }],
            moments: vec![],
        }
    }

    fn decode(seed: u64) -> (Vec<(f64, f64)>, Vec<f64>) {
        let c = cfg();
        let store = DmModel::new(c.clone()).store.convert::<f64>();
        let mut tape = Tape::<f64>::new();
        let enc = embed_video(&mut tape, &store, &c, &video(seed, 9), ModalityMask::default(), &mut Dropout::off()).unwrap();
        let dec = decode_moments(&mut tape, &store, &c, enc.tokens, &mut Dropout::off()).unwrap();
        (dec.span_values(&tape), tape.value(dec.embeddings).to_vec())
    }

    #[test]
    fn default_query_count_yields_ten_spans_and_embeddings() {
        let (spans, embs) = decode(1);
        assert_eq!(spans.len(), 10);
        assert_eq!(embs.len(), 10 * 16);
    }

    #[test]
    fn every_span_is_proper_for_arbitrary_parameters() {
        // Scale parameters wildly; the parameterization must still emit
        // proper spans.
        let c = cfg();
        let mut model = DmModel::new(c.clone());
        let names: Vec<String> = model.store.names().map(String::from).collect();
        for (i, name) in names.iter().enumerate() {
            let factor = if i % 3 == 0 { 40.0 } else { -25.0 };
            let scaled: Vec<f32> =
                model.store.get(name).unwrap().data.iter().map(|v| v * factor).collect();
            model.store.set_data(name, scaled).unwrap();
        }
        let store = model.store.convert::<f64>();
        let mut tape = Tape::<f64>::new();
        let enc = embed_video(&mut tape, &store, &c, &video(2, 7), ModalityMask::default(), &mut Dropout::off()).unwrap();
        let dec = decode_moments(&mut tape, &store, &c, enc.tokens, &mut Dropout::off()).unwrap();
        for (s, e) in dec.span_values(&tape) {
            assert!((0.0..1.0).contains(&s) || s == 0.0);
            assert!(s < e && e <= 1.0, "span [{s}, {e}]");
        }
    }

    #[test]
    fn different_videos_produce_different_embeddings() {
        let (_, a) = decode(3);
        let (_, b) = decode(4);
        assert_ne!(a, b, "cross-attention must read the memory");
    }

    #[test]
    fn span_losses_reach_queries_and_encoder_adapters() {
        let c = cfg();
        let model = DmModel::new(c.clone());
        let mut store = model.store.convert::<f64>();
        store.zero_grads();
        let mut tape = Tape::<f64>::new();
        let enc = embed_video(&mut tape, &store, &c, &video(6, 8), ModalityMask::default(), &mut Dropout::off()).unwrap();
        let dec = decode_moments(&mut tape, &store, &c, enc.tokens, &mut Dropout::off()).unwrap();
        let loss = crate::train::loss::l1_span_loss(&mut tape, dec.spans, 0, (0.2, 0.7)).unwrap();
        tape.backward(loss).unwrap();
        tape.write_grads(&mut store).unwrap();
        for name in ["decoder.queries", "video.frame_proj.w"] {
            let g: f64 = store.get(name).unwrap().grad.iter().map(|v| v * v).sum();
            assert!(g > 0.0, "{name} must receive gradient from the span loss");
        }
    }

    #[test]
    fn span_to_frames_hand_cases() {
        assert_eq!(span_to_frames(0.0, 1.0, 30), (0, 30));
        assert_eq!(span_to_frames(0.2, 0.4, 30), (6, 12));
        // Collapsed span becomes a single frame.
        assert_eq!(span_to_frames(0.5, 0.500001, 30), (15, 16));
        assert_eq!(span_to_frames(1.0, 1.0, 30), (29, 30));
    }
}
