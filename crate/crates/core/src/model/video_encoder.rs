//! Multi-modal video embedding: frame and subtitle features are projected
//! to the model dimension, tagged with sinusoidal positions plus a learned
//! modality embedding, concatenated and fused by the encoder stack.

use super::{ModalityMask, ModelConfig};
use crate::data::VideoRecord;
use crate::error::{DmError, Result};
use crate::tensor::blocks::{self, Dropout};
use crate::tensor::{ParamStore, Scalar, Tape, TensorId};

/// Encoder output: fused tokens with the frame/subtitle layout needed to
/// pool moments later.
pub struct EncodedVideo {
    pub tokens: TensorId,
    /// Frame tokens occupy rows [0, n_frame_tokens).
    pub n_frame_tokens: usize,
    /// Subtitle tokens occupy rows [n_frame_tokens, n_frame_tokens + m).
    pub m_subtitle_tokens: usize,
    /// Source frame index of each frame token (identity unless subsampled).
    pub frame_src: Vec<u32>,
    /// Original frame count of the video.
    pub n_frames: u32,
}

impl EncodedVideo {
    /// Map a source-frame interval [start, end) to the covered frame-token
    /// range; `None` when no sampled frame falls inside.
    pub fn token_range(&self, start: u32, end: u32) -> Option<(usize, usize)> {
        let first = self.frame_src.iter().position(|&s| s >= start && s < end)?;
        let last = self.frame_src.iter().rposition(|&s| s >= start && s < end)?;
        Some((first, last + 1))
    }
}

/// Sinusoidal positional embedding rows for the given (possibly fractional)
/// positions.
fn sinusoidal<T: Scalar>(positions: &[f64], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
            let angle = pos * freq;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            out.push(T::from_f64(v));
        }
    }
    out
}

/// Evenly subsample `want` of `n` frame indices, keeping first and last.
fn subsample_frames(n: u32, want: usize) -> Vec<u32> {
    if (n as usize) <= want {
        return (0..n).collect();
    }
    if want == 1 {
        return vec![0];
    }
    (0..want)
        .map(|i| ((i as f64) * ((n - 1) as f64) / ((want - 1) as f64)).round() as u32)
        .collect()
}

/// Encode a batch of videos on one tape. The frame and subtitle adapters,
/// positional additions and all token-parallel encoder sublayers run over
/// the row-concatenated batch; attention mixes within each video.
pub fn embed_video_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    videos: &[&VideoRecord],
    mask: ModalityMask,
    dropout: &mut Dropout,
) -> Result<Vec<EncodedVideo>> {
    if videos.is_empty() {
        return Err(DmError::Empty("video batch"));
    }
    let d = cfg.d_model;

    // Gather frame tokens and positions across the whole batch.
    let mut frame_srcs = Vec::with_capacity(videos.len());
    let mut fdata = Vec::new();
    let mut fpos = Vec::new();
    for video in videos {
        if video.n == 0 {
            return Err(DmError::Empty("video with zero frames"));
        }
        if video.frame_features.len() != video.n as usize * cfg.d_v {
            return Err(DmError::Shape {
                op: "embed_video frames",
                lhs: (video.n as usize, cfg.d_v),
                rhs: (1, video.frame_features.len()),
            });
        }
        let frame_src = subsample_frames(video.n, cfg.max_frames);
        for &src in &frame_src {
            let row = &video.frame_features[src as usize * cfg.d_v..(src as usize + 1) * cfg.d_v];
            if mask.frames {
                fdata.extend(std::iter::repeat_n(T::zero(), cfg.d_v));
            } else {
                fdata.extend(row.iter().map(|&x| T::from_f64(x as f64)));
            }
            fpos.push(src as f64);
        }
        frame_srcs.push(frame_src);
    }
    let total_frame_tok = fpos.len();
    let f_in = tape.constant(total_frame_tok, cfg.d_v, fdata);
    let f_proj = blocks::linear(tape, store, f_in, "video.frame_proj")?;
    let pe0 = {
        let data = sinusoidal::<T>(&fpos, d);
        tape.constant(total_frame_tok, d, data)
    };
    let f_pos = tape.add(f_proj, pe0)?;
    let type_embed = tape.param(store, "video.type_embed")?;
    let frame_type = tape.slice_rows(type_embed, 0, 1)?;
    let f_tokens = tape.add_row(f_pos, frame_type)?;

    // Subtitle tokens, batched the same way (videos may contribute none).
    let mut sub_counts = Vec::with_capacity(videos.len());
    let mut tdata = Vec::new();
    let mut tpos = Vec::new();
    for video in videos {
        let subs: Vec<_> = video.subtitles.iter().take(cfg.max_subtitles).collect();
        for s in &subs {
            if s.feature.len() != cfg.d_t {
                return Err(DmError::Shape {
                    op: "embed_video subtitles",
                    lhs: (1, s.feature.len()),
                    rhs: (1, cfg.d_t),
                });
            }
            if mask.subtitles {
                tdata.extend(std::iter::repeat_n(T::zero(), cfg.d_t));
            } else {
                tdata.extend(s.feature.iter().map(|&x| T::from_f64(x as f64)));
            }
            tpos.push((s.begin + s.end) as f64 / 2.0);
        }
        sub_counts.push(subs.len());
    }
    let total_sub_tok = tpos.len();
    let t_tokens = if total_sub_tok > 0 {
        let t_in = tape.constant(total_sub_tok, cfg.d_t, tdata);
        let t_proj = blocks::linear(tape, store, t_in, "video.sub_proj")?;
        let pe1 = {
            let data = sinusoidal::<T>(&tpos, d);
            tape.constant(total_sub_tok, d, data)
        };
        let t_pos = tape.add(t_proj, pe1)?;
        let sub_type = tape.slice_rows(type_embed, 1, 2)?;
        Some(tape.add_row(t_pos, sub_type)?)
    } else {
        None
    };

    // Interleave back into per-video token sequences.
    let mut per_video_tokens = Vec::with_capacity(videos.len());
    let mut f_off = 0;
    let mut s_off = 0;
    for (frame_src, &m_tok) in frame_srcs.iter().zip(&sub_counts) {
        let n_tok = frame_src.len();
        let f_slice = tape.slice_rows(f_tokens, f_off, f_off + n_tok)?;
        f_off += n_tok;
        let tokens = if m_tok > 0 {
            let t_slice = tape.slice_rows(t_tokens.unwrap(), s_off, s_off + m_tok)?;
            s_off += m_tok;
            tape.concat_rows(&[f_slice, t_slice])?
        } else {
            f_slice
        };
        per_video_tokens.push(tokens);
    }

    let fused = blocks::transformer_encode_batch(
        tape,
        store,
        "encoder",
        &per_video_tokens,
        &cfg.encoder_block(),
        dropout,
    )?;
    Ok(fused
        .into_iter()
        .zip(frame_srcs)
        .zip(sub_counts)
        .zip(videos)
        .map(|(((tokens, frame_src), m_tok), video)| EncodedVideo {
            tokens,
            n_frame_tokens: frame_src.len(),
            m_subtitle_tokens: m_tok,
            frame_src,
            n_frames: video.n,
        })
        .collect())
}

pub fn embed_video<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    video: &VideoRecord,
    mask: ModalityMask,
    dropout: &mut Dropout,
) -> Result<EncodedVideo> {
    Ok(embed_video_batch(tape, store, cfg, &[video], mask, dropout)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SubtitleSpan, VideoRecord};
    use crate::model::DmModel;
    use crate::rngutil;

    fn test_cfg(enc_layers: usize) -> ModelConfig {
        ModelConfig {
            d_v: 8,
            d_t: 6,
            d_a: 5,
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            enc_layers,
            dec_layers: 1,
            max_frames: 12,
            max_subtitles: 40,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn test_video(n: u32, m: usize, d_v: usize, d_t: usize, seed: u64) -> VideoRecord {
        let mut rng = rngutil::rng_for(seed, 0);
        let frame_features: Vec<f32> =
            (0..n as usize * d_v).map(|_| rngutil::randn(&mut rng) as f32).collect();
        let per = (n as usize / m.max(1)).max(1) as u32;
        let subtitles = (0..m)
            .map(|j| {
                let begin = (j as u32 * per).min(n - 1);
                SubtitleSpan {
                    begin,
                    end: (begin + per).min(n).max(begin + 1),
                    feature: (0..d_t).map(|_| rngutil::randn(&mut rng) as f32).collect(),
                }
            })
            .collect();
        VideoRecord { video_id: format!("t{seed}"), n, frame_features, subtitles, moments: vec![] }
    }

    #[test]
    fn configured_maxima_give_expected_token_count() {
        // 12 frame tokens + 40 subtitle tokens = 52 fused tokens.
        let cfg = test_cfg(1);
        let model = DmModel::new(cfg.clone());
        let store = model.store.convert::<f64>();
        let video = test_video(12, 40, cfg.d_v, cfg.d_t, 1);
        let mut tape = Tape::<f64>::new();
        let enc = embed_video(&mut tape, &store, &cfg, &video, ModalityMask::default(), &mut Dropout::off()).unwrap();
        assert_eq!(tape.shape(enc.tokens), (52, cfg.d_model));
        assert_eq!(enc.n_frame_tokens, 12);
        assert_eq!(enc.m_subtitle_tokens, 40);
    }

    #[test]
    fn no_subtitles_is_fine() {
        let cfg = test_cfg(1);
        let model = DmModel::new(cfg.clone());
        let store = model.store.convert::<f64>();
        let mut video = test_video(7, 0, cfg.d_v, cfg.d_t, 2);
        video.subtitles.clear();
        let mut tape = Tape::<f64>::new();
        let enc = embed_video(&mut tape, &store, &cfg, &video, ModalityMask::default(), &mut Dropout::off()).unwrap();
        assert_eq!(tape.shape(enc.tokens), (7, cfg.d_model));
    }

    #[test]
    fn depth_zero_encoder_returns_adapted_tokens_exactly() {
        let cfg = test_cfg(0);
        let model = DmModel::new(cfg.clone());
        let store = model.store.convert::<f64>();
        let video = test_video(5, 2, cfg.d_v, cfg.d_t, 3);
        let mut tape = Tape::<f64>::new();
        let enc = embed_video(&mut tape, &store, &cfg, &video, ModalityMask::default(), &mut Dropout::off()).unwrap();

        // Reproduce the adapter arithmetic by hand for frame token 2.
        let d = cfg.d_model;
        let w = store.get("video.frame_proj.w").unwrap();
        let b = store.get("video.frame_proj.b").unwrap();
        let ty = store.get("video.type_embed").unwrap();
        let x = &video.frame_features[2 * cfg.d_v..3 * cfg.d_v];
        let pe = sinusoidal::<f64>(&[2.0], d);
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..cfg.d_v {
                acc += x[i] as f64 * w.data[i * d + j];
            }
            acc += b.data[j] + pe[j] + ty.data[j];
            let got = tape.value(enc.tokens)[2 * d + j];
            assert!((got - acc).abs() < 1e-9, "col {j}: {got} vs {acc}");
        }
    }

    #[test]
    fn output_is_deterministic_and_subtitle_sensitive() {
        let cfg = test_cfg(2);
        let model = DmModel::new(cfg.clone());
        let store = model.store.convert::<f64>();
        let video = test_video(9, 3, cfg.d_v, cfg.d_t, 4);

        let run = |video: &VideoRecord| {
            let mut tape = Tape::<f64>::new();
            let enc = embed_video(&mut tape, &store, &cfg, video, ModalityMask::default(), &mut Dropout::off()).unwrap();
            tape.value(enc.tokens).to_vec()
        };
        assert_eq!(run(&video), run(&video));

        let mut zeroed = video.clone();
        zeroed.subtitles[1].feature.iter_mut().for_each(|x| *x = 0.0);
        assert_ne!(run(&video), run(&zeroed), "subtitle content must reach the fused tokens");
    }

    #[test]
    fn long_videos_subsample_evenly_and_keep_endpoints() {
        let cfg = test_cfg(1);
        let model = DmModel::new(cfg.clone());
        let store = model.store.convert::<f64>();
        let video = test_video(50, 2, cfg.d_v, cfg.d_t, 5);
        let mut tape = Tape::<f64>::new();
        let enc = embed_video(&mut tape, &store, &cfg, &video, ModalityMask::default(), &mut Dropout::off()).unwrap();
        assert_eq!(enc.n_frame_tokens, 12);
        assert_eq!(enc.frame_src.first(), Some(&0));
        assert_eq!(enc.frame_src.last(), Some(&49));
        assert!(enc.frame_src.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn token_range_maps_moments_through_subsampling() {
        let enc = EncodedVideo {
            tokens: TensorId(0),
            n_frame_tokens: 4,
            m_subtitle_tokens: 0,
            frame_src: vec![0, 3, 6, 9],
            n_frames: 10,
        };
        assert_eq!(enc.token_range(2, 7), Some((1, 3)));
        assert_eq!(enc.token_range(4, 6), None);
        assert_eq!(enc.token_range(0, 10), Some((0, 4)));
    }
}
