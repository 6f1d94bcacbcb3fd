//! Multi-modal SFX embedding: concatenated audio/description features pass
//! through one FC, the tag embedding is added, and a second FC produces the
//! joint 256-d vector. Row 0 of the set embedding is the trainable no-SFX
//! vector s_0.

use super::{ModalityMask, ModelConfig};
use crate::data::SfxEntry;
use crate::error::{DmError, Result};
use crate::tensor::blocks;
use crate::tensor::{ParamStore, Scalar, Tape, TensorId};

fn entry_features<T: Scalar>(
    cfg: &ModelConfig,
    entry: &SfxEntry,
    mask: ModalityMask,
    out: &mut Vec<T>,
) -> Result<()> {
    if entry.audio.len() != cfg.d_a || entry.desc.len() != cfg.d_t {
        return Err(DmError::Shape {
            op: "embed_sfx features",
            lhs: (entry.audio.len(), entry.desc.len()),
            rhs: (cfg.d_a, cfg.d_t),
        });
    }
    if mask.audio {
        out.extend(std::iter::repeat_n(T::zero(), cfg.d_a));
    } else {
        out.extend(entry.audio.iter().map(|&x| T::from_f64(x as f64)));
    }
    if mask.description {
        out.extend(std::iter::repeat_n(T::zero(), cfg.d_t));
    } else {
        out.extend(entry.desc.iter().map(|&x| T::from_f64(x as f64)));
    }
    Ok(())
}

fn embed_rows<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    entries: &[&SfxEntry],
    mask: ModalityMask,
) -> Result<TensorId> {
    let l = entries.len();
    let mut feats = Vec::with_capacity(l * (cfg.d_a + cfg.d_t));
    for e in entries {
        entry_features(cfg, e, mask, &mut feats)?;
    }
    let x = tape.constant(l, cfg.d_a + cfg.d_t, feats);
    let h = blocks::linear(tape, store, x, "sfx.fc1")?;

    // One-hot tag rows times the 6 x d table; rows for unused tags stay at
    // zero gradient automatically.
    let h = if mask.tag {
        h
    } else {
        let mut onehot = vec![T::zero(); l * 6];
        for (i, e) in entries.iter().enumerate() {
            onehot[i * 6 + e.tag.index()] = T::one();
        }
        let oh = tape.constant(l, 6, onehot);
        let table = tape.param(store, "sfx.tag_embed")?;
        let tags = tape.matmul(oh, table)?;
        tape.add(h, tags)?
    };
    blocks::linear(tape, store, h, "sfx.fc2")
}

/// Embed one sound effect to a (1, d_model) vector.
pub fn embed_sfx<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    entry: &SfxEntry,
    mask: ModalityMask,
) -> Result<TensorId> {
    embed_rows(tape, store, cfg, &[entry], mask)
}

/// Embed the whole set: row 0 is s_0, rows 1..=l follow ascending sfx_id.
pub fn embed_sfx_set<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    entries: &[SfxEntry],
    mask: ModalityMask,
) -> Result<TensorId> {
    if entries.is_empty() {
        return Err(DmError::Empty("sfx set"));
    }
    let mut sorted: Vec<&SfxEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| e.sfx_id);
    for pair in sorted.windows(2) {
        if pair[0].sfx_id == pair[1].sfx_id {
            return Err(DmError::Validation {
                record: format!("sfx {}", pair[0].sfx_id),
                reason: "duplicate sfx_id in set".into(),
            });
        }
    }
    let s0 = tape.param(store, "sfx.s0")?;
    let rows = embed_rows(tape, store, cfg, &sorted, mask)?;
    tape.concat_rows(&[s0, rows])
}
