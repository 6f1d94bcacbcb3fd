//! Transformer building blocks: linear layers, pre-norm multi-head
//! attention, feed-forward, encoder and decoder stacks.
//!
//! Blocks read parameters from a [`ParamStore`] by hierarchical name and
//! record everything on a [`Tape`], so the same code path serves training,
//! inference and 64-bit gradient checking.

use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use super::store::ParamStore;
use super::tape::{Tape, TensorId};
use crate::error::{DmError, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Dropout context: absent at inference, seeded during training.
pub struct Dropout<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    p: f64,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { rng: None, p: 0.0 }
    }

    pub fn on(p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Dropout { rng: Some(rng), p }
    }

    fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.p <= 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.shape(x);
        let keep = T::from_f64(1.0 / (1.0 - self.p));
        // Bulk stream draw; one u32 threshold compare per element.
        let threshold = (self.p * u32::MAX as f64) as u32;
        let mut bytes = vec![0u8; r * c * 4];
        rand::RngCore::fill_bytes(rng, &mut bytes);
        let mask: Vec<T> = bytes
            .chunks_exact(4)
            .map(|w| {
                let draw = u32::from_le_bytes([w[0], w[1], w[2], w[3]]);
                if draw < threshold {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = tape.constant(r, c, mask);
        tape.mul(x, m)
    }
}

/// y = x W + b with parameters `{name}.w` (in x out) and `{name}.b`.
pub fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: TensorId,
    name: &str,
) -> Result<TensorId> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.linear(x, w, b)
}

pub fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: TensorId,
    name: &str,
) -> Result<TensorId> {
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.layer_norm_affine(x, g, b, T::from_f64(LN_EPS))
}

/// Contiguous row ranges of each part inside a row-concatenated batch.
fn row_ranges<T: Scalar>(tape: &Tape<T>, parts: &[TensorId]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(parts.len());
    let mut off = 0;
    for &p in parts {
        let (r, _) = tape.shape(p);
        out.push((off, off + r));
        off += r;
    }
    out
}

/// Head mixing for one sequence given already-projected q/k/v rows.
fn mix_heads<T: Scalar>(
    tape: &mut Tape<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    n_heads: usize,
) -> Result<TensorId> {
    let (_, d) = tape.shape(q);
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        let logits = tape.matmul_transb(qh, kh)?;
        let scaled = tape.scale(logits, scale);
        let probs = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(probs, vh)?);
    }
    tape.concat_cols(&head_outs)
}

/// Batched multi-head attention: projections run over the row-concatenated
/// batch; mixing stays within each sequence. `q_ranges`/`kv_ranges` give
/// each sequence's rows inside `q_in`/`kv_in`.
#[allow(clippy::too_many_arguments)]
fn attention_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    q_in: TensorId,
    q_ranges: &[(usize, usize)],
    kv_in: TensorId,
    kv_ranges: &[(usize, usize)],
    name: &str,
    n_heads: usize,
) -> Result<TensorId> {
    let (_, d) = tape.shape(q_in);
    if d % n_heads != 0 {
        return Err(DmError::Config(format!(
            "model dim {d} not divisible by {n_heads} heads"
        )));
    }
    debug_assert_eq!(q_ranges.len(), kv_ranges.len());
    let q = linear(tape, store, q_in, &format!("{name}.q"))?;
    let k = linear(tape, store, kv_in, &format!("{name}.k"))?;
    let v = linear(tape, store, kv_in, &format!("{name}.v"))?;
    let mut outs = Vec::with_capacity(q_ranges.len());
    for (&(q0, q1), &(k0, k1)) in q_ranges.iter().zip(kv_ranges) {
        let qs = tape.slice_rows(q, q0, q1)?;
        let ks = tape.slice_rows(k, k0, k1)?;
        let vs = tape.slice_rows(v, k0, k1)?;
        outs.push(mix_heads(tape, qs, ks, vs, n_heads)?);
    }
    let merged = tape.concat_rows(&outs)?;
    linear(tape, store, merged, &format!("{name}.o"))
}

/// Multi-head attention over a single sequence. Queries come from `q_in`,
/// keys/values from `kv_in`; self-attention passes the same tensor for both.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    q_in: TensorId,
    kv_in: TensorId,
    name: &str,
    n_heads: usize,
) -> Result<TensorId> {
    let (tq, _) = tape.shape(q_in);
    let (tk, _) = tape.shape(kv_in);
    attention_batch(tape, store, q_in, &[(0, tq)], kv_in, &[(0, tk)], name, n_heads)
}

fn feed_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: TensorId,
    name: &str,
) -> Result<TensorId> {
    let h = linear(tape, store, x, &format!("{name}.1"))?;
    let a = tape.gelu(h);
    linear(tape, store, a, &format!("{name}.2"))
}

/// Batched pre-norm encoder: token-parallel sublayers run over the whole
/// row-concatenated batch, self-attention mixes within each sequence.
/// Returns one fused tensor per input sequence.
pub fn transformer_encode_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    tokens: &[TensorId],
    cfg: &BlockConfig,
    dropout: &mut Dropout,
) -> Result<Vec<TensorId>> {
    if tokens.is_empty() {
        return Err(DmError::Empty("transformer_encode batch"));
    }
    for &t in tokens {
        if tape.shape(t).0 == 0 {
            return Err(DmError::Empty("transformer_encode tokens"));
        }
    }
    if cfg.layers == 0 {
        return Ok(tokens.to_vec());
    }
    let ranges = row_ranges(tape, tokens);
    let mut x = tape.concat_rows(tokens)?;
    for l in 0..cfg.layers {
        let base = format!("{prefix}.l{l}");
        let n1 = layer_norm(tape, store, x, &format!("{base}.ln1"))?;
        let a = attention_batch(tape, store, n1, &ranges, n1, &ranges, &format!("{base}.attn"), cfg.n_heads)?;
        let a = dropout.apply(tape, a)?;
        x = tape.add(x, a)?;
        let n2 = layer_norm(tape, store, x, &format!("{base}.ln2"))?;
        let f = feed_forward(tape, store, n2, &format!("{base}.ffn"))?;
        let f = dropout.apply(tape, f)?;
        x = tape.add(x, f)?;
    }
    let fused = layer_norm(tape, store, x, &format!("{prefix}.ln_f"))?;
    ranges.iter().map(|&(r0, r1)| tape.slice_rows(fused, r0, r1)).collect()
}

/// Pre-norm encoder stack over one sequence. With zero layers this is the
/// identity, which the tests use to observe adapter outputs directly.
pub fn transformer_encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    tokens: TensorId,
    cfg: &BlockConfig,
    dropout: &mut Dropout,
) -> Result<TensorId> {
    Ok(transformer_encode_batch(tape, store, prefix, &[tokens], cfg, dropout)?[0])
}

/// Batched pre-norm decoder: per-sequence query self-attention and
/// cross-attention into that sequence's memory, with all projections and
/// feed-forwards batched across sequences.
pub fn transformer_decode_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    queries: &[TensorId],
    memories: &[TensorId],
    cfg: &BlockConfig,
    dropout: &mut Dropout,
) -> Result<Vec<TensorId>> {
    if queries.is_empty() || queries.len() != memories.len() {
        return Err(DmError::Empty("transformer_decode batch"));
    }
    for &m in memories {
        if tape.shape(m).0 == 0 {
            return Err(DmError::Empty("transformer_decode memory"));
        }
    }
    if cfg.layers == 0 {
        return Ok(queries.to_vec());
    }
    let q_ranges = row_ranges(tape, queries);
    let m_ranges = row_ranges(tape, memories);
    let mut x = tape.concat_rows(queries)?;
    let memory = tape.concat_rows(memories)?;
    for l in 0..cfg.layers {
        let base = format!("{prefix}.l{l}");
        let n1 = layer_norm(tape, store, x, &format!("{base}.ln1"))?;
        let sa = attention_batch(tape, store, n1, &q_ranges, n1, &q_ranges, &format!("{base}.self"), cfg.n_heads)?;
        let sa = dropout.apply(tape, sa)?;
        x = tape.add(x, sa)?;
        let n2 = layer_norm(tape, store, x, &format!("{base}.ln2"))?;
        let ca = attention_batch(
            tape,
            store,
            n2,
            &q_ranges,
            memory,
            &m_ranges,
            &format!("{base}.cross"),
            cfg.n_heads,
        )?;
        let ca = dropout.apply(tape, ca)?;
        x = tape.add(x, ca)?;
        let n3 = layer_norm(tape, store, x, &format!("{base}.ln3"))?;
        let f = feed_forward(tape, store, n3, &format!("{base}.ffn"))?;
        let f = dropout.apply(tape, f)?;
        x = tape.add(x, f)?;
    }
    let out = layer_norm(tape, store, x, &format!("{prefix}.ln_f"))?;
    q_ranges.iter().map(|&(r0, r1)| tape.slice_rows(out, r0, r1)).collect()
}

/// Pre-norm decoder stack over one sequence.
pub fn transformer_decode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    queries: TensorId,
    memory: TensorId,
    cfg: &BlockConfig,
    dropout: &mut Dropout,
) -> Result<TensorId> {
    Ok(transformer_decode_batch(tape, store, prefix, &[queries], &[memory], cfg, dropout)?[0])
}

// ---- parameter initialization ------------------------------------------

pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert_xavier(&format!("{name}.w"), fan_in, fan_out, rng);
    store.insert_zeros(&format!("{name}.b"), 1, fan_out);
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) {
    store.insert_ones(&format!("{name}.g"), 1, d);
    store.insert_zeros(&format!("{name}.b"), 1, d);
}

fn init_attention<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut ChaCha8Rng) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{part}"), d, d, rng);
    }
}

fn init_ffn<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, mult: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, &format!("{name}.1"), d, d * mult, rng);
    init_linear(store, &format!("{name}.2"), d * mult, d, rng);
}

pub fn init_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut ChaCha8Rng,
) {
    for l in 0..cfg.layers {
        let base = format!("{prefix}.l{l}");
        init_layer_norm(store, &format!("{base}.ln1"), cfg.d_model);
        init_attention(store, &format!("{base}.attn"), cfg.d_model, rng);
        init_layer_norm(store, &format!("{base}.ln2"), cfg.d_model);
        init_ffn(store, &format!("{base}.ffn"), cfg.d_model, cfg.ffn_mult, rng);
    }
    if cfg.layers > 0 {
        init_layer_norm(store, &format!("{prefix}.ln_f"), cfg.d_model);
    }
}

pub fn init_decoder<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut ChaCha8Rng,
) {
    for l in 0..cfg.layers {
        let base = format!("{prefix}.l{l}");
        init_layer_norm(store, &format!("{base}.ln1"), cfg.d_model);
        init_attention(store, &format!("{base}.self"), cfg.d_model, rng);
        init_layer_norm(store, &format!("{base}.ln2"), cfg.d_model);
        init_attention(store, &format!("{base}.cross"), cfg.d_model, rng);
        init_layer_norm(store, &format!("{base}.ln3"), cfg.d_model);
        init_ffn(store, &format!("{base}.ffn"), cfg.d_model, cfg.ffn_mult, rng);
    }
    if cfg.layers > 0 {
        init_layer_norm(store, &format!("{prefix}.ln_f"), cfg.d_model);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil;

    fn tiny_cfg(layers: usize) -> BlockConfig {
        BlockConfig { d_model: 8, n_heads: 2, ffn_mult: 2, layers, dropout: 0.0 }
    }

    fn rand_tokens(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, t: usize, d: usize) -> TensorId {
        let data: Vec<f64> = (0..t * d).map(|_| rngutil::randn(rng)).collect();
        tape.input(t, d, data)
    }

    #[test]
    fn encode_preserves_shape() {
        let cfg = tiny_cfg(2);
        let mut rng = rngutil::rng_for(1, 0);
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, "enc", &cfg, &mut rng);
        let mut tape = Tape::new();
        let x = rand_tokens(&mut tape, &mut rng, 5, 8);
        let y = transformer_encode(&mut tape, &store, "enc", x, &cfg, &mut Dropout::off()).unwrap();
        assert_eq!(tape.shape(y), (5, 8));
    }

    #[test]
    fn empty_token_sequence_is_an_error() {
        let cfg = tiny_cfg(1);
        let mut rng = rngutil::rng_for(1, 0);
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, "enc", &cfg, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(0, 8, vec![]);
        assert!(matches!(
            transformer_encode(&mut tape, &store, "enc", x, &cfg, &mut Dropout::off()),
            Err(DmError::Empty(_))
        ));
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        // Positional information is already inside the tokens, so permuting
        // tokens must permute outputs identically.
        let cfg = tiny_cfg(2);
        let mut rng = rngutil::rng_for(7, 0);
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, "enc", &cfg, &mut rng);

        let t = 6;
        let data: Vec<f64> = (0..t * 8).map(|_| rngutil::randn(&mut rng)).collect();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&r| data[r * 8..(r + 1) * 8].to_vec())
            .collect();

        let mut tape = Tape::new();
        let x = tape.input(t, 8, data);
        let y = transformer_encode(&mut tape, &store, "enc", x, &cfg, &mut Dropout::off()).unwrap();
        let xp = tape.input(t, 8, permuted);
        let yp = transformer_encode(&mut tape, &store, "enc", xp, &cfg, &mut Dropout::off()).unwrap();

        let yv = tape.value(y);
        let ypv = tape.value(yp);
        for (out_row, &src_row) in perm.iter().enumerate() {
            for j in 0..8 {
                let a = yv[src_row * 8 + j];
                let b = ypv[out_row * 8 + j];
                assert!((a - b).abs() < 1e-9, "row {out_row} col {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn decode_with_identical_memory_rows_matches_single_row_memory() {
        // Cross-attention over equal values is their plain average, so the
        // memory length cannot matter.
        let cfg = tiny_cfg(2);
        let mut rng = rngutil::rng_for(11, 0);
        let mut store = ParamStore::<f64>::new();
        init_decoder(&mut store, "dec", &cfg, &mut rng);

        let row: Vec<f64> = (0..8).map(|_| rngutil::randn(&mut rng)).collect();
        let mem3: Vec<f64> = row.iter().cycle().take(24).copied().collect();
        let qdata: Vec<f64> = (0..2 * 8).map(|_| rngutil::randn(&mut rng)).collect();

        let mut tape = Tape::new();
        let q = tape.input(2, 8, qdata.clone());
        let m3 = tape.input(3, 8, mem3);
        let y3 = transformer_decode(&mut tape, &store, "dec", q, m3, &cfg, &mut Dropout::off()).unwrap();
        let q1 = tape.input(2, 8, qdata);
        let m1 = tape.input(1, 8, row);
        let y1 = transformer_decode(&mut tape, &store, "dec", q1, m1, &cfg, &mut Dropout::off()).unwrap();

        for (a, b) in tape.value(y3).to_vec().iter().zip(tape.value(y1)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_rejects_empty_memory() {
        let cfg = tiny_cfg(1);
        let mut rng = rngutil::rng_for(2, 0);
        let mut store = ParamStore::<f64>::new();
        init_decoder(&mut store, "dec", &cfg, &mut rng);
        let mut tape = Tape::new();
        let q = tape.input(2, 8, vec![0.1; 16]);
        let m = tape.input(0, 8, vec![]);
        assert!(matches!(
            transformer_decode(&mut tape, &store, "dec", q, m, &cfg, &mut Dropout::off()),
            Err(DmError::Empty(_))
        ));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = tiny_cfg(2);
        let mut rng = rngutil::rng_for(5, 0);
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, "enc", &cfg, &mut rng);
        let data: Vec<f64> = (0..4 * 8).map(|_| rngutil::randn(&mut rng)).collect();

        let run = |store: &ParamStore<f64>, data: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.input(4, 8, data.to_vec());
            let y = transformer_encode(&mut tape, store, "enc", x, &cfg, &mut Dropout::off()).unwrap();
            tape.value(y).to_vec()
        };
        let a = run(&store, &data);
        let b = run(&store, &data);
        assert_eq!(a, b, "reruns must be bit-identical");
    }

    #[test]
    fn dropout_scales_surviving_entries() {
        let mut rng = rngutil::rng_for(9, 0);
        let mut tape = Tape::<f64>::new();
        let x = tape.input(4, 16, vec![1.0; 64]);
        let mut drop = Dropout::on(0.5, &mut rng);
        let y = drop.apply(&mut tape, x).unwrap();
        let vals = tape.value(y);
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        assert!(vals.iter().any(|&v| v == 0.0));
        assert!(vals.iter().any(|&v| v != 0.0));
    }
}
