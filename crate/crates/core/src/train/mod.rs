//! Training: matching-based pre-training of the two encoders, then
//! end-to-end training with Hungarian-matched span losses plus InfoNCE.

pub mod hungarian;
pub mod loss;
pub mod negatives;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SfxEntry, Tag, VideoRecord};
use crate::error::{DmError, Result};
use crate::model::decoder::decode_moments_batch;
use crate::model::sfx_encoder::embed_sfx_set;
use crate::model::video_encoder::embed_video_batch;
use crate::model::{DmModel, ModalityMask};
use crate::rngutil;
use crate::tensor::blocks::Dropout;
use crate::tensor::{AdamWConfig, OptimizerState, Tape, TensorId};
use hungarian::{hungarian_match, CostMatrix};
use loss::{giou_span_loss, info_nce_on_tape, l1_span_loss, moment_embedding, sfx0_moment_embedding};
use negatives::{draw_negatives, Candidate, NegSampling};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Moment-SFX pairs per pre-training step.
    pub batch_size_pretrain: usize,
    /// Videos per end-to-end step.
    pub batch_size_train: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_floor: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Negative-sampling temperature.
    pub tau_s: f64,
    /// Negatives per pair (K).
    pub negatives: usize,
    pub neg_sampling: NegSampling,
    /// Weights for (L1, GIoU, InfoNCE); the default combines them equally.
    pub loss_weights: (f64, f64, f64),
    pub pretrain_steps: usize,
    pub train_steps: usize,
    /// Keep the matching loss as an auxiliary task during end-to-end
    /// training.
    pub msm_aux: bool,
    pub mask: ModalityMask,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size_pretrain: 512,
            batch_size_train: 256,
            lr: 3e-4,
            weight_decay: 1e-4,
            lr_floor: 0.0,
            tau: 0.07,
            tau_s: 0.1,
            negatives: 15,
            neg_sampling: NegSampling::Tans,
            loss_weights: (1.0, 1.0, 1.0),
            pretrain_steps: 300,
            train_steps: 1000,
            msm_aux: false,
            mask: ModalityMask::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn adamw(&self, total_steps: usize) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            lr_floor: self.lr_floor,
            weight_decay: self.weight_decay,
            total_steps,
            ..AdamWConfig::default()
        }
    }

    fn check_against(&self, sfx_count: usize) -> Result<()> {
        if sfx_count < 2 {
            return Err(DmError::Config("need at least two sound effects to train".into()));
        }
        if self.negatives == 0 || self.negatives > sfx_count - 1 {
            return Err(DmError::Config(format!(
                "negatives K={} must be in [1, l-1] with l={sfx_count} sound effects",
                self.negatives
            )));
        }
        if self.tau <= 0.0 || self.tau_s <= 0.0 {
            return Err(DmError::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub l1: f64,
    pub giou: f64,
    pub infonce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,l1,giou,infonce,total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6e},{:.6},{:.6},{:.6},{:.6}\n",
                r.step, r.lr, r.l1, r.giou, r.infonce, r.total
            ));
        }
        out
    }

    pub fn last_total(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total)
    }
}

/// Sorted view of the SFX set: row r >= 1 of the embedding matrix holds
/// entry `entries[r - 1]`.
struct SfxCtx<'a> {
    entries: Vec<&'a SfxEntry>,
    row_of_id: BTreeMap<u32, usize>,
}

impl<'a> SfxCtx<'a> {
    fn new(sfx: &'a [SfxEntry]) -> Self {
        let mut entries: Vec<&SfxEntry> = sfx.iter().collect();
        entries.sort_by_key(|e| e.sfx_id);
        let row_of_id = entries.iter().enumerate().map(|(i, e)| (e.sfx_id, i + 1)).collect();
        SfxCtx { entries, row_of_id }
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn row_of(&self, sfx_id: u32) -> Result<usize> {
        self.row_of_id.get(&sfx_id).copied().ok_or_else(|| DmError::Validation {
            record: format!("sfx {sfx_id}"),
            reason: "moment references a sound effect missing from the set".into(),
        })
    }

    fn tag_of_row(&self, row: usize) -> Tag {
        self.entries[row - 1].tag
    }

    /// Candidate negatives for a positive at `pos_row` (0 for the no-SFX
    /// row): every normal row except the positive.
    fn candidates(&self, pos_row: usize, sims: &[f64], sims_cols: usize, pair: usize) -> Vec<Candidate> {
        (1..=self.len())
            .filter(|&r| r != pos_row)
            .map(|r| Candidate {
                row: r,
                tag: self.tag_of_row(r),
                sim: sims[pair * sims_cols + r],
            })
            .collect()
    }
}

fn mean_terms(tape: &mut Tape<f32>, terms: &[TensorId]) -> Result<TensorId> {
    if terms.is_empty() {
        return Ok(tape.constant_scalar(0.0));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f32))
}

/// One InfoNCE term on the shared similarity matrix.
///
/// Normal-moment terms draw K tagged negatives and additionally rank
/// against the no-SFX row: without that, nothing ever pushes the no-SFX
/// embedding away from real moments and it ends up winning every column at
/// inference, filtering all output. The no-SFX row has no tag, so it joins
/// outside the tag-aware draw.
#[allow(clippy::too_many_arguments)]
fn push_nce_term(
    tape: &mut Tape<f32>,
    cfg: &TrainConfig,
    ctx: &SfxCtx,
    sims_id: TensorId,
    sims_vals: &[f64],
    pair: usize,
    pos_row: usize,
    neg_rng: &mut ChaCha8Rng,
    terms: &mut Vec<TensorId>,
) -> Result<()> {
    let cols = ctx.len() + 1;
    let cands = ctx.candidates(pos_row, sims_vals, cols, pair);
    let pos_sim = sims_vals[pair * cols + pos_row];
    let mode = if pos_row == 0 {
        // Background pairs rank the no-SFX embedding against uniform draws;
        // tag-aware scores are undefined for them.
        NegSampling::Uniform
    } else {
        cfg.neg_sampling
    };
    let pos_tag = if pos_row == 0 { Tag::Others } else { ctx.tag_of_row(pos_row) };
    let picks = draw_negatives(mode, pos_sim, pos_tag, &cands, cfg.negatives, cfg.tau_s, neg_rng)?;
    let mut neg_idx: Vec<usize> = picks.iter().map(|&i| pair * cols + cands[i].row).collect();
    if pos_row != 0 {
        neg_idx.push(pair * cols);
    }
    terms.push(info_nce_on_tape(tape, sims_id, pair * cols + pos_row, &neg_idx, cfg.tau)?);
    Ok(())
}

/// One pre-training step over a batch of videos: pools ground-truth moment
/// embeddings (plus one background embedding per video with uncovered
/// frames), ranks each against the SFX set with InfoNCE and updates every
/// parameter outside the decoder stack.
pub fn msm_pretrain_step(
    model: &mut DmModel,
    videos: &[&VideoRecord],
    sfx: &[SfxEntry],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    drop_rng: &mut ChaCha8Rng,
    neg_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    cfg.check_against(sfx.len())?;
    let ctx = SfxCtx::new(sfx);
    let mut tape = Tape::<f32>::new();
    let sfx_set = embed_sfx_set(&mut tape, &model.store, &model.cfg, sfx, cfg.mask)?;

    let mut dropout = Dropout::on(model.cfg.dropout, drop_rng);
    let encoded_batch = embed_video_batch(&mut tape, &model.store, &model.cfg, videos, cfg.mask, &mut dropout)?;
    let mut pooled: Vec<(TensorId, usize)> = Vec::new();
    for (video, encoded) in videos.iter().zip(&encoded_batch) {
        let mut spans = Vec::new();
        for m in &video.moments {
            spans.push((m.start, m.end));
            if let Some((b, e)) = encoded.token_range(m.start, m.end) {
                let u = moment_embedding(&mut tape, encoded, b, e)?;
                pooled.push((u, ctx.row_of(m.sfx_id)?));
            }
        }
        if let Some(u0) = sfx0_moment_embedding(&mut tape, encoded, &spans)? {
            pooled.push((u0, 0));
        }
    }
    if pooled.is_empty() {
        return Err(DmError::Empty("pre-training batch produced no moment-SFX pairs"));
    }

    let rows: Vec<TensorId> = pooled.iter().map(|&(u, _)| u).collect();
    let u_matrix = tape.concat_rows(&rows)?;
    let sims = tape.cosine_matrix(u_matrix, sfx_set)?;
    let sims_vals: Vec<f64> = tape.value(sims).iter().map(|&v| v as f64).collect();

    let mut terms = Vec::with_capacity(pooled.len());
    for (pair, &(_, pos_row)) in pooled.iter().enumerate() {
        push_nce_term(&mut tape, cfg, &ctx, sims, &sims_vals, pair, pos_row, neg_rng, &mut terms)?;
    }
    let total = mean_terms(&mut tape, &terms)?;
    let value = tape.scalar(total) as f64;
    tape.backward(total)?;
    tape.write_grads(&mut model.store)?;
    opt.step(&mut model.store, DmModel::is_pretrain_param)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub l1: f64,
    pub giou: f64,
    pub infonce: f64,
    pub total: f64,
}

/// One end-to-end step: decode moments per video, Hungarian-match them to
/// ground truth, combine span L1 + GIoU with InfoNCE over the SFX set, and
/// update all parameters.
pub fn train_step(
    model: &mut DmModel,
    videos: &[&VideoRecord],
    sfx: &[SfxEntry],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    drop_rng: &mut ChaCha8Rng,
    neg_rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    cfg.check_against(sfx.len())?;
    let ctx = SfxCtx::new(sfx);
    let p = model.cfg.n_queries;
    let cols = ctx.len() + 1;

    let mut tape = Tape::<f32>::new();
    let sfx_set = embed_sfx_set(&mut tape, &model.store, &model.cfg, sfx, cfg.mask)?;

    let mut l1_terms = Vec::new();
    let mut giou_terms = Vec::new();
    let mut nce_terms = Vec::new();

    let mut dropout = Dropout::on(model.cfg.dropout, drop_rng);
    let encoded_batch = embed_video_batch(&mut tape, &model.store, &model.cfg, videos, cfg.mask, &mut dropout)?;
    let memories: Vec<TensorId> = encoded_batch.iter().map(|e| e.tokens).collect();
    let mut dropout = Dropout::on(model.cfg.dropout, drop_rng);
    let decoded_batch = decode_moments_batch(&mut tape, &model.store, &model.cfg, &memories, &mut dropout)?;

    for ((video, encoded), decoded) in videos.iter().zip(&encoded_batch).zip(&decoded_batch) {
        let sims = tape.cosine_matrix(decoded.embeddings, sfx_set)?;
        let sims_vals: Vec<f64> = tape.value(sims).iter().map(|&v| v as f64).collect();
        let spans = decoded.span_values(&tape);
        let nf = video.n as f64;

        // Matching cost mirrors the loss: L1 + (1 - GIoU) + (1 - cos).
        let gt_rows: Vec<usize> =
            video.moments.iter().map(|m| ctx.row_of(m.sfx_id)).collect::<Result<_>>()?;
        let gt_spans: Vec<(f64, f64)> = video
            .moments
            .iter()
            .map(|m| (m.start as f64 / nf, m.end as f64 / nf))
            .collect();
        let g = gt_spans.len();
        let assignment = if g > 0 {
            let mut cost = Vec::with_capacity(p * g);
            for q in 0..p {
                let (ps, pe) = spans[q];
                let pred = crate::matching::Interval::new(ps, pe)?;
                for (gi, &(gs, ge)) in gt_spans.iter().enumerate() {
                    let gtv = crate::matching::Interval::new(gs, ge)?;
                    let l1 = (ps - gs).abs() + (pe - ge).abs();
                    let gl = 1.0 - loss::giou_1d(pred, gtv);
                    let el = 1.0 - sims_vals[q * cols + gt_rows[gi]];
                    cost.push(l1 + gl + el);
                }
            }
            hungarian_match(&CostMatrix::new(p, g, cost)?)?
        } else {
            Vec::new()
        };

        let mut matched_queries = vec![false; p];
        for (gi, &q) in assignment.iter().enumerate() {
            matched_queries[q] = true;
            l1_terms.push(l1_span_loss(&mut tape, decoded.spans, q, gt_spans[gi])?);
            giou_terms.push(giou_span_loss(&mut tape, decoded.spans, q, gt_spans[gi])?);
            push_nce_term(&mut tape, cfg, &ctx, sims, &sims_vals, q, gt_rows[gi], neg_rng, &mut nce_terms)?;
        }
        for q in 0..p {
            if !matched_queries[q] {
                push_nce_term(&mut tape, cfg, &ctx, sims, &sims_vals, q, 0, neg_rng, &mut nce_terms)?;
            }
        }

        if cfg.msm_aux {
            let mut pooled: Vec<(TensorId, usize)> = Vec::new();
            let mut covered = Vec::new();
            for m in &video.moments {
                covered.push((m.start, m.end));
                if let Some((b, e)) = encoded.token_range(m.start, m.end) {
                    pooled.push((moment_embedding(&mut tape, encoded, b, e)?, ctx.row_of(m.sfx_id)?));
                }
            }
            if let Some(u0) = sfx0_moment_embedding(&mut tape, encoded, &covered)? {
                pooled.push((u0, 0));
            }
            if !pooled.is_empty() {
                let rows: Vec<TensorId> = pooled.iter().map(|&(u, _)| u).collect();
                let u_matrix = tape.concat_rows(&rows)?;
                let aux = tape.cosine_matrix(u_matrix, sfx_set)?;
                let aux_vals: Vec<f64> = tape.value(aux).iter().map(|&v| v as f64).collect();
                for (pair, &(_, pos_row)) in pooled.iter().enumerate() {
                    push_nce_term(&mut tape, cfg, &ctx, aux, &aux_vals, pair, pos_row, neg_rng, &mut nce_terms)?;
                }
            }
        }
    }

    let l1_mean = mean_terms(&mut tape, &l1_terms)?;
    let giou_mean = mean_terms(&mut tape, &giou_terms)?;
    let nce_mean = mean_terms(&mut tape, &nce_terms)?;
    let (w1, w2, w3) = cfg.loss_weights;
    let l1_w = tape.scale(l1_mean, w1 as f32);
    let giou_w = tape.scale(giou_mean, w2 as f32);
    let nce_w = tape.scale(nce_mean, w3 as f32);
    let partial = tape.add(l1_w, giou_w)?;
    let total = tape.add(partial, nce_w)?;

    let losses = StepLosses {
        l1: tape.scalar(l1_mean) as f64,
        giou: tape.scalar(giou_mean) as f64,
        infonce: tape.scalar(nce_mean) as f64,
        total: tape.scalar(total) as f64,
    };
    tape.backward(total)?;
    tape.write_grads(&mut model.store)?;
    opt.step(&mut model.store, |_| true)?;
    Ok(losses)
}

/// Deterministic epoch-shuffled index stream.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut b = Batcher { order: (0..n).collect(), cursor: 0, rng };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            self.order.swap(i, j);
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.shuffle();
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }

    /// Up to `limit` distinct indices for one step.
    fn take(&mut self, limit: usize) -> Vec<usize> {
        let n = limit.min(self.order.len());
        (0..n).map(|_| self.next()).collect()
    }
}

/// Resumable pre-training loop state: optimizer, seeded streams and the
/// epoch batcher. Stepping in chunks is identical to one long run.
pub struct PretrainDriver {
    opt: OptimizerState,
    drop_rng: ChaCha8Rng,
    neg_rng: ChaCha8Rng,
    batcher: Batcher,
    step: usize,
}

impl PretrainDriver {
    /// `schedule_steps` fixes the cosine horizon independently of how many
    /// steps end up being taken.
    pub fn new(cfg: &TrainConfig, num_videos: usize, schedule_steps: usize) -> Self {
        PretrainDriver {
            opt: OptimizerState::new(cfg.adamw(schedule_steps)),
            drop_rng: rngutil::rng_for(cfg.seed, 20),
            neg_rng: rngutil::rng_for(cfg.seed, 21),
            batcher: Batcher::new(num_videos, rngutil::rng_for(cfg.seed, 22)),
            step: 0,
        }
    }

    pub fn step(
        &mut self,
        model: &mut DmModel,
        videos: &[&VideoRecord],
        sfx: &[SfxEntry],
        cfg: &TrainConfig,
    ) -> Result<LogRow> {
        // Upper-bound pairs per video: its moments plus one background pair.
        let mut batch: Vec<&VideoRecord> = Vec::new();
        let mut pairs = 0;
        while pairs < cfg.batch_size_pretrain && batch.len() < videos.len() {
            let v = videos[self.batcher.next()];
            pairs += v.moments.len() + 1;
            batch.push(v);
        }
        let lr = self.opt.current_lr();
        let loss =
            msm_pretrain_step(model, &batch, sfx, cfg, &mut self.opt, &mut self.drop_rng, &mut self.neg_rng)?;
        let row = LogRow { step: self.step, lr, l1: 0.0, giou: 0.0, infonce: loss, total: loss };
        self.step += 1;
        Ok(row)
    }
}

/// Resumable end-to-end training loop state.
pub struct TrainDriver {
    opt: OptimizerState,
    drop_rng: ChaCha8Rng,
    neg_rng: ChaCha8Rng,
    batcher: Batcher,
    step: usize,
}

impl TrainDriver {
    pub fn new(cfg: &TrainConfig, num_videos: usize, schedule_steps: usize) -> Self {
        TrainDriver {
            opt: OptimizerState::new(cfg.adamw(schedule_steps)),
            drop_rng: rngutil::rng_for(cfg.seed, 30),
            neg_rng: rngutil::rng_for(cfg.seed, 31),
            batcher: Batcher::new(num_videos, rngutil::rng_for(cfg.seed, 32)),
            step: 0,
        }
    }

    pub fn step(
        &mut self,
        model: &mut DmModel,
        videos: &[&VideoRecord],
        sfx: &[SfxEntry],
        cfg: &TrainConfig,
    ) -> Result<LogRow> {
        let batch: Vec<&VideoRecord> =
            self.batcher.take(cfg.batch_size_train).into_iter().map(|i| videos[i]).collect();
        let lr = self.opt.current_lr();
        let losses =
            train_step(model, &batch, sfx, cfg, &mut self.opt, &mut self.drop_rng, &mut self.neg_rng)?;
        let row = LogRow {
            step: self.step,
            lr,
            l1: losses.l1,
            giou: losses.giou,
            infonce: losses.infonce,
            total: losses.total,
        };
        self.step += 1;
        Ok(row)
    }
}

/// Run matching-based pre-training over the training split.
pub fn run_pretrain(model: &mut DmModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.check_against(dataset.sfx.len())?;
    let videos = dataset.split_videos("training")?;
    if videos.is_empty() {
        return Err(DmError::Empty("training split"));
    }
    let mut driver = PretrainDriver::new(cfg, videos.len(), cfg.pretrain_steps);
    let mut log = TrainLog::default();
    for _ in 0..cfg.pretrain_steps {
        log.rows.push(driver.step(model, &videos, &dataset.sfx, cfg)?);
    }
    Ok(log)
}

/// Run end-to-end training over the training split.
pub fn run_train(model: &mut DmModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.check_against(dataset.sfx.len())?;
    let videos = dataset.split_videos("training")?;
    if videos.is_empty() {
        return Err(DmError::Empty("training split"));
    }
    let mut driver = TrainDriver::new(cfg, videos.len(), cfg.train_steps);
    let mut log = TrainLog::default();
    for _ in 0..cfg.train_steps {
        log.rows.push(driver.step(model, &videos, &dataset.sfx, cfg)?);
    }
    Ok(log)
}
