//! Seeded synthetic dataset generation with a planted cross-modal signal.
//!
//! Every sound effect k owns a latent unit vector g_k. Fixed random
//! projections map the latent space into the frame, text and audio feature
//! spaces. Frames inside a ground-truth moment carry `alpha * P_v(g_k)` plus
//! `sigma`-scaled noise, the temporally nearest subtitle carries
//! `alpha * P_t(g_k)` plus noise, and the SFX's own audio/description
//! features are noisy projections of the same latent. Frames outside any
//! moment are pure noise. With `sigma = 0` the nearest sound effect by
//! cosine over the projected latents recovers the planted id exactly, which
//! the recovery tests exploit.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, GroundTruthMoment, MomentClass, SfxEntry, Splits, SubtitleSpan, Tag, VideoRecord};
use crate::error::{DmError, Result};
use crate::rngutil;

/// Tag frequencies used for sampling, expressed as weights.
///
/// SFX-count weights drive how many sound effects carry each tag; moment
/// weights drive which tag a planted moment draws its sound effect from,
/// making `prompt` moments dominate.
const SFX_TAG_WEIGHTS: [f64; 6] = [77.0, 49.0, 53.0, 71.0, 34.0, 72.0];
const MOMENT_TAG_WEIGHTS: [f64; 6] = [17_574.0, 5_416.0, 4_914.0, 4_225.0, 3_730.0, 3_811.0];
const CLASS_WEIGHTS: [f64; 4] = [532.0, 134.0, 161.0, 173.0];

/// How tightly same-tag latents cluster around their tag center.
const TAG_SPREAD: f64 = 0.6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub sfx_count: usize,
    /// Inclusive frames-per-video range.
    pub frames: (u32, u32),
    /// Inclusive moments-per-video range.
    pub moments_per_video: (u32, u32),
    /// Inclusive moment length range in frames.
    pub moment_len: (u32, u32),
    /// Noise scale applied to planted features.
    pub sigma: f64,
    /// Planted signal strength.
    pub alpha: f64,
    pub d_v: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub latent_dim: usize,
    /// One subtitle spans roughly this many frames.
    pub frames_per_subtitle: u32,
    /// Training/validation fractions; testing takes the rest.
    pub split_fractions: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 500,
            sfx_count: 32,
            frames: (20, 60),
            moments_per_video: (1, 4),
            moment_len: (2, 6),
            sigma: 0.5,
            alpha: 1.0,
            d_v: 512,
            d_t: 512,
            d_a: 768,
            latent_dim: 64,
            frames_per_subtitle: 3,
            split_fractions: (0.8, 0.1),
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(DmError::Config(m));
        if self.num_videos == 0 || self.sfx_count == 0 {
            return cfg_err("num_videos and sfx_count must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("frames", self.frames),
            ("moments_per_video", self.moments_per_video),
            ("moment_len", self.moment_len),
        ] {
            if lo > hi {
                return cfg_err(format!("{name} range ({lo}, {hi}) inverted"));
            }
        }
        if self.moment_len.0 == 0 || self.frames.0 == 0 {
            return cfg_err("frame counts and moment lengths must be positive".into());
        }
        if self.moments_per_video.0 * self.moment_len.0 > self.frames.0 {
            return cfg_err(format!(
                "{} moments of at least {} frames cannot fit in a {}-frame video",
                self.moments_per_video.0, self.moment_len.0, self.frames.0
            ));
        }
        if self.sigma < 0.0 {
            return cfg_err("sigma must be non-negative".into());
        }
        if self.latent_dim == 0 {
            return cfg_err("latent_dim must be positive".into());
        }
        let (tr, va) = self.split_fractions;
        if !(0.0..=1.0).contains(&tr) || !(0.0..=1.0).contains(&va) || tr + va > 1.0 {
            return cfg_err("split fractions must be in [0, 1] and sum below 1".into());
        }
        Ok(())
    }
}

/// Random projection matrix (d_out x latent) with N(0, 1/d_out) entries so
/// unit latents map to roughly unit-norm features.
struct Projection {
    d_out: usize,
    latent: usize,
    w: Vec<f64>,
}

impl Projection {
    fn seeded(d_out: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (d_out as f64).sqrt();
        let w = (0..d_out * latent).map(|_| rngutil::randn(rng) * scale).collect();
        Projection { d_out, latent, w }
    }

    fn apply(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.latent);
        (0..self.d_out)
            .map(|i| {
                let row = &self.w[i * self.latent..(i + 1) * self.latent];
                row.iter().zip(g).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

fn unit_noise(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| rngutil::randn(rng) * scale).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn weights_to_probs(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn uniform_u32(rng: &mut ChaCha8Rng, range: (u32, u32)) -> u32 {
    if range.0 == range.1 {
        range.0
    } else {
        rand::Rng::random_range(rng, range.0..=range.1)
    }
}

/// Latent vectors, projections and tags for a synthetic SFX set.
struct LatentSfx {
    latents: Vec<Vec<f64>>,
    tags: Vec<Tag>,
}

fn plant_sfx_set(cfg: &SynthConfig, seed: u64, proj: &Projections) -> (Vec<SfxEntry>, LatentSfx) {
    let mut rng = rngutil::rng_for(seed, 1);
    let tag_probs = weights_to_probs(&SFX_TAG_WEIGHTS);

    // Seeded 6-way partition of the latent sphere: one center per tag, each
    // sound effect's latent drawn near its tag's center.
    let centers: Vec<Vec<f64>> = (0..6)
        .map(|_| {
            let mut c: Vec<f64> = (0..cfg.latent_dim).map(|_| rngutil::randn(&mut rng)).collect();
            normalize(&mut c);
            c
        })
        .collect();

    let mut entries = Vec::with_capacity(cfg.sfx_count);
    let mut latents = Vec::with_capacity(cfg.sfx_count);
    let mut tags = Vec::with_capacity(cfg.sfx_count);
    for k in 0..cfg.sfx_count {
        let tag_idx = rngutil::categorical(&mut rng, &tag_probs);
        let tag = Tag::ALL[tag_idx];
        let mut g: Vec<f64> = centers[tag_idx]
            .iter()
            .map(|&c| c + TAG_SPREAD * rngutil::randn(&mut rng))
            .collect();
        normalize(&mut g);

        let mut audio = proj.audio.apply(&g);
        let mut desc = proj.text.apply(&g);
        for (a, n) in audio.iter_mut().zip(unit_noise(&mut rng, cfg.d_a)) {
            *a += cfg.sigma * n;
        }
        for (d, n) in desc.iter_mut().zip(unit_noise(&mut rng, cfg.d_t)) {
            *d += cfg.sigma * n;
        }
        entries.push(SfxEntry {
            sfx_id: (k + 1) as u32,
            audio: to_f32(audio),
            desc: to_f32(desc),
            tag,
        });
        latents.push(g);
        tags.push(tag);
    }
    (entries, LatentSfx { latents, tags })
}

struct Projections {
    video: Projection,
    text: Projection,
    audio: Projection,
}

/// Place `count` disjoint moments of the given lengths into `n` frames,
/// spreading the slack uniformly across the gaps. Returns sorted spans.
fn place_moments(rng: &mut ChaCha8Rng, n: u32, lengths: &[u32]) -> Vec<(u32, u32)> {
    let total: u32 = lengths.iter().sum();
    let free = n - total;
    let gaps = lengths.len() + 1;
    let draws: Vec<f64> = (0..gaps).map(|_| rng.random::<f64>()).collect();
    let sum: f64 = draws.iter().sum::<f64>().max(1e-12);
    let mut gap_sizes: Vec<u32> = draws.iter().map(|d| (d / sum * free as f64).floor() as u32).collect();
    let used: u32 = gap_sizes.iter().sum();
    gap_sizes[gaps - 1] += free - used;

    let mut spans = Vec::with_capacity(lengths.len());
    let mut cursor = 0u32;
    for (i, &len) in lengths.iter().enumerate() {
        cursor += gap_sizes[i];
        spans.push((cursor, cursor + len));
        cursor += len;
    }
    spans
}

use rand::Rng;

/// Generate a dataset as a pure function of `(cfg, seed)`.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;

    let mut proj_rng = rngutil::rng_for(seed, 0);
    let proj = Projections {
        video: Projection::seeded(cfg.d_v, cfg.latent_dim, &mut proj_rng),
        text: Projection::seeded(cfg.d_t, cfg.latent_dim, &mut proj_rng),
        audio: Projection::seeded(cfg.d_a, cfg.latent_dim, &mut proj_rng),
    };

    let (sfx, latent) = plant_sfx_set(cfg, seed, &proj);

    let moment_tag_probs = weights_to_probs(&MOMENT_TAG_WEIGHTS);
    let class_probs = weights_to_probs(&CLASS_WEIGHTS);
    // Tags with no sound effect cannot be drawn for moments.
    let mut usable_tag_probs = moment_tag_probs.clone();
    for (i, p) in usable_tag_probs.iter_mut().enumerate() {
        if !latent.tags.iter().any(|t| t.index() == i) {
            *p = 0.0;
        }
    }
    let total: f64 = usable_tag_probs.iter().sum();
    if total <= 0.0 {
        return Err(DmError::Config("no usable SFX tags".into()));
    }
    usable_tag_probs.iter_mut().for_each(|p| *p /= total);

    let mut structure_rng = rngutil::rng_for(seed, 2);
    let mut feature_rng = rngutil::rng_for(seed, 3);
    let mut class_rng = rngutil::rng_for(seed, 4);

    let mut videos = Vec::with_capacity(cfg.num_videos);
    for vid in 0..cfg.num_videos {
        let n = uniform_u32(&mut structure_rng, cfg.frames);
        let mut count = uniform_u32(&mut structure_rng, cfg.moments_per_video);
        let mut lengths: Vec<u32> = (0..count)
            .map(|_| uniform_u32(&mut structure_rng, cfg.moment_len))
            .collect();
        // Drop surplus moments that do not fit into this video.
        while lengths.iter().sum::<u32>() > n {
            lengths.pop();
            count -= 1;
        }
        if count < cfg.moments_per_video.0 {
            return Err(DmError::Config(format!(
                "video v{vid:05}: {} moments of the drawn lengths exceed {} frames",
                cfg.moments_per_video.0, n
            )));
        }
        let spans = place_moments(&mut structure_rng, n, &lengths);

        let moments: Vec<GroundTruthMoment> = spans
            .iter()
            .map(|&(start, end)| {
                let tag_idx = rngutil::categorical(&mut structure_rng, &usable_tag_probs);
                let candidates: Vec<usize> = (0..sfx.len())
                    .filter(|&k| latent.tags[k].index() == tag_idx)
                    .collect();
                let pick = candidates[structure_rng.random_range(0..candidates.len())];
                let class_idx = rngutil::categorical(&mut class_rng, &class_probs);
                GroundTruthMoment {
                    start,
                    end,
                    sfx_id: sfx[pick].sfx_id,
                    class: Some(MomentClass::ALL[class_idx]),
                }
            })
            .collect();

        // Frame features: planted projection inside moments, pure noise outside.
        let mut frame_features = Vec::with_capacity(n as usize * cfg.d_v);
        for i in 0..n {
            let planted = moments.iter().find(|m| m.start <= i && i < m.end);
            let mut f = match planted {
                Some(m) => {
                    let g = &latent.latents[(m.sfx_id - 1) as usize];
                    let mut v = proj.video.apply(g);
                    v.iter_mut().for_each(|x| *x *= cfg.alpha);
                    for (x, nz) in v.iter_mut().zip(unit_noise(&mut feature_rng, cfg.d_v)) {
                        *x += cfg.sigma * nz;
                    }
                    v
                }
                None => unit_noise(&mut feature_rng, cfg.d_v),
            };
            // Guard against an all-zero row when sigma = 0 outside moments.
            if f.iter().all(|x| x.abs() < 1e-12) {
                f[0] = 1e-6;
            }
            frame_features.extend(to_f32(f));
        }

        // Subtitles cover the video in fixed windows; the one nearest each
        // moment's center carries that moment's text signal.
        let step = cfg.frames_per_subtitle.max(1);
        let m_subs = n.div_ceil(step);
        let mut subtitles: Vec<SubtitleSpan> = (0..m_subs)
            .map(|j| {
                let begin = j * step;
                let end = (begin + step).min(n);
                SubtitleSpan { begin, end, feature: to_f32(unit_noise(&mut feature_rng, cfg.d_t)) }
            })
            .collect();
        for m in &moments {
            let m_mid = (m.start + m.end) as f64 / 2.0;
            let nearest = (0..subtitles.len())
                .min_by(|&a, &b| {
                    let da = ((subtitles[a].begin + subtitles[a].end) as f64 / 2.0 - m_mid).abs();
                    let db = ((subtitles[b].begin + subtitles[b].end) as f64 / 2.0 - m_mid).abs();
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .expect("at least one subtitle");
            let g = &latent.latents[(m.sfx_id - 1) as usize];
            let mut t = proj.text.apply(g);
            t.iter_mut().for_each(|x| *x *= cfg.alpha);
            for (x, nz) in t.iter_mut().zip(unit_noise(&mut feature_rng, cfg.d_t)) {
                *x += cfg.sigma * nz;
            }
            subtitles[nearest].feature = to_f32(t);
        }

        videos.push(VideoRecord {
            video_id: format!("v{vid:05}"),
            n,
            frame_features,
            subtitles,
            moments,
        });
    }

    // Disjoint covering splits from a seeded shuffle.
    let mut split_rng = rngutil::rng_for(seed, 5);
    let mut order: Vec<usize> = (0..cfg.num_videos).collect();
    for i in (1..order.len()).rev() {
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (cfg.num_videos as f64 * cfg.split_fractions.0).round() as usize;
    let n_val = (cfg.num_videos as f64 * cfg.split_fractions.1).round() as usize;
    let n_train = n_train.min(cfg.num_videos);
    let n_val = n_val.min(cfg.num_videos - n_train);
    let id_of = |i: usize| videos[i].video_id.clone();
    let splits = Splits {
        training: order[..n_train].iter().map(|&i| id_of(i)).collect(),
        validation: order[n_train..n_train + n_val].iter().map(|&i| id_of(i)).collect(),
        testing: order[n_train + n_val..].iter().map(|&i| id_of(i)).collect(),
    };

    let dataset = Dataset { d_v: cfg.d_v, d_t: cfg.d_t, d_a: cfg.d_a, sfx, videos, splits };
    dataset.validate()?;
    Ok(dataset)
}

/// Cosine similarity between f32 slices; helper for recovery oracles.
pub fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// The projected latent anchor P_v(g_k) for every sound effect, used by the
/// planted-signal recovery checks.
pub fn video_anchors(cfg: &SynthConfig, seed: u64) -> Vec<Vec<f32>> {
    let mut proj_rng = rngutil::rng_for(seed, 0);
    let proj = Projections {
        video: Projection::seeded(cfg.d_v, cfg.latent_dim, &mut proj_rng),
        text: Projection::seeded(cfg.d_t, cfg.latent_dim, &mut proj_rng),
        audio: Projection::seeded(cfg.d_a, cfg.latent_dim, &mut proj_rng),
    };
    let (_, latent) = plant_sfx_set(cfg, seed, &proj);
    latent
        .latents
        .iter()
        .map(|g| to_f32(proj.video.apply(g)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_cfg() -> SynthConfig {
        SynthConfig {
            num_videos: 20,
            sfx_count: 8,
            d_v: 24,
            d_t: 16,
            d_a: 12,
            latent_dim: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = fast_cfg();
        let a = generate(&cfg, 7).unwrap();
        let b = generate(&cfg, 7).unwrap();
        assert_eq!(a.videos.len(), b.videos.len());
        for (x, y) in a.videos.iter().zip(&b.videos) {
            assert_eq!(x.frame_features, y.frame_features);
            assert_eq!(x.moments, y.moments);
        }
        for (x, y) in a.sfx.iter().zip(&b.sfx) {
            assert_eq!(x.audio, y.audio);
        }
        let c = generate(&cfg, 8).unwrap();
        assert_ne!(a.videos[0].frame_features, c.videos[0].frame_features);
    }

    #[test]
    fn splits_are_disjoint_and_cover_all_videos() {
        let ds = generate(&fast_cfg(), 3).unwrap();
        let total =
            ds.splits.training.len() + ds.splits.validation.len() + ds.splits.testing.len();
        assert_eq!(total, ds.videos.len());
        let mut all: Vec<&String> = ds
            .splits
            .training
            .iter()
            .chain(&ds.splits.validation)
            .chain(&ds.splits.testing)
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), ds.videos.len());
    }

    #[test]
    fn zero_sigma_recovers_planted_sfx_by_nearest_anchor() {
        let cfg = SynthConfig { sigma: 0.0, ..fast_cfg() };
        let seed = 13;
        let ds = generate(&cfg, seed).unwrap();
        let anchors = video_anchors(&cfg, seed);

        let mut checked = 0;
        for v in &ds.videos {
            for m in &v.moments {
                // Mean frame feature over the moment.
                let mut mean = vec![0.0f32; cfg.d_v];
                for i in m.start..m.end {
                    let row = &v.frame_features[i as usize * cfg.d_v..(i as usize + 1) * cfg.d_v];
                    for (acc, &x) in mean.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                let len = (m.end - m.start) as f32;
                mean.iter_mut().for_each(|x| *x /= len);

                // Brute-force nearest anchor by cosine.
                let best = (0..anchors.len())
                    .max_by(|&a, &b| {
                        cosine_f32(&mean, &anchors[a])
                            .partial_cmp(&cosine_f32(&mean, &anchors[b]))
                            .unwrap()
                    })
                    .unwrap();
                assert_eq!(best as u32 + 1, m.sfx_id, "video {}", v.video_id);
                checked += 1;
            }
        }
        assert!(checked > 10, "expected a non-trivial number of moments, got {checked}");
    }

    #[test]
    fn prompt_is_the_most_frequent_moment_tag() {
        let cfg = SynthConfig { num_videos: 150, ..fast_cfg() };
        let ds = generate(&cfg, 21).unwrap();
        let mut counts = [0usize; 6];
        for v in &ds.videos {
            for m in &v.moments {
                let tag = ds.sfx_by_id(m.sfx_id).unwrap().tag;
                counts[tag.index()] += 1;
            }
        }
        let prompt = counts[Tag::Prompt.index()];
        for (i, &c) in counts.iter().enumerate() {
            if i != Tag::Prompt.index() {
                assert!(prompt > c, "prompt {prompt} should dominate tag {i} with {c}");
            }
        }
    }

    #[test]
    fn impossible_moment_budget_is_a_config_error() {
        let cfg = SynthConfig {
            frames: (10, 10),
            moments_per_video: (5, 5),
            moment_len: (3, 3),
            ..fast_cfg()
        };
        assert!(matches!(generate(&cfg, 1), Err(DmError::Config(_))));
    }

    #[test]
    fn moments_are_disjoint_and_sorted() {
        let ds = generate(&fast_cfg(), 9).unwrap();
        for v in &ds.videos {
            for w in v.moments.windows(2) {
                assert!(w[0].end <= w[1].start, "{:?}", v.moments);
            }
        }
    }
}
