//! Dataset schema, serialization, validation and synthesis for
//! SFX-decorated video collections over precomputed features.

pub mod bank;
pub mod io;
pub mod stats;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{DmError, Result};

/// Categorical tag attached to every sound effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Prompt,
    Transition,
    Humor,
    Action,
    Surprise,
    Others,
}

impl Tag {
    pub const ALL: [Tag; 6] = [
        Tag::Prompt,
        Tag::Transition,
        Tag::Humor,
        Tag::Action,
        Tag::Surprise,
        Tag::Others,
    ];

    pub fn index(self) -> usize {
        Tag::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Prompt => "prompt",
            Tag::Transition => "transition",
            Tag::Humor => "humor",
            Tag::Action => "action",
            Tag::Surprise => "surprise",
            Tag::Others => "others",
        }
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Moment category used by the class-pooled evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentClass {
    Introduction,
    Transition,
    Humour,
    Selling,
}

impl MomentClass {
    pub const ALL: [MomentClass; 4] = [
        MomentClass::Introduction,
        MomentClass::Transition,
        MomentClass::Humour,
        MomentClass::Selling,
    ];

    pub fn index(self) -> usize {
        MomentClass::ALL.iter().position(|&c| c == self).unwrap()
    }
}

/// One sound effect: audio feature, description feature and tag.
#[derive(Debug, Clone)]
pub struct SfxEntry {
    /// 1-based id; 0 is reserved for the trainable "no SFX" embedding.
    pub sfx_id: u32,
    pub audio: Vec<f32>,
    pub desc: Vec<f32>,
    pub tag: Tag,
}

/// Timestamped subtitle with its pre-encoded text feature.
#[derive(Debug, Clone)]
pub struct SubtitleSpan {
    pub begin: u32,
    pub end: u32,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMoment {
    pub start: u32,
    pub end: u32,
    pub sfx_id: u32,
    pub class: Option<MomentClass>,
}

#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub video_id: String,
    /// Number of evenly sampled frames.
    pub n: u32,
    /// n x d_v, row-major.
    pub frame_features: Vec<f32>,
    pub subtitles: Vec<SubtitleSpan>,
    pub moments: Vec<GroundTruthMoment>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Splits {
    pub training: Vec<String>,
    pub validation: Vec<String>,
    pub testing: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub d_v: usize,
    pub d_t: usize,
    pub d_a: usize,
    /// Sorted by sfx_id.
    pub sfx: Vec<SfxEntry>,
    pub videos: Vec<VideoRecord>,
    pub splits: Splits,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    pub fn sfx_by_id(&self, sfx_id: u32) -> Option<&SfxEntry> {
        self.sfx.iter().find(|s| s.sfx_id == sfx_id)
    }

    pub fn split_videos(&self, split: &str) -> Result<Vec<&VideoRecord>> {
        let ids = match split {
            "training" => &self.splits.training,
            "validation" => &self.splits.validation,
            "testing" => &self.splits.testing,
            other => return Err(DmError::Config(format!("unknown split {other}"))),
        };
        ids.iter()
            .map(|id| {
                self.video(id).ok_or_else(|| DmError::Validation {
                    record: id.clone(),
                    reason: "split references missing video".into(),
                })
            })
            .collect()
    }

    /// Check every schema invariant; errors name the offending record.
    pub fn validate(&self) -> Result<()> {
        let mut seen_sfx = std::collections::BTreeSet::new();
        for s in &self.sfx {
            if s.sfx_id == 0 {
                return Err(DmError::Validation {
                    record: "sfx 0".into(),
                    reason: "sfx_id must be >= 1 (0 is the reserved no-SFX slot)".into(),
                });
            }
            if !seen_sfx.insert(s.sfx_id) {
                return Err(DmError::Validation {
                    record: format!("sfx {}", s.sfx_id),
                    reason: "duplicate sfx_id".into(),
                });
            }
            if s.audio.len() != self.d_a {
                return Err(DmError::Validation {
                    record: format!("sfx {}", s.sfx_id),
                    reason: format!("audio dim {} != manifest d_a {}", s.audio.len(), self.d_a),
                });
            }
            if s.desc.len() != self.d_t {
                return Err(DmError::Validation {
                    record: format!("sfx {}", s.sfx_id),
                    reason: format!("description dim {} != manifest d_t {}", s.desc.len(), self.d_t),
                });
            }
            if s.audio.iter().chain(&s.desc).any(|v| !v.is_finite()) {
                return Err(DmError::Validation {
                    record: format!("sfx {}", s.sfx_id),
                    reason: "non-finite feature value".into(),
                });
            }
        }
        let mut seen_vid = std::collections::BTreeSet::new();
        for v in &self.videos {
            let rec = || v.video_id.clone();
            if !seen_vid.insert(v.video_id.clone()) {
                return Err(DmError::Validation { record: rec(), reason: "duplicate video_id".into() });
            }
            if v.n == 0 {
                return Err(DmError::Validation { record: rec(), reason: "zero frames".into() });
            }
            if v.frame_features.len() != v.n as usize * self.d_v {
                return Err(DmError::Validation {
                    record: rec(),
                    reason: format!(
                        "frame feature length {} != n ({}) * d_v ({})",
                        v.frame_features.len(),
                        v.n,
                        self.d_v
                    ),
                });
            }
            if v.frame_features.iter().any(|x| !x.is_finite()) {
                return Err(DmError::Validation { record: rec(), reason: "non-finite frame feature".into() });
            }
            let mut prev_begin = 0u32;
            for (i, sub) in v.subtitles.iter().enumerate() {
                if sub.begin >= sub.end || sub.end > v.n {
                    return Err(DmError::Validation {
                        record: rec(),
                        reason: format!("subtitle {i} span [{}, {}) invalid for n={}", sub.begin, sub.end, v.n),
                    });
                }
                if i > 0 && sub.begin < prev_begin {
                    return Err(DmError::Validation {
                        record: rec(),
                        reason: format!("subtitle {i} not sorted by begin frame"),
                    });
                }
                prev_begin = sub.begin;
                if sub.feature.len() != self.d_t {
                    return Err(DmError::Validation {
                        record: rec(),
                        reason: format!("subtitle {i} dim {} != manifest d_t {}", sub.feature.len(), self.d_t),
                    });
                }
                if sub.feature.iter().any(|x| !x.is_finite()) {
                    return Err(DmError::Validation { record: rec(), reason: format!("subtitle {i} non-finite") });
                }
            }
            for (i, m) in v.moments.iter().enumerate() {
                if m.start >= m.end || m.end > v.n {
                    return Err(DmError::Validation {
                        record: rec(),
                        reason: format!("moment {i} span [{}, {}) invalid for n={}", m.start, m.end, v.n),
                    });
                }
                if !seen_sfx.contains(&m.sfx_id) {
                    return Err(DmError::Validation {
                        record: rec(),
                        reason: format!("moment {i} references unknown sfx_id {}", m.sfx_id),
                    });
                }
            }
        }
        // Splits: disjoint and resolvable.
        let mut all = std::collections::BTreeSet::new();
        for (name, ids) in [
            ("training", &self.splits.training),
            ("validation", &self.splits.validation),
            ("testing", &self.splits.testing),
        ] {
            for id in ids {
                if !seen_vid.contains(id) {
                    return Err(DmError::Validation {
                        record: id.clone(),
                        reason: format!("{name} split references missing video"),
                    });
                }
                if !all.insert(id.clone()) {
                    return Err(DmError::Validation {
                        record: id.clone(),
                        reason: "video appears in more than one split".into(),
                    });
                }
            }
        }
        Ok(())
    }
}
