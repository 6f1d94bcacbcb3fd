//! Dataset serialization: a JSON manifest tying together feature banks,
//! per-video JSONL metadata and the SFX set.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bank::FeatureBank;
use super::{Dataset, GroundTruthMoment, MomentClass, SfxEntry, Splits, SubtitleSpan, Tag, VideoRecord};
use crate::error::{DmError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub d_v: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub sfx_count: usize,
    pub videos_file: String,
    pub sfx_file: String,
    pub banks: BankPaths,
    pub splits: Splits,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BankPaths {
    pub frames: String,
    pub subtitles: String,
    pub sfx_audio: String,
    pub sfx_desc: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankRef {
    file: String,
    offset_row: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubtitleMeta {
    b: u32,
    e: u32,
    text_bank_ref: BankRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentMeta {
    start: u32,
    end: u32,
    sfx_id: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<MomentClass>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoMeta {
    video_id: String,
    n: u32,
    frame_bank_ref: BankRef,
    subtitles: Vec<SubtitleMeta>,
    moments: Vec<MomentMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SfxMeta {
    sfx_id: u32,
    tag: Tag,
    audio_bank_ref: BankRef,
    desc_bank_ref: BankRef,
}

/// Write a dataset under `dir` and return the manifest path. Output is a
/// pure function of the dataset contents, byte for byte.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;

    let mut frames = FeatureBank::new(dataset.d_v);
    let mut subtitles = FeatureBank::new(dataset.d_t);
    let mut sfx_audio = FeatureBank::new(dataset.d_a);
    let mut sfx_desc = FeatureBank::new(dataset.d_t);

    let mut video_rows = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let first_row = frames.rows() as u32;
        for i in 0..v.n as usize {
            frames.push(&v.frame_features[i * dataset.d_v..(i + 1) * dataset.d_v])?;
        }
        let subs = v
            .subtitles
            .iter()
            .map(|s| {
                let row = subtitles.push(&s.feature)?;
                Ok(SubtitleMeta {
                    b: s.begin,
                    e: s.end,
                    text_bank_ref: BankRef { file: "subtitles.dmfb".into(), offset_row: row },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        video_rows.push(VideoMeta {
            video_id: v.video_id.clone(),
            n: v.n,
            frame_bank_ref: BankRef { file: "frames.dmfb".into(), offset_row: first_row },
            subtitles: subs,
            moments: v
                .moments
                .iter()
                .map(|m| MomentMeta { start: m.start, end: m.end, sfx_id: m.sfx_id, class: m.class })
                .collect(),
        });
    }

    let mut sfx_rows = Vec::with_capacity(dataset.sfx.len());
    for s in &dataset.sfx {
        let arow = sfx_audio.push(&s.audio)?;
        let drow = sfx_desc.push(&s.desc)?;
        sfx_rows.push(SfxMeta {
            sfx_id: s.sfx_id,
            tag: s.tag,
            audio_bank_ref: BankRef { file: "sfx_audio.dmfb".into(), offset_row: arow },
            desc_bank_ref: BankRef { file: "sfx_desc.dmfb".into(), offset_row: drow },
        });
    }

    frames.write(&dir.join("frames.dmfb"))?;
    subtitles.write(&dir.join("subtitles.dmfb"))?;
    sfx_audio.write(&dir.join("sfx_audio.dmfb"))?;
    sfx_desc.write(&dir.join("sfx_desc.dmfb"))?;

    let mut w = BufWriter::new(File::create(dir.join("videos.jsonl"))?);
    for row in &video_rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let sfx_json = serde_json::to_vec_pretty(&sfx_rows)?;
    std::fs::write(dir.join("sfx.json"), sfx_json)?;

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        d_v: dataset.d_v,
        d_t: dataset.d_t,
        d_a: dataset.d_a,
        sfx_count: dataset.sfx.len(),
        videos_file: "videos.jsonl".into(),
        sfx_file: "sfx.json".into(),
        banks: BankPaths {
            frames: "frames.dmfb".into(),
            subtitles: "subtitles.dmfb".into(),
            sfx_audio: "sfx_audio.dmfb".into(),
            sfx_desc: "sfx_desc.dmfb".into(),
        },
        splits: dataset.splits.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest_path)
}

/// Load and fully validate a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(manifest_path)?))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(DmError::Format {
            path: manifest_path.display().to_string(),
            reason: format!("unsupported manifest version {}", manifest.format_version),
        });
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let frames = FeatureBank::read(&dir.join(&manifest.banks.frames))?;
    let subtitles = FeatureBank::read(&dir.join(&manifest.banks.subtitles))?;
    let sfx_audio = FeatureBank::read(&dir.join(&manifest.banks.sfx_audio))?;
    let sfx_desc = FeatureBank::read(&dir.join(&manifest.banks.sfx_desc))?;

    for (name, bank, want) in [
        ("frames", &frames, manifest.d_v),
        ("subtitles", &subtitles, manifest.d_t),
        ("sfx_audio", &sfx_audio, manifest.d_a),
        ("sfx_desc", &sfx_desc, manifest.d_t),
    ] {
        if bank.dim != want {
            return Err(DmError::Validation {
                record: format!("{name} bank"),
                reason: format!("bank dim {} != manifest dim {}", bank.dim, want),
            });
        }
    }

    let sfx_meta: Vec<SfxMeta> =
        serde_json::from_reader(BufReader::new(File::open(dir.join(&manifest.sfx_file))?))?;
    let mut sfx = Vec::with_capacity(sfx_meta.len());
    for m in &sfx_meta {
        sfx.push(SfxEntry {
            sfx_id: m.sfx_id,
            audio: sfx_audio.row(m.audio_bank_ref.offset_row)?.to_vec(),
            desc: sfx_desc.row(m.desc_bank_ref.offset_row)?.to_vec(),
            tag: m.tag,
        });
    }
    sfx.sort_by_key(|s| s.sfx_id);

    let mut videos = Vec::new();
    let reader = BufReader::new(File::open(dir.join(&manifest.videos_file))?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: VideoMeta = serde_json::from_str(&line).map_err(|e| DmError::Format {
            path: manifest.videos_file.clone(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        let frame_features = frames
            .rows_range(meta.frame_bank_ref.offset_row, meta.n)
            .map_err(|_| DmError::Validation {
                record: meta.video_id.clone(),
                reason: "frame bank rows out of range".into(),
            })?
            .to_vec();
        let subs = meta
            .subtitles
            .iter()
            .map(|s| {
                Ok(SubtitleSpan {
                    begin: s.b,
                    end: s.e,
                    feature: subtitles.row(s.text_bank_ref.offset_row)?.to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        videos.push(VideoRecord {
            video_id: meta.video_id,
            n: meta.n,
            frame_features,
            subtitles: subs,
            moments: meta
                .moments
                .iter()
                .map(|m| GroundTruthMoment { start: m.start, end: m.end, sfx_id: m.sfx_id, class: m.class })
                .collect(),
        });
    }

    let dataset = Dataset {
        d_v: manifest.d_v,
        d_t: manifest.d_t,
        d_a: manifest.d_a,
        sfx,
        videos,
        splits: manifest.splits,
    };
    dataset.validate()?;
    Ok(dataset)
}
