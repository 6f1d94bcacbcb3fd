//! Dataset statistics: duration and moment-center histograms, per-tag
//! counts, plus CSV/SVG rendering for the `stats` command.

use serde::Serialize;

use super::{Dataset, Tag};

pub const CENTER_BINS: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct TagStats {
    pub tag: Tag,
    pub moments: usize,
    pub mean_duration_frames: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub num_videos: usize,
    pub num_moments: usize,
    pub num_subtitles: usize,
    /// Average number of SFX placements (moments) per video.
    pub sfx_per_video_mean: f64,
    pub subtitles_per_video_mean: f64,
    /// (bin_lo, bin_hi, count) over video length in frames.
    pub duration_hist: Vec<(u32, u32, usize)>,
    /// Count per bin of moment centers normalized by video length, [0, 1).
    pub center_hist: Vec<usize>,
    pub per_tag: Vec<TagStats>,
}

pub fn dataset_stats(dataset: &Dataset) -> StatsReport {
    let num_videos = dataset.videos.len();
    let num_moments: usize = dataset.videos.iter().map(|v| v.moments.len()).sum();
    let num_subtitles: usize = dataset.videos.iter().map(|v| v.subtitles.len()).sum();

    let max_n = dataset.videos.iter().map(|v| v.n).max().unwrap_or(0);
    let bins = 12u32;
    let width = (max_n / bins).max(1);
    let mut duration_hist: Vec<(u32, u32, usize)> = (0..bins)
        .map(|b| (b * width, (b + 1) * width, 0))
        .collect();
    for v in &dataset.videos {
        let b = ((v.n / width).min(bins - 1)) as usize;
        duration_hist[b].2 += 1;
    }

    let mut center_hist = vec![0usize; CENTER_BINS];
    let mut per_tag_count = [0usize; 6];
    let mut per_tag_dur = [0f64; 6];
    for v in &dataset.videos {
        for m in &v.moments {
            let center = (m.start + m.end) as f64 / 2.0 / v.n as f64;
            let b = ((center * CENTER_BINS as f64) as usize).min(CENTER_BINS - 1);
            center_hist[b] += 1;
            if let Some(s) = dataset.sfx_by_id(m.sfx_id) {
                per_tag_count[s.tag.index()] += 1;
                per_tag_dur[s.tag.index()] += (m.end - m.start) as f64;
            }
        }
    }
    let per_tag = Tag::ALL
        .iter()
        .map(|&tag| {
            let i = tag.index();
            TagStats {
                tag,
                moments: per_tag_count[i],
                mean_duration_frames: if per_tag_count[i] > 0 {
                    per_tag_dur[i] / per_tag_count[i] as f64
                } else {
                    0.0
                },
            }
        })
        .collect();

    StatsReport {
        num_videos,
        num_moments,
        num_subtitles,
        sfx_per_video_mean: if num_videos > 0 {
            num_moments as f64 / num_videos as f64
        } else {
            0.0
        },
        subtitles_per_video_mean: if num_videos > 0 {
            num_subtitles as f64 / num_videos as f64
        } else {
            0.0
        },
        duration_hist,
        center_hist,
        per_tag,
    }
}

impl StatsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("section,key,value\n");
        out.push_str(&format!("summary,videos,{}\n", self.num_videos));
        out.push_str(&format!("summary,moments,{}\n", self.num_moments));
        out.push_str(&format!("summary,subtitles,{}\n", self.num_subtitles));
        out.push_str(&format!("summary,sfx_per_video_mean,{:.4}\n", self.sfx_per_video_mean));
        out.push_str(&format!(
            "summary,subtitles_per_video_mean,{:.4}\n",
            self.subtitles_per_video_mean
        ));
        for (lo, hi, c) in &self.duration_hist {
            out.push_str(&format!("duration_frames,{lo}-{hi},{c}\n"));
        }
        for (b, c) in self.center_hist.iter().enumerate() {
            let lo = b as f64 / CENTER_BINS as f64;
            out.push_str(&format!("moment_center,{lo:.2},{c}\n"));
        }
        for t in &self.per_tag {
            out.push_str(&format!(
                "tag,{},{}\ntag_mean_duration,{},{:.3}\n",
                t.tag, t.moments, t.tag, t.mean_duration_frames
            ));
        }
        out
    }

    /// Minimal standalone SVG bar chart for one labelled series.
    pub fn svg_bar_chart(title: &str, bars: &[(String, f64)]) -> String {
        let w_bar = 28.0;
        let gap = 6.0;
        let h_max = 160.0;
        let width = 40.0 + bars.len() as f64 * (w_bar + gap);
        let height = h_max + 60.0;
        let peak = bars.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1e-12);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\">\n\
             <text x=\"8\" y=\"16\" font-size=\"13\">{title}</text>\n"
        );
        for (i, (label, v)) in bars.iter().enumerate() {
            let h = v / peak * h_max;
            let x = 20.0 + i as f64 * (w_bar + gap);
            let y = 24.0 + (h_max - h);
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{w_bar:.1}\" height=\"{h:.1}\" fill=\"#4878a8\"/>\n\
                 <text x=\"{x:.1}\" y=\"{ty:.1}\" font-size=\"8\">{label}</text>\n",
                ty = h_max + 36.0
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn duration_svg(&self) -> String {
        let bars: Vec<(String, f64)> = self
            .duration_hist
            .iter()
            .map(|(lo, hi, c)| (format!("{lo}-{hi}"), *c as f64))
            .collect();
        Self::svg_bar_chart("video duration (frames)", &bars)
    }

    pub fn center_svg(&self) -> String {
        let bars: Vec<(String, f64)> = self
            .center_hist
            .iter()
            .enumerate()
            .map(|(b, c)| (format!("{:.2}", b as f64 / CENTER_BINS as f64), *c as f64))
            .collect();
        Self::svg_bar_chart("moment centers (normalized)", &bars)
    }
}
