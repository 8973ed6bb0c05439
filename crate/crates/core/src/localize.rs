//! Whole-file inference: cover the frame sequence with overlapping windows,
//! average class-1 probabilities where windows overlap, and report labeled
//! frames plus maximal spliced regions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{build_frame_features, NormalizationStats, WINDOW_STRIDE};
use crate::model::Model;
use crate::mp3::{self, SAMPLES_PER_FRAME};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error(transparent)]
    Mp3(#[from] mp3::Mp3Error),
    #[error("file has only {usable} usable frames in a row; {needed} needed")]
    FileTooShort { usable: usize, needed: usize },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameCall {
    pub frame_index: usize,
    /// Start time of the frame in seconds (frame_index * 1152 / 44100),
    /// rounded to milliseconds.
    pub time_sec: f64,
    /// 1 = multiply compressed.
    pub label: u8,
    /// Mean class-1 probability over all covering windows.
    pub prob_multi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Region {
    pub start_frame: usize,
    /// Inclusive last frame of the run.
    pub end_frame: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub schema_version: u32,
    pub file: String,
    /// Audio frames found in the file.
    pub frame_count: usize,
    /// One entry per labeled frame. Frames inside contiguous usable runs
    /// shorter than one window cannot be covered and are omitted.
    pub frames: Vec<FrameCall>,
    /// Maximal runs of label 1, ordered and non-overlapping.
    pub regions: Vec<Region>,
}

pub const LOCALIZATION_SCHEMA_VERSION: u32 = 1;

fn round_ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn frame_time(index: usize, sampling_rate: u32) -> f64 {
    round_ms(index as usize as f64 * SAMPLES_PER_FRAME as f64 / f64::from(sampling_rate))
}

/// Window start offsets covering a run of `n` frames: stride-8 starts plus
/// one final window ending at the last frame when the tail is not covered.
fn window_starts(n: usize, len: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=(n - len)).step_by(stride).collect();
    let last = *starts.last().unwrap();
    if last != n - len {
        starts.push(n - len);
    }
    starts
}

/// Localize multiple compression in `bytes`. Deterministic: identical file
/// and weights give identical results.
pub fn localize_file(
    bytes: &[u8],
    source_name: &str,
    model: &Model,
    norm: &NormalizationStats,
) -> Result<LocalizationResult, LocalizeError> {
    let len = model.config().window_len.max(1);
    let extraction = mp3::extract_records(bytes)?;
    let frames = &extraction.frames;
    let frame_count = frames.len();

    // Maximal contiguous runs of usable frames (no gaps inside).
    let mut runs: Vec<(usize, usize)> = Vec::new(); // (start, len)
    let mut run_start = None::<usize>;
    for (i, f) in frames.iter().enumerate() {
        let breaks = !f.usable() || (f.gap_before && run_start.is_some());
        if breaks {
            if let Some(s) = run_start.take() {
                runs.push((s, i - s));
            }
        }
        if f.usable() && (run_start.is_none()) {
            run_start = Some(i);
        }
    }
    if let Some(s) = run_start {
        runs.push((s, frames.len() - s));
    }

    let longest = runs.iter().map(|(_, l)| *l).max().unwrap_or(0);
    if longest < len {
        return Err(LocalizeError::FileTooShort {
            usable: longest,
            needed: len,
        });
    }

    let mut prob_sum = vec![0.0f64; frame_count];
    let mut cover = vec![0u32; frame_count];
    for &(start, n) in runs.iter().filter(|(_, n)| *n >= len) {
        let features: Vec<_> = frames[start..start + n]
            .iter()
            .map(|f| build_frame_features(f.record.as_ref().unwrap(), norm))
            .collect();
        let starts = window_starts(n, len, WINDOW_STRIDE.min(len));
        let outputs: Vec<Result<(usize, Vec<f64>), LocalizeError>> = starts
            .par_iter()
            .map(|&s| {
                let probs = model.forward(&features[s..s + len], None)?;
                Ok((s, probs.column(1).to_vec()))
            })
            .collect();
        for out in outputs {
            let (s, col) = out?;
            for (l, p) in col.into_iter().enumerate() {
                prob_sum[start + s + l] += p;
                cover[start + s + l] += 1;
            }
        }
    }

    let sampling_rate = frames
        .first()
        .map(|f| f.header.sampling_rate)
        .unwrap_or(44100);
    let mut calls = Vec::new();
    for i in 0..frame_count {
        if cover[i] == 0 {
            continue;
        }
        let prob = prob_sum[i] / f64::from(cover[i]);
        calls.push(FrameCall {
            frame_index: i,
            time_sec: frame_time(i, sampling_rate),
            label: u8::from(prob > 0.5),
            prob_multi: prob,
        });
    }

    // Maximal runs of label 1 over consecutive frame indices.
    let mut regions: Vec<Region> = Vec::new();
    for call in calls.iter().filter(|c| c.label == 1) {
        match regions.last_mut() {
            Some(r) if r.end_frame + 1 == call.frame_index => {
                r.end_frame = call.frame_index;
                r.end_sec = frame_time(call.frame_index + 1, sampling_rate);
            }
            _ => regions.push(Region {
                start_frame: call.frame_index,
                end_frame: call.frame_index,
                start_sec: frame_time(call.frame_index, sampling_rate),
                end_sec: frame_time(call.frame_index + 1, sampling_rate),
            }),
        }
    }

    Ok(LocalizationResult {
        schema_version: LOCALIZATION_SCHEMA_VERSION,
        file: source_name.to_string(),
        frame_count,
        frames: calls,
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_cover_of_28_frames_uses_two_stride_starts_plus_tail() {
        // N=28, L=20, stride 8: starts 0 and 8; 8 lands exactly on N-L.
        assert_eq!(window_starts(28, 20, 8), vec![0, 8]);
        // N=30: tail window at 10 added after 0, 8.
        assert_eq!(window_starts(30, 20, 8), vec![0, 8, 10]);
        // Minimal input: single window.
        assert_eq!(window_starts(20, 20, 8), vec![0]);
    }

    #[test]
    fn cover_counts_for_28_frames() {
        // Frames 8..19 are covered by both windows, the rest by one.
        let starts = window_starts(28, 20, 8);
        let mut cover = vec![0u32; 28];
        for s in starts {
            for l in 0..20 {
                cover[s + l] += 1;
            }
        }
        for (i, c) in cover.iter().enumerate() {
            let expect = if (8..20).contains(&i) { 2 } else { 1 };
            assert_eq!(*c, expect, "frame {i}");
        }
    }

    #[test]
    fn frame_times_follow_the_sample_clock() {
        assert_eq!(frame_time(100, 44100), 2.612);
        assert_eq!(frame_time(0, 44100), 0.0);
    }
}
