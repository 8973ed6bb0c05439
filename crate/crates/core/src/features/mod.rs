//! Fixed-shape per-frame feature tensors and sliding windows.
//!
//! Every frame, regardless of block type, becomes three tensors:
//!
//! * `mdct_grid` (32 x 18): the requantized spectrum reshaped sub-band-major,
//!   `grid[s][k] = xr[18 * s + k]`.
//! * `scalefac_grid` (5 x 12): row 0 long scalefactor bands 0-11, row 1 long
//!   bands 12-20 zero-padded, rows 2-4 the three short windows with one
//!   column per short band. Lossless for every block layout.
//! * `scalars` (18): the remaining codec fields in a fixed order (see
//!   [`FrameFeatures::SCALAR_FIELDS`]).
//!
//! 233 + 49 + 18 CNN/scalar features later concatenate to the model width
//! of 300. All features are standardized per-cell with statistics fitted on
//! the training split only.

mod cache;

pub use cache::{read_cache, write_cache, CACHE_VERSION};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mp3::{CodecFrameRecord, FrameRecord};

pub const MDCT_ROWS: usize = 32;
pub const MDCT_COLS: usize = 18;
pub const SCALEFAC_ROWS: usize = 5;
pub const SCALEFAC_COLS: usize = 12;
pub const N_SCALARS: usize = 18;
/// Sliding-window length in frames.
pub const WINDOW_LEN: usize = 20;
/// Sliding-window stride in frames.
pub const WINDOW_STRIDE: usize = 8;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("record {0} is unusable (reservoir underflow or malformed frame)")]
    UnusableRecord(usize),
    #[error("labels ({labels}) not aligned with records ({records})")]
    LabelMismatch { records: usize, labels: usize },
    #[error("feature cache: {0}")]
    Cache(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// The three fixed-shape tensors of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub mdct_grid: Array2<f32>,
    pub scalefac_grid: Array2<f32>,
    pub scalars: [f32; N_SCALARS],
}

impl FrameFeatures {
    /// Order of the scalar vector. The 18 fields are every Table-style codec
    /// field that is not already covered by the two grids.
    pub const SCALAR_FIELDS: [&'static str; N_SCALARS] = [
        "part2_3_length",
        "scalefac_compress",
        "scalefac_scale",
        "preflag",
        "global_gain",
        "subblock_gain_0",
        "subblock_gain_1",
        "subblock_gain_2",
        "big_values",
        "region0_count",
        "region1_count",
        "table_select_0",
        "table_select_1",
        "table_select_2",
        "count1table_select",
        "block_type",
        "mixed_block_flag",
        "window_switching_flag",
    ];
}

/// Raw (unnormalized) scalar vector of a record.
fn raw_scalars(record: &CodecFrameRecord) -> [f32; N_SCALARS] {
    let s = &record.side;
    [
        s.part2_3_length as f32,
        s.scalefac_compress as f32,
        f32::from(u8::from(s.scalefac_scale)),
        f32::from(u8::from(s.preflag)),
        s.global_gain as f32,
        s.subblock_gain[0] as f32,
        s.subblock_gain[1] as f32,
        s.subblock_gain[2] as f32,
        s.big_values as f32,
        s.region0_count as f32,
        s.region1_count as f32,
        s.table_select[0] as f32,
        s.table_select[1] as f32,
        s.table_select[2] as f32,
        f32::from(u8::from(s.count1table_select)),
        s.block_type.code() as f32,
        f32::from(u8::from(s.mixed_block_flag)),
        f32::from(u8::from(s.window_switching_flag)),
    ]
}

fn raw_mdct_grid(record: &CodecFrameRecord) -> Array2<f32> {
    Array2::from_shape_fn((MDCT_ROWS, MDCT_COLS), |(s, k)| {
        record.mdct.requantized[MDCT_COLS * s + k]
    })
}

fn raw_scalefac_grid(record: &CodecFrameRecord) -> Array2<f32> {
    let sf = &record.scalefactors;
    let mut grid = Array2::zeros((SCALEFAC_ROWS, SCALEFAC_COLS));
    for band in 0..12 {
        grid[(0, band)] = sf.long[band] as f32;
    }
    for band in 12..21 {
        grid[(1, band - 12)] = sf.long[band] as f32;
    }
    for band in 0..12 {
        for window in 0..3 {
            grid[(2 + window, band)] = sf.short[band][window] as f32;
        }
    }
    grid
}

/// Per-cell standardization statistics, fitted on the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub version: u32,
    pub mdct_mean: Vec<f64>,
    pub mdct_std: Vec<f64>,
    pub scalefac_mean: Vec<f64>,
    pub scalefac_std: Vec<f64>,
    pub scalar_mean: Vec<f64>,
    pub scalar_std: Vec<f64>,
}

impl NormalizationStats {
    /// No-op stats: mean 0, standard deviation 1 everywhere.
    pub fn identity() -> Self {
        let n_mdct = MDCT_ROWS * MDCT_COLS;
        let n_sf = SCALEFAC_ROWS * SCALEFAC_COLS;
        NormalizationStats {
            version: 1,
            mdct_mean: vec![0.0; n_mdct],
            mdct_std: vec![1.0; n_mdct],
            scalefac_mean: vec![0.0; n_sf],
            scalefac_std: vec![1.0; n_sf],
            scalar_mean: vec![0.0; N_SCALARS],
            scalar_std: vec![1.0; N_SCALARS],
        }
    }

    /// Fit per-cell mean and standard deviation over the given records.
    /// Cells with (near-)zero variance get a standard deviation of 1 so that
    /// constant features pass through centered.
    pub fn fit<'a>(records: impl Iterator<Item = &'a CodecFrameRecord>) -> Self {
        let n_mdct = MDCT_ROWS * MDCT_COLS;
        let n_sf = SCALEFAC_ROWS * SCALEFAC_COLS;
        let mut count = 0usize;
        let mut sums = vec![0.0f64; n_mdct + n_sf + N_SCALARS];
        let mut sq = vec![0.0f64; n_mdct + n_sf + N_SCALARS];
        for record in records {
            count += 1;
            let mdct = raw_mdct_grid(record);
            let sf = raw_scalefac_grid(record);
            let scalars = raw_scalars(record);
            for (i, v) in mdct
                .iter()
                .chain(sf.iter())
                .chain(scalars.iter())
                .enumerate()
            {
                let v = f64::from(*v);
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        if count == 0 {
            return Self::identity();
        }
        let n = count as f64;
        let mut mean = Vec::with_capacity(sums.len());
        let mut std = Vec::with_capacity(sums.len());
        for i in 0..sums.len() {
            let m = sums[i] / n;
            let var = (sq[i] / n - m * m).max(0.0);
            let s = var.sqrt();
            mean.push(m);
            std.push(if s < 1e-8 { 1.0 } else { s });
        }
        let (mdct_mean, rest_mean) = mean.split_at(n_mdct);
        let (scalefac_mean, scalar_mean) = rest_mean.split_at(n_sf);
        let (mdct_std, rest_std) = std.split_at(n_mdct);
        let (scalefac_std, scalar_std) = rest_std.split_at(n_sf);
        NormalizationStats {
            version: 1,
            mdct_mean: mdct_mean.to_vec(),
            mdct_std: mdct_std.to_vec(),
            scalefac_mean: scalefac_mean.to_vec(),
            scalefac_std: scalefac_std.to_vec(),
            scalar_mean: scalar_mean.to_vec(),
            scalar_std: scalar_std.to_vec(),
        }
    }
}

/// Build the fixed-shape, standardized feature tensors of one record.
pub fn build_frame_features(
    record: &CodecFrameRecord,
    norm: &NormalizationStats,
) -> FrameFeatures {
    let mut mdct = raw_mdct_grid(record);
    for (i, v) in mdct.iter_mut().enumerate() {
        *v = ((f64::from(*v) - norm.mdct_mean[i]) / norm.mdct_std[i]) as f32;
    }
    let mut sf = raw_scalefac_grid(record);
    for (i, v) in sf.iter_mut().enumerate() {
        *v = ((f64::from(*v) - norm.scalefac_mean[i]) / norm.scalefac_std[i]) as f32;
    }
    let mut scalars = raw_scalars(record);
    for (i, v) in scalars.iter_mut().enumerate() {
        *v = ((f64::from(*v) - norm.scalar_mean[i]) / norm.scalar_std[i]) as f32;
    }
    FrameFeatures {
        mdct_grid: mdct,
        scalefac_grid: sf,
        scalars,
    }
}

/// A window of `WINDOW_LEN` consecutive usable frames with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub features: Vec<FrameFeatures>,
    pub labels: Vec<u8>,
    /// (source identifier, start frame index in that source).
    pub origin: (String, usize),
}

/// Slide a window of `len` frames with `stride` over the parsed frames and
/// attach the matching label slice. Windows containing an unusable record
/// or an internal gap boundary are dropped, never padded.
pub fn make_windows(
    frames: &[FrameRecord],
    labels: &[u8],
    source: &str,
    norm: &NormalizationStats,
    len: usize,
    stride: usize,
) -> Result<Vec<FeatureWindow>, FeatureError> {
    if frames.len() != labels.len() {
        return Err(FeatureError::LabelMismatch {
            records: frames.len(),
            labels: labels.len(),
        });
    }
    if frames.len() < len {
        return Ok(Vec::new());
    }

    // Features built once per frame; windows clone the slices they cover.
    let features: Vec<Option<FrameFeatures>> = frames
        .iter()
        .map(|f| f.record.as_ref().ok().map(|r| build_frame_features(r, norm)))
        .collect();

    let mut windows = Vec::new();
    let mut start = 0usize;
    while start + len <= frames.len() {
        let span = &frames[start..start + len];
        let usable = span.iter().all(|f| f.usable())
            && span[1..].iter().all(|f| !f.gap_before);
        if usable {
            windows.push(FeatureWindow {
                features: features[start..start + len]
                    .iter()
                    .map(|f| f.clone().unwrap())
                    .collect(),
                labels: labels[start..start + len].to_vec(),
                origin: (source.to_string(), start),
            });
        }
        start += stride;
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mp3::{
        BlockType, ChannelMode, FrameHeader, MdctCoefficients, ScaleFactorLayout, ScaleFactors,
        SideInfo,
    };

    pub(crate) fn dummy_record(frame_index: usize) -> CodecFrameRecord {
        CodecFrameRecord {
            frame_index,
            header: FrameHeader {
                byte_offset: frame_index * 417,
                version: 1,
                layer: 3,
                bitrate_kbps: 128,
                sampling_rate: 44100,
                padding: false,
                channel_mode: ChannelMode::Mono,
                crc_protected: false,
                frame_len: 417,
            },
            side: SideInfo {
                main_data_begin: 0,
                part2_3_length: 0,
                big_values: 0,
                global_gain: 0,
                scalefac_compress: 0,
                window_switching_flag: false,
                block_type: BlockType::Normal,
                mixed_block_flag: false,
                table_select: [0; 3],
                subblock_gain: [0; 3],
                region0_count: 0,
                region1_count: 0,
                preflag: false,
                scalefac_scale: false,
                count1table_select: false,
            },
            scalefactors: ScaleFactors::zeroed(ScaleFactorLayout::Long),
            mdct: MdctCoefficients {
                quantized: vec![0; 576],
                requantized: vec![0.0; 576],
            },
        }
    }

    fn frame_record(frame_index: usize, gap_before: bool) -> FrameRecord {
        FrameRecord {
            frame_index,
            header: dummy_record(frame_index).header,
            gap_before,
            record: Ok(dummy_record(frame_index)),
        }
    }

    #[test]
    fn zero_record_with_identity_norm_gives_zero_tensors() {
        let f = build_frame_features(&dummy_record(0), &NormalizationStats::identity());
        assert!(f.mdct_grid.iter().all(|&v| v == 0.0));
        assert!(f.scalefac_grid.iter().all(|&v| v == 0.0));
        assert!(f.scalars.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mdct_reshape_is_subband_major() {
        let mut rec = dummy_record(0);
        rec.mdct.requantized = (1..=576).map(|v| v as f32).collect();
        let f = build_frame_features(&rec, &NormalizationStats::identity());
        for s in 0..32 {
            for k in 0..18 {
                assert_eq!(f.mdct_grid[(s, k)], (18 * s + k + 1) as f32);
            }
        }
    }

    #[test]
    fn scalefac_grid_is_lossless() {
        let mut rec = dummy_record(0);
        let mut sf = ScaleFactors::zeroed(ScaleFactorLayout::Mixed);
        for (i, v) in sf.long.iter_mut().enumerate() {
            *v = i as u32 + 1;
        }
        for b in 0..12 {
            for w in 0..3 {
                sf.short[b][w] = (100 + 3 * b + w) as u32;
            }
        }
        rec.scalefactors = sf.clone();
        let f = build_frame_features(&rec, &NormalizationStats::identity());
        for band in 0..12 {
            assert_eq!(f.scalefac_grid[(0, band)], sf.long[band] as f32);
        }
        for band in 12..21 {
            assert_eq!(f.scalefac_grid[(1, band - 12)], sf.long[band] as f32);
        }
        for band in 0..12 {
            for w in 0..3 {
                assert_eq!(f.scalefac_grid[(2 + w, band)], sf.short[band][w] as f32);
            }
        }
    }

    #[test]
    fn fitted_stats_center_the_training_split() {
        let records: Vec<CodecFrameRecord> = (0..50)
            .map(|i| {
                let mut r = dummy_record(i);
                r.side.global_gain = 100 + (i as u32 % 30);
                r.side.big_values = 10 * (i as u32 % 7);
                r.mdct.requantized = (0..576).map(|k| ((i + k) % 23) as f32 * 0.5).collect();
                r
            })
            .collect();
        let stats = NormalizationStats::fit(records.iter());
        // Re-apply and check the aggregate mean of every feature cell ~ 0.
        let n = records.len() as f64;
        let mut sums = vec![0.0f64; 576 + 60 + 18];
        for r in &records {
            let f = build_frame_features(r, &stats);
            for (i, v) in f
                .mdct_grid
                .iter()
                .chain(f.scalefac_grid.iter())
                .chain(f.scalars.iter())
                .enumerate()
            {
                sums[i] += f64::from(*v);
            }
        }
        for s in sums {
            assert!((s / n).abs() < 1e-4, "feature mean {s} not centered");
        }
    }

    #[test]
    fn window_count_formula_holds() {
        let frames: Vec<FrameRecord> = (0..80).map(|i| frame_record(i, false)).collect();
        let labels = vec![0u8; 80];
        let w = make_windows(&frames, &labels, "src", &NormalizationStats::identity(), 20, 8)
            .unwrap();
        assert_eq!(w.len(), 8); // floor((80-20)/8)+1
        let starts: Vec<usize> = w.iter().map(|w| w.origin.1).collect();
        assert_eq!(starts, vec![0, 8, 16, 24, 32, 40, 48, 56]);
    }

    #[test]
    fn short_inputs_yield_no_windows() {
        let frames: Vec<FrameRecord> = (0..19).map(|i| frame_record(i, false)).collect();
        let labels = vec![0u8; 19];
        let w = make_windows(&frames, &labels, "src", &NormalizationStats::identity(), 20, 8)
            .unwrap();
        assert!(w.is_empty());
        let frames: Vec<FrameRecord> = (0..20).map(|i| frame_record(i, false)).collect();
        let labels = vec![0u8; 20];
        let w = make_windows(&frames, &labels, "src", &NormalizationStats::identity(), 20, 8)
            .unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn windows_never_span_gaps_or_unusable_frames() {
        let mut frames: Vec<FrameRecord> = (0..60).map(|i| frame_record(i, false)).collect();
        frames[30].gap_before = true;
        let labels = vec![1u8; 60];
        let w = make_windows(&frames, &labels, "src", &NormalizationStats::identity(), 20, 8)
            .unwrap();
        // Valid starts: windows [0..20), [8..28) ok (gap at 30 not inside);
        // 16..36, 24..44 span the gap; 32.. onwards are fine again.
        let starts: Vec<usize> = w.iter().map(|w| w.origin.1).collect();
        assert_eq!(starts, vec![0, 8, 32, 40]);
    }

    #[test]
    fn labels_align_with_source_sequence() {
        let frames: Vec<FrameRecord> = (0..40).map(|i| frame_record(i, false)).collect();
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 3 == 0)).collect();
        let w = make_windows(&frames, &labels, "src", &NormalizationStats::identity(), 20, 8)
            .unwrap();
        for win in &w {
            for (l, &lab) in win.labels.iter().enumerate() {
                assert_eq!(lab, labels[win.origin.1 + l]);
            }
        }
    }

    #[test]
    fn window_starts_cover_multiple_slice_residues() {
        // Stride 8 against 10-frame slices: the start offsets modulo 10 must
        // not collapse onto one residue.
        let frames: Vec<FrameRecord> = (0..120).map(|i| frame_record(i, false)).collect();
        let labels = vec![0u8; 120];
        let w = make_windows(&frames, &labels, "src", &NormalizationStats::identity(), 20, 8)
            .unwrap();
        let residues: std::collections::HashSet<usize> =
            w.iter().map(|w| w.origin.1 % 10).collect();
        assert!(residues.len() > 1, "residues {residues:?}");
    }
}
