//! Ground-truthed dataset generation.
//!
//! Uncompressed sources are cut into segments of 80-320 frames, segments
//! into slices of 10 frames. Odd slices (1-based) are compressed two or
//! three times, even slices once; the last compression of every slice in a
//! segment is the same, because the whole segment is re-encoded as one MP3.
//! Every step runs through external encoder/decoder executables, so the
//! traces in the output are real codec traces, and the labels are known by
//! construction.

mod codec;
mod run;

pub use codec::{read_wav, write_wav, CodecRig, DecodedAudio, ProbedVersions};
pub use run::{
    align_labels, execute_plan, forge_corpus, read_manifest, ForgeOptions, ForgedSegment,
};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// CBR bitrates of the compression grid, in kbps.
pub const CBR_BITRATES: [u32; 6] = [64, 96, 128, 160, 192, 256];
/// VBR quality indices of the compression grid (lower is better quality).
pub const VBR_QUALITIES: [u32; 6] = [1, 2, 3, 4, 5, 6];
/// Slice length of the fixed-length corpus, in frames.
pub const SLICE_FRAMES: usize = 10;
/// Segment length bounds in frames.
pub const MIN_SEGMENT_FRAMES: usize = 80;
pub const MAX_SEGMENT_FRAMES: usize = 320;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("source shorter than {MIN_SEGMENT_FRAMES} frames ({0} frames)")]
    SourceTooShort(usize),
    #[error("encoder failed: {0}")]
    EncoderFailure(String),
    #[error("decoder failed: {0}")]
    DecoderFailure(String),
    #[error("forged output has {got} frames, plan expects {expected} (tolerance {tolerance})")]
    FrameCountMismatch {
        expected: usize,
        got: usize,
        tolerance: usize,
    },
    #[error("audio i/o: {0}")]
    Wav(#[from] hound::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("mp3 parse of forged output failed: {0}")]
    Parse(#[from] crate::mp3::Mp3Error),
}

/// Which of the two configured encoder executables performs a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EncoderId {
    A,
    B,
}

/// One compression setting from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CompressionSpec {
    pub mode: RateMode,
    /// Bitrate in kbps for CBR, quality index 1-6 for VBR.
    pub value: u32,
    pub encoder: EncoderId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RateMode {
    Cbr,
    Vbr,
}

impl CompressionSpec {
    pub fn draw(rng: &mut impl Rng) -> Self {
        let encoder = if rng.random::<bool>() { EncoderId::A } else { EncoderId::B };
        if rng.random::<bool>() {
            CompressionSpec {
                mode: RateMode::Cbr,
                value: *CBR_BITRATES.choose(rng).unwrap(),
                encoder,
            }
        } else {
            CompressionSpec {
                mode: RateMode::Vbr,
                value: *VBR_QUALITIES.choose(rng).unwrap(),
                encoder,
            }
        }
    }

    /// Compact notation used in report tables: C128, V4.
    pub fn type_label(&self) -> String {
        match self.mode {
            RateMode::Cbr => format!("C{}", self.value),
            RateMode::Vbr => format!("V{}", self.value),
        }
    }
}

impl std::fmt::Display for CompressionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{:?}", self.type_label(), self.encoder)
    }
}

/// Compression chain of one slice. `chain` holds the specs in application
/// order; its last entry is the segment-wide final compression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicePlan {
    /// 1-based index within the segment.
    pub slice_index: usize,
    pub length_frames: usize,
    pub chain: Vec<CompressionSpec>,
}

impl SlicePlan {
    pub fn n_compressions(&self) -> usize {
        self.chain.len()
    }

    pub fn multiply_compressed(&self) -> bool {
        self.chain.len() > 1
    }
}

/// Per-frame binary labels: 0 = single compressed, 1 = multiply compressed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequence(pub Vec<u8>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Labels follow from the slice plans alone: a frame is 1 iff it lies in
    /// a slice compressed more than once.
    pub fn from_plans(plans: &[SlicePlan]) -> Self {
        let mut y = Vec::new();
        for plan in plans {
            let bit = u8::from(plan.multiply_compressed());
            y.extend(std::iter::repeat_n(bit, plan.length_frames));
        }
        LabelSequence(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Manifest entry for one forged segment: everything needed to re-derive its
/// labels and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub schema_version: u32,
    pub segment_id: usize,
    pub source_file: String,
    /// Frame range within the source file: (first frame, frame count).
    pub source_frame_range: (usize, usize),
    pub slices: Vec<SlicePlan>,
    pub output_path: String,
    /// Planned per-frame labels, derivable from the slice plans.
    pub labels: LabelSequence,
    pub split: Split,
    pub rng_seed: u64,
    /// Audio frames found when reparsing the forged MP3.
    pub parsed_frames: usize,
    /// Encoder delay used for label reconciliation, in samples.
    pub delay_samples: u32,
    /// Labels mapped onto the parsed frames of the final encode.
    pub aligned_labels: Vec<u8>,
    /// Compression count (1-3) per parsed frame, same mapping.
    pub frame_compressions: Vec<u8>,
    /// True when leading/trailing encoder frames had to be labeled by
    /// nearest-slice extension.
    pub label_extension: bool,
}

/// First line of a manifest: run-level provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub seed: u64,
    pub encoder_a_version: String,
    pub encoder_b_version: String,
    pub decoder_version: String,
    pub variable_slices: bool,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Cut `total_frames` source frames into consecutive segment lengths, each a
/// multiple of 10 drawn uniformly from 80..=320; a trailing remainder
/// shorter than 80 frames is discarded.
pub fn segment_lengths(total_frames: usize, rng: &mut impl Rng) -> Result<Vec<usize>, ForgeError> {
    if total_frames < MIN_SEGMENT_FRAMES {
        return Err(ForgeError::SourceTooShort(total_frames));
    }
    let mut remaining = total_frames;
    let mut lengths = Vec::new();
    while remaining >= MIN_SEGMENT_FRAMES {
        let drawn = SLICE_FRAMES * rng.random_range(8..=32usize);
        let len = drawn.min(remaining / SLICE_FRAMES * SLICE_FRAMES);
        lengths.push(len);
        remaining -= len;
    }
    Ok(lengths)
}

/// Plan the compression chains of one segment of `len_frames` (a multiple of
/// 10). Odd slices get 2 or 3 compressions, even slices 1; the final spec is
/// drawn once and shared by every chain.
pub fn plan_segment(len_frames: usize, rng: &mut impl Rng) -> (Vec<SlicePlan>, LabelSequence) {
    assert_eq!(len_frames % SLICE_FRAMES, 0, "segment length must be whole slices");
    let final_spec = CompressionSpec::draw(rng);
    let n_slices = len_frames / SLICE_FRAMES;
    let plans: Vec<SlicePlan> = (1..=n_slices)
        .map(|slice_index| {
            let n = if slice_index % 2 == 1 {
                2 + usize::from(rng.random::<bool>())
            } else {
                1
            };
            let mut chain: Vec<CompressionSpec> =
                (1..n).map(|_| CompressionSpec::draw(rng)).collect();
            chain.push(final_spec);
            SlicePlan {
                slice_index,
                length_frames: SLICE_FRAMES,
                chain,
            }
        })
        .collect();
    let labels = LabelSequence::from_plans(&plans);
    (plans, labels)
}

/// Variable-length variant: slice lengths uniform in 10..=80 frames and the
/// compression count of every slice (not only odd ones) uniform in 1..=3.
/// Mirrors the robustness corpus.
pub fn plan_segment_variable(
    len_frames: usize,
    rng: &mut impl Rng,
) -> (Vec<SlicePlan>, LabelSequence) {
    let final_spec = CompressionSpec::draw(rng);
    let mut plans = Vec::new();
    let mut remaining = len_frames;
    let mut slice_index = 1;
    while remaining > 0 {
        let max_len = remaining.min(80);
        let mut len = rng.random_range(10..=max_len.max(10)).min(max_len);
        // Never leave a tail shorter than a minimal slice.
        if remaining - len < 10 {
            len = remaining;
        }
        let n = rng.random_range(1..=3usize);
        let mut chain: Vec<CompressionSpec> = (1..n).map(|_| CompressionSpec::draw(rng)).collect();
        chain.push(final_spec);
        plans.push(SlicePlan {
            slice_index,
            length_frames: len,
            chain,
        });
        remaining -= len;
        slice_index += 1;
    }
    let labels = LabelSequence::from_plans(&plans);
    (plans, labels)
}

/// Assign segments to train/val/test at segment granularity, approximating
/// the target window-count fractions. `window_counts[i]` is the number of
/// sliding windows segment `i` contributes. Deterministic given the rng.
pub fn partition(
    window_counts: &[usize],
    rng: &mut impl Rng,
    fractions: (f64, f64, f64),
) -> Vec<Split> {
    let total: usize = window_counts.iter().sum();
    let targets = [
        fractions.0 * total as f64,
        fractions.1 * total as f64,
        fractions.2 * total as f64,
    ];
    let mut order: Vec<usize> = (0..window_counts.len()).collect();
    // Shuffle, then greedily feed each segment to the split with the largest
    // deficit relative to its target, so small splits fill proportionally.
    use rand::seq::SliceRandom;
    order.shuffle(rng);

    let mut assigned = [0.0f64; 3];
    let mut out = vec![Split::Train; window_counts.len()];
    for &seg in &order {
        let best = (0..3)
            .max_by(|&a, &b| {
                let ra = (targets[a] - assigned[a]) / targets[a].max(1e-12);
                let rb = (targets[b] - assigned[b]) / targets[b].max(1e-12);
                ra.partial_cmp(&rb)
                    .unwrap()
                    .then(targets[a].partial_cmp(&targets[b]).unwrap())
            })
            .unwrap();
        assigned[best] += window_counts[seg] as f64;
        out[seg] = [Split::Train, Split::Val, Split::Test][best];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn source_too_short_is_rejected() {
        assert!(matches!(
            segment_lengths(79, &mut rng(0)),
            Err(ForgeError::SourceTooShort(79))
        ));
        let lens = segment_lengths(80, &mut rng(0)).unwrap();
        assert_eq!(lens, vec![80]);
    }

    #[test]
    fn hundred_frames_yield_one_segment_between_80_and_100() {
        for seed in 0..50 {
            let lens = segment_lengths(100, &mut rng(seed)).unwrap();
            assert_eq!(lens.len(), 1);
            assert!((80..=100).contains(&lens[0]));
            assert_eq!(lens[0] % 10, 0);
        }
    }

    #[test]
    fn segment_lengths_are_deterministic_and_cover() {
        let a = segment_lengths(2000, &mut rng(7)).unwrap();
        let b = segment_lengths(2000, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        let used: usize = a.iter().sum();
        assert!(2000 - used < 80);
        for l in a {
            assert!((80..=320).contains(&l) && l % 10 == 0);
        }
    }

    #[test]
    fn four_slice_segment_alternates_labels() {
        let (plans, labels) = plan_segment(40, &mut rng(3));
        assert_eq!(plans.len(), 4);
        let expected: Vec<u8> = [[1u8; 10], [0; 10], [1; 10], [0; 10]].concat();
        assert_eq!(labels.0, expected);
    }

    #[test]
    fn eight_slice_segment_has_four_multiply_compressed() {
        let (plans, _) = plan_segment(80, &mut rng(11));
        let multi = plans.iter().filter(|p| p.multiply_compressed()).count();
        assert_eq!(multi, 4);
        for p in &plans {
            if p.slice_index % 2 == 1 {
                assert!((2..=3).contains(&p.n_compressions()));
            } else {
                assert_eq!(p.n_compressions(), 1);
            }
        }
    }

    #[test]
    fn chain_tails_are_shared() {
        let (plans, _) = plan_segment(320, &mut rng(5));
        let last = *plans[0].chain.last().unwrap();
        assert!(plans.iter().all(|p| *p.chain.last().unwrap() == last));
        let (plans, _) = plan_segment_variable(200, &mut rng(6));
        let last = *plans[0].chain.last().unwrap();
        assert!(plans.iter().all(|p| *p.chain.last().unwrap() == last));
    }

    #[test]
    fn plans_are_deterministic() {
        let (a, la) = plan_segment(160, &mut rng(9));
        let (b, lb) = plan_segment(160, &mut rng(9));
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn labels_derive_from_plans() {
        for seed in 0..20 {
            let (plans, labels) = plan_segment(240, &mut rng(seed));
            assert_eq!(LabelSequence::from_plans(&plans), labels);
            let (plans, labels) = plan_segment_variable(240, &mut rng(seed));
            assert_eq!(LabelSequence::from_plans(&plans), labels);
            assert_eq!(labels.len(), 240);
        }
    }

    #[test]
    fn multiply_compressed_slices_split_between_2x_and_3x() {
        // Binomial check at p = 0.5: over 1600 odd slices the 3x count must
        // stay within 4.2 sigma (~alpha 0.01 two-sided with margin).
        let mut threes = 0usize;
        let mut total = 0usize;
        let mut r = rng(42);
        for _ in 0..100 {
            let (plans, _) = plan_segment(320, &mut r);
            for p in plans.iter().filter(|p| p.multiply_compressed()) {
                total += 1;
                threes += usize::from(p.n_compressions() == 3);
            }
        }
        let mean = total as f64 * 0.5;
        let sigma = (total as f64 * 0.25).sqrt();
        assert!(
            ((threes as f64) - mean).abs() < 4.2 * sigma,
            "3x count {threes} of {total} outside binomial band"
        );
    }

    #[test]
    fn variable_slices_stay_in_bounds() {
        for seed in 0..20 {
            let (plans, labels) = plan_segment_variable(300, &mut rng(seed));
            assert_eq!(labels.len(), 300);
            for p in &plans {
                assert!((10..=80).contains(&p.length_frames), "{}", p.length_frames);
                assert!((1..=3).contains(&p.n_compressions()));
            }
        }
    }

    #[test]
    fn hundred_equal_segments_split_54_13_33() {
        let counts = vec![10usize; 100];
        let splits = partition(&counts, &mut rng(1), (0.54, 0.13, 0.33));
        let n = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(n(Split::Train), 54);
        assert_eq!(n(Split::Val), 13);
        assert_eq!(n(Split::Test), 33);
    }

    #[test]
    fn single_segment_lands_in_exactly_one_split() {
        let splits = partition(&[17], &mut rng(2), (0.54, 0.13, 0.33));
        assert_eq!(splits.len(), 1);
    }

    #[test]
    fn three_equal_segments_get_one_split_each() {
        // With equal segments the relative-deficit greedy covers all three
        // splits instead of starving the small ones.
        for seed in 0..10 {
            let counts = [5usize, 5, 5];
            let splits = partition(&counts, &mut rng(seed), (0.54, 0.13, 0.33));
            let mut seen = std::collections::HashSet::new();
            for s in &splits {
                seen.insert(*s);
            }
            assert_eq!(seen.len(), 3, "{splits:?}");
        }
    }

    #[test]
    fn partition_deviation_bounded_by_one_segment() {
        let counts: Vec<usize> = (0..60).map(|i| 8 + (i * 7) % 25).collect();
        let total: usize = counts.iter().sum();
        let max_seg = *counts.iter().max().unwrap();
        let fractions = (0.54, 0.13, 0.33);
        let splits = partition(&counts, &mut rng(4), fractions);
        let mut got = [0usize; 3];
        for (c, s) in counts.iter().zip(&splits) {
            let i = match s {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            got[i] += c;
        }
        let targets = [
            fractions.0 * total as f64,
            fractions.1 * total as f64,
            fractions.2 * total as f64,
        ];
        for i in 0..3 {
            assert!(
                (got[i] as f64 - targets[i]).abs() <= max_seg as f64,
                "split {i}: {} vs target {}",
                got[i],
                targets[i]
            );
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let counts: Vec<usize> = (0..40).map(|i| 5 + i % 13).collect();
        let a = partition(&counts, &mut rng(8), (0.54, 0.13, 0.33));
        let b = partition(&counts, &mut rng(8), (0.54, 0.13, 0.33));
        assert_eq!(a, b);
    }
}
