//! Plan execution: subprocess round trips per slice, final segment encode,
//! frame-count reconciliation and manifest assembly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::mp3::{self, SAMPLES_PER_FRAME};

use super::codec::{read_wav, scratch_dir, write_wav, CodecRig};
use super::{
    partition, plan_segment, plan_segment_variable, segment_lengths, ForgeError, LabelSequence,
    ManifestHeader, SegmentRecord, SlicePlan, MANIFEST_SCHEMA_VERSION,
};

/// Run-level forge options.
#[derive(Debug, Clone)]
pub struct ForgeOptions {
    pub seed: u64,
    pub variable_slices: bool,
    /// Train/val/test window fractions.
    pub fractions: (f64, f64, f64),
    /// Accepted |parsed - planned| frame difference of the final encode.
    pub frame_tolerance: usize,
    /// Keep per-segment scratch directories instead of deleting them.
    pub keep_scratch: bool,
}

impl Default for ForgeOptions {
    fn default() -> Self {
        ForgeOptions {
            seed: 0,
            variable_slices: false,
            fractions: (0.54, 0.13, 0.33),
            frame_tolerance: 2,
            keep_scratch: false,
        }
    }
}

/// Output of executing one segment plan.
#[derive(Debug)]
pub struct ForgedSegment {
    pub mp3_path: PathBuf,
    pub parsed_frames: usize,
    /// Encoder delay of the final encode, used for label alignment.
    pub delay_samples: u32,
    /// Labels aligned to the parsed frames of the output file.
    pub aligned_labels: Vec<u8>,
    /// Compression counts aligned the same way.
    pub aligned_compressions: Vec<u8>,
    /// True when leading/trailing encoder frames were labeled by
    /// nearest-slice extension.
    pub label_extension: bool,
}

/// Execute the compression chains of one segment and encode it as one MP3.
///
/// Every chain entry except the last is a compress/decompress round trip on
/// the slice's own samples; the shared last entry compresses the
/// concatenation of all processed slices. The output frame count must match
/// the planned length within `frame_tolerance`.
pub fn execute_plan(
    rig: &CodecRig,
    samples: &[i16],
    channels: u16,
    sample_rate: u32,
    plans: &[SlicePlan],
    labels: &LabelSequence,
    workdir: &Path,
    out_path: &Path,
    frame_tolerance: usize,
) -> Result<ForgedSegment, ForgeError> {
    let ch = channels as usize;
    let planned_frames: usize = plans.iter().map(|p| p.length_frames).sum();
    assert_eq!(labels.len(), planned_frames);
    assert_eq!(samples.len(), planned_frames * SAMPLES_PER_FRAME * ch);

    let mut processed: Vec<i16> = Vec::with_capacity(samples.len());
    let mut offset = 0usize;
    for plan in plans {
        let n = plan.length_frames * SAMPLES_PER_FRAME * ch;
        let mut slice = samples[offset..offset + n].to_vec();
        offset += n;
        for (step, spec) in plan.chain[..plan.chain.len() - 1].iter().enumerate() {
            let tag = format!("s{:03}_c{}", plan.slice_index, step + 1);
            slice = rig.round_trip(*spec, &slice, channels, sample_rate, workdir, &tag)?;
        }
        processed.extend_from_slice(&slice);
    }

    let final_spec = *plans[0].chain.last().unwrap();
    let concat_wav = workdir.join("segment.wav");
    write_wav(&concat_wav, &processed, channels, sample_rate)?;
    rig.encode(final_spec, &concat_wav, out_path)?;

    let bytes = std::fs::read(out_path)?;
    let scan = mp3::scan(&bytes)?;
    let parsed_frames = scan.frames.len();
    let diff = parsed_frames.abs_diff(planned_frames);
    if diff > frame_tolerance {
        return Err(ForgeError::FrameCountMismatch {
            expected: planned_frames,
            got: parsed_frames,
            tolerance: frame_tolerance,
        });
    }

    let delay_samples = scan
        .encoder_info
        .as_ref()
        .map(|i| i.delay_samples)
        .unwrap_or_else(|| rig.encoder_delay(out_path, final_spec.encoder).unwrap_or(576));
    let (aligned_labels, label_extension) =
        align_labels(&labels.0, parsed_frames, delay_samples);
    let planned_compressions: Vec<u8> = plans
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.n_compressions() as u8, p.length_frames))
        .collect();
    let (aligned_compressions, _) =
        align_labels(&planned_compressions, parsed_frames, delay_samples);

    Ok(ForgedSegment {
        mp3_path: out_path.to_path_buf(),
        parsed_frames,
        delay_samples,
        aligned_labels,
        aligned_compressions,
        label_extension,
    })
}

/// Map planned per-frame labels onto the frames of the final encode.
///
/// Output frame `k` encodes source samples around `k * 1152 + 576 - delay`;
/// the source frame containing that center supplies the label. Frames whose
/// center falls outside the source (encoder lead-in/padding) extend the
/// nearest slice and set the extension flag.
pub fn align_labels(planned: &[u8], parsed_frames: usize, delay: u32) -> (Vec<u8>, bool) {
    let n = planned.len() as i64;
    let mut extension = false;
    let labels = (0..parsed_frames as i64)
        .map(|k| {
            let center = k * SAMPLES_PER_FRAME as i64 + SAMPLES_PER_FRAME as i64 / 2
                - i64::from(delay);
            let src = center.div_euclid(SAMPLES_PER_FRAME as i64);
            if src < 0 || src >= n {
                extension = true;
            }
            planned[src.clamp(0, n - 1) as usize]
        })
        .collect();
    (labels, extension)
}

/// Forge a whole corpus: segment every source WAV, plan and execute each
/// segment, partition at segment granularity and write `manifest.jsonl`
/// plus one MP3 per segment under `out_dir`.
pub fn forge_corpus(
    rig: &CodecRig,
    sources: &[PathBuf],
    out_dir: &Path,
    options: &ForgeOptions,
) -> Result<Vec<SegmentRecord>, ForgeError> {
    std::fs::create_dir_all(out_dir.join("segments"))?;

    // Phase 1: per-source segmentation (sequential; cheap).
    struct Job {
        segment_id: usize,
        source: PathBuf,
        start_frame: usize,
        len_frames: usize,
    }
    let mut jobs = Vec::new();
    let mut audio: Vec<(PathBuf, crate::forge::codec::DecodedAudio)> = Vec::new();
    for source in sources {
        let wav = read_wav(source)?;
        if wav.sample_rate != 44100 {
            return Err(ForgeError::EncoderFailure(format!(
                "{}: sources must be 44.1 kHz, got {} Hz",
                source.display(),
                wav.sample_rate
            )));
        }
        let total_frames = wav.frames_of_samples() / SAMPLES_PER_FRAME;
        let mut rng = ChaCha20Rng::seed_from_u64(options.seed);
        rng.set_stream(0xFEED ^ audio.len() as u64);
        let lengths = segment_lengths(total_frames, &mut rng)?;
        let mut start = 0usize;
        for len in lengths {
            jobs.push(Job {
                segment_id: jobs.len(),
                source: source.clone(),
                start_frame: start,
                len_frames: len,
            });
            start += len;
        }
        audio.push((source.clone(), wav));
    }

    // Phase 2: plan + execute every segment (parallel, per-segment rng
    // streams keep results independent of scheduling).
    let results: Vec<Result<(SegmentRecord, usize), ForgeError>> = jobs
        .par_iter()
        .map(|job| {
            let (_, wav) = audio
                .iter()
                .find(|(p, _)| *p == job.source)
                .expect("source loaded");
            let ch = wav.channels as usize;
            let mut rng = ChaCha20Rng::seed_from_u64(options.seed);
            rng.set_stream(job.segment_id as u64 + 1);
            let (plans, labels) = if options.variable_slices {
                plan_segment_variable(job.len_frames, &mut rng)
            } else {
                plan_segment(job.len_frames, &mut rng)
            };

            let scratch = scratch_dir(out_dir, &format!("work/seg{:05}", job.segment_id))?;
            let out_path = out_dir
                .join("segments")
                .join(format!("seg{:05}.mp3", job.segment_id));
            let span = job.start_frame * SAMPLES_PER_FRAME * ch
                ..(job.start_frame + job.len_frames) * SAMPLES_PER_FRAME * ch;
            let forged = execute_plan(
                rig,
                &wav.samples[span],
                wav.channels,
                wav.sample_rate,
                &plans,
                &labels,
                &scratch,
                &out_path,
                options.frame_tolerance,
            )?;
            if !options.keep_scratch {
                let _ = std::fs::remove_dir_all(&scratch);
            }

            let windows = forged
                .parsed_frames
                .saturating_sub(crate::features::WINDOW_LEN)
                / crate::features::WINDOW_STRIDE
                + usize::from(forged.parsed_frames >= crate::features::WINDOW_LEN);
            let record = SegmentRecord {
                schema_version: MANIFEST_SCHEMA_VERSION,
                segment_id: job.segment_id,
                source_file: job.source.display().to_string(),
                source_frame_range: (job.start_frame, job.len_frames),
                output_path: forged.mp3_path.display().to_string(),
                labels,
                slices: plans,
                split: super::Split::Train, // assigned below
                rng_seed: options.seed,
                parsed_frames: forged.parsed_frames,
                delay_samples: forged.delay_samples,
                aligned_labels: forged.aligned_labels.clone(),
                frame_compressions: forged.aligned_compressions.clone(),
                label_extension: forged.label_extension,
            };
            Ok((record, windows))
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut window_counts = Vec::with_capacity(results.len());
    for r in results {
        let (record, windows) = r?;
        records.push(record);
        window_counts.push(windows);
    }

    // Phase 3: segment-disjoint split assignment.
    let mut rng = ChaCha20Rng::seed_from_u64(options.seed);
    rng.set_stream(0x5EED_5EED);
    let splits = partition(&window_counts, &mut rng, options.fractions);
    for (record, split) in records.iter_mut().zip(splits) {
        record.split = split;
    }

    write_manifest(out_dir, rig, options, &records)?;
    Ok(records)
}

fn write_manifest(
    out_dir: &Path,
    rig: &CodecRig,
    options: &ForgeOptions,
    records: &[SegmentRecord],
) -> Result<(), ForgeError> {
    let header = ManifestHeader {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed: options.seed,
        encoder_a_version: rig.versions.encoder_a.clone(),
        encoder_b_version: rig.versions.encoder_b.clone(),
        decoder_version: rig.versions.decoder.clone(),
        variable_slices: options.variable_slices,
    };
    let mut file = std::fs::File::create(out_dir.join("manifest.jsonl"))?;
    writeln!(file, "{}", serde_json::to_string(&header).unwrap())?;
    for record in records {
        writeln!(file, "{}", serde_json::to_string(record).unwrap())?;
    }
    Ok(())
}

/// Read a manifest written by [`forge_corpus`].
pub fn read_manifest(path: &Path) -> Result<(ManifestHeader, Vec<SegmentRecord>), ForgeError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: ManifestHeader = serde_json::from_str(lines.next().ok_or_else(|| {
        ForgeError::EncoderFailure("manifest is empty".into())
    })?)
    .map_err(|e| ForgeError::EncoderFailure(format!("manifest header: {e}")))?;
    let mut records = Vec::new();
    for line in lines {
        records.push(
            serde_json::from_str(line)
                .map_err(|e| ForgeError::EncoderFailure(format!("manifest record: {e}")))?,
        );
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_alignment_with_zero_delay_is_identity() {
        let planned: Vec<u8> = [[1u8; 10], [0; 10]].concat();
        let (aligned, ext) = align_labels(&planned, 20, 0);
        assert_eq!(aligned, planned);
        assert!(!ext);
    }

    #[test]
    fn label_alignment_shifts_with_encoder_delay() {
        // Delay of one full frame: output frame k encodes source frame k-1.
        // Frame 0 reaches before the source and extends the first slice.
        let planned: Vec<u8> = [[1u8; 10], [0; 10]].concat();
        let (aligned, ext) = align_labels(&planned, 21, 1152);
        assert!(ext);
        assert_eq!(aligned[0], 1);
        assert_eq!(&aligned[1..21], &planned[0..20]);
    }

    #[test]
    fn typical_lame_delay_keeps_all_slices_represented() {
        let planned: Vec<u8> = [[1u8; 10], [0; 10], [1; 10], [0; 10]].concat();
        let (aligned, _) = align_labels(&planned, 41, 576);
        assert_eq!(aligned.len(), 41);
        // Half-frame shift: boundaries move by at most one frame.
        let ones = aligned.iter().filter(|&&v| v == 1).count();
        assert!((19..=21).contains(&ones), "ones = {ones}");
    }
}
