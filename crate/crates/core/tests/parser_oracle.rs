//! Field-level agreement between the parser and the independent reference
//! decoder on real encoder output, plus parser totality on corrupt input.

use splicetrace::mp3::{self, BlockType, CodecFrameRecord};

const FIXTURES: [&str; 6] = [
    "c128_mono.mp3",
    "v4_stereo.mp3",
    "c64_crc_mono.mp3",
    "c192_alt_stereo.mp3",
    "v1_alt_stereo.mp3",
    "c256_notag_mono.mp3",
];

fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/data/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn compare_frame(name: &str, ours: &CodecFrameRecord, reference: &refdec::RefFrame) {
    let ctx = format!("{name} frame {}", ours.frame_index);
    assert_eq!(ours.header.byte_offset, reference.offset, "{ctx}: offset");
    assert_eq!(ours.header.bitrate_kbps, reference.bitrate_kbps, "{ctx}: bitrate");
    assert_eq!(ours.header.sampling_rate, reference.sampling_rate, "{ctx}: rate");
    assert_eq!(ours.header.crc_protected, reference.crc, "{ctx}: crc");

    let side = &ours.side;
    assert_eq!(side.main_data_begin, reference.main_data_begin, "{ctx}: main_data_begin");
    assert_eq!(side.part2_3_length, reference.part2_3_length, "{ctx}: part2_3_length");
    assert_eq!(side.big_values, reference.big_values, "{ctx}: big_values");
    assert_eq!(side.global_gain, reference.global_gain, "{ctx}: global_gain");
    assert_eq!(side.scalefac_compress, reference.scalefac_compress, "{ctx}: scalefac_compress");
    assert_eq!(side.window_switching_flag, reference.window_switching, "{ctx}: wsf");
    assert_eq!(side.block_type.code(), reference.block_type, "{ctx}: block_type");
    assert_eq!(side.mixed_block_flag, reference.mixed_block, "{ctx}: mixed");
    assert_eq!(side.table_select, reference.table_select, "{ctx}: table_select");
    assert_eq!(side.subblock_gain, reference.subblock_gain, "{ctx}: subblock_gain");
    assert_eq!(side.region0_count, reference.region0_count, "{ctx}: region0");
    assert_eq!(side.region1_count, reference.region1_count, "{ctx}: region1");
    assert_eq!(side.preflag, reference.preflag, "{ctx}: preflag");
    assert_eq!(side.scalefac_scale, reference.scalefac_scale, "{ctx}: scalefac_scale");
    assert_eq!(side.count1table_select, reference.count1table_select, "{ctx}: count1table");

    assert_eq!(ours.scalefactors.long, reference.scalefac_long, "{ctx}: long scalefactors");
    assert_eq!(ours.scalefactors.short, reference.scalefac_short, "{ctx}: short scalefactors");

    assert_eq!(ours.mdct.quantized, reference.quantized, "{ctx}: quantized spectrum");
    for (i, (a, b)) in ours
        .mdct
        .requantized
        .iter()
        .zip(&reference.requantized)
        .enumerate()
    {
        let a = f64::from(*a);
        let tol = 1e-5 * a.abs().max(b.abs()) + 1e-12;
        assert!(
            (a - b).abs() <= tol,
            "{ctx}: requantized[{i}] {a} vs {b}"
        );
    }
}

#[test]
fn parser_matches_reference_decoder_on_all_fixtures() {
    let mut total = 0usize;
    let mut short_blocks = 0usize;
    for name in FIXTURES {
        let bytes = fixture(name);
        let extraction = mp3::extract_records(&bytes).unwrap();
        let reference = refdec::decode(&bytes);
        assert_eq!(
            extraction.frames.len(),
            reference.len(),
            "{name}: frame count"
        );
        for (frame, ref_frame) in extraction.frames.iter().zip(&reference) {
            let ours = frame
                .record
                .as_ref()
                .unwrap_or_else(|e| panic!("{name} frame {}: {e:?}", frame.frame_index));
            let reference = ref_frame
                .as_ref()
                .unwrap_or_else(|e| panic!("{name}: oracle failed: {e}"));
            compare_frame(name, ours, reference);
            total += 1;
            if ours.side.block_type == BlockType::Short {
                short_blocks += 1;
            }
        }
    }
    assert!(total >= 100, "corpus too small: {total} frames");
    assert!(
        short_blocks > 0,
        "corpus exercises no short-block frames; add a transient-rich fixture"
    );
}

#[test]
fn spectrum_lengths_and_region_sums_hold() {
    for name in FIXTURES {
        let bytes = fixture(name);
        let extraction = mp3::extract_records(&bytes).unwrap();
        for frame in &extraction.frames {
            let rec = frame.record.as_ref().unwrap();
            assert_eq!(rec.mdct.quantized.len(), 576);
            assert_eq!(rec.mdct.requantized.len(), 576);
            for (q, x) in rec.mdct.quantized.iter().zip(&rec.mdct.requantized) {
                if *q == 0 {
                    assert_eq!(*x, 0.0);
                } else {
                    assert_eq!(q.signum() as f32, x.signum());
                }
            }
        }
    }
}

#[test]
fn extraction_is_deterministic() {
    let bytes = fixture("v4_stereo.mp3");
    let a = mp3::extract_records(&bytes).unwrap();
    let b = mp3::extract_records(&bytes).unwrap();
    assert_eq!(a.frames.len(), b.frames.len());
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert_eq!(x.record.as_ref().ok(), y.record.as_ref().ok());
        assert_eq!(x.gap_before, y.gap_before);
    }
}

#[test]
fn lame_tag_metadata_is_recovered() {
    let bytes = fixture("c128_mono.mp3");
    let scan = mp3::scan(&bytes).unwrap();
    let info = scan.encoder_info.expect("LAME info tag");
    assert!(info.encoder.starts_with("LAME"));
    assert_eq!(info.delay_samples, 576);
}

#[test]
fn parser_never_panics_on_mutations() {
    // Deterministic corruption sweep over a real stream: byte flips,
    // truncations and splices must never panic or loop; they may only
    // produce errors or unusable frames.
    let bytes = fixture("c64_crc_mono.mp3");
    for i in (0..bytes.len()).step_by(97) {
        let mut corrupt = bytes.clone();
        corrupt[i] ^= 0xFF;
        let _ = mp3::extract_records(&corrupt);
        let _ = mp3::scan_frames(&corrupt[..i.max(4)]);
    }
    for cut in [1usize, 13, 101, 417, 1000] {
        let _ = mp3::extract_records(&bytes[cut.min(bytes.len())..]);
        let _ = mp3::extract_records(&bytes[..bytes.len().saturating_sub(cut)]);
    }
    let doubled = [bytes.clone(), vec![0xFF; 7], bytes.clone()].concat();
    let extraction = mp3::extract_records(&doubled).unwrap();
    assert!(extraction.frames.len() >= 120);
}
