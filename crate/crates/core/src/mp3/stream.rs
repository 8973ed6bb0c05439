//! Sequential stream walking: bit-reservoir resolution and per-frame record
//! extraction.

use super::bits::BitReader;
use super::header::{scan, EncoderInfo};
use super::huffman::huffman_decode;
use super::requantize::requantize;
use super::scalefactors::decode_scalefactors;
use super::sideinfo::parse_side_info;
use super::{CodecFrameRecord, FrameHeader, MdctCoefficients, Mp3Error};

/// Why a frame could not be turned into a usable record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnusableReason {
    /// `main_data_begin` points before the data available in the reservoir
    /// (typical for the first frame of a cut stream).
    ReservoirUnderflow { needed: u32, available: usize },
    /// The frame's own bits are malformed.
    Malformed(String),
}

/// One frame of the walked stream. `gap_before` marks frames that follow a
/// resynchronization point; windows must never span such a boundary.
#[derive(Debug)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub header: FrameHeader,
    pub gap_before: bool,
    pub record: Result<CodecFrameRecord, UnusableReason>,
}

impl FrameRecord {
    pub fn usable(&self) -> bool {
        self.record.is_ok()
    }
}

/// Result of walking a whole file.
#[derive(Debug)]
pub struct Extraction {
    pub frames: Vec<FrameRecord>,
    pub encoder_info: Option<EncoderInfo>,
}

impl Extraction {
    pub fn records(&self) -> impl Iterator<Item = &CodecFrameRecord> {
        self.frames.iter().filter_map(|f| f.record.as_ref().ok())
    }
}

/// Maximum reservoir backpointer (9-bit field, in bytes).
const MAX_RESERVOIR: usize = 511;

/// Walk all frames of `bytes`, maintaining the rolling main-data buffer, and
/// extract a codec record per frame. Frames whose reservoir reference cannot
/// be satisfied or whose payload is malformed are flagged unusable, never
/// zero-filled. Identical bytes always produce identical extractions.
pub fn extract_records(bytes: &[u8]) -> Result<Extraction, Mp3Error> {
    let scan_result = scan(bytes)?;
    let mut frames = Vec::with_capacity(scan_result.frames.len());

    // Rolling main-data reservoir; `discarded` counts bytes trimmed off the
    // front so slicing works on absolute positions.
    let mut reservoir: Vec<u8> = Vec::new();
    let mut discarded = 0usize;
    let mut prev_end: Option<usize> = None;

    for (frame_index, header) in scan_result.frames.iter().enumerate() {
        let gap_before = prev_end.is_some_and(|e| e != header.byte_offset);
        if gap_before {
            // Reservoir continuity is broken; old bytes must not leak into
            // records after the gap.
            reservoir.clear();
            discarded = 0;
        }
        prev_end = Some(header.byte_offset + header.frame_len);

        let frame_bytes = &bytes[header.byte_offset..header.byte_offset + header.frame_len];
        let record = extract_one(
            frame_bytes,
            header,
            frame_index,
            &mut reservoir,
            &mut discarded,
        );
        frames.push(FrameRecord {
            frame_index,
            header: *header,
            gap_before,
            record,
        });
    }

    Ok(Extraction {
        frames,
        encoder_info: scan_result.encoder_info,
    })
}

fn extract_one(
    frame_bytes: &[u8],
    header: &FrameHeader,
    frame_index: usize,
    reservoir: &mut Vec<u8>,
    discarded: &mut usize,
) -> Result<CodecFrameRecord, UnusableReason> {
    let side = parse_side_info(frame_bytes, header)
        .map_err(|e| UnusableReason::Malformed(e.to_string()))?;

    let main_data_offset = header.side_info_offset() + header.side_info_len();
    let section_start = *discarded + reservoir.len();
    reservoir.extend_from_slice(&frame_bytes[main_data_offset.min(frame_bytes.len())..]);

    let begin = side.main_data_begin as usize;
    let available = section_start - *discarded;
    if begin > available {
        trim_reservoir(reservoir, discarded);
        return Err(UnusableReason::ReservoirUnderflow {
            needed: side.main_data_begin,
            available,
        });
    }

    let granule_start = section_start - begin - *discarded;
    let result = decode_granule(&reservoir[granule_start..], &side, header);

    trim_reservoir(reservoir, discarded);
    let (scalefactors, quantized, requantized) =
        result.map_err(|e| UnusableReason::Malformed(e.to_string()))?;
    Ok(CodecFrameRecord {
        frame_index,
        header: *header,
        side,
        scalefactors,
        mdct: MdctCoefficients {
            quantized,
            requantized,
        },
    })
}

fn decode_granule(
    data: &[u8],
    side: &super::SideInfo,
    header: &FrameHeader,
) -> Result<(super::ScaleFactors, Vec<i32>, Vec<f32>), Mp3Error> {
    if (side.part2_3_length as usize).div_ceil(8) > data.len() {
        return Err(Mp3Error::BitUnderflow);
    }
    let mut bits = BitReader::new(data);
    let scalefactors = decode_scalefactors(&mut bits, side)?;
    let quantized = huffman_decode(&mut bits, side, header.sampling_rate)?;
    let requantized = requantize(&quantized, side, &scalefactors, header.sampling_rate)?;
    Ok((scalefactors, quantized, requantized))
}

fn trim_reservoir(reservoir: &mut Vec<u8>, discarded: &mut usize) {
    if reservoir.len() > MAX_RESERVOIR {
        let cut = reservoir.len() - MAX_RESERVOIR;
        reservoir.drain(..cut);
        *discarded += cut;
    }
}

/// Extract the record of a single frame: parse the stream up to
/// `frame_index`, honoring the bit reservoir, and return that frame's
/// record. For repeated access parse once with [`extract_records`].
pub fn extract_codec_record(bytes: &[u8], frame_index: usize) -> Result<CodecFrameRecord, Mp3Error> {
    let extraction = extract_records(bytes)?;
    let frame = extraction
        .frames
        .into_iter()
        .nth(frame_index)
        .ok_or(Mp3Error::NoFramesFound)?;
    frame.record.map_err(|reason| match reason {
        UnusableReason::ReservoirUnderflow { needed, available } => Mp3Error::ReservoirUnderflow {
            frame_index,
            needed,
            available,
        },
        UnusableReason::Malformed(detail) => Mp3Error::MalformedFrame {
            frame_index,
            detail,
        },
    })
}
