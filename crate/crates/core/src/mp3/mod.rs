//! Bit-exact MPEG-1 Audio Layer III parsing.
//!
//! The parser walks the frame series of an MP3 file and recovers, per frame,
//! the codec fields of granule 0, channel 0: side information, scalefactors,
//! the 576 quantized spectral values and their requantized real amplitudes.
//! No audio is reconstructed; everything stays in the compressed domain.
//!
//! Parsing a single stream is inherently sequential because the bit
//! reservoir lets a frame's main data begin inside earlier frames. Parsed
//! records are plain immutable values and safe to move across threads.

mod bits;
mod header;
mod huffman;
mod requantize;
mod scalefactors;
mod sideinfo;
mod stream;
pub(crate) mod tables;

pub use bits::BitReader;
pub use header::{scan, scan_frames, ChannelMode, EncoderInfo, ScanResult};
pub use huffman::huffman_decode;
pub use requantize::requantize;
pub use scalefactors::decode_scalefactors;
pub use sideinfo::parse_side_info;
pub use stream::{extract_codec_record, extract_records, Extraction, FrameRecord, UnusableReason};

use thiserror::Error;

/// Samples per MPEG-1 Layer III frame.
pub const SAMPLES_PER_FRAME: usize = 1152;
/// Spectral lines per granule-channel (32 sub-bands x 18 MDCT coefficients).
pub const SPECTRUM_LEN: usize = 576;

#[derive(Debug, Error)]
pub enum Mp3Error {
    #[error("no valid MPEG-1 Layer III frames found")]
    NoFramesFound,
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("frame at byte {offset} is truncated")]
    TruncatedFrame { offset: usize },
    #[error("reserved or forbidden field value: {0}")]
    ReservedValue(&'static str),
    #[error("bitstream exhausted mid-decode")]
    BitUnderflow,
    #[error("no Huffman codeword matches (table {table})")]
    InvalidCodeword { table: u32 },
    #[error("frame {frame_index}: main_data_begin {needed} bytes precede available reservoir ({available} bytes)")]
    ReservoirUnderflow {
        frame_index: usize,
        needed: u32,
        available: usize,
    },
    #[error("frame {frame_index} is malformed: {detail}")]
    MalformedFrame { frame_index: usize, detail: String },
}

/// Header of one audio frame, located at `byte_offset` in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub byte_offset: usize,
    /// MPEG version tag from the header; this parser only accepts MPEG-1.
    pub version: u8,
    /// Layer number; always 3 here.
    pub layer: u8,
    pub bitrate_kbps: u32,
    pub sampling_rate: u32,
    pub padding: bool,
    pub channel_mode: ChannelMode,
    /// True when the CRC protection bit is active (16-bit CRC follows the header).
    pub crc_protected: bool,
    /// Total frame length in bytes, including the 4 header bytes.
    pub frame_len: usize,
}

impl FrameHeader {
    pub fn channels(&self) -> usize {
        match self.channel_mode {
            ChannelMode::Mono => 1,
            _ => 2,
        }
    }

    /// Byte length of the side information block (without header/CRC).
    pub fn side_info_len(&self) -> usize {
        if self.channels() == 1 {
            17
        } else {
            32
        }
    }

    /// Offset of the side information block relative to the frame start.
    pub fn side_info_offset(&self) -> usize {
        4 + if self.crc_protected { 2 } else { 0 }
    }
}

/// Window layout of a granule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockType {
    Normal,
    Start,
    Short,
    Stop,
}

impl BlockType {
    pub fn code(self) -> u32 {
        match self {
            BlockType::Normal => 0,
            BlockType::Start => 1,
            BlockType::Short => 2,
            BlockType::Stop => 3,
        }
    }
}

/// Side information for granule 0, channel 0.
///
/// For frames with `window_switching_flag` set, the format does not transmit
/// region counts or the third table selection; those fields hold the decoder
/// convention (`region0_count` 7, or 8 for pure short blocks; `region1_count`
/// and `table_select[2]` zero).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideInfo {
    /// Bit-reservoir backpointer in bytes.
    pub main_data_begin: u32,
    pub part2_3_length: u32,
    pub big_values: u32,
    pub global_gain: u32,
    pub scalefac_compress: u32,
    pub window_switching_flag: bool,
    pub block_type: BlockType,
    pub mixed_block_flag: bool,
    pub table_select: [u32; 3],
    pub subblock_gain: [u32; 3],
    pub region0_count: u32,
    pub region1_count: u32,
    pub preflag: bool,
    pub scalefac_scale: bool,
    pub count1table_select: bool,
}

/// Which scalefactor layout a granule uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleFactorLayout {
    Long,
    Short,
    Mixed,
}

/// Decoded scalefactors. `long` holds bands 0..21, `short` holds
/// `[band][window]` for bands 0..12. Slots outside the active layout stay
/// zero; mixed blocks use long bands 0..8 and short bands 3..12.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleFactors {
    pub layout: ScaleFactorLayout,
    pub long: [u32; 21],
    pub short: [[u32; 3]; 12],
}

impl ScaleFactors {
    pub fn zeroed(layout: ScaleFactorLayout) -> Self {
        Self {
            layout,
            long: [0; 21],
            short: [[0; 3]; 12],
        }
    }
}

/// The spectral values of granule 0, channel 0 in decode (bitstream) order.
/// `quantized[i]` and `requantized[i]` describe the same line, so signs match
/// index by index and zeros stay zeros. Short-block coefficients are not
/// reordered.
#[derive(Debug, Clone, PartialEq)]
pub struct MdctCoefficients {
    pub quantized: Vec<i32>,
    pub requantized: Vec<f32>,
}

/// Every codec field extracted from one frame (granule 0, channel 0 only).
#[derive(Debug, Clone, PartialEq)]
pub struct CodecFrameRecord {
    pub frame_index: usize,
    pub header: FrameHeader,
    pub side: SideInfo,
    pub scalefactors: ScaleFactors,
    pub mdct: MdctCoefficients,
}
