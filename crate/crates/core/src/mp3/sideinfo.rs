//! Side information decoding for granule 0, channel 0.

use super::bits::BitReader;
use super::{BlockType, FrameHeader, Mp3Error, SideInfo};

/// Parse the side information block of `frame` (raw frame bytes starting at
/// the frame header) and return the fields of granule 0, channel 0.
///
/// The block layout is: `main_data_begin` (9 bits), private bits (5 mono /
/// 3 stereo), scfsi (4 bits per channel), then per granule and channel 59
/// bits of granule data. Only the first granule-channel is decoded; scfsi
/// never suppresses granule-0 scalefactors, so it is skipped.
pub fn parse_side_info(frame: &[u8], header: &FrameHeader) -> Result<SideInfo, Mp3Error> {
    let start = header.side_info_offset();
    let end = start + header.side_info_len();
    if frame.len() < end {
        return Err(Mp3Error::TruncatedFrame {
            offset: header.byte_offset,
        });
    }
    let mut bits = BitReader::new(&frame[start..end]);

    let main_data_begin = bits.read(9)?;
    let (private, scfsi_bits) = if header.channels() == 1 { (5, 4) } else { (3, 8) };
    bits.skip(private + scfsi_bits)?;

    let part2_3_length = bits.read(12)?;
    let big_values = bits.read(9)?;
    if big_values > 288 {
        return Err(Mp3Error::ReservedValue("big_values > 288"));
    }
    let global_gain = bits.read(8)?;
    let scalefac_compress = bits.read(4)?;
    let window_switching_flag = bits.read_bit()?;

    let side = if window_switching_flag {
        let block_type = match bits.read(2)? {
            0 => return Err(Mp3Error::ReservedValue("block_type 00 with window switching")),
            1 => BlockType::Start,
            2 => BlockType::Short,
            _ => BlockType::Stop,
        };
        let mixed_block_flag = bits.read_bit()?;
        let table_select = [bits.read(5)?, bits.read(5)?, 0];
        let subblock_gain = [bits.read(3)?, bits.read(3)?, bits.read(3)?];
        // Region counts are implicit when window switching is active: the
        // first region ends after 36 spectral lines, the second covers the
        // remaining big values.
        let region0_count = if block_type == BlockType::Short && !mixed_block_flag {
            8
        } else {
            7
        };
        SideInfo {
            main_data_begin,
            part2_3_length,
            big_values,
            global_gain,
            scalefac_compress,
            window_switching_flag,
            block_type,
            mixed_block_flag,
            table_select,
            subblock_gain,
            region0_count,
            region1_count: 0,
            preflag: false,
            scalefac_scale: false,
            count1table_select: false,
        }
    } else {
        let table_select = [bits.read(5)?, bits.read(5)?, bits.read(5)?];
        let region0_count = bits.read(4)?;
        let region1_count = bits.read(3)?;
        SideInfo {
            main_data_begin,
            part2_3_length,
            big_values,
            global_gain,
            scalefac_compress,
            window_switching_flag,
            block_type: BlockType::Normal,
            mixed_block_flag: false,
            table_select,
            subblock_gain: [0; 3],
            region0_count,
            region1_count,
            preflag: false,
            scalefac_scale: false,
            count1table_select: false,
        }
    };

    let preflag = bits.read_bit()?;
    let scalefac_scale = bits.read_bit()?;
    let count1table_select = bits.read_bit()?;
    Ok(SideInfo {
        preflag,
        scalefac_scale,
        count1table_select,
        ..side
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mp3::header::scan_frames;

    fn mono_header() -> FrameHeader {
        let mut frame = vec![0u8; 417];
        frame[..4].copy_from_slice(&[0xFF, 0xFB, 0x90, 0xC4]);
        scan_frames(&frame).unwrap()[0]
    }

    #[test]
    fn all_zero_side_info_decodes_to_zero_fields() {
        let frame = vec![0u8; 417];
        let side = parse_side_info(&frame, &mono_header()).unwrap();
        assert_eq!(side.part2_3_length, 0);
        assert_eq!(side.big_values, 0);
        assert_eq!(side.block_type, BlockType::Normal);
        assert!(!side.window_switching_flag);
        assert_eq!(side.main_data_begin, 0);
        assert_eq!(side.table_select, [0, 0, 0]);
    }

    #[test]
    fn window_switching_with_reserved_block_type_is_rejected() {
        let mut frame = vec![0u8; 417];
        // Bit 39 of the side info block (after 9+5+4+12+9+8+4 = 51 bits
        // relative to side-info start) is window_switching_flag; block_type
        // bits follow. Side info starts at byte 4.
        // Set window_switching_flag = 1 and leave block_type = 00.
        let bitpos = 4 * 8 + 9 + 5 + 4 + 12 + 9 + 8 + 4;
        frame[bitpos / 8] |= 0x80 >> (bitpos % 8);
        let err = parse_side_info(&frame, &mono_header()).unwrap_err();
        assert!(matches!(err, Mp3Error::ReservedValue(_)));
    }

    #[test]
    fn truncated_frame_is_rejected() {
        let frame = vec![0u8; 12];
        let err = parse_side_info(&frame, &mono_header()).unwrap_err();
        assert!(matches!(err, Mp3Error::TruncatedFrame { .. }));
    }
}
