//! Scalefactor decoding for granule 0, channel 0.

use super::bits::BitReader;
use super::tables::SLEN;
use super::{BlockType, Mp3Error, ScaleFactorLayout, ScaleFactors, SideInfo};

/// Decode the scalefactors of granule 0, channel 0 from `bits`, which must
/// be positioned at the start of the granule's main data.
///
/// Granule 0 always transmits its full scalefactor set (scfsi only lets
/// granule 1 reuse them), so no previous-frame context is needed. Bit
/// consumption is exactly the slen-weighted band count of the layout:
/// long blocks read 11 x slen1 + 10 x slen2 bits, short blocks
/// 18 x slen1 + 18 x slen2, mixed blocks 17 x slen1 + 18 x slen2.
pub fn decode_scalefactors(bits: &mut BitReader<'_>, side: &SideInfo) -> Result<ScaleFactors, Mp3Error> {
    let (slen1, slen2) = SLEN[side.scalefac_compress as usize];
    let short = side.block_type == BlockType::Short && side.window_switching_flag;

    if !short {
        let mut sf = ScaleFactors::zeroed(ScaleFactorLayout::Long);
        for band in 0..21 {
            let width = if band < 11 { slen1 } else { slen2 };
            sf.long[band] = bits.read(width)?;
        }
        return Ok(sf);
    }

    if side.mixed_block_flag {
        let mut sf = ScaleFactors::zeroed(ScaleFactorLayout::Mixed);
        for band in 0..8 {
            sf.long[band] = bits.read(slen1)?;
        }
        for band in 3..12 {
            let width = if band < 6 { slen1 } else { slen2 };
            for window in 0..3 {
                sf.short[band][window] = bits.read(width)?;
            }
        }
        Ok(sf)
    } else {
        let mut sf = ScaleFactors::zeroed(ScaleFactorLayout::Short);
        for band in 0..12 {
            let width = if band < 6 { slen1 } else { slen2 };
            for window in 0..3 {
                sf.short[band][window] = bits.read(width)?;
            }
        }
        Ok(sf)
    }
}

/// Bits occupied by the scalefactors of granule 0 for this side info
/// ("part 2" of part2_3_length).
pub(crate) fn scalefactor_bits(side: &SideInfo) -> u32 {
    let (slen1, slen2) = SLEN[side.scalefac_compress as usize];
    if side.block_type == BlockType::Short && side.window_switching_flag {
        if side.mixed_block_flag {
            17 * slen1 + 18 * slen2
        } else {
            18 * slen1 + 18 * slen2
        }
    } else {
        11 * slen1 + 10 * slen2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn side_with(scalefac_compress: u32, block_type: BlockType, wsf: bool, mixed: bool) -> SideInfo {
        SideInfo {
            main_data_begin: 0,
            part2_3_length: 0,
            big_values: 0,
            global_gain: 0,
            scalefac_compress,
            window_switching_flag: wsf,
            block_type,
            mixed_block_flag: mixed,
            table_select: [0; 3],
            subblock_gain: [0; 3],
            region0_count: 0,
            region1_count: 0,
            preflag: false,
            scalefac_scale: false,
            count1table_select: false,
        }
    }

    #[test]
    fn compress_zero_reads_no_bits() {
        let data = [0xFFu8; 8];
        let mut bits = BitReader::new(&data);
        let sf = decode_scalefactors(&mut bits, &side_with(0, BlockType::Normal, false, false)).unwrap();
        assert_eq!(bits.position(), 0);
        assert!(sf.long.iter().all(|&v| v == 0));
        assert_eq!(sf.layout, ScaleFactorLayout::Long);
    }

    #[test]
    fn short_blocks_populate_short_layout_only() {
        let data = [0xFFu8; 32];
        let mut bits = BitReader::new(&data);
        let side = side_with(5, BlockType::Short, true, false); // slen1 = slen2 = 1
        let sf = decode_scalefactors(&mut bits, &side).unwrap();
        assert_eq!(sf.layout, ScaleFactorLayout::Short);
        assert_eq!(bits.position(), 36);
        assert!(sf.long.iter().all(|&v| v == 0));
        assert!(sf.short.iter().flatten().all(|&v| v == 1));
        assert_eq!(bits.position() as u32, scalefactor_bits(&side));
    }

    #[test]
    fn long_block_bit_budget_matches_slen_accounting() {
        for compress in 0..16u32 {
            let data = [0xAAu8; 32];
            let mut bits = BitReader::new(&data);
            let side = side_with(compress, BlockType::Normal, false, false);
            decode_scalefactors(&mut bits, &side).unwrap();
            assert_eq!(bits.position() as u32, scalefactor_bits(&side));
        }
    }

    #[test]
    fn mixed_block_bit_budget_matches_slen_accounting() {
        for compress in 0..16u32 {
            let data = [0x55u8; 64];
            let mut bits = BitReader::new(&data);
            let side = side_with(compress, BlockType::Short, true, true);
            decode_scalefactors(&mut bits, &side).unwrap();
            assert_eq!(bits.position() as u32, scalefactor_bits(&side));
        }
    }

    #[test]
    fn exhausted_cursor_underflows() {
        let data = [0u8; 1];
        let mut bits = BitReader::new(&data);
        let side = side_with(15, BlockType::Normal, false, false); // 4/3 bit widths
        assert!(matches!(
            decode_scalefactors(&mut bits, &side),
            Err(Mp3Error::BitUnderflow)
        ));
    }
}
