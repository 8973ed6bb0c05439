//! Huffman decoding of the spectral data (big values, count1 and rzero
//! regions) for granule 0, channel 0.

use std::sync::OnceLock;

use super::bits::BitReader;
use super::scalefactors::scalefactor_bits;
use super::tables::{self, PairCodebook};
use super::{Mp3Error, SideInfo, SPECTRUM_LEN};

/// Binary prefix tree over codewords. Entries > 0 are child node indices,
/// entries < 0 encode a leaf as `-(value + 1)`, 0 marks a missing branch.
struct PrefixTree {
    nodes: Vec<[i32; 2]>,
}

impl PrefixTree {
    fn new() -> Self {
        Self { nodes: vec![[0, 0]] }
    }

    fn insert(&mut self, code: u32, len: u8, value: u16) {
        let mut node = 0usize;
        for depth in (0..len).rev() {
            let bit = ((code >> depth) & 1) as usize;
            let next = self.nodes[node][bit];
            if next > 0 {
                node = next as usize;
            } else {
                assert_eq!(next, 0, "codeword prefix collision");
                if depth == 0 {
                    self.nodes[node][bit] = -(i32::from(value) + 1);
                    return;
                }
                let idx = self.nodes.len() as i32;
                self.nodes.push([0, 0]);
                self.nodes[node][bit] = idx;
                node = idx as usize;
            }
        }
        unreachable!("zero-length codeword");
    }

    /// Follow bits until a leaf; `limit` is the absolute bit position the
    /// cursor may not cross while reading the codeword.
    fn walk(&self, bits: &mut BitReader<'_>, limit: usize, table: u32) -> Result<u16, Mp3Error> {
        let mut node = 0usize;
        loop {
            if bits.position() >= limit {
                return Err(Mp3Error::BitUnderflow);
            }
            let bit = bits.read(1)? as usize;
            match self.nodes[node][bit] {
                n if n > 0 => node = n as usize,
                n if n < 0 => return Ok((-(n + 1)) as u16),
                _ => return Err(Mp3Error::InvalidCodeword { table }),
            }
        }
    }
}

fn build_pair_tree(book: &PairCodebook) -> PrefixTree {
    let mut tree = PrefixTree::new();
    let dim = book.dim as usize;
    for x in 0..dim {
        for y in 0..dim {
            let idx = x * dim + y;
            let code = book.codes[idx] as u32;
            // The length tables count codeword bits plus one sign bit per
            // nonzero value; the tree wants the bare codeword length.
            let signs = u8::from(x != 0) + u8::from(y != 0);
            let len = book.lens[idx] - signs;
            if len > 0 {
                tree.insert(code, len, idx as u16);
            }
        }
    }
    tree
}

fn pair_trees() -> &'static [Option<PrefixTree>; 32] {
    static TREES: OnceLock<[Option<PrefixTree>; 32]> = OnceLock::new();
    TREES.get_or_init(|| {
        std::array::from_fn(|id| tables::PAIR_TABLES[id].as_ref().map(build_pair_tree))
    })
}

fn quad_trees() -> &'static [PrefixTree; 2] {
    static TREES: OnceLock<[PrefixTree; 2]> = OnceLock::new();
    TREES.get_or_init(|| {
        // The quad arrays store codeword plus sign-bit slots: one appended
        // zero per set value bit, counted in the length table too. Shift
        // both away to recover the bare codeword.
        let bare = |codes: &[u16; 16], lens: &[u8; 16]| {
            let mut tree = PrefixTree::new();
            for v in 0..16u32 {
                let signs = v.count_ones();
                let len = lens[v as usize] - signs as u8;
                let code = u32::from(codes[v as usize]) >> signs;
                tree.insert(code, len, v as u16);
            }
            tree
        };
        [
            bare(&tables::QUAD_A_CODES, &tables::QUAD_A_LENS),
            bare(&tables::QUAD_B_CODES, &tables::QUAD_B_LENS),
        ]
    })
}

/// Spectral-line boundaries of the three big-values regions.
///
/// With window switching the split is fixed at 36 lines; otherwise
/// `region0_count`/`region1_count` count scalefactor bands.
fn region_bounds(side: &SideInfo, sfb_long: &[u32; 23], bigvalues_end: usize) -> [usize; 3] {
    if side.window_switching_flag {
        [36.min(bigvalues_end), bigvalues_end, bigvalues_end]
    } else {
        let b0 = sfb_long[(side.region0_count as usize + 1).min(22)] as usize;
        let b1 =
            sfb_long[(side.region0_count as usize + side.region1_count as usize + 2).min(22)] as usize;
        let r0 = b0.min(bigvalues_end);
        let r1 = b1.clamp(r0, bigvalues_end);
        [r0, r1, bigvalues_end]
    }
}

/// Decode the 576 quantized spectral values of granule 0, channel 0.
///
/// `bits` must sit right after the granule's scalefactors, with position 0
/// of the reader at the start of the granule's main data; the Huffman
/// region then occupies bits up to `part2_3_length`. Consumes at most that
/// many bits. A count1 quadruple that would cross the budget is discarded,
/// the way reference decoders resolve the classic count1 overrun.
pub fn huffman_decode(
    bits: &mut BitReader<'_>,
    side: &SideInfo,
    sampling_rate: u32,
) -> Result<Vec<i32>, Mp3Error> {
    let (sfb_long, _) = tables::sfb_bounds(sampling_rate)
        .ok_or(Mp3Error::UnsupportedFormat(format!("{sampling_rate} Hz")))?;
    let limit = side.part2_3_length as usize;
    if bits.position() != scalefactor_bits(side) as usize || bits.position() > limit {
        return Err(Mp3Error::ReservedValue(
            "part2_3_length inconsistent with scalefactor bit count",
        ));
    }

    let mut out = vec![0i32; SPECTRUM_LEN];
    let bigvalues_end = (side.big_values as usize * 2).min(SPECTRUM_LEN);
    let bounds = region_bounds(side, sfb_long, bigvalues_end);

    let mut start = 0usize;
    for (region, &end) in bounds.iter().enumerate() {
        let table = side.table_select[region];
        if end > start {
            decode_pair_region(bits, &mut out[start..end], table, limit)?;
        }
        start = end;
    }

    decode_count1(bits, &mut out, bigvalues_end, side.count1table_select, limit)?;
    Ok(out)
}

fn decode_pair_region(
    bits: &mut BitReader<'_>,
    out: &mut [i32],
    table: u32,
    limit: usize,
) -> Result<(), Mp3Error> {
    debug_assert_eq!(out.len() % 2, 0);
    if table == 0 {
        return Ok(()); // table 0 codes an all-zero region with no bits
    }
    let tree = pair_trees()[table as usize]
        .as_ref()
        .ok_or(Mp3Error::InvalidCodeword { table })?;
    let book = tables::PAIR_TABLES[table as usize].as_ref().unwrap();
    let dim = book.dim as usize;

    for pair in out.chunks_exact_mut(2) {
        let idx = tree.walk(bits, limit, table)? as usize;
        let (x, y) = (idx / dim, idx % dim);
        pair[0] = read_linbits_and_sign(bits, x as i32, book.linbits, limit)?;
        pair[1] = read_linbits_and_sign(bits, y as i32, book.linbits, limit)?;
    }
    Ok(())
}

fn read_linbits_and_sign(
    bits: &mut BitReader<'_>,
    mut value: i32,
    linbits: u32,
    limit: usize,
) -> Result<i32, Mp3Error> {
    if value == 15 && linbits > 0 {
        if bits.position() + linbits as usize > limit {
            return Err(Mp3Error::BitUnderflow);
        }
        value += bits.read(linbits)? as i32;
    }
    if value != 0 {
        if bits.position() >= limit {
            return Err(Mp3Error::BitUnderflow);
        }
        if bits.read_bit()? {
            value = -value;
        }
    }
    Ok(value)
}

fn decode_count1(
    bits: &mut BitReader<'_>,
    out: &mut [i32],
    mut idx: usize,
    table_b: bool,
    limit: usize,
) -> Result<(), Mp3Error> {
    let tree = &quad_trees()[usize::from(table_b)];
    while idx < SPECTRUM_LEN && bits.position() < limit {
        let mut probe = bits.clone();
        let pattern = match tree.walk(&mut probe, limit, 32 + u32::from(table_b)) {
            Ok(p) => p,
            // A straggling partial codeword at the end of the budget is
            // padding, not data.
            Err(Mp3Error::BitUnderflow) => break,
            Err(e) => return Err(e),
        };
        let signs = u32::from(pattern).count_ones() as usize;
        if probe.position() + signs > limit {
            break;
        }
        *bits = probe;
        for k in 0..4 {
            if idx >= SPECTRUM_LEN {
                break;
            }
            if pattern & (8 >> k) != 0 {
                out[idx] = if bits.read_bit()? { -1 } else { 1 };
            }
            idx += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mp3::BlockType;

    fn zero_side() -> SideInfo {
        SideInfo {
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
        }
    }

    #[test]
    fn empty_granule_is_all_zeros() {
        let data = [0u8; 4];
        let mut bits = BitReader::new(&data);
        let out = huffman_decode(&mut bits, &zero_side(), 44100).unwrap();
        assert_eq!(out.len(), SPECTRUM_LEN);
        assert!(out.iter().all(|&v| v == 0));
        assert_eq!(bits.position(), 0);
    }

    #[test]
    fn count1_only_granule_decodes_quads() {
        // Table B: every 4-bit pattern is its own inverted codeword. Pattern
        // 0b1111 is codeword 0b0000; each set bit then takes a sign bit.
        // One quad: code 0000 + signs 1,0,1,0 -> values -1,1,-1,1.
        let data = [0b0000_1010u8, 0u8];
        let mut bits = BitReader::new(&data);
        let mut side = zero_side();
        side.count1table_select = true;
        side.part2_3_length = 8;
        let out = huffman_decode(&mut bits, &side, 44100).unwrap();
        assert_eq!(&out[0..4], &[-1, 1, -1, 1]);
        assert!(out[4..].iter().all(|&v| v == 0));
        assert_eq!(bits.position(), 8);
    }

    #[test]
    fn truncated_budget_underflows_in_big_values() {
        // big_values region with table 1 but a budget of a single bit.
        let data = [0u8; 8];
        let mut bits = BitReader::new(&data);
        let mut side = zero_side();
        side.big_values = 2;
        side.table_select = [1, 0, 0];
        side.part2_3_length = 1;
        // Table 1 codeword "1" = (0,0) consumes the single budgeted bit for
        // the first pair; the second pair must underflow.
        let err = huffman_decode(&mut bits, &side, 44100);
        assert!(matches!(err, Err(Mp3Error::BitUnderflow)));
    }

    /// The decode tables come from an encoder's source, the test oracle's
    /// lookup tables from an unrelated decoder. Agreement of every codeword
    /// (code, length, value pair) across all 32 tables pins the data.
    #[test]
    fn canonical_tables_match_reference_lut() {
        for table in 0..32usize {
            let lut = refdec::enumerate_pair_codewords(table);
            match &tables::PAIR_TABLES[table] {
                None => assert!(lut.is_empty(), "table {table} should be empty"),
                Some(book) => {
                    assert_eq!(
                        book.linbits as u8,
                        refdec::reference_linbits(table),
                        "table {table} linbits"
                    );
                    let dim = book.dim as usize;
                    let mut canon: Vec<(u32, u8, u8, u8)> = Vec::new();
                    for x in 0..dim {
                        for y in 0..dim {
                            let idx = x * dim + y;
                            let signs = u8::from(x != 0) + u8::from(y != 0);
                            canon.push((
                                book.codes[idx] as u32,
                                book.lens[idx] - signs,
                                x as u8,
                                y as u8,
                            ));
                        }
                    }
                    canon.sort_unstable();
                    assert_eq!(canon, lut, "table {table} disagrees");
                }
            }
        }
    }

    #[test]
    fn region_sum_covers_spectrum() {
        // 576 = big_values pairs + count1 quads + rzero zero-fill, by
        // construction of the output buffer.
        let data = [0u8; 4];
        let mut bits = BitReader::new(&data);
        let mut side = zero_side();
        side.part2_3_length = 0;
        let out = huffman_decode(&mut bits, &side, 44100).unwrap();
        assert_eq!(out.len(), 576);
    }
}
