//! Independent MPEG-1 Layer III field decoder used as a test oracle.
//!
//! This crate deliberately shares no code or table data with the main
//! library: the Huffman stage walks the packed lookup tables of the minimp3
//! decoder, scalefactor-band geometry comes from width lists instead of
//! boundary arrays, and the bit reader is a straight peek/flush cursor. It
//! decodes granule 0, channel 0 of every frame and stops at the codec
//! fields; no audio is reconstructed.

mod tables;

use tables::*;

/// Peek/flush bit cursor. Peeks past the end read as zeros, like the
/// reference decoder's cache refill.
pub struct RefBits<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> RefBits<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        RefBits { data, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn bit_at(&self, p: usize) -> u32 {
        let byte = p >> 3;
        if byte >= self.data.len() {
            return 0;
        }
        u32::from((self.data[byte] >> (7 - (p & 7))) & 1)
    }

    pub fn peek(&self, n: u32) -> u32 {
        let mut v = 0;
        for i in 0..n as usize {
            v = (v << 1) | self.bit_at(self.pos + i);
        }
        v
    }

    pub fn flush(&mut self, n: u32) {
        self.pos += n as usize;
    }

    pub fn get(&mut self, n: u32) -> u32 {
        let v = self.peek(n);
        self.flush(n);
        v
    }
}

/// Every field the oracle extracts from one frame (granule 0, channel 0).
#[derive(Debug, Clone)]
pub struct RefFrame {
    pub offset: usize,
    pub frame_len: usize,
    pub bitrate_kbps: u32,
    pub sampling_rate: u32,
    pub channels: u32,
    pub crc: bool,
    pub main_data_begin: u32,
    pub part2_3_length: u32,
    pub big_values: u32,
    pub global_gain: u32,
    pub scalefac_compress: u32,
    pub window_switching: bool,
    pub block_type: u32,
    pub mixed_block: bool,
    pub table_select: [u32; 3],
    pub subblock_gain: [u32; 3],
    pub region0_count: u32,
    pub region1_count: u32,
    pub preflag: bool,
    pub scalefac_scale: bool,
    pub count1table_select: bool,
    pub scalefac_long: [u32; 21],
    pub scalefac_short: [[u32; 3]; 12],
    pub quantized: Vec<i32>,
    pub requantized: Vec<f64>,
}

const BITRATES: [u32; 16] = [
    0, 32, 40, 48, 56, 64, 80, 96, 112, 128, 160, 192, 224, 256, 320, 0,
];
const RATES: [u32; 4] = [44100, 48000, 32000, 0];

struct Header {
    offset: usize,
    frame_len: usize,
    bitrate: u32,
    rate: u32,
    channels: u32,
    crc: bool,
}

fn header_at(b: &[u8], at: usize) -> Option<Header> {
    let h = b.get(at..at + 4)?;
    if h[0] != 0xFF || (h[1] & 0xFE) != 0xFA {
        // 11-bit sync + MPEG-1 (11) + Layer III (01); CRC bit free.
        return None;
    }
    let bidx = (h[2] >> 4) as usize;
    let ridx = ((h[2] >> 2) & 3) as usize;
    if bidx == 0 || bidx == 15 || ridx == 3 {
        return None;
    }
    let bitrate = BITRATES[bidx];
    let rate = RATES[ridx];
    let padding = usize::from((h[2] >> 1) & 1);
    let channels = if (h[3] >> 6) & 3 == 3 { 1 } else { 2 };
    Some(Header {
        offset: at,
        frame_len: 144_000 * bitrate as usize / rate as usize + padding,
        bitrate,
        rate,
        channels,
        crc: h[1] & 1 == 0,
    })
}

fn is_info_frame(b: &[u8], h: &Header) -> bool {
    let side = if h.channels == 1 { 17 } else { 32 };
    let at = h.offset + 4 + if h.crc { 2 } else { 0 } + side;
    matches!(b.get(at..at + 4), Some(m) if m == b"Xing" || m == b"Info")
}

/// Locate the audio frames with a plain strict walk: find the first
/// corroborated sync, then step frame by frame. No resynchronization; the
/// oracle is for clean streams.
fn walk_frames(bytes: &[u8]) -> Vec<Header> {
    let mut start = 0usize;
    let mut frames = Vec::new();
    while start + 4 <= bytes.len() {
        if let Some(h) = header_at(bytes, start) {
            let next = start + h.frame_len;
            let corroborated = next >= bytes.len()
                || matches!(header_at(bytes, next), Some(n) if n.rate == h.rate);
            if corroborated && next <= bytes.len() {
                break;
            }
        }
        start += 1;
    }
    let mut at = start;
    while let Some(h) = header_at(bytes, at) {
        if at + h.frame_len > bytes.len() {
            break;
        }
        at += h.frame_len;
        if !is_info_frame(bytes, &h) {
            frames.push(h);
        }
    }
    frames
}

struct SideInfo {
    main_data_begin: u32,
    part2_3_length: u32,
    big_values: u32,
    global_gain: u32,
    scalefac_compress: u32,
    window_switching: bool,
    block_type: u32,
    mixed_block: bool,
    table_select: [u32; 3],
    subblock_gain: [u32; 3],
    region_count: [u32; 3],
    preflag: bool,
    scalefac_scale: bool,
    count1table_select: bool,
}

fn read_side_info(frame: &[u8], channels: u32, crc: bool) -> Option<SideInfo> {
    let start = 4 + if crc { 2 } else { 0 };
    let side_len = if channels == 1 { 17 } else { 32 };
    let block = frame.get(start..start + side_len)?;
    let mut bs = RefBits::new(block);

    let main_data_begin = bs.get(9);
    bs.flush(if channels == 1 { 5 + 4 } else { 3 + 8 });

    let part2_3_length = bs.get(12);
    let big_values = bs.get(9);
    let global_gain = bs.get(8);
    let scalefac_compress = bs.get(4);
    let window_switching = bs.get(1) == 1;

    let mut block_type = 0;
    let mut mixed_block = false;
    let mut table_select = [0u32; 3];
    let mut subblock_gain = [0u32; 3];
    let mut region_count = [0u32; 3];
    if window_switching {
        block_type = bs.get(2);
        if block_type == 0 {
            return None;
        }
        mixed_block = bs.get(1) == 1;
        table_select[0] = bs.get(5);
        table_select[1] = bs.get(5);
        for g in &mut subblock_gain {
            *g = bs.get(3);
        }
        region_count[0] = if block_type == 2 && !mixed_block { 8 } else { 7 };
        region_count[1] = 255;
    } else {
        for t in &mut table_select {
            *t = bs.get(5);
        }
        region_count[0] = bs.get(4);
        region_count[1] = bs.get(3);
        region_count[2] = 255;
    }
    let preflag = bs.get(1) == 1;
    let scalefac_scale = bs.get(1) == 1;
    let count1table_select = bs.get(1) == 1;
    Some(SideInfo {
        main_data_begin,
        part2_3_length,
        big_values,
        global_gain,
        scalefac_compress,
        window_switching,
        block_type,
        mixed_block,
        table_select,
        subblock_gain,
        region_count,
        preflag,
        scalefac_scale,
        count1table_select,
    })
}

const SLEN1: [u32; 16] = [0, 0, 0, 0, 3, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4];
const SLEN2: [u32; 16] = [0, 1, 2, 3, 0, 1, 2, 3, 1, 2, 3, 1, 2, 3, 2, 3];

fn read_scalefactors(
    bs: &mut RefBits<'_>,
    side: &SideInfo,
) -> ([u32; 21], [[u32; 3]; 12]) {
    let s1 = SLEN1[side.scalefac_compress as usize];
    let s2 = SLEN2[side.scalefac_compress as usize];
    let mut long = [0u32; 21];
    let mut short = [[0u32; 3]; 12];
    if side.window_switching && side.block_type == 2 {
        if side.mixed_block {
            for v in long.iter_mut().take(8) {
                *v = bs.get(s1);
            }
            for band in 3..12 {
                let w = if band < 6 { s1 } else { s2 };
                for win in 0..3 {
                    short[band][win] = bs.get(w);
                }
            }
        } else {
            for (band, row) in short.iter_mut().enumerate() {
                let w = if band < 6 { s1 } else { s2 };
                for v in row.iter_mut() {
                    *v = bs.get(w);
                }
            }
        }
    } else {
        for (band, v) in long.iter_mut().enumerate() {
            *v = bs.get(if band < 11 { s1 } else { s2 });
        }
    }
    (long, short)
}

/// Band-entry widths of the granule in decode order (short bands tripled),
/// and the count of long entries leading the list.
fn band_widths(side: &SideInfo, rate: u32) -> (&'static [u8], usize) {
    let (long, short, mixed): (&[u8], &[u8], &[u8]) = match rate {
        44100 => (&SCF_LONG_44100, &SCF_SHORT_44100, &SCF_MIXED_44100),
        48000 => (&SCF_LONG_48000, &SCF_SHORT_48000, &SCF_MIXED_48000),
        _ => (&SCF_LONG_32000, &SCF_SHORT_32000, &SCF_MIXED_32000),
    };
    if side.window_switching && side.block_type == 2 {
        if side.mixed_block {
            (mixed, 8)
        } else {
            (short, 0)
        }
    } else {
        (long, 22)
    }
}

/// Walk one codeword through the packed pair-table LUT; returns the leaf
/// (length << 8 | y << 4 | x).
fn walk_pair_lut(bs: &mut RefBits<'_>, codebook: &[i16]) -> i16 {
    let mut w = 5u32;
    let mut leaf = codebook[bs.peek(w) as usize];
    while leaf < 0 {
        bs.flush(w);
        w = (leaf & 7) as u32;
        let jump = (-(leaf >> 3)) as usize;
        leaf = codebook[bs.peek(w) as usize + jump];
    }
    bs.flush((leaf >> 8) as u32);
    leaf
}

fn decode_spectrum(bs: &mut RefBits<'_>, side: &SideInfo, rate: u32, limit: usize) -> Vec<i32> {
    let mut out = vec![0i32; 576];
    let (widths, _) = band_widths(side, rate);

    let mut dst = 0usize;
    let mut big_pairs = side.big_values as i64;
    let mut band = 0usize;
    let mut region = 0usize;
    while big_pairs > 0 && region < 3 {
        let table = side.table_select[region] as usize;
        let mut bands_left = side.region_count[region] as i64;
        region += 1;
        let codebook = &LUT_TABS[LUT_TABINDEX[table] as usize..];
        let linbits = u32::from(LUT_LINBITS[table]);
        loop {
            let np = i64::from(widths[band] / 2);
            band += 1;
            let mut pairs = big_pairs.min(np);
            while pairs > 0 {
                let leaf = walk_pair_lut(bs, codebook);
                let mut nibble = leaf;
                for _ in 0..2 {
                    let mut v = i32::from(nibble & 0xF);
                    if v == 15 && linbits > 0 {
                        v += bs.get(linbits) as i32;
                    }
                    if v != 0 && bs.get(1) == 1 {
                        v = -v;
                    }
                    if dst < 576 {
                        out[dst] = v;
                    }
                    dst += 1;
                    nibble >>= 4;
                }
                pairs -= 1;
            }
            big_pairs -= np;
            bands_left -= 1;
            if big_pairs <= 0 || bands_left < 0 {
                break;
            }
        }
    }

    // count1 region: quad values of +-1.
    let quad: &[u8] = if side.count1table_select {
        &LUT_TAB33
    } else {
        &LUT_TAB32
    };
    while dst < 576 && bs.position() < limit {
        let mut leaf = i32::from(quad[bs.peek(4) as usize]);
        if leaf & 8 == 0 {
            let extra = bs.peek(4 + (leaf & 3) as u32) & ((1 << (leaf & 3)) - 1);
            leaf = i32::from(quad[(leaf >> 3) as usize + extra as usize]);
        }
        bs.flush((leaf & 7) as u32);
        if bs.position() > limit {
            break;
        }
        for num in 0..4 {
            if dst >= 576 {
                break;
            }
            if leaf & (128 >> num) != 0 {
                out[dst] = if bs.get(1) == 1 { -1 } else { 1 };
            }
            dst += 1;
        }
    }
    out
}

const PREAMP: [u32; 10] = [1, 1, 1, 1, 2, 2, 3, 3, 3, 2];

fn requantize(
    quantized: &[i32],
    side: &SideInfo,
    rate: u32,
    long_sf: &[u32; 21],
    short_sf: &[[u32; 3]; 12],
) -> Vec<f64> {
    let (widths, n_long) = band_widths(side, rate);
    let mult = 0.5 * (1.0 + f64::from(u8::from(side.scalefac_scale)));
    let gg = f64::from(side.global_gain) - 210.0;

    let mut exps = vec![0.0f64; 576];
    let mut i = 0usize;
    let mut short_entry = 0usize;
    for (entry, &width) in widths.iter().enumerate() {
        if width == 0 {
            break;
        }
        let e = if entry < n_long {
            // Long band `entry`: preemphasis applies to bands 11..20.
            let sf = if entry < 21 { long_sf[entry] } else { 0 };
            let pre = if side.preflag && (11..21).contains(&entry) {
                PREAMP[entry - 11]
            } else {
                0
            };
            0.25 * gg - mult * f64::from(sf + pre)
        } else {
            // Short entries come in window-major triples per band. Mixed
            // lists start at band 3.
            let band = short_entry / 3 + if n_long > 0 { 3 } else { 0 };
            let win = short_entry % 3;
            short_entry += 1;
            let sf = if band < 12 { short_sf[band][win] } else { 0 };
            0.25 * (gg - 8.0 * f64::from(side.subblock_gain[win])) - mult * f64::from(sf)
        };
        for _ in 0..width {
            if i < 576 {
                exps[i] = e;
            }
            i += 1;
        }
    }
    // Anything past the last band keeps the bare global gain.
    for k in i..576 {
        exps[k] = 0.25 * gg;
    }

    quantized
        .iter()
        .zip(&exps)
        .map(|(&q, &e)| {
            if q == 0 {
                0.0
            } else {
                f64::from(q.signum()) * f64::from(q.unsigned_abs()).powf(4.0 / 3.0) * e.exp2()
            }
        })
        .collect()
}

/// Decode every audio frame of an MP3 stream. Returns one entry per frame;
/// `Err` describes frames the oracle could not decode.
pub fn decode(bytes: &[u8]) -> Vec<Result<RefFrame, String>> {
    let headers = walk_frames(bytes);

    // Assemble the main-data stream and each frame's section start in it.
    let mut main_data = Vec::new();
    let mut section_starts = Vec::with_capacity(headers.len());
    for h in &headers {
        let start = h.offset + 4 + if h.crc { 2 } else { 0 } + if h.channels == 1 { 17 } else { 32 };
        section_starts.push(main_data.len());
        main_data.extend_from_slice(&bytes[start.min(h.offset + h.frame_len)..h.offset + h.frame_len]);
    }

    headers
        .iter()
        .zip(&section_starts)
        .map(|(h, &section)| {
            let frame = &bytes[h.offset..h.offset + h.frame_len];
            let side = read_side_info(frame, h.channels, h.crc)
                .ok_or_else(|| "bad side info".to_string())?;
            if side.big_values > 288 {
                return Err("big_values out of range".into());
            }
            let begin = side.main_data_begin as usize;
            if begin > section {
                return Err(format!("reservoir underflow: needs {begin}, have {section}"));
            }
            let granule = &main_data[section - begin..];
            let mut bs = RefBits::new(granule);
            let (long_sf, short_sf) = read_scalefactors(&mut bs, &side);
            let quantized =
                decode_spectrum(&mut bs, &side, h.rate, side.part2_3_length as usize);
            let requantized = requantize(&quantized, &side, h.rate, &long_sf, &short_sf);
            Ok(RefFrame {
                offset: h.offset,
                frame_len: h.frame_len,
                bitrate_kbps: h.bitrate,
                sampling_rate: h.rate,
                channels: h.channels,
                crc: h.crc,
                main_data_begin: side.main_data_begin,
                part2_3_length: side.part2_3_length,
                big_values: side.big_values,
                global_gain: side.global_gain,
                scalefac_compress: side.scalefac_compress,
                window_switching: side.window_switching,
                block_type: if side.window_switching { side.block_type } else { 0 },
                mixed_block: side.mixed_block,
                table_select: side.table_select,
                subblock_gain: side.subblock_gain,
                region0_count: side.region_count[0],
                region1_count: if side.window_switching { 0 } else { side.region_count[1] },
                preflag: side.preflag,
                scalefac_scale: side.scalefac_scale,
                count1table_select: side.count1table_select,
                scalefac_long: long_sf,
                scalefac_short: short_sf,
                quantized,
                requantized,
            })
        })
        .collect()
}

/// Escape-bit count of a pair table per the reference data.
pub fn reference_linbits(table: usize) -> u8 {
    LUT_LINBITS[table]
}

/// Enumerate the codewords of one packed pair LUT as (code, len, x, y).
/// Used to cross-validate the two independently sourced table sets.
pub fn enumerate_pair_codewords(table: usize) -> Vec<(u32, u8, u8, u8)> {
    let base = LUT_TABINDEX[table] as usize;
    let codebook = &LUT_TABS[base..];
    let mut out = Vec::new();
    // Depth-first over bit prefixes: the LUT consumes 5 bits at the root
    // and `leaf & 7` bits per sub-table jump; a terminal entry's upper byte
    // holds how many of the peeked bits the codeword actually uses.
    fn descend(
        codebook: &[i16],
        offset: usize,
        width: u32,
        prefix_code: u32,
        prefix_len: u8,
        out: &mut Vec<(u32, u8, u8, u8)>,
    ) {
        for bits in 0..(1u32 << width) {
            let leaf = codebook[offset + bits as usize];
            if leaf >= 0 {
                let len = (leaf >> 8) as u8;
                if len == 0 {
                    continue; // empty stub (tables 0, 4, 14)
                }
                let code = (prefix_code << len) | (bits >> (width - u32::from(len)));
                let x = (leaf & 0xF) as u8;
                let y = ((leaf >> 4) & 0xF) as u8;
                out.push((code, prefix_len + len, x, y));
            } else {
                let w = (leaf & 7) as u32;
                let jump = (-(leaf >> 3)) as usize;
                descend(
                    codebook,
                    jump,
                    w,
                    (prefix_code << width) | bits,
                    prefix_len + width as u8,
                    out,
                );
            }
        }
    }
    descend(codebook, 0, 5, 0, 0, &mut out);
    out.sort_unstable();
    out.dedup();
    out
}
