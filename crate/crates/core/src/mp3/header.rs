//! Frame sync, header decoding and metadata-tag handling.

use super::{FrameHeader, Mp3Error};

/// Channel configuration from the header's mode bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    Stereo,
    Joint,
    Dual,
    Mono,
}

const BITRATES_V1_L3: [u32; 16] = [
    0, 32, 40, 48, 56, 64, 80, 96, 112, 128, 160, 192, 224, 256, 320, 0,
];
const SAMPLE_RATES_V1: [u32; 4] = [44100, 48000, 32000, 0];

/// Encoder delay/padding recovered from a LAME/Lavc info tag, plus the raw
/// encoder string. Needed to align decoded samples with the encoder input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInfo {
    pub encoder: String,
    pub delay_samples: u32,
    pub padding_samples: u32,
}

/// Result of walking a byte stream for audio frames.
#[derive(Debug)]
pub struct ScanResult {
    /// Audio frames in file order; Xing/Info tag frames are excluded.
    pub frames: Vec<FrameHeader>,
    /// Present when the stream carries a Xing/Info frame with a LAME-style
    /// extension block.
    pub encoder_info: Option<EncoderInfo>,
    /// Byte offsets where resynchronization skipped garbage. A frame whose
    /// predecessor does not end exactly at its own offset sits after a gap.
    pub resync_offsets: Vec<usize>,
}

fn parse_header_at(bytes: &[u8], offset: usize) -> Option<FrameHeader> {
    if offset + 4 > bytes.len() {
        return None;
    }
    let b = &bytes[offset..offset + 4];
    if b[0] != 0xFF || b[1] & 0xE0 != 0xE0 {
        return None;
    }
    let version_bits = (b[1] >> 3) & 0x3;
    let layer_bits = (b[1] >> 1) & 0x3;
    if version_bits != 0b11 || layer_bits != 0b01 {
        return None; // not MPEG-1 Layer III
    }
    let bitrate_idx = (b[2] >> 4) as usize;
    let rate_idx = ((b[2] >> 2) & 0x3) as usize;
    if bitrate_idx == 0 || bitrate_idx == 15 || rate_idx == 3 {
        return None; // free-format or reserved
    }
    let bitrate_kbps = BITRATES_V1_L3[bitrate_idx];
    let sampling_rate = SAMPLE_RATES_V1[rate_idx];
    let padding = (b[2] >> 1) & 1 == 1;
    let channel_mode = match (b[3] >> 6) & 0x3 {
        0 => ChannelMode::Stereo,
        1 => ChannelMode::Joint,
        2 => ChannelMode::Dual,
        _ => ChannelMode::Mono,
    };
    let frame_len = (144 * bitrate_kbps as usize * 1000) / sampling_rate as usize
        + if padding { 1 } else { 0 };
    Some(FrameHeader {
        byte_offset: offset,
        version: 1,
        layer: 3,
        bitrate_kbps,
        sampling_rate,
        padding,
        channel_mode,
        crc_protected: b[1] & 1 == 0,
        frame_len,
    })
}

/// True when the candidate header at `offset` is followed either by the end
/// of the stream or by another header consistent with it. Guards against
/// false syncs inside payload bytes.
fn plausible_at(bytes: &[u8], h: &FrameHeader) -> bool {
    let next = h.byte_offset + h.frame_len;
    if next + 4 > bytes.len() {
        // Accept a trailing frame only if it fits completely.
        return h.byte_offset + h.frame_len <= bytes.len();
    }
    match parse_header_at(bytes, next) {
        Some(n) => n.sampling_rate == h.sampling_rate && n.channel_mode == h.channel_mode,
        None => {
            // Allow a final frame followed by non-frame trailer data (e.g.
            // an ID3v1 tag) instead of rejecting the whole stream.
            bytes.len() - next < 192 || bytes[next..next + 3] == *b"TAG"
        }
    }
}

/// Length of an ID3v2 tag starting at `offset`, if one is present.
fn id3v2_len(bytes: &[u8], offset: usize) -> Option<usize> {
    let b = bytes.get(offset..offset + 10)?;
    if &b[0..3] != b"ID3" {
        return None;
    }
    // Syncsafe 28-bit size, excludes the 10-byte header itself.
    let size = ((b[6] as usize & 0x7F) << 21)
        | ((b[7] as usize & 0x7F) << 14)
        | ((b[8] as usize & 0x7F) << 7)
        | (b[9] as usize & 0x7F);
    let footer = if b[5] & 0x10 != 0 { 10 } else { 0 };
    Some(10 + size + footer)
}

/// Detect a Xing/Info metadata frame and pull the LAME extension if present.
fn xing_info(bytes: &[u8], h: &FrameHeader) -> Option<Option<EncoderInfo>> {
    let tag_at = h.byte_offset + h.side_info_offset() + h.side_info_len();
    let magic = bytes.get(tag_at..tag_at + 4)?;
    if magic != b"Xing" && magic != b"Info" {
        return None;
    }
    let mut pos = tag_at + 4;
    let flags = u32::from_be_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?);
    pos += 4;
    for bit in 0..4 {
        if flags & (1 << bit) != 0 {
            pos += if bit == 2 { 100 } else { 4 }; // TOC is 100 bytes
        }
    }
    // LAME-style extension: 9-byte encoder string, then 12 bytes of encoder
    // settings, then 12+12 bits of delay/padding.
    let ext = bytes.get(pos..pos + 24)?;
    let encoder = String::from_utf8_lossy(&ext[0..9]).trim_end_matches('\0').to_string();
    if !encoder.starts_with("LAME") && !encoder.starts_with("Lavc") && !encoder.starts_with("Lavf")
    {
        return Some(None);
    }
    let d = &ext[21..24];
    let delay = (u32::from(d[0]) << 4) | (u32::from(d[1]) >> 4);
    let padding = ((u32::from(d[1]) & 0xF) << 8) | u32::from(d[2]);
    Some(Some(EncoderInfo {
        encoder,
        delay_samples: delay,
        padding_samples: padding,
    }))
}

/// Rough classifier for frames of formats we do not decode, used only to
/// distinguish `UnsupportedFormat` from `NoFramesFound`.
fn foreign_frame_len(bytes: &[u8], offset: usize) -> Option<usize> {
    let b = bytes.get(offset..offset + 4)?;
    if b[0] != 0xFF || b[1] & 0xE0 != 0xE0 {
        return None;
    }
    let version_bits = (b[1] >> 3) & 0x3;
    let layer_bits = (b[1] >> 1) & 0x3;
    if version_bits == 0b01 || layer_bits == 0b00 {
        return None;
    }
    if version_bits == 0b11 && layer_bits == 0b01 {
        return None; // that's ours
    }
    // Close enough for stepping over: MPEG-2/2.5 Layer III or Layers I/II.
    Some(144)
}

/// Walk `bytes` and return every audio frame plus stream metadata.
///
/// ID3v2 tags and Xing/Info encoder frames are skipped. After corrupt bytes
/// the scanner searches forward for the next sync whose following header is
/// consistent. Never reads past the end of the input.
pub fn scan(bytes: &[u8]) -> Result<ScanResult, Mp3Error> {
    let mut frames = Vec::new();
    let mut encoder_info = None;
    let mut resync_offsets = Vec::new();
    let mut foreign = 0usize;

    let mut pos = 0usize;
    let mut expected = None::<usize>;
    let mut skipped_since_frame = false;
    while pos + 4 <= bytes.len() {
        if let Some(skip) = id3v2_len(bytes, pos) {
            pos += skip.min(bytes.len() - pos);
            continue;
        }
        // A header continuing the previous frame is trusted on its own;
        // when (re)acquiring sync, the following header must corroborate it.
        let synced = expected == Some(pos);
        let candidate = parse_header_at(bytes, pos)
            .filter(|h| (synced && pos + h.frame_len <= bytes.len()) || plausible_at(bytes, h));
        match candidate {
            Some(h) => {
                if let Some(info) = xing_info(bytes, &h) {
                    if encoder_info.is_none() {
                        encoder_info = info;
                    }
                } else {
                    if skipped_since_frame && !frames.is_empty() {
                        resync_offsets.push(pos);
                    }
                    frames.push(h);
                }
                skipped_since_frame = false;
                expected = Some(pos + h.frame_len);
                pos += h.frame_len;
            }
            None => {
                if foreign_frame_len(bytes, pos).is_some() {
                    foreign += 1;
                }
                skipped_since_frame = true;
                pos += 1;
            }
        }
    }

    if frames.is_empty() {
        if foreign > 8 {
            return Err(Mp3Error::UnsupportedFormat(
                "stream contains no MPEG-1 Layer III frames".into(),
            ));
        }
        return Err(Mp3Error::NoFramesFound);
    }
    Ok(ScanResult {
        frames,
        encoder_info,
        resync_offsets,
    })
}

/// Headers of all audio frames in file order.
pub fn scan_frames(bytes: &[u8]) -> Result<Vec<FrameHeader>, Mp3Error> {
    Ok(scan(bytes)?.frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_has_no_frames() {
        assert!(matches!(scan_frames(&[]), Err(Mp3Error::NoFramesFound)));
        assert!(matches!(scan_frames(&[0u8; 64]), Err(Mp3Error::NoFramesFound)));
    }

    /// 128 kbps, 44.1 kHz, mono, no padding, no CRC.
    pub(crate) fn test_header_bytes() -> [u8; 4] {
        [0xFF, 0xFB, 0x90, 0xC4]
    }

    #[test]
    fn cbr128_frames_are_417_bytes_apart() {
        let mut data = Vec::new();
        for _ in 0..5 {
            let mut frame = vec![0u8; 417];
            frame[..4].copy_from_slice(&test_header_bytes());
            data.extend_from_slice(&frame);
        }
        let frames = scan_frames(&data).unwrap();
        assert_eq!(frames.len(), 5);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.byte_offset, i * 417);
            assert_eq!(f.frame_len, 417);
            assert_eq!(f.bitrate_kbps, 128);
            assert_eq!(f.sampling_rate, 44100);
        }
    }

    #[test]
    fn id3v2_prefix_shifts_offsets() {
        let mut frame = vec![0u8; 417];
        frame[..4].copy_from_slice(&test_header_bytes());
        let mut tagged = vec![
            b'I', b'D', b'3', 3, 0, 0, // version + flags
            0, 0, 0, 10, // syncsafe size: 10 payload bytes
        ];
        tagged.extend_from_slice(&[0u8; 10]);
        tagged.extend_from_slice(&frame);
        tagged.extend_from_slice(&frame);

        let plain = scan_frames(&[frame.clone(), frame.clone()].concat()).unwrap();
        let shifted = scan_frames(&tagged).unwrap();
        assert_eq!(plain.len(), shifted.len());
        for (p, s) in plain.iter().zip(&shifted) {
            assert_eq!(s.byte_offset, p.byte_offset + 20);
        }
    }

    #[test]
    fn resynchronizes_after_garbage() {
        let mut frame = vec![0u8; 417];
        frame[..4].copy_from_slice(&test_header_bytes());
        // Two synced frames, a corrupt gap, two more frames: the frame
        // before the gap is kept (it continued a synced run) and scanning
        // resumes at the next corroborated header.
        let mut data = [frame.clone(), frame.clone()].concat();
        data.extend_from_slice(&[0xAA; 33]);
        data.extend_from_slice(&frame);
        data.extend_from_slice(&frame);
        let result = scan(&data).unwrap();
        assert_eq!(result.frames.len(), 4);
        assert_eq!(result.resync_offsets, vec![2 * 417 + 33]);
        assert_eq!(result.frames[2].byte_offset, 2 * 417 + 33);
    }
}
