//! Thin CLI around libmp3lame for the forge's subprocess contract.
//!
//! ```text
//! mp3enc (--cbr <kbps> | --vbr <quality>) [--profile default|alt]
//!        [--crc] [--no-tag] <input.wav> <output.mp3>
//! mp3enc --version
//! ```
//!
//! The `alt` profile uses a different LAME quality preset and prepends a
//! small ID3v2 tag, so the two configured encoder slots produce genuinely
//! different streams from one binary.

use std::ffi::CStr;
use std::path::PathBuf;
use std::process::ExitCode;

use mp3lame_sys as lame;

struct Args {
    cbr: Option<u32>,
    vbr: Option<u32>,
    profile: String,
    crc: bool,
    no_tag: bool,
    input: PathBuf,
    output: PathBuf,
}

fn usage() -> ! {
    eprintln!(
        "usage: mp3enc (--cbr <kbps> | --vbr <quality 0-9>) [--profile default|alt] \
         [--crc] [--no-tag] <input.wav> <output.mp3>"
    );
    std::process::exit(2);
}

fn lame_version() -> String {
    unsafe {
        CStr::from_ptr(lame::get_lame_version())
            .to_string_lossy()
            .into_owned()
    }
}

fn parse_args() -> Args {
    let mut cbr = None;
    let mut vbr = None;
    let mut profile = "default".to_string();
    let mut crc = false;
    let mut no_tag = false;
    let mut positional = Vec::new();

    let mut it = std::env::args().skip(1);
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--version" => {
                println!("mp3enc 0.1.0 (LAME {})", lame_version());
                std::process::exit(0);
            }
            "--cbr" => cbr = it.next().and_then(|v| v.parse().ok()),
            "--vbr" => vbr = it.next().and_then(|v| v.parse().ok()),
            "--profile" => profile = it.next().unwrap_or_else(|| usage()),
            "--crc" => crc = true,
            "--no-tag" => no_tag = true,
            other if !other.starts_with('-') => positional.push(PathBuf::from(other)),
            _ => usage(),
        }
    }
    if positional.len() != 2 || (cbr.is_none() && vbr.is_none()) || (cbr.is_some() && vbr.is_some())
    {
        usage();
    }
    let output = positional.pop().unwrap();
    let input = positional.pop().unwrap();
    Args {
        cbr,
        vbr,
        profile,
        crc,
        no_tag,
        input,
        output,
    }
}

fn read_wav(path: &PathBuf) -> Result<(Vec<i16>, u16, u32), String> {
    let mut reader = hound::WavReader::open(path).map_err(|e| e.to_string())?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err("input must be 16-bit integer PCM".into());
    }
    let samples: Vec<i16> = reader
        .samples::<i16>()
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    Ok((samples, spec.channels, spec.sample_rate))
}

/// A minimal ID3v2.3 tag with one TSSE (encoder settings) text frame.
fn id3v2_tag(encoder: &str) -> Vec<u8> {
    let text = {
        let mut t = vec![0u8]; // ISO-8859-1 encoding byte
        t.extend_from_slice(encoder.as_bytes());
        t
    };
    let mut frame = b"TSSE".to_vec();
    frame.extend_from_slice(&(text.len() as u32).to_be_bytes());
    frame.extend_from_slice(&[0, 0]); // frame flags
    frame.extend_from_slice(&text);

    let size = frame.len() as u32;
    let syncsafe = [
        ((size >> 21) & 0x7F) as u8,
        ((size >> 14) & 0x7F) as u8,
        ((size >> 7) & 0x7F) as u8,
        (size & 0x7F) as u8,
    ];
    let mut tag = b"ID3".to_vec();
    tag.extend_from_slice(&[3, 0, 0]); // v2.3, no flags
    tag.extend_from_slice(&syncsafe);
    tag.extend_from_slice(&frame);
    tag
}

fn encode(args: &Args) -> Result<(), String> {
    let (samples, channels, sample_rate) = read_wav(&args.input)?;
    if !(1..=2).contains(&channels) {
        return Err(format!("unsupported channel count {channels}"));
    }
    let n_frames_pcm = samples.len() / channels as usize;

    unsafe {
        let gfp = lame::lame_init();
        if gfp.is_null() {
            return Err("lame_init failed".into());
        }
        lame::lame_set_in_samplerate(gfp, sample_rate as i32);
        lame::lame_set_out_samplerate(gfp, sample_rate as i32);
        lame::lame_set_num_channels(gfp, i32::from(channels));
        lame::lame_set_mode(
            gfp,
            if channels == 1 {
                lame::MPEG_mode::MONO
            } else {
                lame::MPEG_mode::JOINT_STEREO
            },
        );
        let quality = if args.profile == "alt" { 7 } else { 3 };
        lame::lame_set_quality(gfp, quality);
        if let Some(kbps) = args.cbr {
            lame::lame_set_VBR(gfp, lame::vbr_mode::vbr_off);
            lame::lame_set_brate(gfp, kbps as i32);
        }
        if let Some(q) = args.vbr {
            lame::lame_set_VBR(gfp, lame::vbr_mode::vbr_default);
            lame::lame_set_VBR_q(gfp, q.min(9) as i32);
        }
        lame::lame_set_bWriteVbrTag(gfp, i32::from(!args.no_tag));
        lame::lame_set_error_protection(gfp, i32::from(args.crc));
        if lame::lame_init_params(gfp) < 0 {
            lame::lame_close(gfp);
            return Err("lame_init_params rejected the configuration".into());
        }

        let mut mp3 = vec![0u8; samples.len() * 5 / 4 + 7200 + 8192];
        let written = if channels == 2 {
            lame::lame_encode_buffer_interleaved(
                gfp,
                samples.as_ptr() as *mut i16,
                n_frames_pcm as i32,
                mp3.as_mut_ptr(),
                mp3.len() as i32,
            )
        } else {
            lame::lame_encode_buffer(
                gfp,
                samples.as_ptr(),
                samples.as_ptr(),
                n_frames_pcm as i32,
                mp3.as_mut_ptr(),
                mp3.len() as i32,
            )
        };
        if written < 0 {
            lame::lame_close(gfp);
            return Err(format!("lame_encode_buffer failed ({written})"));
        }
        let mut total = written as usize;
        let flushed = lame::lame_encode_flush(
            gfp,
            mp3.as_mut_ptr().add(total),
            (mp3.len() - total) as i32,
        );
        if flushed < 0 {
            lame::lame_close(gfp);
            return Err(format!("lame_encode_flush failed ({flushed})"));
        }
        total += flushed as usize;
        mp3.truncate(total);

        // The first frame LAME emitted is a placeholder for the Xing/Info
        // tag; fill it in now so delay/padding metadata is real.
        if !args.no_tag {
            let mut tag = vec![0u8; 8192];
            let n = lame::lame_get_lametag_frame(gfp, tag.as_mut_ptr(), tag.len());
            if n > 0 && n <= tag.len() && n <= mp3.len() {
                mp3[..n].copy_from_slice(&tag[..n]);
            }
        }
        lame::lame_close(gfp);

        let mut out = Vec::new();
        if args.profile == "alt" {
            out.extend_from_slice(&id3v2_tag(&format!("mp3enc-alt (LAME {})", lame_version())));
        }
        out.extend_from_slice(&mp3);
        std::fs::write(&args.output, out).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = parse_args();
    match encode(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mp3enc: {e}");
            ExitCode::FAILURE
        }
    }
}
