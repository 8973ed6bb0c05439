//! Thin CLI around minimp3 for the forge's subprocess contract.
//!
//! ```text
//! mp3dec <input.mp3> <output.wav>
//! mp3dec --version
//! ```
//!
//! Decodes every audio frame to 16-bit PCM. ID3 tags and Xing/Info frames
//! are stripped before decoding; no gapless trimming is applied (the forge
//! does its own delay accounting).

use std::path::PathBuf;
use std::process::ExitCode;

use minimp3::{Decoder, Frame};

fn usage() -> ! {
    eprintln!("usage: mp3dec <input.mp3> <output.wav>");
    std::process::exit(2);
}

fn run(input: &PathBuf, output: &PathBuf) -> Result<(), String> {
    let bytes = std::fs::read(input).map_err(|e| e.to_string())?;
    let scan = splicetrace::mp3::scan(&bytes).map_err(|e| e.to_string())?;

    // Rebuild a clean stream of audio frames only. The info frame carries
    // no reservoir data, so dropping it cannot desynchronize main data.
    let mut clean = Vec::with_capacity(bytes.len());
    for h in &scan.frames {
        clean.extend_from_slice(&bytes[h.byte_offset..h.byte_offset + h.frame_len]);
    }

    let mut decoder = Decoder::new(std::io::Cursor::new(clean));
    let mut pcm: Vec<i16> = Vec::new();
    let mut channels = 0u16;
    let mut sample_rate = 0u32;
    loop {
        match decoder.next_frame() {
            Ok(Frame {
                data,
                sample_rate: sr,
                channels: ch,
                ..
            }) => {
                if channels == 0 {
                    channels = ch as u16;
                    sample_rate = sr as u32;
                }
                pcm.extend_from_slice(&data);
            }
            Err(minimp3::Error::Eof) => break,
            Err(e) => return Err(format!("decode: {e}")),
        }
    }
    if channels == 0 {
        return Err("no decodable frames".into());
    }

    let spec = hound::WavSpec {
        channels,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(output, spec).map_err(|e| e.to_string())?;
    for s in pcm {
        writer.write_sample(s).map_err(|e| e.to_string())?;
    }
    writer.finalize().map_err(|e| e.to_string())?;
    Ok(())
}

fn main() -> ExitCode {
    let mut args: Vec<PathBuf> = Vec::new();
    for arg in std::env::args().skip(1) {
        if arg == "--version" {
            println!("mp3dec 0.1.0 (minimp3)");
            return ExitCode::SUCCESS;
        }
        if arg.starts_with('-') {
            usage();
        }
        args.push(PathBuf::from(arg));
    }
    if args.len() != 2 {
        usage();
    }
    match run(&args[0], &args[1]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mp3dec: {e}");
            ExitCode::FAILURE
        }
    }
}
