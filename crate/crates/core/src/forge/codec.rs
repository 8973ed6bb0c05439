//! Subprocess invocation of the configured encoder/decoder executables.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::config::{DecoderConfig, EncoderConfig, ToolConfig};
use crate::mp3;

use super::{CompressionSpec, EncoderId, ForgeError, RateMode};

/// Version strings reported by the configured executables at probe time.
#[derive(Debug, Clone)]
pub struct ProbedVersions {
    pub encoder_a: String,
    pub encoder_b: String,
    pub decoder: String,
}

/// Decoded PCM with its WAV parameters.
#[derive(Debug, Clone)]
pub struct DecodedAudio {
    pub samples: Vec<i16>,
    pub channels: u16,
    pub sample_rate: u32,
}

impl DecodedAudio {
    pub fn frames_of_samples(&self) -> usize {
        self.samples.len() / self.channels as usize
    }
}

/// The probed codec toolchain used by the forge.
pub struct CodecRig {
    config: ToolConfig,
    pub versions: ProbedVersions,
}

fn run_version(path: &str, args: &[String]) -> Result<String, ForgeError> {
    let out = Command::new(path)
        .args(args)
        .output()
        .map_err(|e| ForgeError::EncoderFailure(format!("{path}: {e}")))?;
    if !out.status.success() {
        return Err(ForgeError::EncoderFailure(format!(
            "{path} version probe exited with {}",
            out.status
        )));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    Ok(text.lines().next().unwrap_or("").trim().to_string())
}

fn substitute(template: &[String], vars: &[(&str, String)]) -> Vec<String> {
    template
        .iter()
        .map(|arg| {
            let mut s = arg.clone();
            for (k, v) in vars {
                s = s.replace(&format!("{{{k}}}"), v);
            }
            s
        })
        .collect()
}

impl CodecRig {
    /// Probe all three executables and capture their version strings.
    pub fn probe(config: ToolConfig) -> Result<Self, ForgeError> {
        let versions = ProbedVersions {
            encoder_a: run_version(&config.encoder_a.path, &config.encoder_a.version_args)?,
            encoder_b: run_version(&config.encoder_b.path, &config.encoder_b.version_args)?,
            decoder: run_version(&config.decoder.path, &config.decoder.version_args)?,
        };
        Ok(CodecRig { config, versions })
    }

    fn encoder(&self, id: EncoderId) -> &EncoderConfig {
        match id {
            EncoderId::A => &self.config.encoder_a,
            EncoderId::B => &self.config.encoder_b,
        }
    }

    fn decoder(&self) -> &DecoderConfig {
        &self.config.decoder
    }

    /// Encode `wav_in` to `mp3_out` with the given compression setting.
    pub fn encode(
        &self,
        spec: CompressionSpec,
        wav_in: &Path,
        mp3_out: &Path,
    ) -> Result<(), ForgeError> {
        let enc = self.encoder(spec.encoder);
        let (template, value_key, value) = match spec.mode {
            RateMode::Cbr => (&enc.cbr_args, "bitrate", spec.value.to_string()),
            RateMode::Vbr => (&enc.vbr_args, "quality", spec.value.to_string()),
        };
        let args = substitute(
            template,
            &[
                ("input", wav_in.display().to_string()),
                ("output", mp3_out.display().to_string()),
                (value_key, value),
            ],
        );
        let out = Command::new(&enc.path)
            .args(&args)
            .output()
            .map_err(|e| ForgeError::EncoderFailure(format!("{}: {e}", enc.path)))?;
        if !out.status.success() {
            return Err(ForgeError::EncoderFailure(format!(
                "{} {:?} exited with {}: {}",
                enc.path,
                args,
                out.status,
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        if !mp3_out.exists() {
            return Err(ForgeError::EncoderFailure(format!(
                "{} produced no output file",
                enc.path
            )));
        }
        Ok(())
    }

    /// Decode `mp3_in` to PCM via the decoder executable.
    pub fn decode(&self, mp3_in: &Path, wav_out: &Path) -> Result<DecodedAudio, ForgeError> {
        let dec = self.decoder();
        let args = substitute(
            &dec.args,
            &[
                ("input", mp3_in.display().to_string()),
                ("output", wav_out.display().to_string()),
            ],
        );
        let out = Command::new(&dec.path)
            .args(&args)
            .output()
            .map_err(|e| ForgeError::DecoderFailure(format!("{}: {e}", dec.path)))?;
        if !out.status.success() {
            return Err(ForgeError::DecoderFailure(format!(
                "{} {:?} exited with {}: {}",
                dec.path,
                args,
                out.status,
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        read_wav(wav_out)
    }

    /// Compress and decompress `samples` once, returning exactly as many
    /// samples as went in: the decoder's leading delay (encoder delay from
    /// the stream's info tag when present, else the configured fallback,
    /// plus the decoder filterbank delay) is trimmed, and the tail padding
    /// cut to length.
    pub fn round_trip(
        &self,
        spec: CompressionSpec,
        samples: &[i16],
        channels: u16,
        sample_rate: u32,
        workdir: &Path,
        tag: &str,
    ) -> Result<Vec<i16>, ForgeError> {
        let wav_in = workdir.join(format!("{tag}.wav"));
        let mp3_path = workdir.join(format!("{tag}.mp3"));
        let wav_out = workdir.join(format!("{tag}.dec.wav"));
        write_wav(&wav_in, samples, channels, sample_rate)?;
        self.encode(spec, &wav_in, &mp3_path)?;

        let delay = self.stream_delay(&mp3_path, spec.encoder)?;
        let decoded = self.decode(&mp3_path, &wav_out)?;
        if decoded.channels != channels {
            return Err(ForgeError::DecoderFailure(format!(
                "round trip changed channel count: {} -> {}",
                channels, decoded.channels
            )));
        }

        let ch = channels as usize;
        let skip = delay as usize * ch;
        let want = samples.len();
        if decoded.samples.len() < skip + want {
            return Err(ForgeError::DecoderFailure(format!(
                "decoded stream too short: {} samples, need {}",
                decoded.samples.len(),
                skip + want
            )));
        }
        Ok(decoded.samples[skip..skip + want].to_vec())
    }

    /// Total leading delay of an encode/decode round trip for this stream,
    /// in per-channel samples.
    pub fn stream_delay(&self, mp3_path: &Path, encoder: EncoderId) -> Result<u32, ForgeError> {
        let encoder_delay = self.encoder_delay(mp3_path, encoder)?;
        Ok(encoder_delay + self.decoder().decoder_delay_samples)
    }

    /// Encoder delay recorded in the stream's info tag, or the configured
    /// per-encoder fallback.
    pub fn encoder_delay(&self, mp3_path: &Path, encoder: EncoderId) -> Result<u32, ForgeError> {
        let bytes = std::fs::read(mp3_path)?;
        let info = mp3::scan(&bytes)?.encoder_info;
        Ok(info
            .map(|i| i.delay_samples)
            .unwrap_or(self.encoder(encoder).delay_samples))
    }
}

/// Write 16-bit PCM to a WAV file.
pub fn write_wav(
    path: &Path,
    samples: &[i16],
    channels: u16,
    sample_rate: u32,
) -> Result<(), ForgeError> {
    let spec = hound::WavSpec {
        channels,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Read a WAV file as interleaved 16-bit PCM, converting wider integer or
/// float formats down.
pub fn read_wav(path: &Path) -> Result<DecodedAudio, ForgeError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let samples: Vec<i16> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .collect::<Result<_, _>>()
            .map_err(ForgeError::Wav)?,
        (hound::SampleFormat::Int, bits) if bits <= 32 => {
            let shift = bits.saturating_sub(16);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v >> shift) as i16))
                .collect::<Result<_, _>>()
                .map_err(ForgeError::Wav)?
        }
        (hound::SampleFormat::Float, _) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| (v.clamp(-1.0, 1.0) * 32767.0) as i16))
            .collect::<Result<_, _>>()
            .map_err(ForgeError::Wav)?,
        (f, b) => {
            return Err(ForgeError::DecoderFailure(format!(
                "unsupported WAV sample format {f:?}/{b}"
            )))
        }
    };
    Ok(DecodedAudio {
        samples,
        channels: spec.channels,
        sample_rate: spec.sample_rate,
    })
}

/// Path of a fresh working directory under `base`.
pub fn scratch_dir(base: &Path, tag: &str) -> Result<PathBuf, ForgeError> {
    let dir = base.join(tag);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_substitution_fills_placeholders() {
        let args = substitute(
            &[
                "--cbr".into(),
                "{bitrate}".into(),
                "{input}".into(),
                "{output}".into(),
            ],
            &[
                ("bitrate", "128".into()),
                ("input", "a.wav".into()),
                ("output", "a.mp3".into()),
            ],
        );
        assert_eq!(args, vec!["--cbr", "128", "a.wav", "a.mp3"]);
    }

    #[test]
    fn wav_round_trip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<i16> = (0..4096).map(|i| ((i * 37) % 9973) as i16 - 4000).collect();
        write_wav(&path, &samples, 1, 44100).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples, samples);
        assert_eq!(back.channels, 1);
        assert_eq!(back.sample_rate, 44100);
    }

    #[test]
    fn failing_executable_reports_encoder_failure() {
        let cfg = ToolConfig::helper_binaries("/bin/false", "/bin/false");
        // /bin/false exits nonzero on the version probe already.
        assert!(matches!(
            CodecRig::probe(cfg),
            Err(ForgeError::EncoderFailure(_))
        ));
    }
}
