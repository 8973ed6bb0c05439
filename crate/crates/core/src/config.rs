//! Tool configuration: external codec executables and their argument
//! templates.
//!
//! The forge never links an encoder; it shells out to whatever the config
//! points at. Argument templates use `{input}`, `{output}`, `{bitrate}`
//! (CBR, kbps) and `{quality}` (VBR index) placeholders. The config path
//! can be overridden with the `SPLICETRACE_CONFIG` environment variable.

use std::path::Path;

use serde::{Deserialize, Serialize};

/// Environment variable overriding the config file location.
pub const CONFIG_ENV: &str = "SPLICETRACE_CONFIG";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Path to the encoder executable.
    pub path: String,
    /// Arguments for a CBR encode.
    pub cbr_args: Vec<String>,
    /// Arguments for a VBR encode.
    pub vbr_args: Vec<String>,
    /// Arguments that print a version string.
    #[serde(default = "default_version_args")]
    pub version_args: Vec<String>,
    /// Encoder delay fallback (samples) when the produced stream carries no
    /// LAME-style info tag.
    #[serde(default = "default_delay")]
    pub delay_samples: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub path: String,
    pub args: Vec<String>,
    #[serde(default = "default_version_args")]
    pub version_args: Vec<String>,
    /// Synthesis-filterbank delay of the decoder in samples; added to the
    /// encoder delay when trimming round-tripped audio.
    #[serde(default = "default_decoder_delay")]
    pub decoder_delay_samples: u32,
}

fn default_version_args() -> Vec<String> {
    vec!["--version".to_string()]
}

fn default_delay() -> u32 {
    576
}

fn default_decoder_delay() -> u32 {
    529
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolConfig {
    pub encoder_a: EncoderConfig,
    pub encoder_b: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ToolConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Resolve the config path: explicit argument, else `SPLICETRACE_CONFIG`.
    pub fn resolve_path(explicit: Option<&Path>) -> Option<std::path::PathBuf> {
        explicit.map(Path::to_path_buf).or_else(|| {
            std::env::var_os(CONFIG_ENV).map(std::path::PathBuf::from)
        })
    }

    /// A config pointing both encoder slots at one LAME-backed helper binary
    /// with two different quality profiles, and the decoder at a companion
    /// decode helper. Used by tests and as a starting template.
    pub fn helper_binaries(enc_path: &str, dec_path: &str) -> Self {
        let enc = |extra: &[&str]| EncoderConfig {
            path: enc_path.to_string(),
            cbr_args: ["--cbr", "{bitrate}"]
                .iter()
                .copied()
                .chain(extra.iter().copied())
                .chain(["{input}", "{output}"])
                .map(String::from)
                .collect(),
            vbr_args: ["--vbr", "{quality}"]
                .iter()
                .copied()
                .chain(extra.iter().copied())
                .chain(["{input}", "{output}"])
                .map(String::from)
                .collect(),
            version_args: default_version_args(),
            delay_samples: default_delay(),
        };
        ToolConfig {
            encoder_a: enc(&[]),
            encoder_b: enc(&["--profile", "alt"]),
            decoder: DecoderConfig {
                path: dec_path.to_string(),
                args: vec!["{input}".into(), "{output}".into()],
                version_args: default_version_args(),
                decoder_delay_samples: default_decoder_delay(),
            },
        }
    }
}
