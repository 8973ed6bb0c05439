//! Frame-level localization of multiple MP3 compression.
//!
//! An MP3 file that was assembled by splicing differently-sourced audio
//! carries its history in the compressed domain: frames that went through
//! more than one encode generation look statistically different from frames
//! compressed exactly once. This crate provides the full pipeline for
//! detecting and localizing those traces:
//!
//! * [`mp3`] — a bit-exact MPEG-1 Layer III parser that recovers, per frame,
//!   the codec fields of the first granule's first channel (side information,
//!   scalefactors, quantized and requantized MDCT coefficients).
//! * [`features`] — fixed-shape per-frame feature tensors and sliding
//!   windows of 20 frames (stride 8) with ground-truth labels.
//! * [`model`] — the classifier: two small CNNs over the MDCT and
//!   scalefactor grids, sinusoidal positional encoding, trainable class
//!   tokens interleaved with the frame features, an 8-layer multi-head
//!   self-attention transformer, and a shared MLP head.
//! * [`train`] — end-to-end training with reverse-mode gradients, Adam and
//!   early stopping on validation balanced accuracy.
//! * [`forge`] — ground-truthed dataset generation by orchestrating external
//!   encoder/decoder executables over sliced audio segments.
//! * [`metrics`] — Jaccard, F1, balanced accuracy and grouped recall
//!   reports.
//! * [`localize`] — whole-file inference with overlapping windows.

pub mod config;
pub mod features;
pub mod forge;
pub mod localize;
pub mod metrics;
pub mod model;
pub mod mp3;
pub mod train;

pub use config::ToolConfig;
pub use localize::{localize_file, LocalizationResult};
