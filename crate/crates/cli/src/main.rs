//! Command-line frontend: forge datasets, extract features, train, evaluate
//! and localize.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splicetrace::features::{
    build_frame_features, make_windows, read_cache, write_cache, FeatureWindow,
    NormalizationStats, WINDOW_LEN, WINDOW_STRIDE,
};
use splicetrace::forge::{
    forge_corpus, read_manifest, CodecRig, CompressionSpec, ForgeOptions, SegmentRecord, Split,
};
use splicetrace::metrics::{EvalReport, FrameMeta};
use splicetrace::model::{
    load_weights, save_weights, Model, ModelConfig, ModelParameters,
};
use splicetrace::train::{train, TrainConfig};
use splicetrace::{localize_file, ToolConfig};

#[derive(Parser)]
#[command(
    name = "splicetrace",
    about = "Frame-level localization of multiple MP3 compression",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit one JSON object per frame with all extracted codec fields.
    Records(RecordsArgs),
    /// Generate a ground-truthed spliced dataset from WAV sources.
    Forge(ForgeArgs),
    /// Build feature caches (train/val/test) from a forged dataset.
    Extract(ExtractArgs),
    /// Train the classifier on extracted feature caches.
    Train(TrainArgs),
    /// Evaluate predictions: either a trained model on a test cache, or a
    /// prediction file against a truth file.
    Eval(EvalArgs),
    /// Localize multiple compression in one MP3 file.
    Localize(LocalizeArgs),
}

#[derive(Args)]
struct RecordsArgs {
    /// Input MP3 file.
    input: PathBuf,
    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include the quantized integer spectrum alongside the requantized one.
    #[arg(long)]
    quantized: bool,
}

#[derive(Args)]
struct ForgeArgs {
    /// Directory of 44.1 kHz WAV sources (searched recursively).
    #[arg(long)]
    sources: PathBuf,
    /// Output directory for segments + manifest.
    #[arg(long)]
    out: PathBuf,
    /// Master seed; all plan randomness derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Variable slice lengths (10-80 frames) with random compression counts.
    #[arg(long)]
    variable_slices: bool,
    /// Codec configuration file (TOML). Falls back to $SPLICETRACE_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cap on the number of source files used.
    #[arg(long)]
    max_sources: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Manifest written by `forge`.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the feature caches and normalization stats.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with train.stfc and val.stfc.
    #[arg(long)]
    features: PathBuf,
    /// Output directory (weights.stwt, history.jsonl, checkpoints/).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    epoch_cap: usize,
    /// Use the reduced model preset (for test-scale runs).
    #[arg(long)]
    reduced_config: bool,
    /// Write a checkpoint every N epochs (0 = only the best snapshot).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained weights (model evaluation mode).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Feature cache to evaluate (default: test.stfc next to the manifest
    /// caches).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Forge manifest, enables the grouped-recall tables.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Prediction label file (JSON array or whitespace-separated 0/1).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth label file.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write the report JSON here (tables always go to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Input MP3 file.
    input: PathBuf,
    /// Trained weights.
    #[arg(long)]
    weights: PathBuf,
    /// Normalization stats (default: norm.json next to the weights).
    #[arg(long)]
    norm: Option<PathBuf>,
    /// Output JSON path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Records(args) => cmd_records(args),
        Command::Forge(args) => cmd_forge(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Localize(args) => cmd_localize(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("splicetrace: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

/// One output line of `records`, using the codec field names of the format.
fn record_json(rec: &splicetrace::mp3::CodecFrameRecord, quantized: bool) -> serde_json::Value {
    let side = &rec.side;
    let sf = &rec.scalefactors;
    let mut obj = serde_json::json!({
        "frame_index": rec.frame_index,
        "part_23_length": side.part2_3_length,
        "scalefactor": {
            "long": sf.long.to_vec(),
            "short": sf.short.to_vec(),
        },
        "scalefac_compress": side.scalefac_compress,
        "scalefac_scale": u8::from(side.scalefac_scale),
        "preflag": u8::from(side.preflag),
        "global_gain": side.global_gain,
        "subblock_gain": side.subblock_gain.to_vec(),
        "big_values": side.big_values,
        "region_count": [side.region0_count, side.region1_count],
        "table_select": side.table_select.to_vec(),
        "count1_table": u8::from(side.count1table_select),
        "block_type": side.block_type.code(),
        "mixed_block_flag": u8::from(side.mixed_block_flag),
        "mdct_coef": rec.mdct.requantized,
    });
    if quantized {
        obj["mdct_quant"] = serde_json::json!(rec.mdct.quantized);
    }
    obj
}

fn cmd_records(args: RecordsArgs) -> Result<()> {
    let bytes = std::fs::read(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let extraction = splicetrace::mp3::extract_records(&bytes)?;

    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(std::fs::File::create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for frame in &extraction.frames {
        let line = match &frame.record {
            Ok(rec) => record_json(rec, args.quantized),
            Err(reason) => serde_json::json!({
                "frame_index": frame.frame_index,
                "unusable": format!("{reason:?}"),
            }),
        };
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn load_tool_config(explicit: Option<&Path>) -> Result<ToolConfig> {
    let path = ToolConfig::resolve_path(explicit).ok_or_else(|| {
        anyhow!(
            "no codec config: pass --config or set $SPLICETRACE_CONFIG \
             (see README for the mp3enc/mp3dec template)"
        )
    })?;
    ToolConfig::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_forge(args: ForgeArgs) -> Result<()> {
    let config = load_tool_config(args.config.as_deref())?;
    let rig = CodecRig::probe(config)?;

    let mut sources = Vec::new();
    collect_wavs(&args.sources, &mut sources)?;
    sources.sort();
    if let Some(cap) = args.max_sources {
        sources.truncate(cap);
    }
    if sources.is_empty() {
        bail!("no .wav files under {}", args.sources.display());
    }

    let options = ForgeOptions {
        seed: args.seed,
        variable_slices: args.variable_slices,
        ..ForgeOptions::default()
    };
    let records = forge_corpus(&rig, &sources, &args.out, &options)?;
    let windows: usize = records
        .iter()
        .map(|r| r.parsed_frames.saturating_sub(WINDOW_LEN) / WINDOW_STRIDE + 1)
        .sum();
    println!(
        "forged {} segments ({} windows) from {} sources -> {}",
        records.len(),
        windows,
        sources.len(),
        args.out.display()
    );
    Ok(())
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Windows of one forged segment, labeled with its aligned labels.
fn segment_windows(
    record: &SegmentRecord,
    norm: &NormalizationStats,
) -> Result<Vec<FeatureWindow>> {
    let bytes = std::fs::read(&record.output_path)
        .with_context(|| format!("reading {}", record.output_path))?;
    let extraction = splicetrace::mp3::extract_records(&bytes)?;
    if extraction.frames.len() != record.aligned_labels.len() {
        bail!(
            "{}: {} frames parsed, {} labels in manifest",
            record.output_path,
            extraction.frames.len(),
            record.aligned_labels.len()
        );
    }
    Ok(make_windows(
        &extraction.frames,
        &record.aligned_labels,
        &record.output_path,
        norm,
        WINDOW_LEN,
        WINDOW_STRIDE,
    )?)
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let (_, records) = read_manifest(&args.manifest)?;
    if records.is_empty() {
        bail!("manifest has no segments");
    }
    std::fs::create_dir_all(&args.out)?;

    // Pass 1: normalization statistics from the training split only.
    let identity = NormalizationStats::identity();
    let mut train_records = Vec::new();
    for record in records.iter().filter(|r| r.split == Split::Train) {
        let bytes = std::fs::read(&record.output_path)?;
        let extraction = splicetrace::mp3::extract_records(&bytes)?;
        for f in extraction.frames {
            if let Ok(rec) = f.record {
                train_records.push(rec);
            }
        }
    }
    if train_records.is_empty() {
        bail!("no usable training frames");
    }
    let norm = NormalizationStats::fit(train_records.iter());
    drop(train_records);
    let _ = identity;
    std::fs::write(
        args.out.join("norm.json"),
        serde_json::to_string_pretty(&norm)?,
    )?;

    // Pass 2: windows per split.
    for (split, name) in [
        (Split::Train, "train.stfc"),
        (Split::Val, "val.stfc"),
        (Split::Test, "test.stfc"),
    ] {
        let mut windows = Vec::new();
        for record in records.iter().filter(|r| r.split == split) {
            windows.extend(segment_windows(record, &norm)?);
        }
        let mut file = std::fs::File::create(args.out.join(name))?;
        write_cache(&mut file, &windows)?;
        println!("{name}: {} windows", windows.len());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let train_set = read_cache_file(&args.features.join("train.stfc"))?;
    let val_set = read_cache_file(&args.features.join("val.stfc"))?;
    std::fs::create_dir_all(&args.out)?;

    let model_config = if args.reduced_config {
        ModelConfig::overfit()
    } else {
        ModelConfig::full()
    };
    let params = ModelParameters::init(&model_config, args.seed)?;
    let model = Model::new(params)?;

    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        patience: args.patience,
        epoch_cap: args.epoch_cap,
        seed: args.seed,
        ..TrainConfig::default()
    };

    let history_path = args.out.join("history.jsonl");
    let mut history_file = std::fs::File::create(&history_path)?;
    let checkpoint_dir = args.out.join("checkpoints");
    if args.checkpoint_every > 0 {
        std::fs::create_dir_all(&checkpoint_dir)?;
    }
    let mut on_epoch = |stats: &splicetrace::train::EpochStats, params: &ModelParameters| {
        let _ = writeln!(history_file, "{}", serde_json::to_string(stats).unwrap());
        println!(
            "epoch {:4}  loss {:.5}  val balanced accuracy {:.2}{}",
            stats.epoch,
            stats.train_loss,
            stats.val_balanced_accuracy,
            if stats.is_best { "  *" } else { "" }
        );
        if args.checkpoint_every > 0 && stats.epoch % args.checkpoint_every == 0 {
            let path = checkpoint_dir.join(format!("epoch{:05}.stwt", stats.epoch));
            if let Ok(mut f) = std::fs::File::create(path) {
                let _ = save_weights(&mut f, params);
            }
        }
    };

    let (best, history) = train(model, &train_set, &val_set, &config, Some(&mut on_epoch))?;
    let weights_path = args.out.join("weights.stwt");
    let mut f = std::fs::File::create(&weights_path)?;
    save_weights(&mut f, &best)?;
    // Keep the feature normalization next to the weights for inference.
    let norm_src = args.features.join("norm.json");
    if norm_src.exists() {
        std::fs::copy(&norm_src, args.out.join("norm.json"))?;
    }
    println!(
        "trained {} epochs; best val balanced accuracy {:.2}; weights -> {}",
        history.len(),
        history
            .iter()
            .map(|h| h.val_balanced_accuracy)
            .fold(f64::NEG_INFINITY, f64::max),
        weights_path.display()
    );
    Ok(())
}

fn read_cache_file(path: &Path) -> Result<Vec<FeatureWindow>> {
    let mut file =
        std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_cache(&mut file)?)
}

fn read_label_file(path: &Path) -> Result<Vec<u8>> {
    let text = std::fs::read_to_string(path)?;
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        let v: Vec<u8> = serde_json::from_str(trimmed)?;
        return Ok(v);
    }
    trimmed
        .split_whitespace()
        .map(|t| t.parse::<u8>().map_err(|e| anyhow!("label {t:?}: {e}")))
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let report = match (&args.pred, &args.truth, &args.weights) {
        (Some(pred), Some(truth), _) => {
            let pred = read_label_file(pred)?;
            let truth = read_label_file(truth)?;
            EvalReport::from_labels(&truth, &pred, None)?
        }
        (None, None, Some(weights)) => {
            let features = args
                .features
                .as_ref()
                .ok_or_else(|| anyhow!("--features required with --weights"))?;
            let windows = read_cache_file(features)?;
            if windows.is_empty() {
                bail!("feature cache is empty");
            }
            let params = load_weights(&mut std::fs::File::open(weights)?)?;
            let model = Model::new(params)?;
            let (truth, pred) = splicetrace::train::predict_all(&model, &windows)?;

            let meta = match &args.manifest {
                Some(manifest) => Some(window_frame_meta(manifest, &windows)?),
                None => None,
            };
            EvalReport::from_labels(&truth, &pred, meta.as_deref())?
        }
        _ => bail!("eval needs either --pred and --truth, or --weights and --features"),
    };

    print!("{}", report.render_tables());
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

/// Per-frame metadata for the windows of a cache, joined from the manifest.
fn window_frame_meta(manifest: &Path, windows: &[FeatureWindow]) -> Result<Vec<FrameMeta>> {
    use std::collections::HashMap;
    let (_, records) = read_manifest(manifest)?;
    let by_path: HashMap<&str, &SegmentRecord> = records
        .iter()
        .map(|r| (r.output_path.as_str(), r))
        .collect();
    let mut meta = Vec::new();
    for window in windows {
        let record = by_path.get(window.origin.0.as_str()).ok_or_else(|| {
            anyhow!("window source {} not in manifest", window.origin.0)
        })?;
        let last: CompressionSpec = *record.slices[0].chain.last().unwrap();
        for l in 0..window.labels.len() {
            let frame = window.origin.1 + l;
            meta.push(FrameMeta {
                multi: window.labels[l] != 0,
                last_type: last,
                n_compressions: usize::from(record.frame_compressions[frame]),
            });
        }
    }
    Ok(meta)
}

fn cmd_localize(args: LocalizeArgs) -> Result<()> {
    let bytes = std::fs::read(&args.input)?;
    let params = load_weights(&mut std::fs::File::open(&args.weights)?)?;
    let model = Model::new(params)?;
    let norm_path = args.norm.clone().unwrap_or_else(|| {
        args.weights
            .parent()
            .unwrap_or(Path::new("."))
            .join("norm.json")
    });
    let norm: NormalizationStats = serde_json::from_str(
        &std::fs::read_to_string(&norm_path)
            .with_context(|| format!("normalization stats {}", norm_path.display()))?,
    )?;

    let result = localize_file(&bytes, &args.input.display().to_string(), &model, &norm)?;
    let json = serde_json::to_string_pretty(&result)?;
    match &args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}
