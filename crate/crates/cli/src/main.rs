//! `capsqz`: channel ranking, synthetic data, training, evaluation, segmentation and
//! complexity reports for the bleeding-segmentation pipeline.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capsqz_core::channel_select::{rank_combinations, Pooling};
use capsqz_core::checkpoint::Checkpoint;
use capsqz_core::colorspace::{all_channels, extract_channels, parse_channel_list};
use capsqz_core::complexity::{count_params, count_params_spec, estimate_energy, EnergyModel, LayerCompression, NumFormat};
use capsqz_core::compress::QuantConfig;
use capsqz_core::dataset::{load_dir, pnm, save_sample, split_indices, LabeledImage, RawSample};
use capsqz_core::inference::ExecPath;
use capsqz_core::nn::LayerSpec;
use capsqz_core::pipeline::{evaluate, prepare, train_on_images, Arch, Compression, TrainSettings};
use capsqz_core::{dataset, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "capsqz", version, about = "Compressed patch classifiers for capsule-endoscopy bleeding segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rank channel combinations by mutual information with the bleeding label.
    Channels(ChannelsArgs),
    /// Write synthetic frames and masks.
    Synth(SynthArgs),
    /// Train a classifier and save a checkpoint.
    Train(TrainArgs),
    /// Segment labeled frames and report DICE/AUC.
    Eval(EvalArgs),
    /// Segment one frame.
    Segment(SegmentArgs),
    /// Parameter and energy report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ChannelsArgs {
    /// Directory of NAME.ppm frames with NAME_mask.pgm masks.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    arity: usize,
    /// Histogram bins per channel (default depends on arity).
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long, value_enum, default_value_t = PoolingArg::Pooled)]
    pooling: PoolingArg,
    /// CSV output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    Pooled,
    PerImage,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    n: usize,
    /// Square frame side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Put the last N frames under OUT/test and the rest under OUT/train.
    #[arg(long)]
    test_count: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    compression: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Positive:negative patch ratio, e.g. 1:3.
    #[arg(long)]
    ratio: Option<String>,
    /// Comma separated channel ids, e.g. a,G,S.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch learning-rate factor in (0, 1].
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f32>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Fraction of frames used for training; the rest are held out.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-epoch loss log (CSV).
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Frames to score: all of them, or the held-out part of the training split.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Metrics JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Binary mask (PGM, 0/255).
    #[arg(long)]
    out: PathBuf,
    /// Probability plane (PFM).
    #[arg(long)]
    prob: Option<PathBuf>,
    /// Use the dense reference kernels instead of the add/subtract path.
    #[arg(long)]
    reference: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, conflicts_with = "arch")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    arch: Option<String>,
    #[arg(long, default_value = "quantize")]
    compression: String,
    #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
    format: FormatArg,
    /// JSON energy model in picojoules; the built-in 45 nm table when omitted.
    #[arg(long)]
    energy_model: Option<PathBuf>,
    #[arg(long, default_value = "float32")]
    num_format: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Json,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Io(_) | Error::Parse { .. } | Error::Data(_) | Error::Shape(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("capsqz: {e}");
        return ExitCode::from(exit_code(&e));
    }
    let result = match cli.command {
        Command::Channels(a) => cmd_channels(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("capsqz: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("CAPSQZ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CAPSQZ_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_channels(a: ChannelsArgs) -> Result<(), Error> {
    let samples = load_dir(&a.data)?;
    let images = samples
        .iter()
        .map(|s| LabeledImage::new(all_channels(&s.image), s.mask.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let bins = a.bins.unwrap_or_else(|| capsqz_core::channel_select::default_bins(a.arity));
    let pooling = match a.pooling {
        PoolingArg::Pooled => Pooling::Pooled,
        PoolingArg::PerImage => Pooling::PerImageMean,
    };
    let ranking = rank_combinations(&images, a.arity, bins, pooling)?;
    let mut csv = Vec::new();
    ranking.write_csv(&mut csv)?;
    write_or_print(a.out.as_deref(), &String::from_utf8_lossy(&csv))
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    let images = dataset::synth::synth_generate(a.n, a.size, a.size, a.seed)?;
    let test_count = a.test_count.unwrap_or(0);
    if test_count > a.n {
        return Err(Error::Config(format!("test count {test_count} exceeds {} frames", a.n)));
    }
    let width = a.n.saturating_sub(1).to_string().len().max(3);
    for (i, img) in images.iter().enumerate() {
        let dir = match a.test_count {
            None => a.out.clone(),
            Some(_) if i < a.n - test_count => a.out.join("train"),
            Some(_) => a.out.join("test"),
        };
        save_sample(&dir, &format!("synth_{i:0width$}"), &img.rgb, &img.mask)?;
    }
    log::info!("wrote {} frames to {}", images.len(), a.out.display());
    Ok(())
}

/// Every key accepted in a `--config` file.
const CONFIG_KEYS: &[&str] = &[
    "arch",
    "compression",
    "alpha",
    "epochs",
    "batch",
    "ratio",
    "channels",
    "samples",
    "lr",
    "lr_decay",
    "dropout",
    "warmup",
    "train_fraction",
    "seed",
];

fn read_config(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        let k = k.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&k.as_str()) {
            return Err(Error::Config(format!("{}:{}: unknown key {k:?}", path.display(), i + 1)));
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, Error> {
    raw.parse().map_err(|_| Error::Config(format!("bad value {raw:?} for {key}")))
}

/// Merges the config file with the flags (flags win) and validates the result.
fn train_settings(a: &TrainArgs) -> Result<(TrainSettings, f64), Error> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => BTreeMap::new(),
    };
    let flags: [(&str, Option<String>); 14] = [
        ("arch", a.arch.clone()),
        ("compression", a.compression.clone()),
        ("alpha", a.alpha.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch", a.batch.map(|v| v.to_string())),
        ("ratio", a.ratio.clone()),
        ("channels", a.channels.clone()),
        ("samples", a.samples.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("lr_decay", a.lr_decay.map(|v| v.to_string())),
        ("dropout", a.dropout.map(|v| v.to_string())),
        ("warmup", a.warmup.map(|v| v.to_string())),
        ("train_fraction", a.train_fraction.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.insert(k.to_string(), v);
        }
    }
    let get = |k: &str| cfg.get(k).map(String::as_str);
    let arch: Arch = get("arch").unwrap_or("mlp").parse()?;
    let compression: Compression = get("compression").unwrap_or("none").parse()?;
    let mut s = TrainSettings::new(arch, compression);
    if let Some(v) = get("alpha") {
        s.alpha = parse_value("alpha", v)?;
    }
    if let Some(v) = get("epochs") {
        s.epochs = parse_value("epochs", v)?;
    }
    if let Some(v) = get("batch") {
        s.batch_size = parse_value("batch", v)?;
    }
    if let Some(v) = get("ratio") {
        s.ratio = v.parse()?;
    }
    if let Some(v) = get("channels") {
        s.channels = parse_channel_list(v)?;
    }
    if let Some(v) = get("samples") {
        s.samples = parse_value("samples", v)?;
    }
    if let Some(v) = get("lr") {
        s.lr = parse_value("lr", v)?;
    }
    if let Some(v) = get("lr_decay") {
        s.lr_decay = parse_value("lr_decay", v)?;
    }
    if let Some(v) = get("dropout") {
        s.dropout = parse_value("dropout", v)?;
    }
    if let Some(v) = get("warmup") {
        s.quant = QuantConfig { warmup_epochs: parse_value("warmup", v)?, ..s.quant };
    }
    if let Some(v) = get("seed") {
        s.seed = parse_value("seed", v)?;
    }
    let fraction: f64 = match get("train_fraction") {
        Some(v) => parse_value("train_fraction", v)?,
        None => 0.8,
    };
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1], got {fraction}")));
    }
    s.validate()?;
    Ok((s, fraction))
}

fn split(samples: Vec<RawSample>, fraction: f64, seed: u64, part: SplitArg) -> Vec<RawSample> {
    if part == SplitArg::All {
        return samples;
    }
    let (train, test) = split_indices(samples.len(), fraction, seed);
    let keep = if part == SplitArg::Train { train } else { test };
    keep.into_iter().map(|i| samples[i].clone()).collect()
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let (s, fraction) = train_settings(&a)?;
    let samples = split(load_dir(&a.data)?, fraction, s.seed, SplitArg::Train);
    if samples.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    let images = prepare(&samples, &s.channels)?;
    log::info!("training {} {} on {} frames", s.arch, s.compression, images.len());
    let outcome = train_on_images(&images, &s)?;
    if let Some(path) = &a.loss_log {
        let mut log = String::from("epoch,loss\n");
        for (i, l) in outcome.epoch_losses().iter().enumerate() {
            log.push_str(&format!("{},{l:.9}\n", i + 1));
        }
        fs::write(path, log)?;
    }
    let ckpt = Checkpoint::new(outcome.net, outcome.meta);
    ckpt.save(&a.out)?;
    println!("{}  {}", ckpt.sha256(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&a.model)?;
    let frozen = ckpt.freeze()?;
    let samples = split(load_dir(&a.data)?, a.train_fraction, ckpt.meta.seed, a.split);
    if samples.is_empty() {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    let images = prepare(&samples, &ckpt.meta.channels)?;
    let ev = evaluate(&frozen, &images)?;
    if let Some(path) = &a.roc {
        let roc = ev.roc.as_ref().ok_or_else(|| Error::Data("ROC undefined: ground truth has a single class".into()))?;
        let mut f = fs::File::create(path)?;
        roc.write_csv(&mut f)?;
    }
    let mut json = ev.report.to_json();
    json.push('\n');
    write_or_print(a.out.as_deref(), &json)
}

fn cmd_segment(a: SegmentArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&a.model)?;
    let frozen = ckpt.freeze()?;
    let rgb = pnm::load_image(&a.image)?;
    let channels = extract_channels(&rgb, &ckpt.meta.channels)?;
    let path = if a.reference { ExecPath::Reference } else { ExecPath::Fast };
    let (prob, mask) = frozen.segment_with(&channels, path)?;
    pnm::write_file(&a.out, &pnm::encode_mask(&mask))?;
    if let Some(p) = &a.prob {
        pnm::write_file(p, &pnm::encode_pfm(rgb.width(), rgb.height(), &prob))?;
    }
    log::info!("{} of {} pixels positive", mask.positives(), prob.len());
    Ok(())
}

fn spec_compression(arch: Arch, compression: Compression) -> Result<Vec<LayerCompression>, Error> {
    let s = TrainSettings::new(arch, compression);
    let spec = s.network_spec()?;
    spec.layers
        .iter()
        .filter(|l| l.is_weighted())
        .map(|l| match (compression, l) {
            (Compression::None, _) => Ok(LayerCompression::Full),
            (Compression::PruneQuantize, LayerSpec::Conv { .. }) => Err(Error::Config(
                "pruned survivor counts come from training; pass --model for prune_quantize".into(),
            )),
            _ => Ok(LayerCompression::Quantized),
        })
        .collect()
}

fn cmd_report(a: ReportArgs) -> Result<(), Error> {
    let report = match (&a.model, &a.arch) {
        (Some(path), _) => count_params(&Checkpoint::load(path)?.net),
        (None, Some(arch)) => {
            let arch: Arch = arch.parse()?;
            let compression: Compression = a.compression.parse()?;
            let spec = TrainSettings::new(arch, compression).network_spec()?;
            count_params_spec(&spec, &spec_compression(arch, compression)?)?
        }
        (None, None) => return Err(Error::Config("report needs --model or --arch".into())),
    };
    let model = match &a.energy_model {
        Some(p) => EnergyModel::from_json(&fs::read_to_string(p)?)?,
        None => EnergyModel::default(),
    };
    let format: NumFormat = a.num_format.parse()?;
    let energy = estimate_energy(&report, &model, format)?;
    let text = match a.format {
        FormatArg::Markdown => format!("{}\n{}", report.to_markdown(), energy.to_markdown()),
        FormatArg::Json => {
            let v = serde_json::json!({ "complexity": report, "energy": energy });
            serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
        }
    };
    write_or_print(None, &text)
}
