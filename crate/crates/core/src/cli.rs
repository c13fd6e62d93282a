//! Command-line front end.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::bitstream::{decode_video, encode_video, BitstreamContainer};
use crate::codec_nets::{format_report, init_params, parameter_report, ModelConfig};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalModel, EvalReport, RDCurve};
use crate::gop::{build_schedule, EVAL_GOP};
use crate::interpolation::{self, InterpolatorSpec, PretrainConfig};
use crate::media_io::{self, SyntheticKind, SyntheticParams, VideoSequence};
use crate::params::ParameterStore;
use crate::training::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// Compute device; only `cpu` exists.
pub const DEVICE_ENV: &str = "KMFV_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "kmfv", version, about = "Motion-free B-frame video codec")]
pub struct Cli {
    /// Print the coding schedule for --frames frames at --gop and exit.
    #[arg(long)]
    pub print_schedule: bool,
    #[arg(long, default_value_t = 9, requires = "print_schedule")]
    pub frames: usize,
    #[arg(long, default_value_t = EVAL_GOP, requires = "print_schedule")]
    pub gop: usize,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the midpoint interpolator on synthetic triples.
    PretrainInterp(PretrainArgs),
    /// Train a codec at one base lambda.
    Train(TrainArgs),
    /// Encode a sequence into a .kmfv container.
    Encode(EncodeArgs),
    /// Decode a .kmfv container into PNG frames.
    Decode(DecodeArgs),
    /// Rate-distortion evaluation of checkpoints over sequences.
    Eval(EvalArgs),
    /// BD-rate between two evaluation CSVs.
    Bdrate(BdrateArgs),
    /// Parameter counts per module.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub static_share: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 13, value_parser = odd_kernel)]
    pub kernel: usize,
}

/// Model flags shared by `train` and `report`.
#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// Use only the two decoded references (four 1D kernels).
    #[arg(long)]
    pub no_interp: bool,
    /// 1D kernel length (odd).
    #[arg(long, value_parser = odd_kernel)]
    pub ks: Option<usize>,
    /// Settings file of `key = value` lines; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = positive_f64)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Warm-start from this checkpoint (its model configuration is kept).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Pretrained interpolator; without it the fixed average is used.
    #[arg(long)]
    pub interp: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// PNG sequence directories; synthetic clips are generated when empty.
    #[arg(long = "data")]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value_t = 24)]
    pub synthetic_count: usize,
    #[arg(long, default_value_t = 17)]
    pub synthetic_frames: usize,
    #[arg(long, default_value_t = 128)]
    pub synthetic_size: usize,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Source: a PNG directory, `file.yuv:WxH`, or
    /// `synthetic:<kind>:<frames>:<size>:<seed>`.
    #[arg(long = "in")]
    pub input: String,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = EVAL_GOP)]
    pub gop: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the encoder-side reconstructions here.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub max_frames: usize,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub ckpts: Vec<PathBuf>,
    /// Sources, in the syntax of `encode --in`.
    #[arg(long, num_args = 1.., required = true)]
    pub seqs: Vec<String>,
    #[arg(long, default_value_t = EVAL_GOP)]
    pub gop: usize,
    /// Also evaluate every checkpoint intra-only (GoP 1).
    #[arg(long)]
    pub intra_baseline: bool,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub plots: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// Stage timing medians over this many runs on the first sequence.
    #[arg(long)]
    pub timing_runs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub max_frames: usize,
}

#[derive(Debug, Args)]
pub struct BdrateArgs {
    #[arg(long)]
    pub anchor: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Codec in the anchor CSV (needed when it holds several).
    #[arg(long)]
    pub anchor_codec: Option<String>,
    #[arg(long)]
    pub test_codec: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub json: bool,
}

fn odd_kernel(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("not an integer: {s}"))?;
    if v % 2 == 1 {
        Ok(v)
    } else {
        Err(format!("kernel size must be odd, got {v}"))
    }
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s}")),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Shape(_) | Error::NonPositiveLikelihood { .. } | Error::Diverged(_) => EXIT_INTERNAL,
        _ => EXIT_DATA,
    }
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => Err(Error::invalid(format!("{DEVICE_ENV}={d}: only cpu is available"))),
        _ => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    check_device()?;
    if cli.print_schedule {
        print!("{}", build_schedule(cli.frames, cli.gop)?);
        return Ok(());
    }
    match cli.command {
        None => Err(Error::invalid("no subcommand given; see --help")),
        Some(Command::PretrainInterp(a)) => pretrain(a),
        Some(Command::Train(a)) => train(a),
        Some(Command::Encode(a)) => encode(a),
        Some(Command::Decode(a)) => decode(a),
        Some(Command::Eval(a)) => eval(a),
        Some(Command::Bdrate(a)) => bdrate(a),
        Some(Command::Report(a)) => report(a),
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Model ids of the checkpoints read or written.
    pub checkpoint_ids: Vec<String>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn version_stamp() -> String {
    match option_env!("KMFV_GIT_REV") {
        Some(rev) => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Append one JSON line to `manifest.jsonl` in `dir`.
pub fn append_manifest(dir: &Path, m: &RunManifest) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(m)?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn id_hex(p: &ParameterStore) -> Result<String> {
    Ok(format!("{:08x}", p.model_id()?))
}

fn manifest(sub: &str, config: serde_json::Value, seed: Option<u64>, ids: Vec<String>, started: f64) -> RunManifest {
    RunManifest {
        subcommand: sub.to_string(),
        config,
        seed,
        checkpoint_ids: ids,
        version: version_stamp(),
        started_unix: started,
        finished_unix: now(),
    }
}

/// Load a sequence from a source string (see `encode --in`).
pub fn load_source(src: &str, max_frames: usize) -> Result<VideoSequence> {
    if let Some(rest) = src.strip_prefix("synthetic:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 4 {
            return Err(Error::invalid(format!("expected synthetic:<kind>:<frames>:<size>:<seed>, got {src}")));
        }
        let kind: SyntheticKind = parts[0].parse()?;
        let num = |s: &str| s.parse::<u64>().map_err(|_| Error::invalid(format!("bad number {s:?} in {src}")));
        let mut frames = num(parts[1])? as usize;
        if max_frames > 0 {
            frames = frames.min(max_frames);
        }
        let size = num(parts[2])? as usize;
        return media_io::synthetic_sequence(&SyntheticParams {
            kind,
            n_frames: frames,
            width: size,
            height: size,
            seed: num(parts[3])?,
            velocity: None,
        });
    }
    if let Some((file, dims)) = src.rsplit_once(':') {
        if let Some((w, h)) = dims.split_once('x') {
            if let (Ok(w), Ok(h)) = (w.parse(), h.parse()) {
                return media_io::load_yuv420(Path::new(file), w, h, max_frames);
            }
        }
    }
    media_io::load_png_dir(Path::new(src), max_frames)
}

/// Short name for a source, usable in file names.
pub fn source_name(src: &str) -> String {
    let base = if src.starts_with("synthetic:") {
        src.to_string()
    } else {
        let file = src.rsplit_once(':').map(|(f, _)| f).filter(|_| src.contains('x')).unwrap_or(src);
        Path::new(file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| src.to_string())
    };
    base.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Resolve the model configuration: defaults, then the config file, then
/// `--set`, then the dedicated flags.
pub fn resolve_config(m: &ModelArgs, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(p) = &m.config {
        cfg.apply_file(p)?;
    }
    for kv in &m.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set expects KEY=VALUE, got {kv}")))?;
        cfg.set(k, v)?;
    }
    if m.no_interp {
        cfg.model.use_interpolator = false;
    }
    if let Some(ks) = m.ks {
        cfg.model.ks = ks;
    }
    Ok(cfg)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let started = now();
    let spec = InterpolatorSpec {
        base_channels: a.channels,
        kernel_size: a.kernel,
        ..InterpolatorSpec::default()
    };
    let cfg = PretrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        learning_rate: a.lr,
        batch_size: a.batch,
    };
    let data = interpolation::synthetic_triples(a.count, a.size, a.seed, a.static_share)?;
    let (store, hist) = interpolation::pretrain_interpolator(&data, &spec, &cfg)?;
    store.save(&a.out)?;
    println!("interpolator: {} tensors, final mse {:.6}", store.len(), hist.last().copied().unwrap_or(f64::NAN));
    let config = json!({"count": a.count, "size": a.size, "epochs": a.epochs, "lr": a.lr, "batch": a.batch,
        "static_share": a.static_share, "channels": a.channels, "kernel": a.kernel, "loss_history": hist});
    append_manifest(&parent_dir(&a.out), &manifest("pretrain-interp", config, Some(a.seed), vec![id_hex(&store)?], started))?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let started = now();
    let init = a.init.as_deref().map(ParameterStore::load).transpose()?;
    let mut base = TrainConfig::default();
    if let Some(m) = init.as_ref().and_then(|p| p.meta.model.clone()) {
        base.model = m;
    }
    let mut cfg = resolve_config(&a.model, base)?;
    cfg.base_lambda = a.lambda;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.patch {
        cfg.patch = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;

    let mut ids = Vec::new();
    let mut params = match init {
        Some(p) => {
            if p.meta.model.as_ref() != Some(&cfg.model) {
                return Err(Error::invalid("--init checkpoint has a different model configuration"));
            }
            ids.push(id_hex(&p)?);
            p
        }
        None => {
            let mut p = init_params(&cfg.model, cfg.seed)?;
            if cfg.model.use_interpolator {
                match &a.interp {
                    Some(path) => {
                        let ip = ParameterStore::load(path)?;
                        ids.push(id_hex(&ip)?);
                        p.merge_prefix(&ip, "interp.");
                        let mut spec = ip.meta.interpolator.clone().unwrap_or_default();
                        spec.checkpoint_id = Some(ip.model_id()?);
                        spec.frozen = true;
                        p.meta.interpolator = Some(spec);
                    }
                    None => p.meta.interpolator = Some(InterpolatorSpec::average()),
                }
            }
            p
        }
    };
    params.meta.lambda = Some(cfg.base_lambda);

    let dataset: Vec<VideoSequence> = if a.data.is_empty() {
        (0..a.synthetic_count)
            .map(|i| {
                let kind = if i % 5 == 4 {
                    SyntheticKind::RotatingPattern
                } else {
                    SyntheticKind::TranslatingTexture
                };
                media_io::make_synthetic_sequence(kind, a.synthetic_frames, a.synthetic_size, 10_000 + cfg.seed * 1000 + i as u64)
            })
            .collect::<Result<_>>()?
    } else {
        a.data.iter().map(|d| media_io::load_png_dir(d, 0)).collect::<Result<_>>()?
    };

    let every = (cfg.steps / 20).max(1);
    let mut last = std::time::Instant::now();
    let out = training::train(&dataset, params, &cfg, |step, rep| {
        if step % every == 0 && last.elapsed().as_secs_f64() > 1.0 {
            last = std::time::Instant::now();
            log::info!("step {step}: loss {:.4} bits {:.0}", rep.loss, rep.bits.iter().sum::<f64>());
        }
    })?;
    out.params.save(&a.out)?;
    if let Some(m) = &a.metrics {
        training::write_metrics_csv(m, &out.metrics)?;
    }
    let tail = &out.losses[out.losses.len().saturating_sub(50)..];
    println!(
        "trained {} steps at lambda {}; mean loss over the last {} steps {:.4}",
        cfg.steps,
        cfg.base_lambda,
        tail.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    );
    ids.push(id_hex(&out.params)?);
    let config = json!({
        "lambda": cfg.base_lambda, "learning_rate": cfg.learning_rate, "batch_size": cfg.batch_size,
        "patch": cfg.patch, "steps": cfg.steps, "model": cfg.model, "quantization": cfg.quantization,
        "grad_clip": cfg.grad_clip, "distortion_scale": cfg.weights.distortion_scale,
        "rate": format!("{:?}", cfg.weights.rate), "data": a.data, "synthetic_count": a.synthetic_count,
        "synthetic_frames": a.synthetic_frames, "synthetic_size": a.synthetic_size,
        "init": a.init, "interp": a.interp,
    });
    append_manifest(&parent_dir(&a.out), &manifest("train", config, Some(cfg.seed), ids, started))?;
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let started = now();
    let params = ParameterStore::load(&a.ckpt)?;
    let seq = load_source(&a.input, a.max_frames)?;
    let out = encode_video(&seq, &params, a.gop)?;
    let bytes = out.bytes();
    std::fs::write(&a.out, &bytes).map_err(|e| Error::io(&a.out, e))?;
    if let Some(dir) = &a.recon {
        media_io::save_png_dir(dir, &VideoSequence::new(out.reconstructions.clone(), seq.fps)?)?;
    }
    println!(
        "{} frames {}x{}: {} bytes, {:.4} bpp, {:.2} dB",
        seq.len(),
        seq.width(),
        seq.height(),
        bytes.len(),
        out.bpp(),
        out.mean_psnr()
    );
    let config = json!({"input": a.input, "ckpt": a.ckpt, "gop": a.gop, "out": a.out, "bytes": bytes.len(),
        "bpp": out.bpp(), "psnr": out.mean_psnr()});
    append_manifest(&parent_dir(&a.out), &manifest("encode", config, None, vec![id_hex(&params)?], started))?;
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let started = now();
    let params = ParameterStore::load(&a.ckpt)?;
    let bytes = std::fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let header = BitstreamContainer::parse_header(&bytes)?;
    let seq = decode_video(&bytes, &params)?;
    media_io::save_png_dir(&a.out, &seq)?;
    println!("decoded {} frames {}x{} to {}", seq.len(), header.width, header.height, a.out.display());
    let config = json!({"input": a.input, "ckpt": a.ckpt, "out": a.out});
    append_manifest(&a.out, &manifest("decode", config, None, vec![id_hex(&params)?], started))?;
    Ok(())
}

/// Codec label derived from the model configuration.
pub fn codec_label(p: &ParameterStore) -> String {
    match &p.meta.model {
        Some(m) if m.use_interpolator => "kmfv".to_string(),
        Some(_) => "kmfv-no-interp".to_string(),
        None => "unknown".to_string(),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let started = now();
    let mut models = Vec::new();
    let mut ids = Vec::new();
    for path in &a.ckpts {
        let params = ParameterStore::load(path)?;
        ids.push(id_hex(&params)?);
        let lambda = params.meta.lambda.unwrap_or(f64::NAN);
        let codec = codec_label(&params);
        if a.intra_baseline {
            models.push(EvalModel {
                codec: format!("{codec}-intra"),
                lambda,
                gop_size: 1,
                params: params.clone(),
            });
        }
        models.push(EvalModel {
            codec,
            lambda,
            gop_size: a.gop,
            params,
        });
    }
    let seqs: Vec<(String, VideoSequence)> = a
        .seqs
        .iter()
        .map(|s| Ok((source_name(s), load_source(s, a.max_frames)?)))
        .collect::<Result<_>>()?;
    let report = evalkit::evaluate(&seqs, &models)?;
    report.write_csv(&a.csv)?;
    if let Some(dir) = &a.plots {
        evalkit::write_plots(&report, &a.dataset, dir)?;
    }
    print_curves(&report);
    let mut timing = serde_json::Value::Null;
    if let (Some(runs), Some((_, seq))) = (a.timing_runs, seqs.first()) {
        let m = models.iter().find(|m| m.gop_size == a.gop).expect("at least one model");
        let t = evalkit::timing_report(seq, &m.params, a.gop, runs)?;
        println!("{}", serde_json::to_string_pretty(&t)?);
        timing = serde_json::to_value(&t)?;
    }
    let config = json!({"ckpts": a.ckpts, "seqs": a.seqs, "gop": a.gop, "intra_baseline": a.intra_baseline,
        "csv": a.csv, "plots": a.plots, "timing": timing});
    append_manifest(&parent_dir(&a.csv), &manifest("eval", config, None, ids, started))?;
    Ok(())
}

fn print_curves(r: &EvalReport) {
    for ((seq, codec), c) in &r.curves {
        let pts: Vec<String> = c.points.iter().map(|p| format!("({:.4}, {:.2})", p.bpp, p.psnr)).collect();
        println!("{seq} {codec}: {}", pts.join(" "));
    }
}

fn pick_codec(report: &EvalReport, want: &Option<String>, file: &Path) -> Result<String> {
    let mut codecs: Vec<&String> = report.curves.keys().map(|(_, c)| c).collect();
    codecs.sort();
    codecs.dedup();
    match want {
        Some(c) if codecs.contains(&c) => Ok(c.clone()),
        Some(c) => Err(Error::invalid(format!("{}: no codec {c}", file.display()))),
        None if codecs.len() == 1 => Ok(codecs[0].clone()),
        None => Err(Error::invalid(format!(
            "{} holds several codecs ({}); pick one with --anchor-codec/--test-codec",
            file.display(),
            codecs.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn bdrate(a: BdrateArgs) -> Result<()> {
    let load = |p: &Path| -> Result<EvalReport> {
        let rows = evalkit::read_csv(p)?;
        Ok(EvalReport {
            curves: evalkit::curves_from_rows(&rows),
            rows,
        })
    };
    let anchor = load(&a.anchor)?;
    let test = load(&a.test)?;
    let ac = pick_codec(&anchor, &a.anchor_codec, &a.anchor)?;
    let tc = pick_codec(&test, &a.test_codec, &a.test)?;
    let mut per = Vec::new();
    for seq in anchor.sequences() {
        let t: &RDCurve = test.curve(&seq, &tc)?;
        let b = evalkit::bd_rate(anchor.curve(&seq, &ac)?, t)?;
        println!("{seq}: {b:+.2}%");
        per.push(b);
    }
    if per.is_empty() {
        return Err(Error::invalid("no sequences in anchor CSV"));
    }
    let avg = evalkit::bd_rate(anchor.curve(evalkit::AVERAGE, &ac)?, test.curve(evalkit::AVERAGE, &tc)?)?;
    println!("mean of per-sequence BD-rates: {:+.2}%", per.iter().sum::<f64>() / per.len() as f64);
    println!("BD-rate of averaged curves: {avg:+.2}%");
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let (params, cfg) = match &a.ckpt {
        Some(p) => {
            let params = ParameterStore::load(p)?;
            let cfg = params
                .meta
                .model
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no model configuration".into()))?;
            (params, cfg)
        }
        None => {
            let cfg: ModelConfig = resolve_config(&a.model, TrainConfig::default())?.model;
            let mut p = init_params(&cfg, 0)?;
            if cfg.use_interpolator {
                let ip = interpolation::init_interpolator(&InterpolatorSpec::default(), 0)?;
                p.merge_prefix(&ip, "interp.");
            }
            (p, cfg)
        }
    };
    let rows = parameter_report(&params, &cfg);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        print!("{}", format_report(&rows));
    }
    Ok(())
}
