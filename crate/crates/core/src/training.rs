//! Rate-distortion objective over a five-frame GoP and the optimisation
//! loop.
//!
//! The loss of one tuple is `sum_f lambda_f * s * MSE_f + R_f`, where `s`
//! scales the [0,1] MSE (255^2 by default, so lambdas around 1e-2 balance a
//! rate measured in bits per pixel) and `R_f` is either bpp or raw bits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, Graph, Var};
use crate::codec_nets::{self, Codec, ModelConfig, BFRAME, IFRAME};
use crate::entropy::models::SCALE_BOUND;
use crate::entropy::QuantizationMode;
use crate::error::{Error, Result};
use crate::gop::{lambda_for_level, training_schedule, FrameType};
use crate::kernel_synthesis::clamp_to_frame;
use crate::media_io::{self, Frame, VideoSequence, TUPLE_LEN};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const BASE_LAMBDAS: [f64; 4] = [0.005, 0.01, 0.03, 0.05];
pub const DEFAULT_DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateNormalization {
    /// Bits divided by the frame's pixel count.
    Bpp,
    Bits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub distortion_scale: f64,
    pub rate: RateNormalization,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            distortion_scale: DEFAULT_DISTORTION_SCALE,
            rate: RateNormalization::Bpp,
        }
    }
}

impl LossWeights {
    /// Plain `lambda * MSE + bits`.
    pub fn raw() -> Self {
        LossWeights {
            distortion_scale: 1.0,
            rate: RateNormalization::Bits,
        }
    }

    fn rate_term(&self, bits: f64, pixels: usize) -> f64 {
        match self.rate {
            RateNormalization::Bpp => bits / pixels as f64,
            RateNormalization::Bits => bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub distortion: Vec<f64>,
    pub bits: Vec<f64>,
    /// Rate as it enters the loss, after normalisation.
    pub rate: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub levels: Vec<u8>,
    pub loss: f64,
}

impl StepReport {
    fn from_parts(distortion: Vec<f64>, bits: Vec<f64>, rate: Vec<f64>, lambdas: Vec<f64>, levels: Vec<u8>, w: &LossWeights) -> Self {
        let loss = distortion
            .iter()
            .zip(&rate)
            .zip(&lambdas)
            .map(|((d, r), l)| l * w.distortion_scale * d + r)
            .sum();
        StepReport {
            distortion,
            bits,
            rate,
            lambdas,
            levels,
            loss,
        }
    }
}

/// Loss of a set of coded frames.
pub fn rd_loss(
    originals: &[Frame],
    reconstructions: &[Frame],
    bits_per_frame: &[f64],
    lambdas: &[f64],
    weights: &LossWeights,
) -> Result<StepReport> {
    let n = originals.len();
    if reconstructions.len() != n || bits_per_frame.len() != n || lambdas.len() != n {
        return Err(Error::invalid(format!(
            "rd_loss lengths differ: {n} originals, {} reconstructions, {} rates, {} lambdas",
            reconstructions.len(),
            bits_per_frame.len(),
            lambdas.len()
        )));
    }
    let mut d = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for (o, rec) in originals.iter().zip(reconstructions) {
        d.push(media_io::mse(o, rec)?);
        r.push(weights.rate_term(0.0, o.width() * o.height()));
    }
    for (i, &b) in bits_per_frame.iter().enumerate() {
        r[i] = weights.rate_term(b, originals[i].width() * originals[i].height());
    }
    Ok(StepReport::from_parts(d, bits_per_frame.to_vec(), r, lambdas.to_vec(), vec![0; n], weights))
}

/// Adam with optional global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update every parameter named in `grads`; returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>, clip: Option<f64>) -> f64 {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let c = match clip {
            Some(max) if norm > max => (max / norm) as f32,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gv = gv * c;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
        norm
    }
}

/// Add `weight * grads` into `acc`.
pub fn accumulate(acc: &mut Option<BTreeMap<String, Tensor>>, grads: BTreeMap<String, Tensor>, weight: f32) {
    match acc {
        None => {
            *acc = Some(grads.into_iter().map(|(k, t)| (k, t.map(|v| v * weight))).collect());
        }
        Some(a) => {
            for (k, g) in grads {
                match a.get_mut(&k) {
                    Some(t) => {
                        for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                            *x += weight * y;
                        }
                    }
                    None => {
                        a.insert(k, g.map(|v| v * weight));
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch: usize,
    pub steps: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub quantization: String,
    pub grad_clip: Option<f64>,
    /// Tuples use frames `t, t+s, ..., t+4s` with `s` drawn up to this.
    pub max_temporal_stride: usize,
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lambda: 0.01,
            learning_rate: 1e-4,
            batch_size: 4,
            patch: 256,
            steps: 1000,
            seed: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            quantization: "noise".into(),
            grad_clip: Some(1.0),
            max_temporal_stride: 1,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
}

impl TrainConfig {
    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lambda" | "base_lambda" => self.base_lambda = parse(key, v)?,
            "lr" | "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "m" => self.model.m = parse(key, v)?,
            "n" => self.model.n = parse(key, v)?,
            "k" => self.model.k = parse(key, v)?,
            "ks" => self.model.ks = parse(key, v)?,
            "iframe_m" => self.model.iframe_m = parse(key, v)?,
            "iframe_n" => self.model.iframe_n = parse(key, v)?,
            "use_interpolator" => self.model.use_interpolator = parse(key, v)?,
            "normalize_kernels" => self.model.normalize_kernels = parse(key, v)?,
            "distortion_scale" => self.weights.distortion_scale = parse(key, v)?,
            "rate" => {
                self.weights.rate = match v {
                    "bpp" => RateNormalization::Bpp,
                    "bits" => RateNormalization::Bits,
                    _ => return Err(Error::invalid(format!("rate must be bpp or bits, got {v:?}"))),
                }
            }
            "quantization" => {
                let _: QuantizationMode = v.parse()?;
                self.quantization = v.to_string();
            }
            "grad_clip" => self.grad_clip = if v == "none" { None } else { Some(parse(key, v)?) },
            "max_temporal_stride" => self.max_temporal_stride = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "checkpoint_path" => self.checkpoint_path = Some(PathBuf::from(v)),
            other => return Err(Error::invalid(format!("unknown training setting {other:?}"))),
        }
        Ok(())
    }

    /// Parse a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("{}:{}: expected key=value", path.display(), no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        if self.batch_size == 0 || self.patch == 0 || !self.patch.is_multiple_of(media_io::PAD_MULTIPLE) {
            return Err(Error::invalid("batch size must be positive and patch a multiple of 64"));
        }
        if self.max_temporal_stride == 0 {
            return Err(Error::invalid("temporal stride must be at least 1"));
        }
        self.model.validate()
    }

    fn mode(&self) -> QuantizationMode {
        self.quantization.parse().unwrap_or(QuantizationMode::Noise)
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub frame: usize,
    pub frame_level: u8,
    pub lambda: f64,
    pub distortion: f64,
    pub r_bpp: f64,
    pub loss: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct FrameOut {
    recon: Var,
    bits: Var,
    dist: Var,
    floor_hits: usize,
}

fn quantize_var(
    g: &mut Graph,
    x: &Var,
    means: Option<&Var>,
    mode: QuantizationMode,
    rng: &mut ChaCha8Rng,
) -> Var {
    let xv = g.value(x).clone();
    let delta = match mode {
        QuantizationMode::Noise => crate::entropy::quantize(&xv, mode, None, rng).expect("shapes").data().iter().zip(xv.data()).map(|(a, b)| a - b).collect::<Vec<f32>>(),
        _ => {
            let m = means.map(|m| g.value(m).clone());
            let q = crate::entropy::quantize(&xv, QuantizationMode::Round, m.as_ref(), rng).expect("shapes");
            q.data().iter().zip(xv.data()).map(|(a, b)| a - b).collect()
        }
    };
    let d = g.constant(Tensor::from_vec(xv.shape(), delta).unwrap());
    g.add(x, &d)
}

/// Latent path shared by both codecs: returns (quantised y, total bits,
/// scale-floor hits).
fn code_latent(g: &mut Graph, prefix: &str, y: &Var, mode: QuantizationMode, rng: &mut ChaCha8Rng) -> Result<(Var, Var, usize)> {
    let z = codec_nets::hyper_analysis(g, prefix, y)?;
    let z_t = quantize_var(g, &z, None, mode, rng);
    let zl = g.factorized_likelihood(&z_t, &format!("{prefix}.bottleneck"))?;
    let (means, scales) = codec_nets::hyper_synthesis(g, prefix, &z_t)?;
    let hits = g.value(&scales).data().iter().filter(|&&s| s <= SCALE_BOUND).count();
    let y_t = quantize_var(g, y, Some(&means), mode, rng);
    let yl = g.gaussian_likelihood(&y_t, &means, &scales);
    let by = g.neg_log2_sum(&yl);
    let bz = g.neg_log2_sum(&zl);
    let bits = g.add(&by, &bz);
    Ok((y_t, bits, hits))
}

fn code_iframe(g: &mut Graph, x: &Var, mode: QuantizationMode, rng: &mut ChaCha8Rng) -> Result<FrameOut> {
    let y = codec_nets::analysis(g, IFRAME, x)?;
    let (y_t, bits, floor_hits) = code_latent(g, IFRAME, &y, mode, rng)?;
    let recon = codec_nets::iframe_synthesis(g, &y_t)?;
    let dist = g.mse(&recon, x);
    Ok(FrameOut {
        recon,
        bits,
        dist,
        floor_hits,
    })
}

fn code_bframe(
    g: &mut Graph,
    cfg: &ModelConfig,
    x: &Var,
    refs: &[Var],
    mode: QuantizationMode,
    rng: &mut ChaCha8Rng,
) -> Result<FrameOut> {
    let rr: Vec<&Var> = refs.iter().collect();
    let inp = codec_nets::bframe_input(g, x, &rr);
    let y = codec_nets::analysis(g, BFRAME, &inp)?;
    let (y_t, bits, floor_hits) = code_latent(g, BFRAME, &y, mode, rng)?;
    let (recon, _) = codec_nets::bframe_synthesis(g, cfg, &y_t, &rr)?;
    let dist = g.mse(&recon, x);
    Ok(FrameOut {
        recon,
        bits,
        dist,
        floor_hits,
    })
}

/// Forward and backward over one five-frame tuple. Every parameter except
/// the interpolator's is trainable; references are detached reconstructions.
pub fn tuple_step(
    store: &ParameterStore,
    frames: &[Frame],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(StepReport, BTreeMap<String, Tensor>)> {
    if frames.len() != TUPLE_LEN {
        return Err(Error::invalid(format!("tuple of {} frames", frames.len())));
    }
    let codec = Codec::new(store)?;
    let sched = training_schedule();
    let mode = cfg.mode();
    let pixels = frames[0].width() * frames[0].height();
    let mut g = Graph::new(store, |n| !n.starts_with("interp."));
    let mut recon: Vec<Option<Frame>> = vec![None; TUPLE_LEN];
    let mut per: Vec<(usize, u8, f64, FrameOut)> = Vec::with_capacity(TUPLE_LEN);
    for st in &sched.steps {
        let f = st.display_index;
        let x = g.constant(frames[f].tensor().clone());
        let out = match st.frame_type {
            FrameType::I => code_iframe(&mut g, &x, mode, rng)?,
            FrameType::B => {
                let (p, q) = (st.ref_prev.unwrap(), st.ref_next.unwrap());
                let (a, b) = (recon[p].clone().unwrap(), recon[q].clone().unwrap());
                let triple = codec.references(&a, &b)?;
                let refs: Vec<Var> = triple.planes().into_iter().map(|t| g.constant(t.clone())).collect();
                code_bframe(&mut g, &codec.cfg, &x, &refs, mode, rng)?
            }
        };
        recon[f] = Some(clamp_to_frame(g.value(&out.recon).clone()));
        per.push((f, st.level, lambda_for_level(cfg.base_lambda, st.level)?, out));
    }
    // Loss in display order.
    per.sort_by_key(|p| p.0);
    let mut total: Option<Var> = None;
    let (mut d, mut bits, mut r, mut lam, mut lv) = (vec![], vec![], vec![], vec![], vec![]);
    let mut hits = 0;
    for (_, level, l, out) in &per {
        let rate_scale = match cfg.weights.rate {
            RateNormalization::Bpp => 1.0 / pixels as f32,
            RateNormalization::Bits => 1.0,
        };
        let dt = g.scale(&out.dist, (l * cfg.weights.distortion_scale) as f32);
        let rt = g.scale(&out.bits, rate_scale);
        let term = g.add(&dt, &rt);
        total = Some(match total {
            Some(t) => g.add(&t, &term),
            None => term,
        });
        let b = g.scalar(out.bits) as f64;
        d.push(g.scalar(out.dist) as f64);
        bits.push(b);
        r.push(cfg.weights.rate_term(b, pixels));
        lam.push(*l);
        lv.push(*level);
        hits += out.floor_hits;
    }
    let total = total.expect("non-empty schedule");
    let report = StepReport::from_parts(d, bits, r, lam, lv, &cfg.weights);
    if !report.loss.is_finite() || !g.scalar(total).is_finite() {
        return Err(Error::Diverged(format!(
            "loss {} at lambda {}; {hits} scales at the {SCALE_BOUND} floor",
            report.loss, cfg.base_lambda
        )));
    }
    let grads = g.backward(total);
    Ok((report, grads))
}

/// Draw a random five-frame tuple from one of the sequences.
pub fn sample_tuple(dataset: &[VideoSequence], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Frame>> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let seq = &dataset[rng.random_range(0..dataset.len())];
    let max_s = ((seq.len().saturating_sub(1)) / (TUPLE_LEN - 1)).min(cfg.max_temporal_stride);
    if max_s == 0 {
        return Err(Error::invalid(format!("training sequences need at least {TUPLE_LEN} frames")));
    }
    let s = rng.random_range(1..=max_s);
    let t0 = rng.random_range(0..=seq.len() - 1 - (TUPLE_LEN - 1) * s);
    let frames: Vec<Frame> = (0..TUPLE_LEN).map(|i| seq.frames[t0 + i * s].clone()).collect();
    Ok(media_io::crop_tuple(&frames, cfg.patch, rng)?.frames)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParameterStore,
    pub metrics: Vec<MetricRow>,
    /// Mean loss per step.
    pub losses: Vec<f64>,
}

/// Optimise `params` (which must carry the model configuration, and the
/// interpolator tensors when the model uses a learned interpolator).
pub fn train(
    dataset: &[VideoSequence],
    mut params: ParameterStore,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &StepReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc = None;
        let mut mean = 0.0;
        for _ in 0..cfg.batch_size {
            let frames = sample_tuple(dataset, cfg, &mut rng)?;
            let (rep, grads) = tuple_step(&params, &frames, cfg, &mut rng)?;
            accumulate(&mut acc, grads, 1.0 / cfg.batch_size as f32);
            mean += rep.loss / cfg.batch_size as f64;
            for i in 0..rep.levels.len() {
                metrics.push(MetricRow {
                    step,
                    frame: i,
                    frame_level: rep.levels[i],
                    lambda: rep.lambdas[i],
                    distortion: rep.distortion[i],
                    r_bpp: rep.bits[i] / (cfg.patch * cfg.patch) as f64,
                    loss: rep.loss,
                });
            }
            on_step(step, &rep);
        }
        if let Some(grads) = acc {
            adam.step(&mut params, &grads, cfg.grad_clip);
        }
        losses.push(mean);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(path) = &cfg.checkpoint_path {
                params.meta.train_steps = adam.steps();
                params.save(path)?;
            }
        }
    }
    params.meta.train_steps += adam.steps();
    params.meta.lambda = Some(cfg.base_lambda);
    Ok(TrainOutcome {
        params,
        metrics,
        losses,
    })
}
