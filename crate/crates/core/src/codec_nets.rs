//! B-frame auto-encoder with per-pixel kernel heads, and the I-frame
//! image codec.
//!
//! Both share the same latent path: an analysis transform to `y`, a
//! hyper-encoder to `z`, a factorized prior for `z`, and a hyper-decoder
//! that predicts a mean and a scale for every element of `y`.
//!
//! Forward passes are generic over [`Backend`] so training and coding run
//! the same arithmetic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{bottleneck_names, Backend, Eval};
use crate::entropy::models::{init_bottleneck, SCALE_BOUND};
use crate::error::{Error, Result};
use crate::interpolation::{interpolate, InterpolatorKind, InterpolatorSpec};
use crate::kernel_synthesis::{clamp_to_frame, KernelField, KernelPair, ReferenceTriple};
use crate::media_io::{Frame, PAD_MULTIPLE};
use crate::ops::LEAKY_SLOPE;
use crate::params::{CheckpointMeta, ParameterStore};
use crate::tensor::Tensor;

pub const IFRAME: &str = "iframe";
pub const BFRAME: &str = "bframe";
pub const HEADS: [&str; 6] = ["k0v", "k0h", "k2v", "k2h", "kiv", "kih"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels.
    pub m: usize,
    /// Hyper-latent channels.
    pub n: usize,
    /// Channels of the feature map the kernel heads read.
    pub k: usize,
    /// 1D kernel length, odd.
    pub ks: usize,
    pub use_interpolator: bool,
    /// Softmax-normalise each 1D kernel.
    pub normalize_kernels: bool,
    pub downsample_stages: usize,
    /// Channels of the image codec.
    pub iframe_m: usize,
    pub iframe_n: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 128,
            n: 96,
            k: 64,
            ks: 31,
            use_interpolator: true,
            normalize_kernels: false,
            downsample_stages: 4,
            iframe_m: 128,
            iframe_n: 96,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 || self.iframe_m == 0 || self.iframe_n == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.ks.is_multiple_of(2) || self.ks == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.ks)));
        }
        if self.downsample_stages != 4 {
            return Err(Error::invalid("only four downsampling stages are supported"));
        }
        Ok(())
    }

    pub fn n_refs(&self) -> usize {
        if self.use_interpolator {
            3
        } else {
            2
        }
    }

    pub fn heads(&self) -> &'static [&'static str] {
        &HEADS[..2 * self.n_refs()]
    }

    fn b_input_channels(&self) -> usize {
        3 * (1 + self.n_refs())
    }
}

/// Quantised latents of one frame with their entropy-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub means: Tensor,
    pub scales: Tensor,
    pub y_likelihoods: Tensor,
    pub z_likelihoods: Tensor,
}

impl LatentBundle {
    pub fn estimated_bits(&self) -> Result<f64> {
        Ok(crate::entropy::estimate_bits(self.y_likelihoods.data())?
            + crate::entropy::estimate_bits(self.z_likelihoods.data())?)
    }
}

// ---- parameter initialisation ----

fn conv_init(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize, gain: f32) {
    let fan_in = (c_in * k * k) as f32;
    let bound = gain * (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
    let n = c_out * c_in * k * k;
    let w: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    store.insert(format!("{name}.w"), Tensor::from_vec(&[c_out, c_in, k, k], w).unwrap());
    store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

fn init_hyper(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, m: usize, n: usize) {
    conv_init(store, rng, &format!("{prefix}.hyper_enc.0"), n, m, 3, 1.0);
    conv_init(store, rng, &format!("{prefix}.hyper_enc.1"), n, n, 5, 1.0);
    conv_init(store, rng, &format!("{prefix}.hyper_enc.2"), n, n, 5, 0.5);
    conv_init(store, rng, &format!("{prefix}.hyper_dec.0"), n, n, 3, 1.0);
    conv_init(store, rng, &format!("{prefix}.hyper_dec.1"), n, n, 3, 1.0);
    conv_init(store, rng, &format!("{prefix}.hyper_dec.2"), 2 * m, n, 3, 0.5);
    // Start with unit scales.
    let b = store.get_mut(&format!("{prefix}.hyper_dec.2.b")).unwrap();
    for v in &mut b.data_mut()[m..] {
        *v = 1.0;
    }
    for (name, t) in init_bottleneck(n, rng) {
        store.insert(format!("{prefix}.bottleneck.{name}"), t);
    }
}

/// Fresh parameters for the image codec and the B-frame codec.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = CheckpointMeta {
        model: Some(cfg.clone()),
        ..CheckpointMeta::default()
    };
    let mut s = ParameterStore::new(meta);

    let (im, inn) = (cfg.iframe_m, cfg.iframe_n);
    let mut c_in = 3;
    for i in 0..4 {
        conv_init(&mut s, &mut rng, &format!("{IFRAME}.enc.{i}"), im, c_in, 5, if i == 3 { 0.5 } else { 1.0 });
        c_in = im;
    }
    for i in 0..4 {
        let c_out = if i == 3 { 3 } else { im };
        conv_init(&mut s, &mut rng, &format!("{IFRAME}.dec.{i}"), c_out, im, 3, if i == 3 { 0.5 } else { 1.0 });
    }
    for v in s.get_mut(&format!("{IFRAME}.dec.3.b")).unwrap().data_mut() {
        *v = 0.5;
    }
    init_hyper(&mut s, &mut rng, IFRAME, im, inn);

    let (m, n, k, ks) = (cfg.m, cfg.n, cfg.k, cfg.ks);
    let mut c_in = cfg.b_input_channels();
    for i in 0..4 {
        conv_init(&mut s, &mut rng, &format!("{BFRAME}.enc.{i}"), m, c_in, 5, if i == 3 { 0.5 } else { 1.0 });
        c_in = m;
    }
    for i in 0..4 {
        let c_out = if i == 3 { k } else { m };
        conv_init(&mut s, &mut rng, &format!("{BFRAME}.dec.{i}"), c_out, m, 3, 1.0);
    }
    init_hyper(&mut s, &mut rng, BFRAME, m, n);
    // Each head starts near a centred delta so the first prediction is the
    // mean of the references.
    let centre = if cfg.normalize_kernels { 4.0 } else { (1.0 / cfg.n_refs() as f32).sqrt() };
    for h in cfg.heads() {
        conv_init(&mut s, &mut rng, &format!("{BFRAME}.heads.{h}.0"), k, k, 3, 1.0);
        conv_init(&mut s, &mut rng, &format!("{BFRAME}.heads.{h}.1"), ks, k, 3, 0.05);
        s.get_mut(&format!("{BFRAME}.heads.{h}.1.b")).unwrap().data_mut()[ks / 2] = centre;
    }
    Ok(s)
}

// ---- generic forward passes ----

fn conv<B: Backend>(b: &mut B, name: &str, x: &B::V, stride: usize) -> Result<B::V> {
    let w = b.param(&format!("{name}.w"))?;
    let bias = b.param(&format!("{name}.b"))?;
    let pad = b.value(&w).shape()[2] / 2;
    Ok(b.conv2d(x, &w, &bias, stride, pad))
}

fn conv_act<B: Backend>(b: &mut B, name: &str, x: &B::V, stride: usize) -> Result<B::V> {
    let h = conv(b, name, x, stride)?;
    Ok(b.leaky_relu(&h))
}

fn up_conv<B: Backend>(b: &mut B, name: &str, x: &B::V) -> Result<B::V> {
    let u = b.upsample2x(x);
    conv(b, name, &u, 1)
}

pub fn check_padded(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(PAD_MULTIPLE) || !w.is_multiple_of(PAD_MULTIPLE) || h == 0 || w == 0 {
        return Err(Error::NotPadded {
            width: w,
            height: h,
            multiple: PAD_MULTIPLE,
        });
    }
    Ok(())
}

/// Four stride-2 stages.
pub fn analysis<B: Backend>(b: &mut B, prefix: &str, x: &B::V) -> Result<B::V> {
    let (_, h, w) = b.value(x).chw();
    check_padded(h, w)?;
    let mut t = x.clone();
    for i in 0..3 {
        t = conv_act(b, &format!("{prefix}.enc.{i}"), &t, 2)?;
    }
    conv(b, &format!("{prefix}.enc.3"), &t, 2)
}

pub fn hyper_analysis<B: Backend>(b: &mut B, prefix: &str, y: &B::V) -> Result<B::V> {
    let t = conv_act(b, &format!("{prefix}.hyper_enc.0"), y, 1)?;
    let t = conv_act(b, &format!("{prefix}.hyper_enc.1"), &t, 2)?;
    conv(b, &format!("{prefix}.hyper_enc.2"), &t, 2)
}

/// `(means, bounded scales)` for `y` from the quantised hyper-latent.
pub fn hyper_synthesis<B: Backend>(b: &mut B, prefix: &str, z_hat: &B::V) -> Result<(B::V, B::V)> {
    let t = up_conv(b, &format!("{prefix}.hyper_dec.0"), z_hat)?;
    let t = b.leaky_relu(&t);
    let t = up_conv(b, &format!("{prefix}.hyper_dec.1"), &t)?;
    let t = b.leaky_relu(&t);
    let t = conv(b, &format!("{prefix}.hyper_dec.2"), &t, 1)?;
    let m = b.value(&t).chw().0 / 2;
    let means = b.slice_channels(&t, 0, m);
    let raw = b.slice_channels(&t, m, m);
    let scales = b.lower_bound(&raw, SCALE_BOUND);
    Ok((means, scales))
}

/// Image synthesis; the output is not clamped.
pub fn iframe_synthesis<B: Backend>(b: &mut B, y_hat: &B::V) -> Result<B::V> {
    let mut t = y_hat.clone();
    for i in 0..3 {
        t = up_conv(b, &format!("{IFRAME}.dec.{i}"), &t)?;
        t = b.leaky_relu(&t);
    }
    up_conv(b, &format!("{IFRAME}.dec.3"), &t)
}

/// Decoder trunk and kernel heads; returns kernels in reference order.
pub fn kernel_heads<B: Backend>(b: &mut B, cfg: &ModelConfig, y_hat: &B::V) -> Result<Vec<B::V>> {
    let mut t = y_hat.clone();
    for i in 0..4 {
        t = up_conv(b, &format!("{BFRAME}.dec.{i}"), &t)?;
        t = b.leaky_relu(&t);
    }
    let mut out = Vec::with_capacity(cfg.heads().len());
    for h in cfg.heads() {
        let u = conv_act(b, &format!("{BFRAME}.heads.{h}.0"), &t, 1)?;
        let mut k = conv(b, &format!("{BFRAME}.heads.{h}.1"), &u, 1)?;
        if cfg.normalize_kernels {
            let s = b.softmax_channels(&k);
            k = b.scale(&s, (1.0 / cfg.n_refs() as f32).sqrt());
        }
        out.push(k);
    }
    Ok(out)
}

/// B-frame prediction from quantised latents and reference planes.
pub fn bframe_synthesis<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    y_hat: &B::V,
    refs: &[&B::V],
) -> Result<(B::V, Vec<B::V>)> {
    if refs.len() != cfg.n_refs() {
        return Err(Error::shape(format!("expected {} references, got {}", cfg.n_refs(), refs.len())));
    }
    let kernels = kernel_heads(b, cfg, y_hat)?;
    let (_, h, w) = b.value(refs[0]).chw();
    let kshape = b.value(&kernels[0]).shape().to_vec();
    if kshape[1] != h || kshape[2] != w {
        return Err(Error::shape(format!("latent decodes to {}x{}, references are {w}x{h}", kshape[2], kshape[1])));
    }
    let kref: Vec<&B::V> = kernels.iter().collect();
    let out = b.synthesize(refs, &kref);
    Ok((out, kernels))
}

/// Analysis input for a B-frame: current frame then its references.
pub fn bframe_input<B: Backend>(b: &mut B, current: &B::V, refs: &[&B::V]) -> B::V {
    let mut xs = vec![current];
    xs.extend_from_slice(refs);
    b.concat(&xs)
}

// ---- inference wrappers ----

fn ref_planes<'r>(refs: &'r ReferenceTriple, cfg: &ModelConfig) -> Result<Vec<&'r Tensor>> {
    if refs.refi.is_some() != cfg.use_interpolator {
        return Err(Error::shape(if cfg.use_interpolator {
            "model expects an interpolated reference"
        } else {
            "model was built without an interpolated reference"
        }));
    }
    Ok(refs.planes())
}

/// Analysis transform of a B-frame.
pub fn encode_b(current: &Frame, refs: &ReferenceTriple, params: &ParameterStore, cfg: &ModelConfig) -> Result<Tensor> {
    let planes = ref_planes(refs, cfg)?;
    if (current.width(), current.height()) != (refs.ref0.width(), refs.ref0.height()) {
        return Err(Error::shape("current frame and references differ in size"));
    }
    let mut e = Eval::new(params);
    let cur = e.constant(current.tensor().clone());
    let rv: Vec<_> = planes.iter().map(|p| e.constant((*p).clone())).collect();
    let rr: Vec<_> = rv.iter().collect();
    let x = bframe_input(&mut e, &cur, &rr);
    let y = analysis(&mut e, BFRAME, &x)?;
    Ok((*y).clone())
}

/// Kernel prediction and synthesis of a B-frame.
pub fn decode_b(
    y_hat: &Tensor,
    refs: &ReferenceTriple,
    params: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<(Frame, KernelField)> {
    let planes = ref_planes(refs, cfg)?;
    if y_hat.shape().len() != 3 || y_hat.shape()[0] != cfg.m {
        return Err(Error::shape(format!("latent shape {:?} does not have {} channels", y_hat.shape(), cfg.m)));
    }
    let mut e = Eval::new(params);
    let y = e.constant(y_hat.clone());
    let rv: Vec<_> = planes.iter().map(|p| e.constant((*p).clone())).collect();
    let rr: Vec<_> = rv.iter().collect();
    let (out, kernels) = bframe_synthesis(&mut e, cfg, &y, &rr)?;
    let pairs = kernels
        .chunks(2)
        .map(|p| KernelPair {
            vertical: (*p[0]).clone(),
            horizontal: (*p[1]).clone(),
        })
        .collect();
    let field = KernelField::new(pairs)?;
    Ok((clamp_to_frame((*out).clone()), field))
}

#[derive(Debug, Clone)]
pub struct HyperOutput {
    pub z: Tensor,
    pub z_hat: Tensor,
    pub z_likelihoods: Tensor,
    pub means: Tensor,
    pub scales: Tensor,
}

/// Hyper-encoder, rounding and hyper-decoder.
pub fn hyper_round_trip(y: &Tensor, params: &ParameterStore, prefix: &str) -> Result<HyperOutput> {
    let mut e = Eval::new(params);
    let yv = e.constant(y.clone());
    let z = hyper_analysis(&mut e, prefix, &yv)?;
    let z_hat = e.constant(z.map(f32::round));
    let zl = e.factorized_likelihood(&z_hat, &format!("{prefix}.bottleneck"))?;
    let (means, scales) = hyper_synthesis(&mut e, prefix, &z_hat)?;
    Ok(HyperOutput {
        z: (*z).clone(),
        z_hat: (*z_hat).clone(),
        z_likelihoods: (*zl).clone(),
        means: (*means).clone(),
        scales: (*scales).clone(),
    })
}

/// Means and scales implied by an already-quantised hyper-latent.
pub fn hyper_decode(z_hat: &Tensor, params: &ParameterStore, prefix: &str) -> Result<(Tensor, Tensor)> {
    let mut e = Eval::new(params);
    let z = e.constant(z_hat.clone());
    let (m, s) = hyper_synthesis(&mut e, prefix, &z)?;
    Ok(((*m).clone(), (*s).clone()))
}

/// Quantise `y` against its hyperprior.
pub fn quantize_latents(y: &Tensor, params: &ParameterStore, prefix: &str) -> Result<LatentBundle> {
    let h = hyper_round_trip(y, params, prefix)?;
    let y_hat = crate::entropy::quantize(
        y,
        crate::entropy::QuantizationMode::Round,
        Some(&h.means),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let mut e = Eval::new(params);
    let (yv, mv, sv) = (e.constant(y_hat.clone()), e.constant(h.means.clone()), e.constant(h.scales.clone()));
    let yl = e.gaussian_likelihood(&yv, &mv, &sv);
    Ok(LatentBundle {
        y_hat,
        z_hat: h.z_hat,
        means: h.means,
        scales: h.scales,
        y_likelihoods: (*yl).clone(),
        z_likelihoods: h.z_likelihoods,
    })
}

/// Image-codec analysis transform.
pub fn encode_i(frame: &Frame, params: &ParameterStore) -> Result<Tensor> {
    let mut e = Eval::new(params);
    let x = e.constant(frame.tensor().clone());
    let y = analysis(&mut e, IFRAME, &x)?;
    Ok((*y).clone())
}

/// Image-codec synthesis, clamped to a frame.
pub fn decode_i(y_hat: &Tensor, params: &ParameterStore) -> Result<Frame> {
    let mut e = Eval::new(params);
    let y = e.constant(y_hat.clone());
    let x = iframe_synthesis(&mut e, &y)?;
    Ok(clamp_to_frame((*x).clone()))
}

/// Code a frame with the image codec at inference: reconstruction and
/// quantised latents.
pub fn iframe_code(frame: &Frame, params: &ParameterStore) -> Result<(Frame, LatentBundle)> {
    let y = encode_i(frame, params)?;
    let lat = quantize_latents(&y, params, IFRAME)?;
    let rec = decode_i(&lat.y_hat, params)?;
    Ok((rec, lat))
}

/// A loaded model: parameters, configuration and the midpoint predictor.
#[derive(Debug, Clone)]
pub struct Codec<'a> {
    pub params: &'a ParameterStore,
    pub cfg: ModelConfig,
    /// Present exactly when the model uses an interpolated reference.
    pub interp: Option<InterpolatorSpec>,
}

impl<'a> Codec<'a> {
    pub fn new(params: &'a ParameterStore) -> Result<Self> {
        let cfg = params
            .meta
            .model
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model configuration".into()))?;
        cfg.validate()?;
        let interp = if cfg.use_interpolator {
            let spec = params.meta.interpolator.clone().unwrap_or_else(InterpolatorSpec::average);
            if spec.kind == InterpolatorKind::SmallLearned && params.count_with_prefix("interp.") == 0 {
                return Err(Error::Checkpoint("model uses a learned interpolator but has no interp.* tensors".into()));
            }
            Some(spec)
        } else {
            None
        };
        Ok(Codec { params, cfg, interp })
    }

    /// The interpolated midpoint, or `None` for the four-kernel variant.
    pub fn midpoint(&self, a: &Frame, b: &Frame) -> Result<Option<Frame>> {
        match &self.interp {
            Some(spec) => Ok(Some(interpolate(a, b, spec, Some(self.params))?)),
            None => Ok(None),
        }
    }

    pub fn references(&self, a: &Frame, b: &Frame) -> Result<ReferenceTriple> {
        let mid = self.midpoint(a, b)?;
        ReferenceTriple::new(a.clone(), b.clone(), mid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub module: String,
    pub parameters: usize,
    pub share: f64,
}

/// Parameter counts grouped by module.
pub fn parameter_report(params: &ParameterStore, cfg: &ModelConfig) -> Vec<ReportRow> {
    let heads = if cfg.use_interpolator {
        "Six 1D kernel sub-networks"
    } else {
        "Four 1D kernel sub-networks"
    };
    let groups: Vec<(&str, Vec<String>)> = vec![
        ("Image codec", vec![format!("{IFRAME}.")]),
        ("Frame interpolator", vec!["interp.".to_string()]),
        (heads, vec![format!("{BFRAME}.heads.")]),
        ("Frame auto-encoder", vec![format!("{BFRAME}.enc."), format!("{BFRAME}.dec.")]),
        (
            "Frame hyper-prior network",
            vec![format!("{BFRAME}.hyper_"), format!("{BFRAME}.bottleneck.")],
        ),
    ];
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .filter(|(name, _)| cfg.use_interpolator || *name != "Frame interpolator")
        .map(|(name, prefixes)| ReportRow {
            module: name.to_string(),
            parameters: prefixes.iter().map(|p| params.count_with_prefix(p)).sum(),
            share: 0.0,
        })
        .collect();
    let total: usize = rows.iter().map(|r| r.parameters).sum();
    for r in &mut rows {
        r.share = if total == 0 { 0.0 } else { 100.0 * r.parameters as f64 / total as f64 };
    }
    rows
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = format!("{:<32} {:>12} {:>8}\n", "module", "parameters", "share");
    for r in rows {
        s.push_str(&format!("{:<32} {:>12} {:>7.2}%\n", r.module, r.parameters, r.share));
    }
    let total: usize = rows.iter().map(|r| r.parameters).sum();
    s.push_str(&format!("{:<32} {:>12} {:>7.2}%\n", "total", total, rows.iter().map(|r| r.share).sum::<f64>()));
    s
}

/// Names of the factorized-prior tensors of `prefix`.
pub fn bottleneck_param_names(prefix: &str) -> [String; 11] {
    bottleneck_names(&format!("{prefix}.bottleneck"))
}
