//! The interpolated midpoint reference.
//!
//! Two implementations: the plain average of the neighbours, and a small
//! U-shaped network that predicts a normalised separable kernel per pixel
//! for each neighbour plus a per-pixel blend weight. The network's output
//! is a convex combination of reference pixels, so it never leaves [0,1].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, Eval, Graph};
use crate::error::{Error, Result};
use crate::kernel_synthesis::clamp_to_frame;
use crate::media_io::Frame;
use crate::ops::LEAKY_SLOPE;
use crate::params::{CheckpointMeta, ParameterStore};
use crate::tensor::Tensor;
use crate::training::Adam;

pub const PREFIX: &str = "interp";
/// Spatial dimensions must divide this.
pub const INTERP_MULTIPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpolatorKind {
    AverageBaseline,
    SmallLearned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatorSpec {
    pub kind: InterpolatorKind,
    /// Id of the pre-trained interpolator checkpoint, for the learned kind.
    pub checkpoint_id: Option<u32>,
    pub frozen: bool,
    pub base_channels: usize,
    pub kernel_size: usize,
}

impl Default for InterpolatorSpec {
    fn default() -> Self {
        InterpolatorSpec {
            kind: InterpolatorKind::SmallLearned,
            checkpoint_id: None,
            frozen: true,
            base_channels: 16,
            kernel_size: 13,
        }
    }
}

impl InterpolatorSpec {
    pub fn average() -> Self {
        InterpolatorSpec {
            kind: InterpolatorKind::AverageBaseline,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) || self.base_channels == 0 {
            return Err(Error::invalid("interpolator kernel size must be odd and channels positive"));
        }
        Ok(())
    }
}

fn conv_init(s: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize, gain: f32) {
    let fan_in = (i * 9) as f32;
    let bound = gain * (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
    let w = (0..o * i * 9).map(|_| rng.random_range(-bound..bound)).collect();
    s.insert(format!("{name}.w"), Tensor::from_vec(&[o, i, 3, 3], w).unwrap());
    s.insert(format!("{name}.b"), Tensor::zeros(&[o]));
}

const KERNEL_HEADS: [&str; 4] = ["v0", "h0", "v2", "h2"];

/// Fresh interpolator parameters under the `interp.` prefix. The kernel
/// logits start peaked at the centre tap.
pub fn init_interpolator(spec: &InterpolatorSpec, seed: u64) -> Result<ParameterStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new(CheckpointMeta {
        interpolator: Some(spec.clone()),
        ..CheckpointMeta::default()
    });
    let c = spec.base_channels;
    conv_init(&mut s, &mut rng, "interp.enc0", c, 6, 1.0);
    conv_init(&mut s, &mut rng, "interp.enc1", 2 * c, c, 1.0);
    conv_init(&mut s, &mut rng, "interp.enc2", 4 * c, 2 * c, 1.0);
    conv_init(&mut s, &mut rng, "interp.enc3", 4 * c, 4 * c, 1.0);
    conv_init(&mut s, &mut rng, "interp.dec2", 4 * c, 8 * c, 1.0);
    conv_init(&mut s, &mut rng, "interp.dec1", 2 * c, 6 * c, 1.0);
    conv_init(&mut s, &mut rng, "interp.dec0", c, 3 * c, 1.0);
    for h in KERNEL_HEADS {
        let name = format!("interp.{h}");
        conv_init(&mut s, &mut rng, &name, spec.kernel_size, c, 0.1);
        s.get_mut(&format!("{name}.b")).unwrap().data_mut()[spec.kernel_size / 2] = 6.0;
    }
    conv_init(&mut s, &mut rng, "interp.blend", 1, c, 0.1);
    Ok(s)
}

fn conv<B: Backend>(b: &mut B, name: &str, x: &B::V, stride: usize) -> Result<B::V> {
    let w = b.param(&format!("{PREFIX}.{name}.w"))?;
    let bias = b.param(&format!("{PREFIX}.{name}.b"))?;
    Ok(b.conv2d(x, &w, &bias, stride, 1))
}

fn conv_act<B: Backend>(b: &mut B, name: &str, x: &B::V, stride: usize) -> Result<B::V> {
    let h = conv(b, name, x, stride)?;
    Ok(b.leaky_relu(&h))
}

/// Learned midpoint prediction; dimensions must divide [`INTERP_MULTIPLE`].
pub fn learned_forward<B: Backend>(b: &mut B, r0: &B::V, r2: &B::V) -> Result<B::V> {
    let x = b.concat(&[r0, r2]);
    let e0 = conv_act(b, "enc0", &x, 1)?;
    let e1 = conv_act(b, "enc1", &e0, 2)?;
    let e2 = conv_act(b, "enc2", &e1, 2)?;
    let e3 = conv_act(b, "enc3", &e2, 2)?;
    let u = b.upsample2x(&e3);
    let d = b.concat(&[&u, &e2]);
    let d2 = conv_act(b, "dec2", &d, 1)?;
    let u = b.upsample2x(&d2);
    let d = b.concat(&[&u, &e1]);
    let d1 = conv_act(b, "dec1", &d, 1)?;
    let u = b.upsample2x(&d1);
    let d = b.concat(&[&u, &e0]);
    let d0 = conv_act(b, "dec0", &d, 1)?;
    let mut k = Vec::with_capacity(4);
    for h in KERNEL_HEADS {
        let logits = conv(b, h, &d0, 1)?;
        k.push(b.softmax_channels(&logits));
    }
    let bl = conv(b, "blend", &d0, 1)?;
    let w0 = b.sigmoid(&bl);
    let neg = b.scale(&w0, -1.0);
    let ones = b.constant(Tensor::full(b.value(&w0).shape(), 1.0));
    let w2 = b.add(&ones, &neg);
    let v0 = b.mul_plane(&k[0], &w0);
    let v2 = b.mul_plane(&k[2], &w2);
    Ok(b.synthesize(&[r0, r2], &[&v0, &k[1], &v2, &k[3]]))
}

/// Midpoint frame between `ref0` and `ref2`.
pub fn interpolate(ref0: &Frame, ref2: &Frame, spec: &InterpolatorSpec, params: Option<&ParameterStore>) -> Result<Frame> {
    if (ref0.width(), ref0.height()) != (ref2.width(), ref2.height()) {
        return Err(Error::shape("interpolation inputs differ in size"));
    }
    match spec.kind {
        InterpolatorKind::AverageBaseline => {
            let data = ref0
                .tensor()
                .data()
                .iter()
                .zip(ref2.tensor().data())
                .map(|(a, b)| (a + b) * 0.5)
                .collect();
            Frame::from_vec(ref0.width(), ref0.height(), data)
        }
        InterpolatorKind::SmallLearned => {
            let params = params.ok_or_else(|| Error::Checkpoint("learned interpolator needs parameters".into()))?;
            let (w, h) = (ref0.width(), ref0.height());
            let aligned = w % INTERP_MULTIPLE == 0 && h % INTERP_MULTIPLE == 0;
            let (p0, p2) = if aligned {
                (ref0.clone(), ref2.clone())
            } else {
                (ref0.pad_to_multiple(INTERP_MULTIPLE), ref2.pad_to_multiple(INTERP_MULTIPLE))
            };
            let mut e = Eval::new(params);
            let a = e.constant(p0.tensor().clone());
            let c = e.constant(p2.tensor().clone());
            let out = learned_forward(&mut e, &a, &c)?;
            let f = clamp_to_frame((*out).clone());
            if aligned {
                Ok(f)
            } else {
                f.crop(0, 0, w, h)
            }
        }
    }
}

/// One training example: the two neighbours and the true midpoint.
#[derive(Debug, Clone)]
pub struct Triple {
    pub ref0: Frame,
    pub mid: Frame,
    pub ref2: Frame,
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 4,
        }
    }
}

/// Train the learned interpolator on midpoint triples. Returns the
/// parameters and the mean loss of every epoch.
pub fn pretrain_interpolator(
    dataset: &[Triple],
    spec: &InterpolatorSpec,
    cfg: &PretrainConfig,
) -> Result<(ParameterStore, Vec<f64>)> {
    let mut store = init_interpolator(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut acc: Option<std::collections::BTreeMap<String, Tensor>> = None;
            for &i in batch {
                let t = &dataset[i];
                let mut g = Graph::new(&store, |_| true);
                let a = g.constant(t.ref0.tensor().clone());
                let c = g.constant(t.ref2.tensor().clone());
                let target = g.constant(t.mid.tensor().clone());
                let out = learned_forward(&mut g, &a, &c)?;
                let loss = g.mse(&out, &target);
                let l = g.scalar(loss) as f64;
                if !l.is_finite() {
                    return Err(Error::Diverged(format!("interpolator loss {l} in epoch {epoch}")));
                }
                total += l;
                let grads = g.backward(loss);
                crate::training::accumulate(&mut acc, grads, 1.0 / batch.len() as f32);
            }
            if let Some(grads) = acc {
                adam.step(&mut store, &grads, Some(1.0));
            }
        }
        let mean = total / dataset.len().max(1) as f64;
        log::info!("interp epoch {epoch}: mse {mean:.6}");
        history.push(mean);
    }
    store.meta.train_steps = adam.steps();
    let mut spec = spec.clone();
    spec.checkpoint_id = None;
    store.meta.interpolator = Some(spec);
    Ok((store, history))
}

/// Midpoint triples drawn from synthetic sequences at several spacings;
/// `static_share` of them are frozen scenes.
pub fn synthetic_triples(count: usize, size: usize, seed: u64, static_share: f64) -> Result<Vec<Triple>> {
    use crate::media_io::{synthetic_sequence, SyntheticKind, SyntheticParams};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let still = rng.random::<f64>() < static_share;
        let gap = [1usize, 1, 2, 2, 4][rng.random_range(0..5)];
        let kind = if rng.random::<f64>() < 0.8 {
            SyntheticKind::TranslatingTexture
        } else {
            SyntheticKind::RotatingPattern
        };
        let velocity = if still {
            Some((0.0, 0.0))
        } else {
            let speed = rng.random_range(0.25..1.6);
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Some((speed * ang.cos(), speed * ang.sin()))
        };
        let seq = synthetic_sequence(&SyntheticParams {
            kind,
            n_frames: 2 * gap + 1,
            width: size,
            height: size,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            velocity,
        })?;
        let f = seq.frames;
        out.push(Triple {
            ref0: f[0].clone(),
            mid: f[gap].clone(),
            ref2: f[2 * gap].clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media_io::rgb_psnr;

    #[test]
    fn average_of_static_scene_is_exact() {
        let f = Frame::from_vec(8, 8, (0..192).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let out = interpolate(&f, &f, &InterpolatorSpec::average(), None).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn untrained_learned_output_is_valid_and_near_static_input() {
        let spec = InterpolatorSpec::default();
        let p = init_interpolator(&spec, 1).unwrap();
        let f = crate::media_io::make_synthetic_sequence(crate::media_io::SyntheticKind::TranslatingTexture, 1, 20, 3)
            .unwrap()
            .frames
            .remove(0);
        let out = interpolate(&f, &f, &spec, Some(&p)).unwrap();
        assert_eq!((out.width(), out.height()), (20, 20));
        assert!(rgb_psnr(&out, &f).unwrap() > 30.0);
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let spec = InterpolatorSpec::default();
        let cfg = PretrainConfig {
            epochs: 0,
            seed: 4,
            ..PretrainConfig::default()
        };
        let (p, h) = pretrain_interpolator(&[], &spec, &cfg).unwrap();
        assert!(h.is_empty());
        let init = init_interpolator(&spec, 4).unwrap();
        assert!(init.iter().all(|(n, t)| p.get(n).unwrap() == t));
    }

    #[test]
    fn dimension_mismatch() {
        let a = Frame::filled(8, 8, 0.1);
        let b = Frame::filled(16, 8, 0.1);
        assert!(interpolate(&a, &b, &InterpolatorSpec::average(), None).is_err());
    }
}
