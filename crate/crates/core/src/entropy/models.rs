//! Continuous likelihood models for quantised latents.
//!
//! * Gaussian conditional: the hyper-decoder predicts a mean and a scale for
//!   every element of `y`; the likelihood of a quantised value is the normal
//!   mass of its unit bin.
//! * Factorized prior: one learned univariate density per channel of `z`,
//!   parameterised by its cumulative function, a monotone chain of small
//!   dense layers with softplus-positive weights and tanh gates.

use rand::Rng;

use crate::ops::{normal_cdf, normal_pdf, sigmoid, softplus};
use crate::tensor::Tensor;

/// Scales below this are raised to it before evaluating the Gaussian.
pub const SCALE_BOUND: f32 = 0.11;
/// Likelihoods are floored here so that rates stay finite.
pub const LIKELIHOOD_BOUND: f32 = 1e-9;

/// Likelihood of `y` under a unit-bin-integrated normal, with partials
/// `(p, dp/dy, dp/dmean, dp/dscale)`. `scale` must already be bounded.
#[inline]
pub fn gaussian_likelihood(y: f32, mean: f32, scale: f32) -> (f32, f32, f32, f32) {
    let d = y - mean;
    let v = d.abs();
    let a = (0.5 - v) / scale;
    let b = (-0.5 - v) / scale;
    let p = normal_cdf(a) - normal_cdf(b);
    let (pa, pb) = (normal_pdf(a), normal_pdf(b));
    let dp_dv = (pb - pa) / scale;
    let dp_ds = (pb * b - pa * a) / scale;
    let sgn = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    (p, dp_dv * sgn, -dp_dv * sgn, dp_ds)
}

/// Widths of the cumulative chain, input to output.
pub const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = FILTERS.len() - 1;
pub const INIT_SCALE: f32 = 10.0;

/// Borrowed parameters of a factorized prior over `channels` channels.
///
/// `matrices[k]` is `[C, f_{k+1}, f_k]`, `biases[k]` is `[C, f_{k+1}]` and
/// `factors[k]` is `[C, f_{k+1}]` for the three gated layers.
#[derive(Clone, Copy)]
pub struct BottleneckParams<'a> {
    pub matrices: [&'a Tensor; 4],
    pub biases: [&'a Tensor; 4],
    pub factors: [&'a Tensor; 3],
}

/// Gradient buffers matching [`BottleneckParams`].
#[derive(Debug, Clone)]
pub struct BottleneckGrads {
    pub matrices: [Tensor; 4],
    pub biases: [Tensor; 4],
    pub factors: [Tensor; 3],
}

impl BottleneckGrads {
    pub fn zeros_like(p: &BottleneckParams) -> Self {
        BottleneckGrads {
            matrices: p.matrices.map(|t| Tensor::zeros(t.shape())),
            biases: p.biases.map(|t| Tensor::zeros(t.shape())),
            factors: p.factors.map(|t| Tensor::zeros(t.shape())),
        }
    }
}

/// Parameter names and initial values of a factorized prior.
pub fn init_bottleneck<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Vec<(String, Tensor)> {
    let scale = INIT_SCALE.powf(1.0 / LAYERS as f32);
    let mut out = Vec::new();
    for k in 0..LAYERS {
        let (fi, fo) = (FILTERS[k], FILTERS[k + 1]);
        let init = (1.0 / scale / fo as f32).exp_m1().ln();
        out.push((format!("matrix{k}"), Tensor::full(&[channels, fo, fi], init)));
        let b: Vec<f32> = (0..channels * fo).map(|_| rng.random_range(-0.5..0.5)).collect();
        out.push((format!("bias{k}"), Tensor::from_vec(&[channels, fo], b).expect("sized")));
        if k < LAYERS - 1 {
            out.push((format!("factor{k}"), Tensor::zeros(&[channels, fo])));
        }
    }
    out
}

impl<'a> BottleneckParams<'a> {
    /// View of the prior stored under `prefix` in a checkpoint.
    pub fn from_store(store: &'a crate::params::ParameterStore, prefix: &str) -> crate::error::Result<Self> {
        let names = crate::codec_nets::bottleneck_param_names(prefix);
        let t: Vec<&Tensor> = names.iter().map(|n| store.get(n)).collect::<crate::error::Result<_>>()?;
        Ok(BottleneckParams {
            matrices: [t[0], t[1], t[2], t[3]],
            biases: [t[4], t[5], t[6], t[7]],
            factors: [t[8], t[9], t[10]],
        })
    }

    pub fn channels(&self) -> usize {
        self.matrices[0].shape()[0]
    }

    /// The cumulative logit `f(x)` for channel `c`; the CDF is `sigmoid(f)`.
    pub fn logits_cumulative(&self, c: usize, x: f32) -> f32 {
        let mut cur = [0f32; 3];
        cur[0] = x;
        let mut width = 1;
        for k in 0..LAYERS {
            let fo = FILTERS[k + 1];
            let m = &self.matrices[k].data()[c * fo * width..(c + 1) * fo * width];
            let b = &self.biases[k].data()[c * fo..(c + 1) * fo];
            let mut next = [0f32; 3];
            for i in 0..fo {
                let mut s = b[i];
                for j in 0..width {
                    s += softplus(m[i * width + j]) * cur[j];
                }
                if k < LAYERS - 1 {
                    let a = self.factors[k].data()[c * fo + i];
                    s += libm::tanhf(a) * libm::tanhf(s);
                }
                next[i] = s;
            }
            cur = next;
            width = fo;
        }
        cur[0]
    }

    /// Backpropagate `g = dL/df(x)` through channel `c` at `x`, adding
    /// parameter gradients into `grads` and returning `dL/dx`.
    pub fn logits_cumulative_backward(&self, c: usize, x: f32, g: f32, grads: &mut BottleneckGrads) -> f32 {
        // Forward, keeping layer inputs and pre-gate sums.
        let mut inputs = [[0f32; 3]; LAYERS];
        let mut pre = [[0f32; 3]; LAYERS];
        let mut cur = [0f32; 3];
        cur[0] = x;
        let mut width = 1;
        for k in 0..LAYERS {
            inputs[k] = cur;
            let fo = FILTERS[k + 1];
            let m = &self.matrices[k].data()[c * fo * width..(c + 1) * fo * width];
            let b = &self.biases[k].data()[c * fo..(c + 1) * fo];
            let mut next = [0f32; 3];
            for i in 0..fo {
                let mut s = b[i];
                for j in 0..width {
                    s += softplus(m[i * width + j]) * cur[j];
                }
                pre[k][i] = s;
                if k < LAYERS - 1 {
                    let a = self.factors[k].data()[c * fo + i];
                    s += libm::tanhf(a) * libm::tanhf(s);
                }
                next[i] = s;
            }
            cur = next;
            width = fo;
        }
        let mut dcur = [0f32; 3];
        dcur[0] = g;
        for k in (0..LAYERS).rev() {
            let (fi, fo) = (FILTERS[k], FILTERS[k + 1]);
            let mut dpre = [0f32; 3];
            for i in 0..fo {
                if k < LAYERS - 1 {
                    let a = self.factors[k].data()[c * fo + i];
                    let ta = libm::tanhf(a);
                    let tp = libm::tanhf(pre[k][i]);
                    dpre[i] = dcur[i] * (1.0 + ta * (1.0 - tp * tp));
                    grads.factors[k].data_mut()[c * fo + i] += dcur[i] * tp * (1.0 - ta * ta);
                } else {
                    dpre[i] = dcur[i];
                }
                grads.biases[k].data_mut()[c * fo + i] += dpre[i];
            }
            let m = &self.matrices[k].data()[c * fo * fi..(c + 1) * fo * fi];
            let mut dprev = [0f32; 3];
            for i in 0..fo {
                for j in 0..fi {
                    let h = m[i * fi + j];
                    grads.matrices[k].data_mut()[c * fo * fi + i * fi + j] += dpre[i] * inputs[k][j] * sigmoid(h);
                    dprev[j] += softplus(h) * dpre[i];
                }
            }
            dcur = dprev;
        }
        dcur[0]
    }

    /// Continuous CDF at `x` for channel `c`.
    pub fn cdf(&self, c: usize, x: f32) -> f32 {
        sigmoid(self.logits_cumulative(c, x))
    }

    /// Unit-bin likelihood of `z` in channel `c`, unbounded.
    pub fn likelihood(&self, c: usize, z: f32) -> f32 {
        let lo = self.logits_cumulative(c, z - 0.5);
        let up = self.logits_cumulative(c, z + 0.5);
        let s = if lo + up > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * up) - sigmoid(s * lo)).abs()
    }

    /// Likelihood and backward in one step: adds `g * dp/dparams` to `grads`
    /// and returns `(p, g * dp/dz)`.
    pub fn likelihood_backward(&self, c: usize, z: f32, g: f32, grads: &mut BottleneckGrads) -> (f32, f32) {
        let lo = self.logits_cumulative(c, z - 0.5);
        let up = self.logits_cumulative(c, z + 0.5);
        let s = if lo + up > 0.0 { -1.0 } else { 1.0 };
        let (su, sl) = (sigmoid(s * up), sigmoid(s * lo));
        let d = su - sl;
        let sign = if d >= 0.0 { 1.0 } else { -1.0 };
        let gu = g * sign * su * (1.0 - su) * s;
        let gl = -g * sign * sl * (1.0 - sl) * s;
        let dz_u = self.logits_cumulative_backward(c, z + 0.5, gu, grads);
        let dz_l = self.logits_cumulative_backward(c, z - 0.5, gl, grads);
        (d.abs(), dz_u + dz_l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, channels: usize) -> Vec<(String, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_bottleneck(channels, &mut rng);
        // Perturb so the test exercises non-uniform weights and gates.
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    fn view(p: &[(String, Tensor)]) -> BottleneckParams<'_> {
        let get = |n: &str| &p.iter().find(|(k, _)| k == n).unwrap().1;
        BottleneckParams {
            matrices: [get("matrix0"), get("matrix1"), get("matrix2"), get("matrix3")],
            biases: [get("bias0"), get("bias1"), get("bias2"), get("bias3")],
            factors: [get("factor0"), get("factor1"), get("factor2")],
        }
    }

    #[test]
    fn gaussian_mass_sums_to_one() {
        let total: f32 = (-20..=20).map(|k| gaussian_likelihood(k as f32, 0.3, 1.7).0).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gaussian_partials_match_finite_differences() {
        let (y, m, s) = (1.3f32, 0.2f32, 0.9f32);
        let (_, dy, dm, ds) = gaussian_likelihood(y, m, s);
        let e = 1e-3;
        let fd = |f: &dyn Fn(f32) -> f32, x: f32| (f(x + e) - f(x - e)) / (2.0 * e);
        assert!((fd(&|v| gaussian_likelihood(v, m, s).0, y) - dy).abs() < 1e-3);
        assert!((fd(&|v| gaussian_likelihood(y, v, s).0, m) - dm).abs() < 1e-3);
        assert!((fd(&|v| gaussian_likelihood(y, m, v).0, s) - ds).abs() < 1e-3);
    }

    #[test]
    fn factorized_cdf_is_monotone_and_normalised() {
        let p = params(1, 4);
        let v = view(&p);
        for c in 0..4 {
            let mut prev = 0.0;
            for i in -400..=400 {
                let f = v.cdf(c, i as f32 * 0.25);
                assert!(f >= prev);
                prev = f;
            }
            assert!(v.cdf(c, -1e4) < 1e-6);
            assert!(v.cdf(c, 1e4) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn factorized_backward_matches_finite_differences() {
        let p = params(2, 2);
        let v = view(&p);
        let mut grads = BottleneckGrads::zeros_like(&v);
        let (c, z) = (1, 0.7f32);
        let (_, dz) = v.likelihood_backward(c, z, 1.0, &mut grads);
        let e = 1e-3;
        let fd = (v.likelihood(c, z + e) - v.likelihood(c, z - e)) / (2.0 * e);
        assert!((fd - dz).abs() < 2e-3, "dz {dz} vs {fd}");
        // One representative entry per parameter group.
        for (name, idx) in [("matrix1", 3 * 3 * c + 4), ("bias2", 3 * c + 1), ("factor0", 3 * c + 2)] {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.iter_mut().find(|(k, _)| k == name).unwrap().1.data_mut()[idx] += e;
            pm.iter_mut().find(|(k, _)| k == name).unwrap().1.data_mut()[idx] -= e;
            let fd = (view(&pp).likelihood(c, z) - view(&pm).likelihood(c, z)) / (2.0 * e);
            let an = match name {
                "matrix1" => grads.matrices[1].data()[idx],
                "bias2" => grads.biases[2].data()[idx],
                _ => grads.factors[0].data()[idx],
            };
            assert!((fd - an).abs() < 2e-3, "{name}: {an} vs {fd}");
        }
    }
}
