#![allow(dead_code)]

use kmfv::codec_nets::{init_params, ModelConfig};
use kmfv::interpolation::{init_interpolator, InterpolatorSpec};
use kmfv::params::ParameterStore;

pub fn tiny_config(interp: bool) -> ModelConfig {
    ModelConfig {
        m: 8,
        n: 8,
        k: 4,
        ks: 5,
        use_interpolator: interp,
        iframe_m: 8,
        iframe_n: 8,
        ..ModelConfig::default()
    }
}

/// Untrained tiny codec; with `interp` it carries a small learned interpolator.
pub fn tiny_model(interp: bool, seed: u64) -> ParameterStore {
    let mut p = init_params(&tiny_config(interp), seed).unwrap();
    if interp {
        let spec = InterpolatorSpec {
            base_channels: 4,
            kernel_size: 5,
            ..InterpolatorSpec::default()
        };
        p.merge_prefix(&init_interpolator(&spec, seed).unwrap(), "interp.");
        p.meta.interpolator = Some(spec);
    }
    p
}
