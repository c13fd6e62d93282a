mod common;

use kmfv::codec_nets::IFRAME;
use kmfv::entropy::cdf::CdfTable;
use kmfv::entropy::models::BottleneckParams;
use kmfv::entropy::{range_decode, range_encode, CodedChunk};
use kmfv::params::ParameterStore;
use kmfv::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The prior's cumulative logit, evaluated from the raw tensors in f64.
fn logit64(p: &BottleneckParams, c: usize, x: f64) -> f64 {
    let widths = [1usize, 3, 3, 3, 1];
    let sp = |v: f64| (1.0 + v.exp()).ln();
    let mut cur = vec![x];
    for k in 0..4 {
        let (fi, fo) = (widths[k], widths[k + 1]);
        let m = p.matrices[k].data();
        let b = p.biases[k].data();
        let mut next = vec![0.0; fo];
        for i in 0..fo {
            let mut s = b[c * fo + i] as f64;
            for j in 0..fi {
                s += sp(m[(c * fo + i) * fi + j] as f64) * cur[j];
            }
            if k < 3 {
                s += (p.factors[k].data()[c * fo + i] as f64).tanh() * s.tanh();
            }
            next[i] = s;
        }
        cur = next;
    }
    cur[0]
}

/// CDF at each of `xs` (ascending) by Simpson integration of the density,
/// starting far in the left tail.
fn integrated_cdf(p: &BottleneckParams, c: usize, start: f64, xs: &[f64]) -> Vec<f64> {
    let cdf = |t: f64| 1.0 / (1.0 + (-logit64(p, c, t)).exp());
    let h = 1e-4;
    let density = |t: f64| (cdf(t + h) - cdf(t - h)) / (2.0 * h);
    let simpson = |a: f64, b: f64| {
        let n = (((b - a) * 32.0).ceil() as usize).max(2).next_multiple_of(2);
        let step = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * density(a + i as f64 * step);
        }
        acc * step / 3.0
    };
    let mut out = Vec::with_capacity(xs.len());
    let (mut at, mut acc) = (start, cdf(start));
    for &x in xs {
        acc += simpson(at, x);
        at = x;
        out.push(acc);
    }
    out
}

fn perturbed_model(seed: u64) -> ParameterStore {
    let mut p = common::tiny_model(false, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = p.names().filter(|n| n.contains(".bottleneck.")).cloned().collect();
    for n in names {
        let t = p.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v += rng.random_range(-0.4..0.4);
        }
    }
    p
}

/// Round to counts, then give every symbol at least one count.
fn quantise(edges: &[f64]) -> Vec<i64> {
    let n = edges.len();
    let mut q: Vec<i64> = edges.iter().map(|e| (e.clamp(0.0, 1.0) * 65536.0).round() as i64).collect();
    q[0] = 0;
    q.push(65536);
    for i in 1..n {
        q[i] = q[i].max(q[i - 1] + 1);
    }
    for i in (1..n).rev() {
        q[i] = q[i].min(q[i + 1] - 1);
    }
    q
}

#[test]
fn factorized_rows_match_integrated_density() {
    let store = perturbed_model(11);
    let p = BottleneckParams::from_store(&store, IFRAME).unwrap();
    let table = CdfTable::factorized(&p).unwrap();
    let (mut worst, mut worst_raw) = (0i64, 0f64);
    for (c, row) in table.rows.iter().enumerate() {
        let start = row.lo as f64 - 0.5 - 40.0;
        let xs: Vec<f64> = (0..=row.symbols()).map(|k| row.lo as f64 + k as f64 - 0.5).collect();
        let edges = integrated_cdf(&p, c, start, &xs);
        let want = quantise(&edges);
        for k in 0..row.cdf.len() {
            worst = worst.max((row.cdf[k] as i64 - want[k]).abs());
        }
        // Away from the tails no repair applies and the counts track the
        // integrated CDF itself.
        for k in 1..row.symbols() {
            if edges[k - 1] * 65536.0 > 64.0 && (1.0 - edges[k + 1]) * 65536.0 > 64.0 {
                worst_raw = worst_raw.max((row.cdf[k] as f64 - edges[k] * 65536.0).abs());
            }
        }
    }
    assert!(worst <= 1, "quantised rows deviate by {worst} counts");
    assert!(worst_raw <= 1.0, "interior counts deviate by {worst_raw}");
}

#[test]
fn factorized_round_trip_with_out_of_support_values() {
    let store = perturbed_model(12);
    let table = CdfTable::factorized(&BottleneckParams::from_store(&store, IFRAME).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4000;
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..table.rows.len())).collect();
    let sym: Vec<i32> = (0..n)
        .map(|_| match rng.random_range(0..20) {
            0 => rng.random_range(-5000..5000),
            _ => rng.random_range(-6..=6),
        })
        .collect();
    let chunk = range_encode(&sym, &table, &idx).unwrap();
    assert_eq!(range_decode(&chunk, &table, &idx).unwrap(), sym);
    let wire = chunk.to_wire();
    let (back, used) = CodedChunk::from_wire(&wire, n, chunk.model).unwrap();
    assert_eq!((back, used), (chunk, wire.len()));
}

#[test]
fn golden_chunk_vectors() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden/chunks.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let table = CdfTable::gaussian();
    let cases = v.as_array().unwrap();
    assert_eq!(cases.len(), 2);
    for case in cases {
        let idx: Vec<usize> = serde_json::from_value(case["indices"].clone()).unwrap();
        let sym: Vec<i32> = serde_json::from_value(case["symbols"].clone()).unwrap();
        let hex = case["payload"].as_str().unwrap();
        let payload: Vec<u8> = (0..hex.len()).step_by(2).map(|i| u8::from_str_radix(&hex[i..i + 2], 16).unwrap()).collect();
        let chunk = range_encode(&sym, table, &idx).unwrap();
        assert_eq!(chunk.payload, payload, "{}", case["name"]);
        assert_eq!(range_decode(&chunk, table, &idx).unwrap(), sym);
    }
}

#[test]
fn likelihood_floor_keeps_bits_finite() {
    let t = Tensor::from_vec(&[3], vec![1e-9f32, 0.5, 1.0]).unwrap();
    let bits = kmfv::entropy::estimate_bits(t.data()).unwrap();
    assert!(bits.is_finite() && bits > 29.0);
    assert!(kmfv::entropy::estimate_bits(&[0.0]).is_err());
}
