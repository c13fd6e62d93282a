//! Regenerates the committed golden files under `tests/data/golden`.
//!
//! Run once after the desk checkpoints exist:
//! `cargo run --release -p kmfv --example make_goldens`.

use std::path::Path;

use kmfv::bitstream::{decode_video, encode_video};
use kmfv::entropy::cdf::CdfTable;
use kmfv::entropy::range_encode;
use kmfv::media_io::{synthetic_sequence, SyntheticKind, SyntheticParams};
use kmfv::params::ParameterStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> kmfv::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let out = root.join("golden");
    std::fs::create_dir_all(&out).expect("create golden dir");

    let clips = [
        ("golden_a", "interp-0.01", SyntheticKind::TranslatingTexture, 9, 64, 64, 8, 7001),
        ("golden_b", "no-interp-0.05", SyntheticKind::RotatingPattern, 6, 96, 80, 4, 7002),
    ];
    for (name, ckpt, kind, n, w, h, gop, seed) in clips {
        let params = ParameterStore::load(&root.join("models").join(format!("{ckpt}.ckpt")))?;
        let seq = synthetic_sequence(&SyntheticParams {
            kind,
            n_frames: n,
            width: w,
            height: h,
            seed,
            velocity: None,
        })?;
        let enc = encode_video(&seq, &params, gop)?;
        let bytes = enc.bytes();
        let dec = decode_video(&bytes, &params)?;
        assert_eq!(dec.frames, enc.reconstructions);
        let mut recon = Vec::new();
        for f in &dec.frames {
            recon.extend_from_slice(&f.tensor().to_le_bytes());
        }
        std::fs::write(out.join(format!("{name}.kmfv")), &bytes).expect("write container");
        std::fs::write(out.join(format!("{name}.recon.f32")), &recon).expect("write recon");
        println!("{name}: {} bytes, {:.4} bpp, {:.2} dB", bytes.len(), enc.bpp(), enc.mean_psnr());
    }

    // Range-coder vectors over the fixed Gaussian table; the second one
    // exercises the escape path.
    let table = CdfTable::gaussian();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut vectors = Vec::new();
    for (name, wild) in [("chunk_plain", false), ("chunk_escape", true)] {
        let indices: Vec<usize> = (0..256).map(|_| rng.random_range(0..table.rows.len())).collect();
        let symbols: Vec<i32> = indices
            .iter()
            .map(|&i| {
                let (lo, hi) = table.rows[i].support();
                if wild && rng.random_range(0..8) == 0 {
                    if rng.random::<bool>() {
                        hi + rng.random_range(1..100_000)
                    } else {
                        lo - rng.random_range(1..100_000)
                    }
                } else {
                    rng.random_range(lo..=hi)
                }
            })
            .collect();
        let chunk = range_encode(&symbols, table, &indices)?;
        let payload: String = chunk.payload.iter().map(|b| format!("{b:02x}")).collect();
        vectors.push(serde_json::json!({"name": name, "indices": indices, "symbols": symbols, "payload": payload}));
    }
    let text = serde_json::to_string_pretty(&vectors)?;
    std::fs::write(out.join("chunks.json"), text).expect("write chunk vectors");
    Ok(())
}
