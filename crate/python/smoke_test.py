"""Smoke test for the kmfv Python module.

Build and run from the repository root:

    cargo build --release -p kmfv-py --features extension-module
    python3 python/smoke_test.py

The script looks for the built library under target/release and imports it
as `kmfv`.
"""

import importlib.machinery
import importlib.util
import pathlib
import struct
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    for name in ("libkmfv_py.so", "libkmfv_py.dylib", "kmfv_py.dll"):
        path = ROOT / "target" / "release" / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("kmfv", str(path))
            spec = importlib.util.spec_from_file_location("kmfv", str(path), loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("build the extension first: cargo build --release -p kmfv-py --features extension-module")


def main():
    kmfv = load_module()

    order = [s[0] for s in kmfv.schedule(9, 8)]
    assert order == [0, 8, 4, 2, 1, 3, 6, 5, 7], order
    assert abs(kmfv.lambda_for_level(0.01, 1) - 0.0085) < 1e-15

    anchor = [(0.1, 30.0), (0.2, 33.0), (0.4, 35.5), (0.8, 37.0)]
    half = [(r / 2, q) for r, q in anchor]
    assert kmfv.bd_rate(anchor, anchor) == 0.0
    assert abs(kmfv.bd_rate(anchor, half) + 50.0) < 1e-9

    rows = [i % len(kmfv.gaussian_scales()) for i in range(200)]
    symbols = [(i * 7919) % 23 - 11 for i in range(200)]
    payload = kmfv.range_encode(symbols, rows)
    assert kmfv.range_decode(payload, rows) == symbols

    ckpt = kmfv.Checkpoint.init(m=8, n=8, k=4, ks=5, seed=1)
    groups = [r[0] for r in ckpt.report()]
    assert "Frame hyper-prior network" in groups, groups
    with tempfile.TemporaryDirectory() as tmp:
        path = str(pathlib.Path(tmp) / "tiny.ckpt")
        ckpt.save(path)
        ckpt = kmfv.Checkpoint.load(path)

    enc = kmfv.encode("synthetic:translating-texture:5:64:3", ckpt, gop=4)
    width, height, frames, gop, model_id, flags = kmfv.read_header(enc.data)
    assert (width, height, frames, gop) == (64, 64, 5, 4)
    assert model_id == ckpt.model_id and flags == 1
    decoded = kmfv.decode(enc.data, ckpt)
    assert decoded == enc.reconstructions(), "decoder drifted from the encoder"
    first = struct.unpack("<4f", decoded[0][:16])
    assert all(0.0 <= v <= 1.0 for v in first)
    print(f"kmfv {kmfv.__version__}: {len(enc.data)} bytes, {enc.bpp:.4f} bpp, {enc.psnr:.2f} dB; smoke test passed")


if __name__ == "__main__":
    main()
