//! Frames, raw video I/O, colour conversion, PSNR and synthetic sequences.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel_synthesis::reflect_index;
use crate::tensor::Tensor;

/// Frames handed to the codec must have both dimensions divisible by this.
pub const PAD_MULTIPLE: usize = 64;

/// PSNR reported for identical frames.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    /// RGB converted from a YUV420 source.
    Yuv420Source,
}

/// An RGB frame, channel-planar `[3, H, W]`, every sample in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    data: Tensor<f32>,
    colorspace: ColorSpace,
}

impl Frame {
    pub fn new(data: Tensor<f32>, colorspace: ColorSpace) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[0] != 3 {
            return Err(Error::shape(format!(
                "frames are [3,H,W], got {:?}",
                data.shape()
            )));
        }
        if let Some((i, v)) = data
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(format!(
                "frame sample {i} = {v} is outside [0, 1]"
            )));
        }
        Ok(Frame { data, colorspace })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Frame::new(Tensor::from_vec(&[3, height, width], data)?, ColorSpace::Rgb)
    }

    /// Wrap samples that the caller has already clamped.
    pub(crate) fn from_tensor_clamped(data: Tensor<f32>) -> Self {
        debug_assert!(data.data().iter().all(|v| (0.0..=1.0).contains(v)));
        Frame {
            data,
            colorspace: ColorSpace::Rgb,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Frame::from_tensor_clamped(Tensor::full(&[3, height, width], value.clamp(0.0, 1.0)))
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn with_colorspace(mut self, cs: ColorSpace) -> Self {
        self.colorspace = cs;
        self
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data.data()[(c * self.height() + row) * self.width() + col]
    }

    /// Reflect-pad to dimensions divisible by `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Frame {
        let (w, h) = (self.width(), self.height());
        let pw = w.div_ceil(multiple) * multiple;
        let ph = h.div_ceil(multiple) * multiple;
        if (pw, ph) == (w, h) {
            return self.clone();
        }
        let mut out = Tensor::zeros(&[3, ph, pw]);
        let s = self.data.data();
        let o = out.data_mut();
        for c in 0..3 {
            for i in 0..ph {
                let si = reflect_index(i as isize, h);
                for j in 0..pw {
                    let sj = reflect_index(j as isize, w);
                    o[(c * ph + i) * pw + j] = s[(c * h + si) * w + sj];
                }
            }
        }
        Frame {
            data: out,
            colorspace: self.colorspace,
        }
    }

    /// Window of `width x height` starting at column `x`, row `y`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Frame> {
        if x + width > self.width() || y + height > self.height() {
            return Err(Error::invalid(format!(
                "crop {width}x{height}+{x}+{y} exceeds {}x{} frame",
                self.width(),
                self.height()
            )));
        }
        let (w, h) = (self.width(), self.height());
        let s = self.data.data();
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for i in 0..height {
                let off = (c * h + y + i) * w + x;
                data.extend_from_slice(&s[off..off + width]);
            }
        }
        Ok(Frame {
            data: Tensor::from_vec(&[3, height, width], data)?,
            colorspace: self.colorspace,
        })
    }

    pub fn load_png(path: &Path) -> Result<Frame> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * w * h];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f32 / 255.0;
            }
        }
        Frame::from_vec(w, h, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let mut out = vec![0u8; 3 * w * h];
        for i in 0..w * h {
            for c in 0..3 {
                out[3 * i + c] = to_u8(self.data.data()[c * w * h + i]);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .ok_or_else(|| Error::shape("rgb buffer size"))?;
        img.save(path)?;
        Ok(())
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An ordered run of frames sharing size and colour space.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<Frame>,
    pub fps: f32,
}

impl VideoSequence {
    pub fn new(frames: Vec<Frame>, fps: f32) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("a sequence needs at least one frame"))?;
        let key = (first.width(), first.height(), first.colorspace());
        if frames
            .iter()
            .any(|f| (f.width(), f.height(), f.colorspace()) != key)
        {
            return Err(Error::invalid("frames differ in size or colour space"));
        }
        Ok(VideoSequence { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

// BT.709 luma coefficients.
const KR: f32 = 0.2126;
const KB: f32 = 0.0722;
const KG: f32 = 1.0 - KR - KB;

/// Limited-range BT.709 8-bit code values (as floats) to RGB in `[0, 1]`,
/// without clamping.
pub fn yuv_to_rgb(y: f32, u: f32, v: f32) -> [f32; 3] {
    let yn = (y - 16.0) / 219.0;
    let pb = (u - 128.0) / 224.0;
    let pr = (v - 128.0) / 224.0;
    let r = yn + 2.0 * (1.0 - KR) * pr;
    let b = yn + 2.0 * (1.0 - KB) * pb;
    let g = yn - (2.0 * KR * (1.0 - KR) / KG) * pr - (2.0 * KB * (1.0 - KB) / KG) * pb;
    [r, g, b]
}

/// RGB in `[0, 1]` to limited-range BT.709 code values (unrounded floats).
pub fn rgb_to_yuv(rgb: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = rgb;
    let yn = KR * r + KG * g + KB * b;
    let pb = (b - yn) / (2.0 * (1.0 - KB));
    let pr = (r - yn) / (2.0 * (1.0 - KR));
    [16.0 + 219.0 * yn, 128.0 + 224.0 * pb, 128.0 + 224.0 * pr]
}

/// Read up to `max_frames` (0 = all) 8-bit planar YUV420 frames and convert
/// them to RGB.
pub fn load_yuv420(path: &Path, width: usize, height: usize, max_frames: usize) -> Result<VideoSequence> {
    if !width.is_multiple_of(2) || !height.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "YUV420 dimensions must be even, got {width}x{height}"
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frame_bytes = width * height * 3 / 2;
    let available = bytes.len() / frame_bytes;
    let max_frames = if max_frames == 0 { usize::MAX } else { max_frames };
    if available == 0 || (available < max_frames && bytes.len() % frame_bytes != 0) {
        return Err(Error::Truncated {
            expected: ((available + 1) * frame_bytes) as u64,
            actual: bytes.len() as u64,
        });
    }
    let n = available.min(max_frames);
    let (cw, ch) = (width / 2, height / 2);
    let mut frames = Vec::with_capacity(n);
    for f in 0..n {
        let base = f * frame_bytes;
        let yp = &bytes[base..base + width * height];
        let up = &bytes[base + width * height..base + width * height + cw * ch];
        let vp = &bytes[base + width * height + cw * ch..base + frame_bytes];
        let mut data = vec![0f32; 3 * width * height];
        for i in 0..height {
            for j in 0..width {
                let ci = (i / 2) * cw + j / 2;
                let rgb = yuv_to_rgb(yp[i * width + j] as f32, up[ci] as f32, vp[ci] as f32);
                for c in 0..3 {
                    data[c * width * height + i * width + j] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
        frames.push(
            Frame::new(Tensor::from_vec(&[3, height, width], data)?, ColorSpace::Yuv420Source)?,
        );
    }
    VideoSequence::new(frames, 30.0)
}

/// Write a sequence as 8-bit planar YUV420 (2x2 chroma averaging).
pub fn save_yuv420(path: &Path, seq: &VideoSequence) -> Result<()> {
    let (w, h) = (seq.width(), seq.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::invalid("YUV420 output needs even dimensions"));
    }
    let mut out = Vec::with_capacity(seq.len() * w * h * 3 / 2);
    for f in &seq.frames {
        let mut yuv = vec![[0f32; 3]; w * h];
        for i in 0..h {
            for j in 0..w {
                yuv[i * w + j] = rgb_to_yuv([f.get(0, i, j), f.get(1, i, j), f.get(2, i, j)]);
            }
        }
        out.extend(yuv.iter().map(|p| p[0].round().clamp(0.0, 255.0) as u8));
        for plane in 1..3 {
            for i in (0..h).step_by(2) {
                for j in (0..w).step_by(2) {
                    let s = yuv[i * w + j][plane]
                        + yuv[i * w + j + 1][plane]
                        + yuv[(i + 1) * w + j][plane]
                        + yuv[(i + 1) * w + j + 1][plane];
                    out.push((s / 4.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load `frame_00000.png`, `frame_00001.png`, ... from a directory, at most
/// `max_frames` of them (0 = all).
pub fn load_png_dir(dir: &Path, max_frames: usize) -> Result<VideoSequence> {
    let mut frames = Vec::new();
    let limit = if max_frames == 0 { usize::MAX } else { max_frames };
    for i in 0..limit {
        let p = dir.join(format!("frame_{i:05}.png"));
        if !p.exists() {
            break;
        }
        frames.push(Frame::load_png(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no frame_00000.png found",
            dir.display()
        )));
    }
    VideoSequence::new(frames, 30.0)
}

pub fn save_png_dir(dir: &Path, seq: &VideoSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_png(&dir.join(format!("frame_{i:05}.png")))?;
    }
    Ok(())
}

/// Mean squared error over every RGB sample.
pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let s: f64 = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.tensor().len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// RGB PSNR for peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn rgb_psnr(a: &Frame, b: &Frame) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    TranslatingTexture,
    RotatingPattern,
    NoiseFloor,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translating-texture" => Ok(SyntheticKind::TranslatingTexture),
            "rotating-pattern" => Ok(SyntheticKind::RotatingPattern),
            "noise-floor" => Ok(SyntheticKind::NoiseFloor),
            _ => Err(Error::invalid(format!("unknown synthetic kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticParams {
    pub kind: SyntheticKind,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Pixels per frame as (columns, rows). `None` draws one from the seed.
    pub velocity: Option<(f64, f64)>,
}

struct Wave {
    freq: (f64, f64),
    phase: f64,
    weight: [f64; 3],
}

/// A smooth band-limited colour texture defined on the whole plane.
struct Texture {
    waves: Vec<Wave>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = 7;
        let waves = (0..n)
            .map(|_| {
                let mag = rng.random_range(0.015..0.12);
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let base = rng.random_range(0.04..0.11);
                let weight = [
                    base * rng.random_range(0.5..1.0),
                    base * rng.random_range(0.5..1.0),
                    base * rng.random_range(0.5..1.0),
                ];
                Wave {
                    freq: (mag * ang.cos(), mag * ang.sin()),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    weight,
                }
            })
            .collect();
        Texture { waves }
    }

    fn eval(&self, col: f64, row: f64) -> [f64; 3] {
        let mut v = [0.5f64; 3];
        for w in &self.waves {
            let s = (std::f64::consts::TAU * (w.freq.0 * col + w.freq.1 * row) + w.phase).sin();
            for c in 0..3 {
                v[c] += w.weight[c] * s;
            }
        }
        v
    }
}

fn frame_from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Frame {
    let mut data = vec![0f32; 3 * width * height];
    for i in 0..height {
        for j in 0..width {
            let v = f(i, j);
            for c in 0..3 {
                data[c * width * height + i * width + j] = v[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Frame::from_tensor_clamped(Tensor::from_vec(&[3, height, width], data).expect("sized"))
}

/// Deterministic synthetic video used in place of a natural-video corpus.
pub fn synthetic_sequence(p: &SyntheticParams) -> Result<VideoSequence> {
    if p.n_frames == 0 {
        return Err(Error::invalid("synthetic sequence needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let tex = Texture::random(&mut rng);
    let velocity = p.velocity.unwrap_or_else(|| {
        let speed = rng.random_range(0.25..1.5);
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        (speed * ang.cos(), speed * ang.sin())
    });
    let (w, h) = (p.width, p.height);
    let frames = match p.kind {
        SyntheticKind::TranslatingTexture => (0..p.n_frames)
            .map(|t| {
                let t = t as f64;
                frame_from_fn(w, h, |i, j| {
                    tex.eval(j as f64 - velocity.0 * t, i as f64 - velocity.1 * t)
                })
            })
            .collect(),
        SyntheticKind::RotatingPattern => {
            let omega = rng.random_range(0.01..0.05) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            (0..p.n_frames)
                .map(|t| {
                    let (s, c) = (omega * t as f64).sin_cos();
                    frame_from_fn(w, h, |i, j| {
                        let (dx, dy) = (j as f64 - cx, i as f64 - cy);
                        tex.eval(c * dx + s * dy, -s * dx + c * dy)
                    })
                })
                .collect()
        }
        SyntheticKind::NoiseFloor => (0..p.n_frames)
            .map(|_| {
                let noise: Vec<f64> = (0..3 * w * h).map(|_| rng.random_range(-0.08..0.08)).collect();
                frame_from_fn(w, h, |i, j| {
                    let mut v = tex.eval(j as f64, i as f64);
                    for c in 0..3 {
                        v[c] += noise[c * w * h + i * w + j];
                    }
                    v
                })
            })
            .collect(),
    };
    VideoSequence::new(frames, 30.0)
}

/// Square synthetic sequence with a seed-drawn velocity.
pub fn make_synthetic_sequence(
    kind: SyntheticKind,
    n_frames: usize,
    size: usize,
    seed: u64,
) -> Result<VideoSequence> {
    synthetic_sequence(&SyntheticParams {
        kind,
        n_frames,
        width: size,
        height: size,
        seed,
        velocity: None,
    })
}

/// Five frames cropped at one shared window.
#[derive(Debug, Clone)]
pub struct TrainingTuple {
    pub frames: Vec<Frame>,
    /// Column offset of the crop window.
    pub x: usize,
    /// Row offset of the crop window.
    pub y: usize,
}

pub const TUPLE_LEN: usize = 5;

/// Crop a `patch x patch` window at a random position shared by all frames.
pub fn crop_tuple<R: Rng + ?Sized>(frames: &[Frame], patch: usize, rng: &mut R) -> Result<TrainingTuple> {
    if frames.len() != TUPLE_LEN {
        return Err(Error::invalid(format!(
            "training tuples have {TUPLE_LEN} frames, got {}",
            frames.len()
        )));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    if frames.iter().any(|f| (f.width(), f.height()) != (w, h)) {
        return Err(Error::shape("tuple frames differ in size"));
    }
    if patch > w || patch > h {
        return Err(Error::invalid(format!(
            "patch {patch} is larger than the {w}x{h} frame"
        )));
    }
    let x = rng.random_range(0..=w - patch);
    let y = rng.random_range(0..=h - patch);
    let frames = frames
        .iter()
        .map(|f| f.crop(x, y, patch, patch))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingTuple { frames, x, y })
}
