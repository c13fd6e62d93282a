//! The `.kmfv` container and the closed-loop video encoder and decoder.
//!
//! ```text
//! "KMFV" | u8 version | u16 width | u16 height | u32 frame count
//! u8 gop size | u32 model id | u8 flags (bit 0: interpolated reference)
//! per coding step: u32 display index | u8 type | z chunk | y chunk
//! chunk: u32 payload length | payload
//! ```
//!
//! All integers are little-endian. Width and height are the source
//! dimensions; frames are reflect-padded to a multiple of 64 for coding and
//! cropped back after decoding.

use std::time::Instant;

use serde::Serialize;

use crate::codec_nets::{self, Codec, BFRAME, IFRAME};
use crate::entropy::models::BottleneckParams;
use crate::entropy::{gaussian_scale_index, range_decode, range_encode, CdfTable, ChunkModel, CodedChunk};
use crate::error::{Error, Result};
use crate::gop::{build_schedule, FrameType};
use crate::media_io::{rgb_psnr, Frame, VideoSequence, PAD_MULTIPLE};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KMFV";
pub const VERSION: u8 = 1;
pub const FLAG_INTERPOLATOR: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 4 + 1 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub width: u16,
    pub height: u16,
    pub frame_count: u32,
    pub gop_size: u8,
    pub model_id: u32,
    pub flags: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub display_index: u32,
    pub frame_type: FrameType,
    pub z: CodedChunk,
    pub y: CodedChunk,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamContainer {
    pub header: Header,
    pub steps: Vec<StepRecord>,
}

/// Latent geometry for one frame type at the padded size.
fn latent_counts(params: &ParameterStore, prefix: &str, ph: usize, pw: usize) -> Result<(usize, usize)> {
    let m = params.get(&format!("{prefix}.enc.3.b"))?.len();
    let n = params.get(&format!("{prefix}.hyper_enc.2.b"))?.len();
    Ok((n * (ph / 64) * (pw / 64), m * (ph / 16) * (pw / 16)))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Bitstream {
                offset: self.pos,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn chunk(&mut self, count: usize, model: ChunkModel, what: &str) -> Result<CodedChunk> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        let payload = self.take(len, what).map_err(|e| match e {
            Error::Bitstream { message, .. } => Error::Bitstream { offset: at, message },
            e => e,
        })?;
        Ok(CodedChunk {
            payload: payload.to_vec(),
            symbol_count: count,
            model,
        })
    }
}

impl BitstreamContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.extend_from_slice(&h.frame_count.to_le_bytes());
        out.push(h.gop_size);
        out.extend_from_slice(&h.model_id.to_le_bytes());
        out.push(h.flags);
        for s in &self.steps {
            out.extend_from_slice(&s.display_index.to_le_bytes());
            out.push(s.frame_type.code());
            out.extend_from_slice(&s.z.to_wire());
            out.extend_from_slice(&s.y.to_wire());
        }
        out
    }

    pub fn parse_header(bytes: &[u8]) -> Result<Header> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Bitstream {
                offset: 0,
                message: "not a KMFV container (bad magic)".into(),
            });
        }
        let v = r.u8("version")?;
        if v != VERSION {
            return Err(Error::Bitstream {
                offset: 4,
                message: format!("unsupported version {v}, expected {VERSION}"),
            });
        }
        Ok(Header {
            width: r.u16("width")?,
            height: r.u16("height")?,
            frame_count: r.u32("frame count")?,
            gop_size: r.u8("gop size")?,
            model_id: r.u32("model id")?,
            flags: r.u8("flags")?,
        })
    }

    /// Parse a container; chunk sizes come from the model's latent shapes.
    pub fn from_bytes(bytes: &[u8], params: &ParameterStore) -> Result<Self> {
        let header = Self::parse_header(bytes)?;
        if header.width == 0 || header.height == 0 || header.frame_count == 0 || header.gop_size == 0 {
            return Err(Error::Bitstream {
                offset: 5,
                message: "empty dimensions, frame count or gop size".into(),
            });
        }
        let (ph, pw) = (
            (header.height as usize).div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE,
            (header.width as usize).div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE,
        );
        let i_counts = latent_counts(params, IFRAME, ph, pw)?;
        let b_counts = if header.frame_count > 2 {
            Some(latent_counts(params, BFRAME, ph, pw)?)
        } else {
            None
        };
        let mut r = Reader {
            bytes,
            pos: HEADER_LEN,
        };
        let mut steps = Vec::with_capacity(header.frame_count as usize);
        for _ in 0..header.frame_count {
            let at = r.pos;
            let display_index = r.u32("step header")?;
            let t = r.u8("step header")?;
            let frame_type = FrameType::from_code(t).ok_or_else(|| Error::Bitstream {
                offset: at + 4,
                message: format!("unknown frame type {t}"),
            })?;
            let (zc, yc) = match frame_type {
                FrameType::I => i_counts,
                FrameType::B => b_counts.ok_or_else(|| Error::Bitstream {
                    offset: at + 4,
                    message: "B-frame in a sequence too short to have one".into(),
                })?,
            };
            let z = r.chunk(zc, ChunkModel::FactorizedZ, "z chunk")?;
            let y = r.chunk(yc, ChunkModel::GaussianY, "y chunk")?;
            steps.push(StepRecord {
                display_index,
                frame_type,
                z,
                y,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Bitstream {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(BitstreamContainer { header, steps })
    }

    pub fn payload_bits(&self) -> u64 {
        self.steps.iter().map(|s| s.z.bits() + s.y.bits()).sum()
    }

    /// Payload bits per source pixel.
    pub fn bpp(&self) -> f64 {
        let h = &self.header;
        self.payload_bits() as f64 / (h.width as f64 * h.height as f64 * h.frame_count as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameStats {
    pub display_index: usize,
    pub frame_type: FrameType,
    pub level: u8,
    pub bits_actual: u64,
    pub bits_estimated: f64,
    pub psnr: f64,
}

/// Wall-clock per stage in seconds.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimes {
    pub interpolate: f64,
    pub analysis: f64,
    pub entropy: f64,
    pub synthesis: f64,
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub container: BitstreamContainer,
    /// Encoder-side reconstructions, display order, source size.
    pub reconstructions: Vec<Frame>,
    pub stats: Vec<FrameStats>,
    pub times: StageTimes,
}

impl EncodeOutput {
    pub fn bytes(&self) -> Vec<u8> {
        self.container.to_bytes()
    }

    pub fn bpp(&self) -> f64 {
        self.container.bpp()
    }

    pub fn mean_psnr(&self) -> f64 {
        self.stats.iter().map(|s| s.psnr).sum::<f64>() / self.stats.len() as f64
    }
}

/// Range-coding tables derived from a checkpoint.
struct Tables {
    i_z: CdfTable,
    b_z: Option<CdfTable>,
}

fn factorized_table(params: &ParameterStore, prefix: &str) -> Result<CdfTable> {
    CdfTable::factorized(&BottleneckParams::from_store(params, prefix)?)
}

impl Tables {
    fn new(params: &ParameterStore, with_b: bool) -> Result<Self> {
        Ok(Tables {
            i_z: factorized_table(params, IFRAME)?,
            b_z: if with_b { Some(factorized_table(params, BFRAME)?) } else { None },
        })
    }
    fn z(&self, prefix: &str) -> &CdfTable {
        if prefix == IFRAME {
            &self.i_z
        } else {
            self.b_z.as_ref().expect("B tables built")
        }
    }
}

fn channel_indices(shape: &[usize]) -> Vec<usize> {
    let hw = shape[1] * shape[2];
    (0..shape[0] * hw).map(|i| i / hw).collect()
}

fn scale_indices(scales: &Tensor) -> Vec<usize> {
    scales.data().iter().map(|&s| gaussian_scale_index(s)).collect()
}

fn code_latents(lat: &codec_nets::LatentBundle, table_z: &CdfTable) -> Result<(CodedChunk, CodedChunk)> {
    let zs: Vec<i32> = lat.z_hat.data().iter().map(|&v| v as i32).collect();
    let z = range_encode(&zs, table_z, &channel_indices(lat.z_hat.shape()))?;
    let ys = crate::entropy::symbols(&lat.y_hat, Some(&lat.means));
    let y = range_encode(&ys, CdfTable::gaussian(), &scale_indices(&lat.scales))?;
    Ok((z, y))
}

/// Decode the quantised latent `y_hat` of one step.
fn decode_latents(
    step: &StepRecord,
    params: &ParameterStore,
    prefix: &str,
    table_z: &CdfTable,
    ph: usize,
    pw: usize,
) -> Result<Tensor> {
    let n = params.get(&format!("{prefix}.hyper_enc.2.b"))?.len();
    let zshape = [n, ph / 64, pw / 64];
    let zs = range_decode(&step.z, table_z, &channel_indices(&zshape))?;
    let z_hat = Tensor::from_vec(&zshape, zs.into_iter().map(|v| v as f32).collect())?;
    let (means, scales) = codec_nets::hyper_decode(&z_hat, params, prefix)?;
    let ys = range_decode(&step.y, CdfTable::gaussian(), &scale_indices(&scales))?;
    let data = ys.iter().zip(means.data()).map(|(&s, &m)| s as f32 + m).collect();
    Tensor::from_vec(means.shape(), data)
}

/// Code a sequence with closed-loop references.
pub fn encode_video(seq: &VideoSequence, params: &ParameterStore, gop_size: usize) -> Result<EncodeOutput> {
    let codec = Codec::new(params)?;
    let (w, h) = (seq.width(), seq.height());
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::invalid(format!("{w}x{h} exceeds the container's 16-bit dimensions")));
    }
    let n = seq.len();
    let sched = build_schedule(n, gop_size)?;
    let tables = Tables::new(params, n > 2)?;
    let padded: Vec<Frame> = seq.frames.iter().map(|f| f.pad_to_multiple(PAD_MULTIPLE)).collect();
    let mut recon: Vec<Option<Frame>> = vec![None; n];
    let mut steps = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(n);
    let mut times = StageTimes::default();
    for st in &sched.steps {
        let f = st.display_index;
        let (prefix, lat, rec) = match st.frame_type {
            FrameType::I => {
                let t = Instant::now();
                let y = codec_nets::encode_i(&padded[f], params)?;
                let lat = codec_nets::quantize_latents(&y, params, IFRAME)?;
                times.analysis += t.elapsed().as_secs_f64();
                let t = Instant::now();
                let rec = codec_nets::decode_i(&lat.y_hat, params)?;
                times.synthesis += t.elapsed().as_secs_f64();
                (IFRAME, lat, rec)
            }
            FrameType::B => {
                let (p, q) = (st.ref_prev.unwrap(), st.ref_next.unwrap());
                let t = Instant::now();
                let refs = codec.references(recon[p].as_ref().unwrap(), recon[q].as_ref().unwrap())?;
                times.interpolate += t.elapsed().as_secs_f64();
                let t = Instant::now();
                let y = codec_nets::encode_b(&padded[f], &refs, params, &codec.cfg)?;
                let lat = codec_nets::quantize_latents(&y, params, BFRAME)?;
                times.analysis += t.elapsed().as_secs_f64();
                let t = Instant::now();
                let (rec, _) = codec_nets::decode_b(&lat.y_hat, &refs, params, &codec.cfg)?;
                times.synthesis += t.elapsed().as_secs_f64();
                (BFRAME, lat, rec)
            }
        };
        let t = Instant::now();
        let (z, y) = code_latents(&lat, tables.z(prefix))?;
        times.entropy += t.elapsed().as_secs_f64();
        let cropped = rec.crop(0, 0, w, h)?;
        stats.push(FrameStats {
            display_index: f,
            frame_type: st.frame_type,
            level: st.level,
            bits_actual: z.bits() + y.bits(),
            bits_estimated: lat.estimated_bits()?,
            psnr: rgb_psnr(&seq.frames[f], &cropped)?,
        });
        recon[f] = Some(rec);
        steps.push(StepRecord {
            display_index: f as u32,
            frame_type: st.frame_type,
            z,
            y,
        });
    }
    let header = Header {
        width: w as u16,
        height: h as u16,
        frame_count: n as u32,
        gop_size: gop_size as u8,
        model_id: params.model_id()?,
        flags: if codec.cfg.use_interpolator { FLAG_INTERPOLATOR } else { 0 },
    };
    let reconstructions = recon
        .into_iter()
        .map(|r| r.expect("every frame coded").crop(0, 0, w, h))
        .collect::<Result<_>>()?;
    stats.sort_by_key(|s| s.display_index);
    Ok(EncodeOutput {
        container: BitstreamContainer { header, steps },
        reconstructions,
        stats,
        times,
    })
}

/// Decode a container produced with the same checkpoint.
pub fn decode_video(bytes: &[u8], params: &ParameterStore) -> Result<VideoSequence> {
    let header = BitstreamContainer::parse_header(bytes)?;
    let id = params.model_id()?;
    if header.model_id != id {
        return Err(Error::ModelMismatch {
            container: header.model_id,
            checkpoint: id,
        });
    }
    let codec = Codec::new(params)?;
    if (header.flags & FLAG_INTERPOLATOR != 0) != codec.cfg.use_interpolator {
        return Err(Error::Bitstream {
            offset: 17,
            message: "interpolator flag disagrees with the checkpoint".into(),
        });
    }
    let c = BitstreamContainer::from_bytes(bytes, params)?;
    let n = header.frame_count as usize;
    let sched = build_schedule(n, header.gop_size as usize)?;
    let (w, h) = (header.width as usize, header.height as usize);
    let (ph, pw) = (h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE);
    let tables = Tables::new(params, n > 2)?;
    let mut recon: Vec<Option<Frame>> = vec![None; n];
    for (k, (st, rec)) in sched.steps.iter().zip(&c.steps).enumerate() {
        if rec.display_index as usize != st.display_index || rec.frame_type != st.frame_type {
            return Err(Error::Bitstream {
                offset: HEADER_LEN,
                message: format!(
                    "step {k} is frame {} ({:?}), schedule expects frame {} ({:?})",
                    rec.display_index, rec.frame_type, st.display_index, st.frame_type
                ),
            });
        }
        let f = match st.frame_type {
            FrameType::I => {
                let y_hat = decode_latents(rec, params, IFRAME, tables.z(IFRAME), ph, pw)?;
                codec_nets::decode_i(&y_hat, params)?
            }
            FrameType::B => {
                let (p, q) = (st.ref_prev.unwrap(), st.ref_next.unwrap());
                let refs = codec.references(recon[p].as_ref().unwrap(), recon[q].as_ref().unwrap())?;
                let y_hat = decode_latents(rec, params, BFRAME, tables.z(BFRAME), ph, pw)?;
                codec_nets::decode_b(&y_hat, &refs, params, &codec.cfg)?.0
            }
        };
        recon[st.display_index] = Some(f);
    }
    let frames = recon
        .into_iter()
        .map(|r| r.expect("every frame decoded").crop(0, 0, w, h))
        .collect::<Result<_>>()?;
    VideoSequence::new(frames, 30.0)
}
