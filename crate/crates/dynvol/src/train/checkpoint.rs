//! Checkpoint persistence: a flat binary image of the model (weights, latent
//! codes, architecture, schedule position, RNG state) that round-trips
//! bit-exactly.
//!
//! Tensors are stored as 32-bit little-endian floats in declaration order, so
//! file size is a fixed header plus parameter bytes plus T·D·4 latent bytes.
//! The in-memory `Checkpoint` already holds f32, making save/load lossless;
//! quantization happens once, when a (f64) model is captured.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{ConditioningKind, EncodingConfig, FieldModel};
use crate::render::RenderConfig;

const MAGIC: &[u8; 4] = b"DYNF";
const VERSION: u32 = 1;

/// Everything needed to resume or render: a quantized model image.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ConditioningKind,
    pub width: u32,
    pub t_count: u32,
    pub encoding: EncodingConfig,
    /// Index of the next stage to run; stages before it are complete.
    pub stage_cursor: u32,
    pub render: RenderConfig,
    /// FNV-1a digest of the training configuration that produced this model.
    pub config_digest: u64,
    /// Network tensors in declaration order (coarse then fine level).
    pub tensors: Vec<Vec<f32>>,
    /// Latent codes row-major; empty for the time-conditioned variant.
    pub latents: Vec<f32>,
    /// Opaque RNG state blob (seed, word position, stream).
    pub rng_state: Vec<u8>,
}

/// Serializes a ChaCha stream's full state: 32-byte seed, 16-byte word
/// position, 8-byte stream id.
pub fn rng_state_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out
}

pub fn rng_from_state(blob: &[u8]) -> Result<ChaCha8Rng> {
    if blob.len() != 56 {
        return Err(Error::Invalid(format!(
            "rng state blob is {} bytes, expected 56",
            blob.len()
        )));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&blob[..32]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(blob[48..56].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(blob[32..48].try_into().unwrap()));
    Ok(rng)
}

impl Checkpoint {
    /// Captures a model, quantizing its f64 tensors to f32 once.
    pub fn from_model(
        model: &FieldModel,
        stage_cursor: u32,
        render: RenderConfig,
        config_digest: u64,
        rng: &ChaCha8Rng,
    ) -> Self {
        Checkpoint {
            kind: model.kind(),
            width: model.width as u32,
            t_count: model.t_count as u32,
            encoding: model.encoding,
            stage_cursor,
            render,
            config_digest,
            tensors: model
                .params
                .tensors()
                .iter()
                .map(|(_, v)| v.iter().map(|&x| x as f32).collect())
                .collect(),
            latents: model
                .latents()
                .map(|t| t.codes.iter().map(|&x| x as f32).collect())
                .unwrap_or_default(),
            rng_state: rng_state_bytes(rng),
        }
    }

    /// Rebuilds the model; f32 → f64 widening is exact.
    pub fn to_model(&self) -> Result<FieldModel> {
        let mut model = FieldModel::allocate(
            self.width as usize,
            self.encoding,
            self.t_count as usize,
            self.kind,
        )?;
        let mut slots = model.params.tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), data) in slots.iter_mut().zip(&self.tensors) {
            if slot.len() != data.len() {
                return Err(Error::Invalid(format!(
                    "tensor {name} has {} scalars in the file, expected {}",
                    data.len(),
                    slot.len()
                )));
            }
            for (dst, &src) in slot.iter_mut().zip(data) {
                *dst = src as f64;
            }
        }
        drop(slots);
        if let Some(table) = model.latents_mut() {
            if table.codes.len() != self.latents.len() {
                return Err(Error::Invalid(format!(
                    "latent payload has {} scalars, table needs {}",
                    self.latents.len(),
                    table.codes.len()
                )));
            }
            for (dst, &src) in table.codes.iter_mut().zip(&self.latents) {
                *dst = src as f64;
            }
        }
        Ok(model)
    }

    pub fn restore_rng(&self) -> Result<ChaCha8Rng> {
        rng_from_state(&self.rng_state)
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let (kind_tag, latent_dim) = match self.kind {
            ConditioningKind::Latent { d } => (0u8, d as u32),
            ConditioningKind::Time => (1u8, 0),
        };
        buf.push(kind_tag);
        buf.extend_from_slice(&self.width.to_le_bytes());
        buf.extend_from_slice(&self.t_count.to_le_bytes());
        buf.extend_from_slice(&latent_dim.to_le_bytes());
        buf.extend_from_slice(&(self.encoding.l_x as u32).to_le_bytes());
        buf.extend_from_slice(&(self.encoding.l_d as u32).to_le_bytes());
        buf.extend_from_slice(&(self.encoding.l_t as u32).to_le_bytes());
        buf.push(self.encoding.include_input as u8);
        buf.extend_from_slice(&self.stage_cursor.to_le_bytes());
        buf.extend_from_slice(&(self.render.n_coarse as u32).to_le_bytes());
        buf.extend_from_slice(&(self.render.n_fine as u32).to_le_bytes());
        buf.push(self.render.deterministic as u8);
        buf.extend_from_slice(&self.config_digest.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for tensor in &self.tensors {
            buf.extend_from_slice(&(tensor.len() as u32).to_le_bytes());
            for v in tensor {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.latents.len() as u32).to_le_bytes());
        for v in &self.latents {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.rng_state.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.rng_state);
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&self.encode())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Reader { buf: &bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| fail("truncated magic".into()))?;
        if magic != MAGIC {
            return Err(fail(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32().ok_or_else(|| fail("truncated version".into()))?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let header = (|| {
            let kind_tag = r.u8()?;
            let width = r.u32()?;
            let t_count = r.u32()?;
            let latent_dim = r.u32()?;
            let l_x = r.u32()? as usize;
            let l_d = r.u32()? as usize;
            let l_t = r.u32()? as usize;
            let include_input = r.u8()? != 0;
            let stage_cursor = r.u32()?;
            let n_coarse = r.u32()? as usize;
            let n_fine = r.u32()? as usize;
            let deterministic = r.u8()? != 0;
            let config_digest = r.u64()?;
            Some((
                kind_tag,
                width,
                t_count,
                latent_dim,
                EncodingConfig {
                    l_x,
                    l_d,
                    l_t,
                    include_input,
                },
                stage_cursor,
                RenderConfig {
                    n_coarse,
                    n_fine,
                    deterministic,
                },
                config_digest,
            ))
        })()
        .ok_or_else(|| fail("truncated header".into()))?;
        let (kind_tag, width, t_count, latent_dim, encoding, stage_cursor, render, config_digest) =
            header;
        let kind = match kind_tag {
            0 => ConditioningKind::Latent {
                d: latent_dim as usize,
            },
            1 => ConditioningKind::Time,
            other => return Err(fail(format!("unknown conditioning tag {other}"))),
        };
        let tensor_count = r
            .u32()
            .ok_or_else(|| fail("truncated tensor count".into()))? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for i in 0..tensor_count {
            let len = r
                .u32()
                .ok_or_else(|| fail(format!("truncated tensor {i} length")))?
                as usize;
            let data = r
                .f32s(len)
                .ok_or_else(|| fail(format!("truncated tensor {i} payload")))?;
            tensors.push(data);
        }
        let latent_len = r
            .u32()
            .ok_or_else(|| fail("truncated latent length".into()))? as usize;
        let latents = r
            .f32s(latent_len)
            .ok_or_else(|| fail("truncated latent payload".into()))?;
        let rng_len = r
            .u32()
            .ok_or_else(|| fail("truncated rng length".into()))? as usize;
        let rng_state = r
            .take(rng_len)
            .ok_or_else(|| fail("truncated rng state".into()))?
            .to_vec();
        if r.pos != bytes.len() {
            return Err(fail(format!(
                "{} trailing bytes after rng state",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            kind,
            width,
            t_count,
            encoding,
            stage_cursor,
            render,
            config_digest,
            tensors,
            latents,
            rng_state,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return None;
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        self.take(n * 4).map(|s| {
            s.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
    }
}
