//! Binary checkpoint of a [`ContinualState`].
//!
//! Layout: 4 magic bytes `GNSP`, `u32` format version, `u64` payload length,
//! payload, `u32` CRC-32 of the payload. All integers and floats are
//! little-endian. Floats are stored as raw `f64` bits so a round trip is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Activation, DualEncoder, EncoderLayer, EncoderStack};
use crate::error::{CheckpointError, Result};
use crate::linalg::Matrix;
use crate::projection::{GramAccumulator, Projector};
use crate::trainer::ContinualState;

pub const MAGIC: &[u8; 4] = b"GNSP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

pub fn save_checkpoint(state: &ContinualState, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let mut file = fs::File::create(path).map_err(CheckpointError::from)?;
    file.write_all(&bytes).map_err(CheckpointError::from)?;
    file.sync_all().map_err(CheckpointError::from)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ContinualState> {
    let bytes = fs::read(path).map_err(CheckpointError::from)?;
    Ok(decode(&bytes)?)
}

pub fn encode(state: &ContinualState) -> Vec<u8> {
    let mut p = Vec::new();
    put_u64(&mut p, state.task_index as u64);
    put_f64(&mut p, state.model.temperature());
    for stack in [
        &state.model.image_encoder,
        &state.model.text_encoder,
        &state.teacher.image_encoder,
        &state.teacher.text_encoder,
    ] {
        put_stack(&mut p, stack);
    }
    put_f64(&mut p, state.teacher.temperature());

    put_u64(&mut p, state.gram.tasks_absorbed as u64);
    put_u64(&mut p, state.gram.per_layer.len() as u64);
    for g in &state.gram.per_layer {
        put_square(&mut p, g);
    }

    match &state.projector {
        None => p.push(0),
        Some(proj) => {
            p.push(1);
            put_f64(&mut p, proj.rho_used);
            put_u64(&mut p, proj.per_layer.len() as u64);
            for (m, &k) in proj.per_layer.iter().zip(&proj.null_dims) {
                put_u64(&mut p, k as u64);
                put_square(&mut p, m);
            }
        }
    }

    p.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut p, state.rng.get_stream());
    p.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let mut out = Vec::with_capacity(HEADER_LEN + p.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u64(&mut out, p.len() as u64);
    out.extend_from_slice(&p);
    out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ContinualState, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let needed = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| CheckpointError::Malformed(format!("payload length {len} overflows")))?;
    if bytes.len() < needed {
        return Err(CheckpointError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..needed - 4];
    let stored = u32::from_le_bytes(bytes[needed - 4..needed].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let task_index = r.usize()?;
    let temperature = r.f64()?;
    let model_image = r.stack()?;
    let model_text = r.stack()?;
    let teacher_image = r.stack()?;
    let teacher_text = r.stack()?;
    let teacher_temperature = r.f64()?;
    let model = DualEncoder::new(model_image, model_text, temperature).map_err(malformed)?;
    let teacher = DualEncoder::new(teacher_image, teacher_text, teacher_temperature).map_err(malformed)?;

    let tasks_absorbed = r.usize()?;
    let n = r.usize()?;
    let mut per_layer = Vec::new();
    for _ in 0..n {
        per_layer.push(r.square()?);
    }
    let gram = GramAccumulator {
        layer_dims: per_layer.iter().map(Matrix::rows).collect(),
        per_layer,
        tasks_absorbed,
    };

    let projector = match r.u8()? {
        0 => None,
        1 => {
            let rho_used = r.f64()?;
            let n = r.usize()?;
            let mut per_layer = Vec::new();
            let mut null_dims = Vec::new();
            for _ in 0..n {
                null_dims.push(r.usize()?);
                per_layer.push(r.square()?);
            }
            Some(Projector {
                per_layer,
                null_dims,
                rho_used,
            })
        }
        f => return Err(CheckpointError::Malformed(format!("bad projector flag {f}"))),
    };

    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    if r.pos != payload.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing payload bytes",
            payload.len() - r.pos
        )));
    }
    Ok(ContinualState {
        model,
        teacher,
        gram,
        projector,
        task_index,
        rng,
    })
}

fn malformed(e: crate::error::Error) -> CheckpointError {
    CheckpointError::Malformed(e.to_string())
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_square(out: &mut Vec<u8>, m: &Matrix) {
    put_u64(out, m.rows() as u64);
    for &x in m.data() {
        put_f64(out, x);
    }
}

fn put_stack(out: &mut Vec<u8>, stack: &EncoderStack) {
    put_u64(out, stack.layers.len() as u64);
    out.push(stack.normalize_output as u8);
    for layer in &stack.layers {
        put_u64(out, layer.d_in() as u64);
        put_u64(out, layer.d_out() as u64);
        out.push(match layer.activation {
            Activation::Gelu => 0,
            Activation::Identity => 1,
        });
        out.push(layer.trainable as u8);
        for &w in layer.weight.data() {
            put_f64(out, w);
        }
        for &b in layer.bias() {
            put_f64(out, b);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

// Upper bound on any single dimension; guards against allocating from a
// corrupted length field that happens to pass the checksum.
const MAX_DIM: usize = 1 << 16;

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                CheckpointError::Malformed(format!(
                    "payload ends at byte {} while reading {n} bytes",
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> std::result::Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("value {v} out of range")))
    }

    fn dim(&mut self) -> std::result::Result<usize, CheckpointError> {
        let d = self.usize()?;
        if d == 0 || d > MAX_DIM {
            return Err(CheckpointError::Malformed(format!("implausible dimension {d}")));
        }
        Ok(d)
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> std::result::Result<Vec<f64>, CheckpointError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn bool(&mut self) -> std::result::Result<bool, CheckpointError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CheckpointError::Malformed(format!("bad boolean byte {b}"))),
        }
    }

    fn square(&mut self) -> std::result::Result<Matrix, CheckpointError> {
        let d = self.dim()?;
        let data = self.floats(d * d)?;
        Matrix::from_vec(d, d, data).map_err(malformed)
    }

    fn stack(&mut self) -> std::result::Result<EncoderStack, CheckpointError> {
        let n = self.usize()?;
        if n == 0 || n > 64 {
            return Err(CheckpointError::Malformed(format!("implausible layer count {n}")));
        }
        let normalize = self.bool()?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let d_in = self.dim()?;
            let d_out = self.dim()?;
            let activation = match self.u8()? {
                0 => Activation::Gelu,
                1 => Activation::Identity,
                a => return Err(CheckpointError::Malformed(format!("unknown activation tag {a}"))),
            };
            let trainable = self.bool()?;
            let weight = Matrix::from_vec(d_in, d_out, self.floats(d_in * d_out)?).map_err(malformed)?;
            let bias = self.floats(d_out)?;
            layers.push(EncoderLayer::new(weight, bias, activation, trainable).map_err(malformed)?);
        }
        EncoderStack::new(layers, normalize).map_err(malformed)
    }
}
