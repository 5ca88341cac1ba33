//! Checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "SLMCKPT\0" | u32 version | u32 len | config JSON | u8 dtype
//! u32 count | count × (u32 name len | name | u32 rank | rank × u64 dim | data)
//! ```
//!
//! Values are stored as raw bits, so save→load is bit-identical.

use std::fmt;
use std::path::Path;

use crate::model::{Model, ModelConfig, ModelWeights};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SLMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    BadMagic,
    Version(u32),
    DType { file: DType, expected: DType },
    Truncated,
    Config(String),
    Tensor { name: String, msg: String },
    Io(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic => write!(f, "not a checkpoint file"),
            Self::Version(v) => write!(f, "unsupported checkpoint version {v} (expected {VERSION})"),
            Self::DType { file, expected } => write!(f, "checkpoint holds {file:?}, expected {expected:?}"),
            Self::Truncated => write!(f, "checkpoint is truncated"),
            Self::Config(msg) => write!(f, "checkpoint config: {msg}"),
            Self::Tensor { name, msg } => write!(f, "checkpoint tensor `{name}`: {msg}"),
            Self::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn to_bytes<F: Scalar>(model: &Model<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.push(dtype_tag(F::DTYPE));
    let named = model.weights.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<Model<F>, CheckpointError> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    let tag = r.take(1)?[0];
    if tag != dtype_tag(F::DTYPE) {
        let file = if tag == 0 { DType::F32 } else { DType::F64 };
        return Err(CheckpointError::DType {
            file,
            expected: F::DTYPE,
        });
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CheckpointError::Truncated)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let width = F::DTYPE.byte_width();
        let raw = r.take(numel * width)?;
        let data: Vec<F> = raw.chunks_exact(width).map(F::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Tensor {
            name: name.clone(),
            msg: e.to_string(),
        })?;
        tensors.push((name, t));
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Config(format!("{} trailing bytes", r.bytes.len())));
    }
    let mut weights = ModelWeights::<F>::random(&config, 0).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut slots = weights.named_mut();
    if slots.len() != tensors.len() {
        return Err(CheckpointError::Config(format!(
            "{} tensors stored, the config needs {}",
            tensors.len(),
            slots.len()
        )));
    }
    for (name, t) in tensors {
        let slot = slots
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::Tensor {
                name: name.clone(),
                msg: "not part of the model".into(),
            })?;
        if slot.1.shape() != t.shape() {
            return Err(CheckpointError::Tensor {
                msg: format!("shape {:?}, expected {:?}", t.shape(), slot.1.shape()),
                name,
            });
        }
        *slot.1 = t;
    }
    Ok(Model { config, weights })
}

pub fn save<F: Scalar>(model: &Model<F>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model)).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
}

pub fn load<F: Scalar>(path: &Path) -> Result<Model<F>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelInput;
    use crate::spatial::BBox;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.vocab_size = 40;
        c.attention.d_model = 16;
        c.attention.n_heads = 2;
        c.n_layers = 2;
        c.d_ff = 32;
        c.max_context = 16;
        c.spatial_bins = 8;
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = Model::<f32>::new(small(), 5).unwrap();
        let back: Model<f32> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.config, m.config);
        for ((na, a), (nb, b)) in m.weights.named().into_iter().zip(back.weights.named()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let boxes = vec![BBox::new(0.1, 0.2, 0.3, 0.4).unwrap(); 5];
        let input = ModelInput::sequence(&[1, 2, 3, 4, 5], &boxes, 0, 8);
        let la = m.logits(&input).unwrap();
        let lb = back.logits(&input).unwrap();
        assert!(la.data().iter().zip(lb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_damaged_files() {
        let m = Model::<f32>::new(small(), 1).unwrap();
        let bytes = to_bytes(&m);
        assert_eq!(from_bytes::<f32>(&bytes[..bytes.len() - 3]).unwrap_err(), CheckpointError::Truncated);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(from_bytes::<f32>(&bad).unwrap_err(), CheckpointError::BadMagic);
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert_eq!(from_bytes::<f32>(&bad).unwrap_err(), CheckpointError::Version(9));
        assert!(matches!(from_bytes::<f64>(&bytes), Err(CheckpointError::DType { .. })));
    }
}
