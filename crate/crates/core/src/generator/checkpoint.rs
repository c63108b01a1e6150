use std::fs;
use std::path::Path;

use super::{GeneratorModel, ModelError, NormBlock, UNetConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SRN1";

pub fn encode_checkpoint(model: &GeneratorModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = MAGIC.to_vec();
    for v in [cfg.size, cfg.stages, cfg.base_channels] {
        out.extend((v as u32).to_le_bytes());
    }
    out.push(cfg.block.code());
    out.push(cfg.residual as u8);
    for t in model.tensors() {
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.values() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
}

/// Parses a checkpoint; with `expected` set, the stored config must equal it.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&UNetConfig>,
) -> Result<GeneratorModel, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let header = || ModelError::Checkpoint("truncated config header".into());
    let size = r.u32().ok_or_else(header)?;
    let stages = r.u32().ok_or_else(header)?;
    let base_channels = r.u32().ok_or_else(header)?;
    let block = r.u8().ok_or_else(header)?;
    let block = NormBlock::from_code(block)
        .ok_or_else(|| ModelError::Checkpoint(format!("unknown block code {block}")))?;
    let residual = match r.u8().ok_or_else(header)? {
        0 => false,
        1 => true,
        v => return Err(ModelError::Checkpoint(format!("residual flag {v}"))),
    };
    let found = UNetConfig {
        size,
        stages,
        base_channels,
        block,
        residual,
    };
    found.validate()?;
    if let Some(&want) = expected {
        if want != found {
            return Err(ModelError::ConfigMismatch {
                expected: want,
                found,
            });
        }
    }
    let mut tensors = Vec::new();
    for (index, shape) in found.parameter_shapes().into_iter().enumerate() {
        let err = |reason: String| ModelError::Tensor { index, reason };
        let truncated = || err("truncated".into());
        let rank = r.u32().ok_or_else(truncated)?;
        if rank != shape.len() {
            return Err(err(format!("rank {rank}, expected {}", shape.len())));
        }
        let dims = (0..rank)
            .map(|_| r.u32().ok_or_else(truncated))
            .collect::<Result<Vec<_>, _>>()?;
        if dims != shape {
            return Err(err(format!("shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8).ok_or_else(truncated)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, values).map_err(|e| err(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    GeneratorModel::from_tensors(found, tensors)
}

pub fn save_checkpoint(model: &GeneratorModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&UNetConfig>,
) -> Result<GeneratorModel, ModelError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes, expected)
}
