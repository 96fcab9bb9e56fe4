//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CLMP" | version: u8 | header_len: u32 | header: JSON (kind, config, vocab, meta)
//! tensor_count: u32
//! per tensor: name_len: u16 | name: UTF-8 | rows: u32 | cols: u32 | rows*cols f32
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ClampModel, M3Model};
use super::params::ParamStore;
use super::{Mat, ModelConfig, NnError};
use crate::text::TextVocab;

const MAGIC: &[u8; 4] = b"CLMP";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    M3,
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<TextVocab>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N], NnError> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

impl Checkpoint {
    pub fn from_m3(model: &M3Model, meta: serde_json::Value) -> Self {
        Self {
            header: CheckpointHeader {
                kind: ModelKind::M3,
                config: model.config.clone(),
                vocab: None,
                meta,
            },
            params: model.params.clone(),
        }
    }

    pub fn from_clamp(model: &ClampModel, meta: serde_json::Value) -> Self {
        Self {
            header: CheckpointHeader {
                kind: ModelKind::Clamp,
                config: model.config.clone(),
                vocab: Some(model.vocab.clone()),
                meta,
            },
            params: model.params.clone(),
        }
    }

    pub fn into_m3(self) -> Result<M3Model, NnError> {
        if self.header.kind != ModelKind::M3 {
            return Err(NnError::Checkpoint("not an M3 checkpoint".into()));
        }
        M3Model::from_params(self.header.config, self.params)
    }

    pub fn into_clamp(self) -> Result<ClampModel, NnError> {
        if self.header.kind != ModelKind::Clamp {
            return Err(NnError::Checkpoint("not a CLaMP checkpoint".into()));
        }
        let vocab = self
            .header
            .vocab
            .ok_or_else(|| NnError::Checkpoint("CLaMP checkpoint without vocabulary".into()))?;
        ClampModel::from_params(self.header.config, vocab, self.params)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<(), NnError> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in self.params.iter() {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(value.nrows() as u32).to_le_bytes())?;
            out.write_all(&(value.ncols() as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity(value.len() * 4);
            for &x in value.iter() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self, NnError> {
        let magic: [u8; 4] = read_array(&mut input)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("missing CLMP magic".into()));
        }
        let [version] = read_array::<1>(&mut input)?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(read_array(&mut input)?) as usize;
        let mut header = vec![0u8; header_len];
        input.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let count = u32::from_le_bytes(read_array(&mut input)?) as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(&mut input)?) as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| NnError::Checkpoint(e.to_string()))?;
            let rows = u32::from_le_bytes(read_array(&mut input)?) as usize;
            let cols = u32::from_le_bytes(read_array(&mut input)?) as usize;
            let mut raw = vec![0u8; rows * cols * 4];
            input.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let value = Mat::from_shape_vec((rows, cols), data)
                .map_err(|e| NnError::Checkpoint(e.to_string()))?;
            params.insert(name, value);
        }
        Ok(Self { header, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            encoder_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
            heads: 2,
            max_patches: 16,
            max_text_len: 16,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn clamp_round_trip_is_bit_exact() {
        let vocab = TextVocab::build(["g major waltz"], 1);
        let model = ClampModel::new(tiny(), vocab, 3).unwrap();
        let ckpt = Checkpoint::from_clamp(&model, serde_json::json!({"epochs": 0}));
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..5], b"CLMP\x01");
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let restored = back.into_clamp().unwrap();
        assert_eq!(restored.vocab, model.vocab);
        for ((n1, a), (n2, b)) in restored.params.iter().zip(model.params.iter()) {
            assert_eq!(n1, n2);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn kind_is_checked() {
        let m3 = M3Model::new(tiny(), 1).unwrap();
        let ckpt = Checkpoint::from_m3(&m3, serde_json::Value::Null);
        assert!(ckpt.clone().into_clamp().is_err());
        assert!(ckpt.into_m3().is_ok());
        assert!(Checkpoint::read_from(&b"NOPE"[..]).is_err());
    }
}
