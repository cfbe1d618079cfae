//! Binary checkpoint: the 8-byte magic, a little-endian u64 header length,
//! a JSON header, then every parameter as little-endian f32 in table order.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::backbone::{BackboneConfig, Param, StagedBackbone};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DHCNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the array section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    backbone: BackboneConfig,
    epoch: usize,
    metrics: Option<EpochMetrics>,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub backbone: BackboneConfig,
    pub epoch: usize,
    pub metrics: Option<EpochMetrics>,
    pub params: Vec<Param>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: &StagedBackbone, config: &TrainConfig, epoch: usize, metrics: Option<EpochMetrics>) -> Self {
        Checkpoint {
            config: config.clone(),
            backbone: model.config().clone(),
            epoch,
            metrics,
            params: model.params().to_vec(),
        }
    }

    pub fn model(&self) -> Result<StagedBackbone> {
        StagedBackbone::from_params(&self.backbone, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let table = self
            .params
            .iter()
            .map(|p| {
                let entry = ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                };
                offset += 4 * p.value.len() as u64;
                entry
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            params: table,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing DHCNETCK magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let data = &bytes[header_end..];
        let mut names = HashSet::new();
        let mut expected = 0u64;
        let mut params = Vec::with_capacity(header.params.len());
        for entry in &header.params {
            if !names.insert(entry.name.as_str()) {
                return Err(bad(format!("parameter {} listed twice", entry.name)));
            }
            if entry.offset != expected {
                return Err(bad(format!("parameter {} at offset {}, expected {expected}", entry.name, entry.offset)));
            }
            let len: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * len;
            if end > data.len() {
                return Err(bad(format!("parameter {} runs past the end of the file", entry.name)));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params.push(Param {
                name: entry.name.clone(),
                value: Tensor::new(entry.shape.clone(), values)?,
            });
            expected = end as u64;
        }
        if expected as usize != data.len() {
            return Err(bad(format!("{} trailing bytes after the last parameter", data.len() - expected as usize)));
        }
        let ck = Checkpoint {
            config: header.config,
            backbone: header.backbone,
            epoch: header.epoch,
            metrics: header.metrics,
            params,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.image_size = 16;
        config.backbone.stage_channels = vec![2, 2, 3, 3];
        config.backbone.blocks_per_stage = 1;
        let model = StagedBackbone::init(&config.model_config(5)).unwrap();
        Checkpoint::new(&model, &config, 3, None)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = sample().to_bytes();
        let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
        assert_eq!(bytes, again);
    }

    #[test]
    fn layout() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"DHCNETCK");
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let total: usize = ck.params.iter().map(|p| p.value.len()).sum();
        assert_eq!(bytes.len(), 16 + hl + 4 * total);
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["epoch"], 3);
        assert_eq!(header["params"].as_array().unwrap().len(), ck.params.len());
        let first = &ck.params[0];
        let v = f32::from_le_bytes(bytes[16 + hl..20 + hl].try_into().unwrap());
        assert_eq!(v, first.value.data()[0] as f32);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }
}
