//! Single-file deployment bundle.
//!
//! Layout: one header line `HARUQ-BUNDLE v<version> sha256=<hex>` followed by
//! a JSON payload. The checksum covers the payload bytes exactly. Parameter
//! values are stored as base64 little-endian `f32`.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ClassifierHead, HeadConfig};
use crate::config::RunConfig;
use crate::detectors::DetectorSet;
use crate::error::{Error, Result};
use crate::mae::{MaeConfig, MaeModel};
use crate::nn::{ParamStore, Tensor};
use crate::rng::RngState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "HARUQ-BUNDLE";

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub config: RunConfig,
    pub mae: MaeModel,
    pub head: Option<ClassifierHead>,
    pub detectors: Option<DetectorSet>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct MaeRecord {
    config: MaeConfig,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct HeadRecord {
    config: HeadConfig,
    latent_dim: usize,
    class_labels: Vec<usize>,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    format_version: u32,
    config: RunConfig,
    mae: Option<MaeRecord>,
    head: Option<HeadRecord>,
    detectors: Option<DetectorSet>,
}

fn encode_params(store: &ParamStore) -> Vec<ParamRecord> {
    store
        .iter()
        .map(|p| {
            let bytes: Vec<u8> = p
                .value
                .data()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: B64.encode(bytes),
            }
        })
        .collect()
}

fn decode_params(records: Vec<ParamRecord>) -> Result<Vec<(String, Tensor)>> {
    records
        .into_iter()
        .map(|r| {
            let bytes = B64
                .decode(&r.data)
                .map_err(|e| Error::Bundle(format!("parameter {}: {e}", r.name)))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Bundle(format!(
                    "parameter {}: truncated data",
                    r.name
                )));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(r.shape, values)
                .map_err(|e| Error::Bundle(format!("parameter {}: {e}", r.name)))?;
            Ok((r.name, t))
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Bundle {
    pub fn new(config: RunConfig, mae: MaeModel) -> Self {
        Self {
            config,
            mae,
            head: None,
            detectors: None,
        }
    }

    fn payload(&self) -> Payload {
        Payload {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            mae: Some(MaeRecord {
                config: self.mae.config().clone(),
                params: encode_params(self.mae.params()),
            }),
            head: self.head.as_ref().map(|h| HeadRecord {
                config: *h.config(),
                latent_dim: h.latent_dim(),
                class_labels: h.class_labels().to_vec(),
                params: encode_params(h.params()),
            }),
            detectors: self.detectors.clone(),
        }
    }

    fn payload_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.payload())?)
    }

    /// Checksum of the serialized bundle.
    pub fn checksum(&self) -> Result<String> {
        Ok(sha256_hex(&self.payload_bytes()?))
    }

    /// Checksum of the autoencoder alone.
    pub fn mae_checksum(&self) -> Result<String> {
        let record = MaeRecord {
            config: self.mae.config().clone(),
            params: encode_params(self.mae.params()),
        };
        Ok(sha256_hex(&serde_json::to_vec(&record)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload_bytes()?;
        let mut out = format!(
            "{MAGIC} v{FORMAT_VERSION} sha256={}\n",
            sha256_hex(&payload)
        )
        .into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Bundle("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Bundle("header is not UTF-8".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(MAGIC) {
            return Err(Error::Bundle("not a bundle file".into()));
        }
        let version: u32 = fields
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Bundle("malformed version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Bundle(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let expected = fields
            .next()
            .and_then(|f| f.strip_prefix("sha256="))
            .ok_or_else(|| Error::Bundle("missing checksum".into()))?;
        let payload = &bytes[newline + 1..];
        let found = sha256_hex(payload);
        if found != expected {
            return Err(Error::Checksum {
                expected: expected.to_string(),
                found,
            });
        }
        let payload: Payload = serde_json::from_slice(payload)?;
        if payload.format_version != FORMAT_VERSION {
            return Err(Error::Bundle(
                "payload version disagrees with header".into(),
            ));
        }
        let mae_record = payload
            .mae
            .ok_or_else(|| Error::Bundle("bundle has no autoencoder".into()))?;
        let mut mae = MaeModel::new(mae_record.config, &mut RngState::new(0))?;
        mae.params_mut()
            .load_values(decode_params(mae_record.params)?)?;
        let head = payload
            .head
            .map(|r| -> Result<ClassifierHead> {
                let mut h = ClassifierHead::new(
                    r.latent_dim,
                    r.class_labels,
                    r.config,
                    &mut RngState::new(0),
                )?;
                h.params_mut().load_values(decode_params(r.params)?)?;
                Ok(h)
            })
            .transpose()?;
        Ok(Self {
            config: payload.config,
            mae,
            head,
            detectors: payload.detectors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
