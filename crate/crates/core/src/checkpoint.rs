//! Versioned checkpoint container.
//!
//! Layout: magic `SPCK`, u32 LE version, u64 LE header length, JSON header,
//! u64 LE tensor count, then per tensor a u64 LE name length, the UTF-8 name
//! and a tensor record; a SHA-256 digest of all preceding bytes closes the file.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{Backbone, DualEncoder, EncoderConfig, PromptSet};
use crate::error::{Error, Result};
use crate::style::StyleBank;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Backbone,
    Tuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    /// Effective configuration, seed and upstream checksums.
    pub provenance: serde_json::Value,
    /// Resumable training state, for tuned checkpoints.
    pub state: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint body truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_bytes_with_version(CHECKPOINT_VERSION)
    }

    #[doc(hidden)]
    pub fn to_bytes_with_version(&self, version: u32) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(&header);
        put_u64(&mut out, self.tensors.len() as u64);
        for (name, t) in &self.tensors {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            t.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and verifies a container; `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(Error::integrity(origin, "file too short for a checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::integrity(origin, "checksum mismatch"));
        }
        if body[..4] != CHECKPOINT_MAGIC {
            return Err(Error::integrity(origin, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint version {version} at {} (supported: {CHECKPOINT_VERSION})",
                origin.display()
            )));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let mut parse = || -> Result<Self> {
            let hlen = r.u64()? as usize;
            let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
                .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
            let count = r.u64()? as usize;
            let mut tensors = Vec::with_capacity(count.min(4096));
            for _ in 0..count {
                let nlen = r.u64()? as usize;
                let name = String::from_utf8(r.take(nlen)?.to_vec())
                    .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
                let mut rest = &r.bytes[r.pos..];
                let before = rest.len();
                let t = Tensor::read_from(&mut rest)?;
                r.pos += before - rest.len();
                tensors.push((name, t));
            }
            if r.pos != body.len() {
                return Err(Error::Format("trailing bytes in checkpoint body".into()));
            }
            Ok(Self { header, tensors })
        };
        parse().map_err(|e| Error::integrity(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "checkpoint {} not found",
                path.display()
            )));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn for_backbone(backbone: &Backbone, provenance: serde_json::Value) -> Self {
        Self {
            header: CheckpointHeader {
                kind: CheckpointKind::Backbone,
                encoder: backbone.config.clone(),
                provenance,
                state: None,
            },
            tensors: backbone.named_tensors(),
        }
    }

    pub fn for_model(
        model: &DualEncoder,
        extra: Vec<(String, Tensor)>,
        provenance: serde_json::Value,
        state: Option<serde_json::Value>,
    ) -> Self {
        let mut tensors = model.backbone.named_tensors();
        let mut prompts = model.prompts.clone();
        tensors.extend(prompts.tensors_mut().into_iter().map(|(n, t)| (n, t.clone())));
        tensors.push(("bank.mu_raw".into(), model.bank.mu_raw.clone()));
        tensors.push(("bank.sigma_raw".into(), model.bank.sigma_raw.clone()));
        tensors.extend(extra);
        Self {
            header: CheckpointHeader {
                kind: CheckpointKind::Tuned,
                encoder: model.backbone.config.clone(),
                provenance,
                state,
            },
            tensors,
        }
    }

    fn fill(&self, slots: Vec<(String, &mut Tensor)>) -> Result<()> {
        for (name, slot) in slots {
            let t = self.get(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<Backbone> {
        let config = &self.header.encoder;
        let mut b = Backbone::random(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.fill(b.tensors_mut())?;
        Ok(b)
    }

    pub fn model(&self) -> Result<DualEncoder> {
        if self.header.kind != CheckpointKind::Tuned {
            return Err(Error::MissingPrerequisite(
                "checkpoint holds a bare backbone, not a tuned model".into(),
            ));
        }
        let backbone = self.backbone()?;
        let mut prompts = PromptSet::zeros(&backbone.config);
        self.fill(prompts.tensors_mut())?;
        let bank = StyleBank::new(
            self.get("bank.mu_raw")?.clone(),
            self.get("bank.sigma_raw")?.clone(),
        )?;
        Ok(DualEncoder {
            backbone,
            prompts,
            bank,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backbone() -> Backbone {
        let config = EncoderConfig {
            token_dim: 8,
            heads: 2,
            layers: 2,
            prompt_depth: 2,
            embed_dim: 4,
            ..EncoderConfig::default()
        };
        Backbone::random(&config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn backbone_round_trip() {
        let b = backbone();
        let ck = Checkpoint::for_backbone(&b, serde_json::json!({"seed": 5}));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.backbone().unwrap(), b);
        assert_eq!(back.backbone().unwrap().checksum(), b.checksum());
    }

    #[test]
    fn corruption_and_version_errors() {
        let ck = Checkpoint::for_backbone(&backbone(), serde_json::Value::Null);
        let mut bytes = ck.to_bytes().unwrap();
        bytes[40] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x.ck")),
            Err(Error::Integrity { .. })
        ));
        let old = ck.to_bytes_with_version(CHECKPOINT_VERSION + 1).unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&old, Path::new("x.ck")),
            Err(Error::Compatibility(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10], Path::new("x.ck")),
            Err(Error::Integrity { .. })
        ));
    }
}
