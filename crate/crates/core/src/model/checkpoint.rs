//! Checkpoint archives.
//!
//! A checkpoint is a tar archive with fixed entry order and zeroed header
//! metadata, so the same weights always produce the same bytes:
//!
//! - `meta.json`: [`CheckpointMeta`]
//! - `arch.json`: [`ArchConfig`]
//! - `classifier.bin`: little-endian `f32` parameters in `Classifier::params` order
//! - `domain_head.bin` (optional): domain-head parameters, then the batch-norm
//!   running mean and variance

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, Classifier, DomainHead};
use crate::error::{Error, Result};
use crate::syndata::hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Content digest of architecture, weights and provenance.
    pub id: String,
    pub config_hash: String,
    pub parent: Option<String>,
    pub recipe: String,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub classifier: Classifier,
    pub domain_head: Option<DomainHead>,
    pub meta: CheckpointMeta,
}

fn floats_to_bytes<'a>(chunks: impl IntoIterator<Item = &'a [f32]>) -> Vec<u8> {
    chunks
        .into_iter()
        .flat_map(|c| c.iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

fn domain_bytes(head: &DomainHead) -> Vec<u8> {
    let mut chunks = head.params();
    chunks.push(&head.norm.running_mean);
    chunks.push(&head.norm.running_var);
    floats_to_bytes(chunks)
}

impl ModelCheckpoint {
    pub fn new(
        classifier: Classifier,
        domain_head: Option<DomainHead>,
        config_hash: String,
        parent: Option<String>,
        recipe: impl Into<String>,
        epochs: usize,
        seed: u64,
    ) -> Self {
        let mut ckpt = Self {
            classifier,
            domain_head,
            meta: CheckpointMeta {
                id: String::new(),
                config_hash,
                parent,
                recipe: recipe.into(),
                epochs,
                seed,
            },
        };
        ckpt.meta.id = ckpt.content_id();
        ckpt
    }

    fn content_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.classifier.arch).expect("arch serializes"));
        h.update(floats_to_bytes(self.classifier.params()));
        if let Some(d) = &self.domain_head {
            h.update(domain_bytes(d));
        }
        let m = &self.meta;
        h.update(format!(
            "{}|{:?}|{}|{}|{}",
            m.config_hash, m.parent, m.recipe, m.epochs, m.seed
        ));
        hex(&h.finalize()[..8])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut builder = tar::Builder::new(Vec::new());
        let mut add = |name: &str, data: &[u8]| -> Result<()> {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_uid(0);
            header.set_gid(0);
            header.set_cksum();
            builder.append_data(&mut header, name, data)?;
            Ok(())
        };
        add("meta.json", &serde_json::to_vec_pretty(&self.meta)?)?;
        add("arch.json", &serde_json::to_vec_pretty(&self.classifier.arch)?)?;
        add("classifier.bin", &floats_to_bytes(self.classifier.params()))?;
        if let Some(d) = &self.domain_head {
            add("domain_head.bin", &domain_bytes(d))?;
        }
        Ok(builder.into_inner()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut archive = tar::Archive::new(bytes);
        let mut meta = None;
        let mut arch = None;
        let mut classifier_bin = None;
        let mut domain_bin = None;
        for entry in archive.entries()? {
            let mut entry = entry?;
            let name = entry.path()?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data)?;
            match name.as_str() {
                "meta.json" => meta = Some(serde_json::from_slice::<CheckpointMeta>(&data)?),
                "arch.json" => arch = Some(serde_json::from_slice::<ArchConfig>(&data)?),
                "classifier.bin" => classifier_bin = Some(data),
                "domain_head.bin" => domain_bin = Some(data),
                other => {
                    return Err(Error::InvalidInput(format!("unexpected checkpoint entry {other}")))
                }
            }
        }
        let missing = |what: &str| Error::InvalidInput(format!("checkpoint lacks {what}"));
        let meta = meta.ok_or_else(|| missing("meta.json"))?;
        let arch = arch.ok_or_else(|| missing("arch.json"))?;
        let mut classifier = Classifier::new(arch.clone(), 0)?;
        fill(classifier.params_mut(), &classifier_bin.ok_or_else(|| missing("classifier.bin"))?)?;
        let domain_head = match domain_bin {
            None => None,
            Some(bytes) => {
                let mut head = DomainHead::new(arch.feature_dim(), arch.domain_hidden, 0);
                let mut slots = Vec::new();
                let DomainHead { hidden, norm, out } = &mut head;
                slots.push(&mut hidden.weight[..]);
                slots.push(&mut hidden.bias[..]);
                slots.push(&mut norm.gamma[..]);
                slots.push(&mut norm.beta[..]);
                slots.push(&mut out.weight[..]);
                slots.push(&mut out.bias[..]);
                slots.push(&mut norm.running_mean[..]);
                slots.push(&mut norm.running_var[..]);
                fill(slots, &bytes)?;
                Some(head)
            }
        };
        Ok(Self {
            classifier,
            domain_head,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn fill(slots: Vec<&mut [f32]>, bytes: &[u8]) -> Result<()> {
    let expected: usize = slots.iter().map(|s| s.len() * 4).sum();
    if expected != bytes.len() {
        return Err(Error::InvalidInput(format!(
            "weight blob has {} bytes, architecture needs {expected}",
            bytes.len()
        )));
    }
    let mut floats = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for slot in slots {
        for v in slot.iter_mut() {
            *v = floats.next().expect("length checked");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Image;

    fn checkpoint(with_head: bool) -> ModelCheckpoint {
        let arch = ArchConfig::default();
        let classifier = Classifier::new(arch.clone(), 11).unwrap();
        let head = with_head.then(|| {
            let mut h = DomainHead::new(arch.feature_dim(), arch.domain_hidden, 12);
            h.norm.running_mean[3] = 0.25;
            h
        });
        ModelCheckpoint::new(classifier, head, "abc".into(), Some("parent".into()), "dann", 3, 5)
    }

    #[test]
    fn byte_stable_round_trip() {
        for with_head in [false, true] {
            let ckpt = checkpoint(with_head);
            let bytes = ckpt.to_bytes().unwrap();
            let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn reloaded_model_reproduces_outputs() {
        let ckpt = checkpoint(false);
        let back = ModelCheckpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        let img = Image::filled(32, 32, 1, 0.4);
        assert_eq!(
            ckpt.classifier.forward(&[&img]).unwrap(),
            back.classifier.forward(&[&img]).unwrap()
        );
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let ckpt = checkpoint(false);
        let mut builder = tar::Builder::new(Vec::new());
        let meta = serde_json::to_vec(&ckpt.meta).unwrap();
        let arch = serde_json::to_vec(&ckpt.classifier.arch).unwrap();
        for (name, data) in [("meta.json", &meta[..]), ("arch.json", &arch[..]), ("classifier.bin", &[0u8; 8][..])] {
            let mut h = tar::Header::new_gnu();
            h.set_size(data.len() as u64);
            h.set_cksum();
            builder.append_data(&mut h, name, data).unwrap();
        }
        let bytes = builder.into_inner().unwrap();
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes), Err(Error::InvalidInput(_))));
    }
}
