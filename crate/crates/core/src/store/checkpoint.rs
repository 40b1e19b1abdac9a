//! Binary checkpoint format.
//!
//! ```text
//! "MIMFORG1" | header length (u32 LE) | JSON header | f32 LE payload
//! ```
//!
//! The header holds the kind tag, the model config, the seed and step, and a
//! tensor directory with byte offsets relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneWeights, Head};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::tokenizer::{TokenizerConfig, TokenizerWeights};

pub const MAGIC: &[u8; 8] = b"MIMFORG1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointKind {
    #[serde(rename = "tokenizer")]
    Tokenizer,
    #[serde(rename = "backbone-mim")]
    BackboneMim,
    #[serde(rename = "backbone-pixel")]
    BackbonePixel,
    #[serde(rename = "backbone-classify")]
    BackboneClassify,
    #[serde(rename = "backbone-segment")]
    BackboneSegment,
    /// Backbone with no head attached.
    #[serde(rename = "backbone")]
    Backbone,
}

impl CheckpointKind {
    fn for_head(head: Option<Head>) -> Self {
        match head {
            Some(Head::Mim) => CheckpointKind::BackboneMim,
            Some(Head::Pixel) => CheckpointKind::BackbonePixel,
            Some(Head::Cls) => CheckpointKind::BackboneClassify,
            Some(Head::Seg) => CheckpointKind::BackboneSegment,
            None => CheckpointKind::Backbone,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Tokenizer => "tokenizer",
            CheckpointKind::BackboneMim => "backbone-mim",
            CheckpointKind::BackbonePixel => "backbone-pixel",
            CheckpointKind::BackboneClassify => "backbone-classify",
            CheckpointKind::BackboneSegment => "backbone-segment",
            CheckpointKind::Backbone => "backbone",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub tensors: ParamSet,
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: CheckpointKind,
    config: serde_json::Value,
    seed: u64,
    step: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    bytes: u64,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

impl Checkpoint {
    pub fn from_backbone(w: &BackboneWeights, seed: u64, step: u64) -> Self {
        Checkpoint {
            kind: CheckpointKind::for_head(w.head().map(|h| h.0)),
            config: serde_json::to_value(&w.config).expect("config serializes"),
            tensors: w.params.clone(),
            seed,
            step,
        }
    }

    pub fn from_tokenizer(w: &TokenizerWeights, seed: u64, step: u64) -> Self {
        Checkpoint {
            kind: CheckpointKind::Tokenizer,
            config: serde_json::to_value(&w.config).expect("config serializes"),
            tensors: w.params.clone(),
            seed,
            step,
        }
    }

    fn check_against(&self, template: &ParamSet) -> Result<()> {
        for (name, t) in template.iter() {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(have) if have.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for `{name}`: file has {:?}, config implies {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.names().iter().find(|n| !template.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn into_backbone(self) -> Result<BackboneWeights> {
        if self.kind == CheckpointKind::Tokenizer {
            return Err(Error::Checkpoint("expected a backbone checkpoint, found a tokenizer".into()));
        }
        let config: BackboneConfig = serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("backbone config: {e}")))?;
        let mut template = BackboneWeights::init(&config, 0)?;
        let head = [Head::Mim, Head::Pixel, Head::Cls, Head::Seg]
            .into_iter()
            .find_map(|h| self.tensors.get(&format!("{}.bias", h.prefix())).map(|b| (h, b.numel())));
        if let Some((h, out)) = head {
            template.attach_head(h, out);
        }
        if CheckpointKind::for_head(head.map(|h| h.0)) != self.kind {
            return Err(Error::Checkpoint(format!("kind `{}` does not match the stored head", self.kind.name())));
        }
        self.check_against(&template.params)?;
        let mut params = ParamSet::new();
        for name in template.params.names() {
            params.insert(name.clone(), self.tensors.require(name)?.clone());
        }
        Ok(BackboneWeights { config, params })
    }

    pub fn into_tokenizer(self) -> Result<TokenizerWeights> {
        if self.kind != CheckpointKind::Tokenizer {
            return Err(Error::Checkpoint(format!(
                "expected a tokenizer checkpoint, found `{}`",
                self.kind.name()
            )));
        }
        let config: TokenizerConfig = serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("tokenizer config: {e}")))?;
        let template = TokenizerWeights::init(&config, 0)?;
        self.check_against(&template.params)?;
        Ok(TokenizerWeights {
            config,
            params: self.tensors,
        })
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut entries = Vec::with_capacity(c.tensors.len());
    let mut offset = 0u64;
    for (name, t) in c.tensors.iter() {
        let bytes = 4 * t.numel() as u64;
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    let header = serde_json::to_vec(&Header {
        kind: c.kind,
        config: c.config.clone(),
        seed: c.seed,
        step: c.step,
        tensors: entries,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in c.tensors.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "bad magic (not a checkpoint file)"));
    }
    if bytes.len() < 12 {
        return Err(corrupt(path, "truncated header length"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(corrupt(path, format!("truncated header: need {hlen} bytes, have {}", body.len())));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(path, format!("malformed header: {e}")))?;
    let payload = &body[hlen..];
    let mut tensors = ParamSet::new();
    let mut expected = 0u64;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(corrupt(path, format!("tensor `{}` has unsupported dtype `{}`", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.bytes != 4 * numel as u64 {
            return Err(corrupt(
                path,
                format!("shape mismatch for `{}`: shape {:?} needs {} bytes, directory says {}", e.name, e.shape, 4 * numel, e.bytes),
            ));
        }
        if e.offset != expected {
            return Err(corrupt(path, format!("tensor `{}` offset {} is not contiguous (expected {expected})", e.name, e.offset)));
        }
        let end = (e.offset + e.bytes) as usize;
        if end > payload.len() {
            return Err(corrupt(
                path,
                format!("truncated payload: tensor `{}` ends at byte {end}, payload has {}", e.name, payload.len()),
            ));
        }
        let data = payload[e.offset as usize..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if tensors.contains(&e.name) {
            return Err(corrupt(path, format!("duplicate tensor `{}`", e.name)));
        }
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        expected += e.bytes;
    }
    if payload.len() as u64 != expected {
        return Err(corrupt(path, format!("{} trailing bytes after the last tensor", payload.len() as u64 - expected)));
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        tensors,
        seed: header.seed,
        step: header.step,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(c)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn save_backbone(w: &BackboneWeights, seed: u64, step: u64, path: &Path) -> Result<()> {
    save_checkpoint(&Checkpoint::from_backbone(w, seed, step), path)
}

pub fn load_backbone(path: &Path) -> Result<BackboneWeights> {
    load_checkpoint(path)?.into_backbone()
}

pub fn save_tokenizer(w: &TokenizerWeights, seed: u64, step: u64, path: &Path) -> Result<()> {
    save_checkpoint(&Checkpoint::from_tokenizer(w, seed, step), path)
}

pub fn load_tokenizer(path: &Path) -> Result<TokenizerWeights> {
    load_checkpoint(path)?.into_tokenizer()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneWeights {
        let cfg = BackboneConfig {
            image_size: 8,
            patch: 4,
            layers: 1,
            dim: 8,
            heads: 2,
            mlp_dim: 16,
            ..Default::default()
        };
        let mut w = BackboneWeights::init(&cfg, 3).unwrap();
        w.attach_head(Head::Cls, 5);
        w
    }

    #[test]
    fn header_length_field() {
        let bytes = encode_checkpoint(&Checkpoint::from_backbone(&small(), 1, 2));
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header["kind"], "backbone-classify");
        let payload = bytes.len() - 12 - hlen;
        assert_eq!(payload, 4 * small().params.num_scalars());
    }

    #[test]
    fn empty_table() {
        let c = Checkpoint {
            kind: CheckpointKind::Backbone,
            config: serde_json::json!({}),
            tensors: ParamSet::new(),
            seed: 0,
            step: 0,
        };
        let bytes = encode_checkpoint(&c);
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + hlen);
        assert_eq!(decode_checkpoint(&bytes, Path::new("x")).unwrap(), c);
    }

    #[test]
    fn roundtrip_bits_and_weights() {
        let mut w = small();
        w.params.get_mut("embed.cls").unwrap().data_mut()[0] = f32::from_bits(0x0000_0001);
        let c = Checkpoint::from_backbone(&w, 9, 11);
        let back = decode_checkpoint(&encode_checkpoint(&c), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back), encode_checkpoint(&c));
        assert_eq!(back.into_backbone().unwrap(), w);
    }

    #[test]
    fn diagnostics() {
        let p = Path::new("ck.bin");
        let bytes = encode_checkpoint(&Checkpoint::from_backbone(&small(), 0, 0));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, p).unwrap_err().to_string().contains("bad magic"));
        let err = decode_checkpoint(&bytes[..bytes.len() - 1], p).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
        assert!(err.contains("ck.bin"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long, p).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn shape_mismatch_against_config() {
        let w = small();
        let mut c = Checkpoint::from_backbone(&w, 0, 0);
        c.tensors.insert("embed.pos", Tensor::zeros([3, 8]));
        let err = c.into_backbone().unwrap_err().to_string();
        assert!(err.contains("shape mismatch") && err.contains("embed.pos"), "{err}");

        let mut c = Checkpoint::from_backbone(&w, 0, 0);
        c.config["dim"] = serde_json::json!(16);
        assert!(c.into_backbone().unwrap_err().to_string().contains("shape mismatch"));
    }

    #[test]
    fn tokenizer_roundtrip() {
        let cfg = TokenizerConfig {
            image_size: 8,
            patch: 4,
            vocab: 4,
            hidden: 2,
            width: 3,
            code_dim: 2,
            ..Default::default()
        };
        let t = TokenizerWeights::init(&cfg, 0).unwrap();
        let c = Checkpoint::from_tokenizer(&t, 0, 5);
        let back = decode_checkpoint(&encode_checkpoint(&c), Path::new("x")).unwrap();
        assert_eq!(back.clone().into_tokenizer().unwrap(), t);
        assert!(back.into_backbone().is_err());
    }
}
