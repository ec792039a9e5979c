//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! | field             | encoding                                              |
//! |-------------------|-------------------------------------------------------|
//! | `magic`           | 8 bytes `CTRLXCKP`                                    |
//! | `version`         | u32, currently 1                                      |
//! | `config`          | u32 length + UTF-8 JSON of the model configuration    |
//! | `manifest`        | u32 count, then per entry: u16 name length, name,     |
//! |                   | u8 rank, u32 per dimension, u64 offset, u64 length    |
//! | `header_checksum` | SHA-256 of the `config` and `manifest` bytes          |
//! | `step`            | u64 training-step counter                             |
//! | `rng_digest`      | u64 digest of the training stream position            |
//! | `payload`         | u64 float count + f32 values                          |
//! | `payload_checksum`| SHA-256 of the `payload` bytes                        |
//!
//! Manifest offsets count floats and must tile the payload exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::nn::ParamEntry;

pub const MAGIC: &[u8; 8] = b"CTRLXCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub manifest: Vec<ParamEntry>,
    pub step: u64,
    pub rng_digest: u64,
    pub params: Vec<f32>,
}

fn ck_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(Sha256::digest(bytes).as_slice());
    out
}

impl Checkpoint {
    pub fn from_model(model: &DenoiserModel, step: u64, rng_digest: u64) -> Self {
        Self {
            config: model.config().clone(),
            manifest: model.params().entries().to_vec(),
            step,
            rng_digest,
            params: model.params().data().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serialises");
        let mut header = Vec::new();
        header.extend_from_slice(&(config.len() as u32).to_le_bytes());
        header.extend_from_slice(&config);
        header.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for e in &self.manifest {
            header.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            header.extend_from_slice(e.name.as_bytes());
            header.push(e.shape.len() as u8);
            for &d in &e.shape {
                header.extend_from_slice(&(d as u32).to_le_bytes());
            }
            header.extend_from_slice(&(e.offset as u64).to_le_bytes());
            header.extend_from_slice(&(e.len() as u64).to_le_bytes());
        }
        let mut payload = Vec::with_capacity(8 + self.params.len() * 4);
        payload.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            payload.extend_from_slice(&v.to_le_bytes());
        }

        let mut out = Vec::with_capacity(header.len() + payload.len() + 100);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&sha256(&header));
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_digest.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&sha256(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(ck_err("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ck_err("version", format!("unsupported version {version}, expected {VERSION}")));
        }
        let header_start = r.pos;
        let config_len = r.u32("config")? as usize;
        let config_bytes = r.take(config_len, "config")?;
        let mut manifest = Vec::new();
        let count = r.u32("manifest")? as usize;
        for _ in 0..count {
            let name_len = r.u16("manifest")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "manifest")?)
                .map_err(|_| ck_err("manifest", "parameter name is not UTF-8"))?
                .to_owned();
            let rank = r.take(1, "manifest")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("manifest")? as usize);
            }
            let offset = r.u64("manifest")? as usize;
            let len = r.u64("manifest")? as usize;
            let entry = ParamEntry { name, shape, offset };
            if entry.len() != len {
                return Err(ck_err(
                    "manifest",
                    format!("entry `{}` length {len} disagrees with its shape", entry.name),
                ));
            }
            manifest.push(entry);
        }
        let header_end = r.pos;
        let stored = r.take(32, "header_checksum")?;
        if stored != sha256(&bytes[header_start..header_end]) {
            return Err(ck_err("header_checksum", "config or manifest bytes are corrupt"));
        }
        let config: DenoiserConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| ck_err("config", e.to_string()))?;
        let step = r.u64("step")?;
        let rng_digest = r.u64("rng_digest")?;
        let payload_start = r.pos;
        let n = r.u64("payload")? as usize;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| ck_err("payload", "length overflow"))?, "payload")?;
        let payload_end = r.pos;
        let stored = r.take(32, "payload_checksum")?;
        if stored != sha256(&bytes[payload_start..payload_end]) {
            return Err(ck_err("payload_checksum", "parameter bytes are corrupt"));
        }
        if r.pos != bytes.len() {
            return Err(ck_err("payload_checksum", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        check_tiling(&manifest, n)?;
        Ok(Self {
            config,
            manifest,
            step,
            rng_digest,
            params,
        })
    }

    /// Materialises the model, requiring its layout to match the checkpoint.
    pub fn into_model(self) -> Result<DenoiserModel> {
        let mut model = DenoiserModel::uninit(self.config)?;
        let want = model.params().entries();
        if want.len() != self.manifest.len() {
            return Err(ck_err(
                "manifest",
                format!("{} entries, model expects {}", self.manifest.len(), want.len()),
            ));
        }
        for (got, exp) in self.manifest.iter().zip(want) {
            if got != exp {
                return Err(ck_err(
                    "manifest",
                    format!("entry `{}` {:?}@{} does not match model `{}` {:?}@{}",
                        got.name, got.shape, got.offset, exp.name, exp.shape, exp.offset),
                ));
            }
        }
        model.params_mut().data_mut().copy_from_slice(&self.params);
        Ok(model)
    }

    /// Like [`Checkpoint::into_model`], but first requires the stored
    /// configuration to equal `expected`, naming the first differing field.
    pub fn into_model_checked(self, expected: &DenoiserConfig) -> Result<DenoiserModel> {
        if let Some(field) = config_mismatch(&self.config, expected) {
            return Err(ck_err("config", field));
        }
        self.into_model()
    }
}

/// Describes the first field where `got` and `want` differ.
pub fn config_mismatch(got: &DenoiserConfig, want: &DenoiserConfig) -> Option<String> {
    let g = serde_json::to_value(got).expect("config serialises");
    let w = serde_json::to_value(want).expect("config serialises");
    let (g, w) = (g.as_object()?, w.as_object()?);
    w.iter().find_map(|(k, wv)| {
        let gv = g.get(k)?;
        (gv != wv).then(|| format!("mismatched dimension `{k}`: checkpoint has {gv}, expected {wv}"))
    })
}

fn check_tiling(manifest: &[ParamEntry], total: usize) -> Result<()> {
    let mut spans: Vec<(usize, usize, &str)> =
        manifest.iter().map(|e| (e.offset, e.len(), e.name.as_str())).collect();
    spans.sort();
    let mut cursor = 0;
    for (off, len, name) in spans {
        if off != cursor {
            return Err(ck_err(
                "manifest",
                format!("entry `{name}` at offset {off}, expected {cursor} (gap or overlap)"),
            ));
        }
        cursor += len;
    }
    if cursor != total {
        return Err(ck_err("manifest", format!("entries cover {cursor} floats, payload has {total}")));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(ck_err(
                field,
                format!("truncated at byte {}: need {n} more bytes, {} remain", self.pos, self.bytes.len() - self.pos),
            ));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> Checkpoint {
        let model = DenoiserModel::new(DenoiserConfig::micro(), 5).unwrap();
        Checkpoint::from_model(&model, 17, 0xdead_beef)
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = micro().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, micro());
        assert_eq!(back.to_bytes(), bytes);
        let model = back.into_model().unwrap();
        assert_eq!(Checkpoint::from_model(&model, 17, 0xdead_beef).to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = micro().to_bytes();
        for cut in [0, 4, 8, 11, 40, bytes.len() / 2, bytes.len() - 33, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { reason, .. }) => assert!(reason.contains("truncated"), "{reason}"),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn truncation_names_the_field() {
        let bytes = micro().to_bytes();
        let field = |cut: usize| match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Checkpoint { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(3), "magic");
        assert_eq!(field(10), "version");
        assert_eq!(field(bytes.len() - 10), "payload_checksum");
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = micro().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { field, .. }) if field == "magic"));

        let mut bytes = micro().to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { field, .. }) if field == "version"));

        let mut bytes = micro().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { field, .. }) if field == "header_checksum"));

        let mut bytes = micro().to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { field, .. }) if field == "payload_checksum"));
    }

    #[test]
    fn mismatched_config_names_the_dimension() {
        let mut want = DenoiserConfig::micro();
        want.base_width = 16;
        match micro().into_model_checked(&want) {
            Err(Error::Checkpoint { field, reason }) => {
                assert_eq!(field, "config");
                assert!(reason.contains("base_width"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        assert!(micro().into_model_checked(&DenoiserConfig::micro()).is_ok());
    }

    #[test]
    fn overlapping_manifest_is_rejected() {
        let mut ck = micro();
        ck.manifest[1].offset -= 1;
        match Checkpoint::from_bytes(&ck.to_bytes()) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "manifest"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&micro(), &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), micro());
    }
}
