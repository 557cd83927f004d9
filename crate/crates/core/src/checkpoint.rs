//! Versioned checkpoint container.
//!
//! Layout: `NFCK` magic, little-endian `u32` format version, `u64` header length, a JSON
//! header, then the safetensors sections it lists. Every section carries a SHA-256 digest,
//! so truncation or corruption is detected before any parameter is touched.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autoencoder::{Autoencoder, AutoencoderDescriptor};
use crate::error::{Error, Result};
use crate::fusion::{FusionNet, FusionNetDescriptor};
use crate::nn::ParamStore;
use crate::seghead::{SegHead, SegHeadDescriptor};
use crate::stream::{Denoiser, DenoiserDescriptor, StreamRole};

const MAGIC: &[u8; 4] = b"NFCK";
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Autoencoder,
    Psi,
    Phi,
    Fusion,
}

impl Stage {
    pub fn for_role(role: StreamRole) -> Self {
        match role {
            StreamRole::Restoration => Stage::Psi,
            StreamRole::Translation => Stage::Phi,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Autoencoder => "autoencoder",
            Stage::Psi => "psi",
            Stage::Phi => "phi",
            Stage::Fusion => "fusion",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub stage: Stage,
    /// Architecture descriptors, one per section.
    pub descriptors: Value,
    /// Snapshot of the configuration that produced the checkpoint.
    pub config: Value,
    pub step: u64,
    pub sections: Vec<SectionInfo>,
}

/// A decoded checkpoint: the header plus the raw safetensors bytes of each section.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub sections: Vec<(String, Vec<u8>)>,
}

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn descriptor<T: for<'de> Deserialize<'de>>(&self, name: &str, path: &Path) -> Result<T> {
        let v = self.header.descriptors.get(name).ok_or_else(|| fail(path, format!("no descriptor for {name}")))?;
        serde_json::from_value(v.clone()).map_err(|e| fail(path, format!("bad descriptor for {name}: {e}")))
    }
}

/// Writes atomically (temporary file then rename).
pub fn save_checkpoint(
    path: &Path,
    stage: Stage,
    descriptors: Value,
    config: Value,
    step: u64,
    stores: &[(&str, &ParamStore)],
) -> Result<()> {
    let mut sections = Vec::with_capacity(stores.len());
    let mut payload = Vec::new();
    for (name, store) in stores {
        let bytes = store.to_safetensors()?;
        sections.push(SectionInfo { name: name.to_string(), len: bytes.len() as u64, sha256: digest(&bytes) });
        payload.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader { format: CHECKPOINT_FORMAT, stage, descriptors, config, step, sections };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads and verifies a checkpoint of the expected stage.
pub fn load_checkpoint(path: &Path, expected: Stage) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail(path, "not a checkpoint file"));
    }
    let format = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if format != CHECKPOINT_FORMAT {
        return Err(fail(path, format!("format version {format}, expected {CHECKPOINT_FORMAT}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| fail(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| fail(path, format!("unreadable header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(fail(path, "header format disagrees with the file prefix"));
    }
    if header.stage != expected {
        return Err(fail(path, format!("stage {} found, {expected} expected", header.stage)));
    }
    let total: u64 = header.sections.iter().map(|s| s.len).sum();
    if (bytes.len() - header_end) as u64 != total {
        return Err(fail(path, format!("payload is {} bytes, header declares {total}", bytes.len() - header_end)));
    }
    let mut offset = header_end;
    let mut sections = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        let end = offset + s.len as usize;
        let chunk = &bytes[offset..end];
        if digest(chunk) != s.sha256 {
            return Err(fail(path, format!("section {} fails its checksum", s.name)));
        }
        sections.push((s.name.clone(), chunk.to_vec()));
        offset = end;
    }
    Ok(Checkpoint { header, sections })
}

fn load_section(ck: &Checkpoint, name: &str, store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = ck.section(name).ok_or_else(|| fail(path, format!("missing section {name}")))?;
    store.load_safetensors(bytes).map_err(|e| fail(path, format!("section {name}: {e}")))
}

pub fn save_autoencoder(path: &Path, ae: &Autoencoder, config: Value, step: u64) -> Result<()> {
    let desc = serde_json::json!({ "autoencoder": ae.descriptor() });
    save_checkpoint(path, Stage::Autoencoder, desc, config, step, &[("autoencoder", ae.params())])
}

pub fn load_autoencoder(path: &Path) -> Result<(Autoencoder, CheckpointHeader)> {
    let ck = load_checkpoint(path, Stage::Autoencoder)?;
    let desc: AutoencoderDescriptor = ck.descriptor("autoencoder", path)?;
    let ae = Autoencoder::new(desc, 0)?;
    load_section(&ck, "autoencoder", ae.params(), path)?;
    Ok((ae, ck.header))
}

pub fn save_denoiser(path: &Path, d: &Denoiser, config: Value, step: u64) -> Result<()> {
    let desc = serde_json::json!({ "denoiser": d.descriptor() });
    save_checkpoint(path, Stage::for_role(d.role()), desc, config, step, &[("denoiser", d.params())])
}

pub fn load_denoiser(path: &Path, role: StreamRole) -> Result<(Denoiser, CheckpointHeader)> {
    let ck = load_checkpoint(path, Stage::for_role(role))?;
    let desc: DenoiserDescriptor = ck.descriptor("denoiser", path)?;
    if desc.role != role {
        return Err(fail(path, "descriptor role disagrees with the stage tag"));
    }
    let d = Denoiser::new(desc, 0)?;
    load_section(&ck, "denoiser", d.params(), path)?;
    Ok((d, ck.header))
}

pub fn save_fusion(path: &Path, f: &FusionNet, s: &SegHead, config: Value, step: u64) -> Result<()> {
    let desc = serde_json::json!({ "fusion": f.descriptor(), "seg": s.descriptor() });
    save_checkpoint(path, Stage::Fusion, desc, config, step, &[("fusion", f.params()), ("seg", s.params())])
}

pub fn load_fusion(path: &Path) -> Result<(FusionNet, SegHead, CheckpointHeader)> {
    let ck = load_checkpoint(path, Stage::Fusion)?;
    let fd: FusionNetDescriptor = ck.descriptor("fusion", path)?;
    let sd: SegHeadDescriptor = ck.descriptor("seg", path)?;
    let f = FusionNet::new(fd, 0)?;
    let s = SegHead::new(sd, 0)?;
    load_section(&ck, "fusion", f.params(), path)?;
    load_section(&ck, "seg", s.params(), path)?;
    Ok((f, s, ck.header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.ckpt");
        let ae = Autoencoder::new(AutoencoderDescriptor::default(), 3).unwrap();
        save_autoencoder(&path, &ae, serde_json::json!({"lr": 1}), 7).unwrap();
        let (back, header) = load_autoencoder(&path).unwrap();
        assert_eq!(back.params().checksum().unwrap(), ae.params().checksum().unwrap());
        assert_eq!(header.step, 7);

        assert!(matches!(load_checkpoint(&path, Stage::Psi), Err(Error::Checkpoint { .. })));

        let bytes = fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_autoencoder(&cut).is_err());

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0xff;
        fs::write(&cut, &flipped).unwrap();
        assert!(load_autoencoder(&cut).is_err());

        let mut old = bytes;
        old[4] = 9;
        fs::write(&cut, &old).unwrap();
        let err = load_autoencoder(&cut).unwrap_err().to_string();
        assert!(err.contains("format version"), "{err}");
    }
}
