//! Binary checkpoint with a JSON sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CSDSNET\0"
//! version      u32
//! fingerprint  u64
//! count        u32
//! per tensor:  name_len u32, name (utf-8), ndim u32, dims u32 × ndim, f32 × numel
//! ```
//!
//! The sidecar `<file>.json` holds the [`SegNetConfig`]. Both files are
//! written to a temporary name first and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{ModelState, SegNetConfig};
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSDSNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_owned();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, state: &ModelState<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(state.param_count() * 4 + 1024);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&state.fingerprint().to_le_bytes());
    buf.extend_from_slice(&(state.names().len() as u32).to_le_bytes());
    for (name, t) in state.names().iter().zip(state.params()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec_pretty(state.config()).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&sidecar(path), &json)?;
    write_atomic(path, &buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    let side = sidecar(path);
    let json = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let config: SegNetConfig = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let fingerprint = r.u64()?;
    if fingerprint != config.fingerprint() {
        return Err(Error::Incompatible(format!(
            "checkpoint fingerprint {fingerprint:016x} does not match its config ({:016x})",
            config.fingerprint()
        )));
    }
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        names.push(name);
        params.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    ModelState::from_parts(config, names, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::init;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let cfg = SegNetConfig { base_width: 4, depth: 2, seed: 9, ..Default::default() };
        let s = init(&cfg).unwrap();
        save_checkpoint(&path, &s).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.content_hash(), s.content_hash());
        assert_eq!(back.config(), s.config());
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 2);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let s = init(&SegNetConfig { base_width: 4, depth: 1, ..Default::default() }).unwrap();
        save_checkpoint(&path, &s).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_sidecar_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let s = init(&SegNetConfig { base_width: 4, depth: 1, ..Default::default() }).unwrap();
        save_checkpoint(&path, &s).unwrap();
        let other = SegNetConfig { base_width: 8, depth: 1, ..Default::default() };
        fs::write(sidecar(&path), serde_json::to_vec(&other).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Incompatible(_))));
    }
}
