//! Flat binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "PRUNEPOL"
//! version    u32       1
//! input      3 × u32   height, width, channels
//! n_convs    u32
//! convs      n_convs × (filters u32, kernel u32, stride u32)
//! hidden     u32
//! n_params   u64
//! params     n_params × f32
//! ```

use std::fs;
use std::path::Path;

use super::net::{ConvSpec, NetSpec, PolicyNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PRUNEPOL";
pub const VERSION: u32 = 1;

pub fn to_bytes(net: &PolicyNet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + net.params.len() * 4);
    out.extend_from_slice(MAGIC);
    let mut u32le = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32le(VERSION as usize);
    for d in net.spec.input {
        u32le(d);
    }
    u32le(net.spec.convs.len());
    for c in &net.spec.convs {
        u32le(c.filters);
        u32le(c.kernel);
        u32le(c.stride);
    }
    u32le(net.spec.hidden);
    out.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
    for p in &net.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<PolicyNet<f32>> {
    let fail = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(fail("bad magic"));
    }
    let version = r.u32().ok_or_else(|| fail("truncated header"))?;
    if version != VERSION as usize {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let mut header = || r.u32().ok_or_else(|| fail("truncated header"));
    let input = [header()?, header()?, header()?];
    let n_convs = header()?;
    if n_convs > 64 {
        return Err(fail("implausible layer count"));
    }
    let mut convs = Vec::with_capacity(n_convs);
    for _ in 0..n_convs {
        convs.push(ConvSpec {
            filters: header()?,
            kernel: header()?,
            stride: header()?,
        });
    }
    let hidden = header()?;
    let n = r
        .take(8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| fail("truncated header"))?;
    let body_len = n.checked_mul(4).ok_or_else(|| fail("bad size"))?;
    if r.pos + body_len != bytes.len() {
        return Err(fail("parameter block size does not match the file"));
    }
    let body = r.take(body_len).ok_or_else(|| fail("truncated parameters"))?;
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let spec = NetSpec { input, convs, hidden };
    PolicyNet::from_params(spec, params).map_err(|e| fail(&e.to_string()))
}

pub fn save_checkpoint(net: &PolicyNet<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyNet<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let net = PolicyNet::<f32>::init(NetSpec::nature(40, 80), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_checkpoint(&net, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), net);
    }

    #[test]
    fn corrupt_files_rejected() {
        let net = PolicyNet::<f32>::init(NetSpec::reduced(), 5).unwrap();
        let p = Path::new("x");
        let mut bytes = to_bytes(&net);
        assert!(from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        bytes[0] = b'Q';
        assert!(matches!(from_bytes(&bytes, p), Err(Error::Checkpoint { .. })));
        assert!(matches!(load_checkpoint(Path::new("/nonexistent/ckpt")), Err(Error::Io { .. })));
    }
}
