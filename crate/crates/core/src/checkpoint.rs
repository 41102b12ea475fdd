//! Binary checkpoint format.
//!
//! Layout: magic `GRMF`, version u16, tensor count u32, then per tensor
//! {name length u16, name UTF-8, rank u8, one u32 per dim, payload as
//! little-endian f64}. All integers little-endian. Round-trips are
//! byte-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

const MAGIC: &[u8; 4] = b"GRMF";
const VERSION: u16 = 1;

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.dims().len() as u8);
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("unexpected end of file {context}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, context: &str) -> Result<u16> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a checkpoint into an existing store built from the same config.
/// Every tensor must match an existing parameter by name and shape, and
/// every parameter must be present.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4, "in header")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.u16("in header")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("in header")? as usize;
    let mut seen = std::collections::BTreeSet::new();
    for t in 0..count {
        let name_len = r.u16(&format!("in tensor {t} header"))? as usize;
        let name_bytes = r.take(name_len, &format!("in tensor {t} name"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("tensor {t} name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, &format!("at tensor {name}"))?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("at tensor {name}"))? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(8 * n, &format!("at tensor {name}"))?;
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor name {name:?}")))?;
        if store.get(id).dims() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for tensor {name:?}: checkpoint {:?} vs model {:?}",
                dims,
                store.get(id).dims()
            )));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        let dst = store.get_mut(id).data_mut();
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            dst[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    for (_, name, _) in store.iter() {
        if !seen.contains(name) {
            return Err(Error::Checkpoint(format!("missing tensor {name:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GramformerModel, ModelConfig, Variant};

    fn small(variant: Variant, heads: usize) -> GramformerModel {
        let cfg = ModelConfig {
            channels: 8,
            heads,
            layers: 1,
            patch: 4,
            m: 4,
            variant,
            ..ModelConfig::default()
        };
        GramformerModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        let src = small(Variant::Gramformer, 2);
        save_checkpoint(&path, &src.params).unwrap();
        let mut dst = small(Variant::Gramformer, 2);
        // overwrite with different values first
        for (id, _, _) in src.params.iter() {
            for v in dst.params.get_mut(id).data_mut() {
                *v += 1.0;
            }
        }
        load_checkpoint(&path, &mut dst.params).unwrap();
        for (id, name, t) in src.params.iter() {
            let loaded = dst.params.get(id);
            assert_eq!(t.dims(), loaded.dims(), "{name}");
            assert!(
                t.data().iter().zip(loaded.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name}"
            );
        }
        // and saving the loaded store reproduces the file byte for byte
        let path2 = tmp.path().join("m2.ckpt");
        save_checkpoint(&path2, &dst.params).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        let mut m = small(Variant::Vanilla, 2);
        let err = load_checkpoint(&path, &mut m.params).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "got: {err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("v9.ckpt");
        let mut bytes = b"GRMF".to_vec();
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let mut m = small(Variant::Vanilla, 2);
        let err = load_checkpoint(&path, &mut m.params).unwrap_err().to_string();
        assert!(err.contains("unsupported version 9"), "got: {err}");
    }

    #[test]
    fn truncated_file_names_the_tensor() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        let src = small(Variant::Vanilla, 2);
        save_checkpoint(&path, &src.params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let mut dst = small(Variant::Vanilla, 2);
        let err = load_checkpoint(&path, &mut dst.params).unwrap_err().to_string();
        assert!(
            err.contains("unexpected end of file at tensor head.b3"),
            "got: {err}"
        );
    }

    #[test]
    fn head_count_mismatch_is_a_shape_error_naming_the_tensor() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("s2.ckpt");
        let s2 = small(Variant::Vanilla, 2);
        save_checkpoint(&path, &s2.params).unwrap();
        let mut s4 = small(Variant::Vanilla, 4);
        let err = load_checkpoint(&path, &mut s4.params).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "got: {err}");
        assert!(err.contains("w_q"), "got: {err}");
    }

    #[test]
    fn unknown_and_missing_tensors_are_distinct_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.ckpt");
        // graphormer has edge.* tensors a vanilla model lacks
        let g = small(Variant::Graphormer, 2);
        save_checkpoint(&path, &g.params).unwrap();
        let mut v = small(Variant::Vanilla, 2);
        let err = load_checkpoint(&path, &mut v.params).unwrap_err().to_string();
        assert!(err.contains("unknown tensor name"), "got: {err}");

        let path2 = tmp.path().join("y.ckpt");
        let v2 = small(Variant::Vanilla, 2);
        save_checkpoint(&path2, &v2.params).unwrap();
        let mut g2 = small(Variant::Graphormer, 2);
        let err = load_checkpoint(&path2, &mut g2.params).unwrap_err().to_string();
        assert!(err.contains("missing tensor"), "got: {err}");
    }
}
