//! Checkpoint files: a `key = value` configuration block followed by named
//! tensors.
//!
//! Layout: magic `EKGC`, u32 version, u32 length + UTF-8 configuration text,
//! u32 tensor count, then per tensor a u32 length + UTF-8 name, a kind byte
//! (0 trainable, 1 buffer) and the tensor in the `EKGT` encoding. All
//! integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EKGC";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, ParamKind, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_store(config: BTreeMap<String, String>, store: &ParamStore<T>) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.kind, e.tensor.clone()))
            .collect();
        Checkpoint { config, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, t)| t)
    }

    /// Errors naming both values when the stored setting differs from `actual`.
    pub fn expect(&self, key: &str, actual: &str) -> Result<()> {
        match self.config.get(key) {
            Some(v) if v == actual => Ok(()),
            Some(v) => Err(Error::Consistency(format!(
                "`{key}` mismatch: checkpoint has {v}, data has {actual}"
            ))),
            None => Err(Error::Consistency(format!("checkpoint lacks `{key}`"))),
        }
    }

    /// Copies every parameter of `store` from the checkpoint; names and
    /// shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        for name in names {
            let t = self.tensor(&name).ok_or_else(|| {
                Error::Consistency(format!("checkpoint lacks parameter `{name}`"))
            })?;
            store
                .set(&name, t.clone())
                .map_err(|e| Error::Consistency(format!("parameter `{name}`: {e}")))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!(
                    "config entry `{k}` cannot be encoded"
                )));
            }
            text.push_str(&format!("{k} = {v}\n"));
        }
        put_str(&mut out, &text)?;
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for (name, kind, t) in &self.tensors {
            put_str(&mut out, name)?;
            out.push(match kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            write_tensor(&mut out, t)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let config = read_header(&mut r)?;
        let count = get_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let mut kind = [0u8; 1];
            read_exact(&mut r, &mut kind)?;
            let kind = match kind[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::Format(format!("unknown parameter kind {k}"))),
            };
            tensors.push((name, kind, read_tensor(&mut r)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// The configuration block of an encoded checkpoint, readable without
/// knowing the element type of its tensors.
pub fn read_config(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    read_header(&mut Cursor::new(bytes))
}

fn read_header(r: &mut Cursor<&[u8]>) -> Result<BTreeMap<String, String>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let text = get_str(r)?;
    let mut config = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed config line `{line}`")))?;
        config.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(config)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds the format")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&len_u32(s.len())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = get_u32(r)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let mut store = ParamStore::new();
        store
            .register(
                "a.weight",
                Tensor::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 0.0]).unwrap(),
                ParamKind::Trainable,
            )
            .unwrap();
        store
            .register("a.tau", Tensor::scalar(4.0), ParamKind::Buffer)
            .unwrap();
        let mut cfg = BTreeMap::new();
        cfg.insert("bands".to_string(), "24".to_string());
        Checkpoint::from_store(cfg, &store)
    }

    #[test]
    fn roundtrip_and_restore() {
        let ck = sample();
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(
            back.tensor("a.weight").unwrap().data(),
            ck.tensor("a.weight").unwrap().data()
        );
        assert_eq!(back.tensors[1].1, ParamKind::Buffer);
        let mut store = ParamStore::<f64>::new();
        store
            .register("a.weight", Tensor::zeros(&[2, 2]), ParamKind::Trainable)
            .unwrap();
        back.restore_into(&mut store).unwrap();
        assert_eq!(
            store.get(store.id("a.weight").unwrap()).unwrap().data()[1],
            -2.5
        );
    }

    #[test]
    fn mismatches_and_corruption() {
        let ck = sample();
        let err = ck.expect("bands", "20").unwrap_err().to_string();
        assert!(err.contains("24") && err.contains("20"), "{err}");
        let mut store = ParamStore::<f64>::new();
        store
            .register("a.weight", Tensor::zeros(&[4]), ParamKind::Trainable)
            .unwrap();
        assert!(ck.restore_into(&mut store).is_err());
        let bytes = ck.to_bytes().unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(Checkpoint::<f64>::from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
    }
}
