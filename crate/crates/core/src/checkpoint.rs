//! Versioned container for named tensors plus a JSON metadata blob.
//!
//! Layout: the 8-byte magic `CGSCKPT1`, a little-endian `u64` header
//! length, the UTF-8 JSON header, then every tensor's data as `f64` LE in
//! header order. Both the generator and the discriminator (and the
//! optimizer moments) live in one file per training snapshot.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cgs_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CGSCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Named tensors grouped by prefix (e.g. `g.`, `g_ema.`, `d.`), plus metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    /// Adds every tensor of `group` under `prefix.` .
    pub fn insert_group<'a>(&mut self, prefix: &str, group: impl IntoIterator<Item = (&'a String, &'a Tensor)>) {
        for (k, t) in group {
            self.tensors.insert(format!("{prefix}.{k}"), t.clone());
        }
    }

    /// Tensors stored under `prefix.`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors.iter().filter_map(|(k, t)| k.strip_prefix(&p).map(|s| (s.to_string(), t.clone()))).collect()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let header = Header {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for t in self.tensors.values() {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Format(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
        }
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| Error::Format(format!("truncated data for tensor `{}`", e.name)))?;
            let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::read(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Checkpoint::new(serde_json::json!({"step": 3, "preset": "desk"}));
        c.tensors.insert("g.a".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.tensors.insert("d.b".into(), Tensor::scalar(0.1));
        let mut bytes = Vec::new();
        c.write(&mut bytes).unwrap();
        let back = Checkpoint::read(&bytes[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.group("g").len(), 1);
        assert_eq!(back.group("g")["a"].shape(), &[2, 2]);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        assert!(matches!(Checkpoint::read(&b"NOTACKPTxxxxxxxx"[..]), Err(Error::Format(_))));
        let mut c = Checkpoint::new(serde_json::Value::Null);
        c.tensors.insert("x".into(), Tensor::zeros(&[4]));
        let mut bytes = Vec::new();
        c.write(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::read(&bytes[..]), Err(Error::Format(_))));
    }
}
