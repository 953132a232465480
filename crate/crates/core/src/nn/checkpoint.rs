//! Parameter checkpoints: a text manifest followed by little-endian f32 data.
//!
//! ```text
//! FLTC-CKPT-1
//! config <single-line JSON>
//! hash <16 hex digits>
//! param <id> <d0>x<d1>.. <byte offset> <count>
//! ...
//! end
//! <raw f32 LE blob>
//! ```

use std::io::{BufRead, Read};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "FLTC-CKPT-1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: String,
    pub config_hash: u64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{CHECKPOINT_MAGIC}\nconfig {}\nhash {:016x}\n", self.config, self.config_hash);
        let mut offset = 0usize;
        for (id, p) in self.params.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("param {id} {} {offset} {}\n", dims.join("x"), p.value.numel()));
            offset += 4 * p.value.numel();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let mut next = |cur: &mut std::io::Cursor<&[u8]>| -> Result<String> {
            line.clear();
            cur.read_line(&mut line).map_err(|_| Error::model("checkpoint manifest is not text"))?;
            if line.is_empty() {
                return Err(Error::model("checkpoint manifest ends early"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next(&mut cur)? != CHECKPOINT_MAGIC {
            return Err(Error::model(format!("not a checkpoint (expected magic {CHECKPOINT_MAGIC})")));
        }
        let config = next(&mut cur)?
            .strip_prefix("config ")
            .ok_or_else(|| Error::model("checkpoint lacks config line"))?
            .to_string();
        let hash_line = next(&mut cur)?;
        let config_hash = hash_line
            .strip_prefix("hash ")
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .ok_or_else(|| Error::model("checkpoint lacks hash line"))?;
        let mut entries = Vec::new();
        loop {
            let l = next(&mut cur)?;
            if l == "end" {
                break;
            }
            let f: Vec<&str> = l.split(' ').collect();
            if f.len() != 5 || f[0] != "param" {
                return Err(Error::model(format!("bad manifest line `{l}`")));
            }
            let shape: Vec<usize> = f[2]
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::model(format!("bad shape in `{l}`"))))
                .collect::<Result<_>>()?;
            let off: usize = f[3].parse().map_err(|_| Error::model(format!("bad offset in `{l}`")))?;
            let count: usize = f[4].parse().map_err(|_| Error::model(format!("bad count in `{l}`")))?;
            if shape.iter().product::<usize>() != count {
                return Err(Error::model(format!("shape/count mismatch in `{l}`")));
            }
            entries.push((f[1].to_string(), shape, off, count));
        }
        let mut blob = Vec::new();
        cur.read_to_end(&mut blob)?;
        let mut params = ParamStore::new();
        for (id, shape, off, count) in entries {
            let end = off + 4 * count;
            if end > blob.len() {
                return Err(Error::model(format!("checkpoint data for `{id}` is truncated")));
            }
            let vals: Vec<f32> =
                blob[off..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::model(format!("non-finite values in `{id}`")));
            }
            params.insert(id, Tensor::new(&shape, vals));
        }
        Ok(Self { config, config_hash, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::model(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
