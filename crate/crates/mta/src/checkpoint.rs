//! Checkpoints: a UTF-8 manifest plus one raw little-endian f64 blob per
//! tensor.
//!
//! ```text
//! format = mta-checkpoint/1
//! epoch = 3
//! adam_step = 120
//!
//! [param det.query]
//! dtype = f64le
//! shape = 32,64
//! file = param/det.query.bin
//! sha256 = …
//! ```
//!
//! Adam moments use `[adam_m NAME]` and `[adam_v NAME]` sections. The
//! checkpoint's content hash is the SHA-256 of its manifest, which in turn
//! pins every blob.

use std::fs;
use std::path::{Path, PathBuf};

use mta_core::autograd::{Adam, ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{HarnessError, Result};

pub const CHECKPOINT_FORMAT: &str = "mta-checkpoint/1";
pub const MANIFEST: &str = "manifest.txt";

/// Parameters and optimizer state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

fn blob(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn unblob(bytes: &[u8]) -> Option<Vec<f64>> {
    (bytes.len() % 8 == 0).then(|| {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    })
}

impl Checkpoint {
    pub fn capture(epoch: u64, store: &ParamStore, adam: &Adam) -> Self {
        Self {
            epoch,
            params: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            adam_step: adam.step_count(),
            adam_m: adam.first_moments().to_vec(),
            adam_v: adam.second_moments().to_vec(),
        }
    }

    /// Writes the checkpoint into `dir` (created if needed) and returns its
    /// content hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        for sub in ["param", "adam_m", "adam_v"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(HarnessError::io(&d))?;
        }
        let mut manifest = format!(
            "format = {CHECKPOINT_FORMAT}\nepoch = {}\nadam_step = {}\n",
            self.epoch, self.adam_step
        );
        let sections: [(&str, Vec<&[f64]>); 3] = [
            ("param", self.params.iter().map(|(_, t)| t.data()).collect()),
            ("adam_m", self.adam_m.iter().map(Vec::as_slice).collect()),
            ("adam_v", self.adam_v.iter().map(Vec::as_slice).collect()),
        ];
        for (kind, blobs) in sections {
            for ((name, t), data) in self.params.iter().zip(blobs) {
                let bytes = blob(data);
                let rel = format!("{kind}/{name}.bin");
                let path = dir.join(&rel);
                fs::write(&path, &bytes).map_err(HarnessError::io(&path))?;
                let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                manifest.push_str(&format!(
                    "\n[{kind} {name}]\ndtype = f64le\nshape = {}\nfile = {rel}\nsha256 = {}\n",
                    shape.join(","),
                    hex(&Sha256::digest(&bytes))
                ));
            }
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, &manifest).map_err(HarnessError::io(&path))?;
        Ok(hex(&Sha256::digest(manifest.as_bytes())))
    }

    /// Reads a checkpoint, verifying every blob against its recorded hash
    /// and shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
        let bad = |m: String| HarnessError::Data(format!("{}: {m}", path.display()));
        let mut header = std::collections::BTreeMap::new();
        let mut sections: Vec<(String, String, std::collections::BTreeMap<String, String>)> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(inner) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let (kind, name) = inner
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("malformed section {line:?}")))?;
                sections.push((kind.into(), name.into(), Default::default()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            match sections.last_mut() {
                Some((_, _, map)) => map.insert(k, v),
                None => header.insert(k, v),
            };
        }
        if header.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(bad(format!("not a {CHECKPOINT_FORMAT} manifest")));
        }
        let num = |k: &str| -> Result<u64> {
            header
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("missing or invalid {k}")))
        };
        let mut ck = Checkpoint {
            epoch: num("epoch")?,
            adam_step: num("adam_step")?,
            params: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        };
        for (kind, name, fields) in sections {
            let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("[{kind} {name}] lacks {k}")));
            if get("dtype")? != "f64le" {
                return Err(bad(format!("[{kind} {name}] has unsupported dtype")));
            }
            let shape: Vec<usize> = get("shape")?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad(format!("[{kind} {name}] bad shape"))))
                .collect::<Result<_>>()?;
            let file: PathBuf = dir.join(get("file")?);
            let bytes = fs::read(&file).map_err(HarnessError::io(&file))?;
            if &hex(&Sha256::digest(&bytes)) != get("sha256")? {
                return Err(bad(format!("{} does not match its hash", file.display())));
            }
            let data = unblob(&bytes).ok_or_else(|| bad(format!("{} is not f64 data", file.display())))?;
            let tensor = if shape.is_empty() {
                Tensor::scalar(*data.first().ok_or_else(|| bad(format!("{} is empty", file.display())))?)
            } else {
                Tensor::new(&shape, data).map_err(|e| bad(format!("[{kind} {name}]: {e}")))?
            };
            match kind.as_str() {
                "param" => ck.params.push((name, tensor)),
                "adam_m" => ck.adam_m.push(tensor.into_data()),
                "adam_v" => ck.adam_v.push(tensor.into_data()),
                _ => return Err(bad(format!("unknown section kind {kind:?}"))),
            }
        }
        if ck.adam_m.len() != ck.params.len() || ck.adam_v.len() != ck.params.len() {
            return Err(bad("optimizer state does not cover every parameter".into()));
        }
        Ok(ck)
    }

    /// Copies the parameters into `store`, which must hold the same names
    /// and shapes in the same order, and returns the matching optimizer.
    pub fn restore(&self, store: &mut ParamStore) -> Result<Adam> {
        let names: Vec<(String, Vec<usize>)> = store.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
        let ours: Vec<(String, Vec<usize>)> = self.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if names != ours {
            return Err(HarnessError::Data(
                "checkpoint parameters do not match the configured model".into(),
            ));
        }
        for (name, t) in &self.params {
            store.set(name, t.clone())?;
        }
        Ok(Adam::from_state(self.adam_step, self.adam_m.clone(), self.adam_v.clone()))
    }

    /// Content hash of a saved checkpoint.
    pub fn hash_of(dir: &Path) -> Result<String> {
        let path = dir.join(MANIFEST);
        let text = fs::read(&path).map_err(HarnessError::io(&path))?;
        Ok(hex(&Sha256::digest(&text)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::new(&[2, 3], vec![0.1, -0.0, 1e-300, f64::MIN_POSITIVE, 3.5, -7.25]).unwrap()).unwrap();
        store.add("b", Tensor::new(&[1], vec![std::f64::consts::PI]).unwrap()).unwrap();
        let adam = Adam::from_state(4, vec![vec![1.0; 6], vec![2.0]], vec![vec![3.0; 6], vec![4.0]]);
        let ck = Checkpoint::capture(2, &store, &adam);
        let dir = tempfile::tempdir().unwrap();
        let h = ck.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::hash_of(dir.path()).unwrap(), h);
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in back.params.iter().zip(&ck.params) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let mut other = store.clone();
        let restored = back.restore(&mut other).unwrap();
        assert_eq!(restored, adam);
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let ck = Checkpoint::capture(1, &store, &Adam::new(&store));
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        std::fs::write(dir.path().join("param/w.bin"), [0u8; 16]).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap_err().exit_code(), 3);
    }
}
