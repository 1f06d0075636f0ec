//! MALCKPT1 checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! "MALCKPT1" | fingerprint [32] | count u32 | count × (name_len u32 | name utf-8 | MALTNSR1 tensor)
//! ```
//!
//! Entry names are prefixed by role: `param/`, `adam.m/`, `adam.v/`, `ema/`,
//! plus the scalar `optim.step`.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{decode_tensor_prefix, encode_tensor, AnyTensor, ParamStore, Real, Tensor};

use super::ema::EmaState;
use super::optim::OptimState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MALCKPT1";
const MAX_NAME: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub entries: Vec<(String, AnyTensor)>,
}

fn any<T: Real>(t: &Tensor<T>) -> AnyTensor {
    if T::DTYPE == crate::numerics::DType::F32 {
        AnyTensor::F32(t.cast())
    } else {
        AnyTensor::F64(t.cast())
    }
}

impl Checkpoint {
    /// Captures parameters and, when given, optimizer and EMA state.
    pub fn capture<T: Real>(
        fingerprint: [u8; 32],
        store: &ParamStore<T>,
        opt: Option<&OptimState<T>>,
        ema: Option<&EmaState<T>>,
    ) -> Self {
        let mut entries = Vec::new();
        for e in store.entries() {
            entries.push((format!("param/{}", e.name), any(&e.value)));
        }
        if let Some(opt) = opt {
            for (e, m) in store.entries().iter().zip(&opt.m) {
                entries.push((format!("adam.m/{}", e.name), any(m)));
            }
            for (e, v) in store.entries().iter().zip(&opt.v) {
                entries.push((format!("adam.v/{}", e.name), any(v)));
            }
            entries.push(("optim.step".into(), AnyTensor::F64(Tensor::scalar(opt.step as f64))));
        }
        if let Some(ema) = ema {
            for (e, s) in store.entries().iter().zip(&ema.shadow) {
                entries.push((format!("ema/{}", e.name), any(s)));
            }
        }
        Self { fingerprint, entries }
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn check_fingerprint(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: hex(expected),
                found: hex(&self.fingerprint),
            });
        }
        Ok(())
    }

    /// Copies `role/<name>` entries into every parameter accepted by
    /// `filter`. Returns how many parameters were loaded.
    pub fn restore<T: Real>(&self, role: &str, store: &mut ParamStore<T>, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut loaded = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if !filter(&name) {
                continue;
            }
            let key = format!("{role}/{name}");
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Decode(format!("checkpoint has no entry `{key}`")))?;
            store.set(id, t.clone().into_real())?;
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Restores optimizer moments and step for every parameter in `store`.
    pub fn restore_optim<T: Real>(&self, store: &ParamStore<T>, opt: &mut OptimState<T>) -> Result<()> {
        for (i, e) in store.entries().iter().enumerate() {
            for (role, dst) in [("adam.m", &mut opt.m[i]), ("adam.v", &mut opt.v[i])] {
                let key = format!("{role}/{}", e.name);
                let t: Tensor<T> = self
                    .get(&key)
                    .ok_or_else(|| Error::Decode(format!("checkpoint has no entry `{key}`")))?
                    .clone()
                    .into_real();
                if t.shape() != e.value.shape() {
                    return Err(Error::dim("restore_optim", format!("`{key}` has shape {:?}", t.shape())));
                }
                *dst = t;
            }
        }
        let step = self
            .get("optim.step")
            .ok_or_else(|| Error::Decode("checkpoint has no optimizer step".into()))?
            .clone()
            .into_real::<f64>();
        opt.step = step.data()[0] as u64;
        Ok(())
    }

    pub fn has_role(&self, role: &str) -> bool {
        let prefix = format!("{role}/");
        self.entries.iter().any(|(n, _)| n.starts_with(&prefix))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match t {
                AnyTensor::F32(t) => encode_tensor(t, &mut out),
                AnyTensor::F64(t) => encode_tensor(t, &mut out),
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let body = buf
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| Error::Decode("missing MALCKPT1 magic".into()))?;
        let mut cur = Cursor(body);
        let fingerprint: [u8; 32] = cur.take(32, "fingerprint")?.try_into().unwrap();
        let count = cur.u32("entry count")? as usize;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = cur.u32("name length")? as usize;
            if len == 0 || len > MAX_NAME {
                return Err(Error::Decode(format!("entry name length {len} out of range")));
            }
            let name = std::str::from_utf8(cur.take(len, "entry name")?)
                .map_err(|_| Error::Decode("entry name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Decode(format!("duplicate entry `{name}`")));
            }
            let (t, used) = decode_tensor_prefix(cur.0).map_err(|e| Error::Decode(format!("entry `{name}`: {e}")))?;
            cur.take(used, "tensor")?;
            entries.push((name, t));
        }
        if !cur.0.is_empty() {
            return Err(Error::Decode(format!("{} trailing bytes after checkpoint", cur.0.len())));
        }
        Ok(Self { fingerprint, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::decode(&buf).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Decode(format!("truncated checkpoint while reading {what}")));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
