//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `MSAN`, `u16` version, `u32`-prefixed TOML
//! config, `u32` tensor count, then per tensor a `u16`-prefixed name, `u8`
//! rank, `u32` dims and raw `f32` data. A trailing key-value section holds
//! scalar state as `u32` count of (`u16` key, `u32` value) UTF-8 strings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{OptimState, TrainSchedule};

pub const MAGIC: &[u8; 4] = b"MSAN";
pub const VERSION: u16 = 1;

/// Text blob embedded in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredConfig {
    pub model: ModelConfig,
    pub schedule: Option<TrainSchedule>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub schedule: Option<TrainSchedule>,
    pub params: ParamStore,
    pub optim: Option<OptimState>,
    /// Scalar progress state (step counters, partial sums, seeds).
    pub state: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            config: model.config.clone(),
            schedule: None,
            params: model.params.clone(),
            optim: None,
            state: BTreeMap::new(),
        }
    }

    pub fn state_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .state
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks state key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint state `{key}` has invalid value `{raw}`")))
    }

    /// Fails with the first differing field when `expected` disagrees.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        match expected.first_difference(&self.config) {
            Some((field, e, f)) => Err(Error::ConfigMismatch {
                field: field.to_string(),
                expected: e,
                found: f,
            }),
            None => Ok(()),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_parts(self.config, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = toml::to_string(&StoredConfig {
            model: self.config.clone(),
            schedule: self.schedule.clone(),
        })
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut w, blob.len())?;
        w.extend_from_slice(blob.as_bytes());

        let mut entries: Vec<(String, &[usize], &Tensor)> = Vec::new();
        for (name, p) in self.params.iter() {
            entries.push((name.to_string(), &p.dims, &p.value));
        }
        if let Some(opt) = &self.optim {
            for (name, p) in self.params.iter() {
                let (m1, m2) = opt.moments(name)?;
                entries.push((format!("{name}.m1"), &p.dims, m1));
                entries.push((format!("{name}.m2"), &p.dims, m2));
            }
        }
        put_u32(&mut w, entries.len())?;
        for (name, dims, t) in entries {
            put_str16(&mut w, &name)?;
            w.push(u8::try_from(dims.len()).map_err(|_| Error::Argument(format!("rank too large for `{name}`")))?);
            for &d in dims {
                put_u32(&mut w, d)?;
            }
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut state = self.state.clone();
        if let Some(opt) = &self.optim {
            opt.write_state(&mut state);
        }
        put_u32(&mut w, state.len())?;
        for (k, v) in &state {
            put_str16(&mut w, k)?;
            put_u32(&mut w, v.len())?;
            w.extend_from_slice(v.as_bytes());
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.corrupt_at(0, "bad magic"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.corrupt_at(4, &format!("unsupported version {version}")));
        }
        let len = r.u32("config length")?;
        let start = r.pos;
        let blob = std::str::from_utf8(r.take(len, "config")?).map_err(|_| r.corrupt_at(start, "config is not UTF-8"))?;
        let stored: StoredConfig = toml::from_str(blob).map_err(|e| r.corrupt_at(start, &format!("config: {e}")))?;
        stored.model.validate()?;

        let count = r.u32("tensor count")?;
        let mut tensors: IndexMap<String, (usize, Vec<usize>, Vec<f32>)> = IndexMap::new();
        for _ in 0..count {
            let at = r.pos;
            let name = r.str16("tensor name")?;
            let rank = r.u8("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dim")).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.corrupt_at(at, "tensor too large"))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.corrupt_at(at, "tensor too large"))?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if tensors.insert(name.clone(), (at, dims, data)).is_some() {
                return Err(r.corrupt_at(at, &format!("duplicate tensor `{name}`")));
            }
        }

        let kv = r.u32("state count")?;
        let mut state = BTreeMap::new();
        for _ in 0..kv {
            let k = r.str16("state key")?;
            let n = r.u32("state value length")?;
            let at = r.pos;
            let v = std::str::from_utf8(r.take(n, "state value")?).map_err(|_| r.corrupt_at(at, "state value is not UTF-8"))?;
            state.insert(k, v.to_string());
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt_at(r.pos, "trailing bytes"));
        }

        // rebuild against the architecture the config describes
        let reference = Model::build(stored.model.clone(), 0)?;
        let mut params = reference.params;
        let take_tensor = |name: &str, tensors: &mut IndexMap<String, (usize, Vec<usize>, Vec<f32>)>, dims: &[usize], shape| {
            let (at, d, data) = tensors
                .shift_remove(name)
                .ok_or_else(|| Error::Corrupt { offset: bytes.len() as u64, reason: format!("missing tensor `{name}`") })?;
            if d != dims {
                return Err(Error::Corrupt { offset: at as u64, reason: format!("`{name}` has dims {d:?}, expected {dims:?}") });
            }
            Tensor::from_vec(shape, data)
        };
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in &names {
            let p = params.get_mut(name).expect("listed name");
            p.value = take_tensor(name, &mut tensors, &p.dims.clone(), p.value.shape())?;
        }
        let optim = if tensors.is_empty() {
            None
        } else {
            let mut m1 = IndexMap::new();
            let mut m2 = IndexMap::new();
            for name in &names {
                let p = params.get(name).expect("listed name");
                m1.insert(name.clone(), take_tensor(&format!("{name}.m1"), &mut tensors, &p.dims, p.value.shape())?);
                m2.insert(name.clone(), take_tensor(&format!("{name}.m2"), &mut tensors, &p.dims, p.value.shape())?);
            }
            Some(OptimState::from_parts(m1, m2, &mut state)?)
        };
        if let Some((name, (at, ..))) = tensors.first() {
            return Err(Error::Corrupt { offset: *at as u64, reason: format!("unexpected tensor `{name}`") });
        }
        Ok(Checkpoint {
            config: stored.model,
            schedule: stored.schedule,
            params,
            optim,
            state,
        })
    }

    /// Writes via a temporary sibling and renames, so readers never see a
    /// partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(w: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Argument(format!("{v} does not fit a u32 field")))?;
    w.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str16(w: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| Error::Argument(format!("name too long: {s}")))?;
    w.extend_from_slice(&n.to_le_bytes());
    w.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt_at(&self, offset: usize, reason: &str) -> Error {
        Error::Corrupt {
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt_at(self.pos, &format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn str16(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.corrupt_at(at, &format!("{what} is not UTF-8")))
    }
}
