//! Named parameters with Adam state, gradient clipping and the checkpoint
//! archive format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Parameters in insertion order; names are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        let n = value.len();
        self.index.insert(name.to_string(), self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(ParamId(self.slots.len() - 1))
    }

    /// Xavier-uniform `fan_in x fan_out` matrix.
    pub fn add_xavier(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn add_filled(&mut self, name: &str, cols: usize, v: f64) -> Result<ParamId> {
        self.add(name, Tensor::matrix(1, cols, vec![v; cols]))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id.0].grad.as_deref()
    }

    pub fn num_values(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let slot = &mut self.slots[id.0];
        match &mut slot.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => slot.grad = Some(g.to_vec()),
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for slot in &mut self.slots {
            if let Some(g) = &mut slot.grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.slots
            .iter()
            .filter_map(|s| s.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`;
    /// returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// Bias-corrected Adam update, then clears gradients. Parameters that
    /// received no gradient this step are updated as if the gradient were
    /// zero; a store with no gradients at all is an error.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) -> Result<()> {
        if self.slots.iter().all(|s| s.grad.is_none()) {
            return Err(invalid("adam step without any gradients"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for slot in &mut self.slots {
            let grad = slot.grad.take();
            for i in 0..slot.value.data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                slot.value.data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Copies values (not optimizer state) from `other`, matching by name.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for slot in &mut self.slots {
            let src = other
                .id(&slot.name)
                .ok_or_else(|| invalid(format!("checkpoint lacks parameter `{}`", slot.name)))?;
            let v = other.value(src);
            if v.shape != slot.value.shape {
                return Err(Error::Shape(format!(
                    "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                    slot.name, v.shape, slot.value.shape
                )));
            }
            slot.value = v.clone();
        }
        Ok(())
    }

    /// Archive layout: magic `S2VCKPT1`, `u32` tensor count, then per
    /// tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims and
    /// the values as little-endian `f64`. Metadata goes to `<path>.json`.
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for s in &self.slots {
            buf.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.name.as_bytes());
            buf.extend_from_slice(&(s.value.shape.len() as u32).to_le_bytes());
            for &d in &s.value.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &s.value.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        let mp = meta_path(path);
        fs::write(&mp, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { b: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(invalid(format!("{}: not a checkpoint archive", path.display())));
        }
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| invalid("checkpoint parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.add(&name, Tensor::new(shape, data))?;
        }
        let mp = meta_path(path);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        Ok((store, serde_json::from_str(&text)?))
    }
}

const MAGIC: &[u8; 8] = b"S2VCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: usize,
    pub config_hash: String,
    /// Model configuration as JSON.
    pub model_config: String,
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| invalid("truncated checkpoint archive"))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
