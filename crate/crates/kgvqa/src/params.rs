//! Named parameter storage, gradient slots, and the AdamW optimizer.
//!
//! All learnable state lives in one [`ModelParams`] map keyed by dotted,
//! hierarchical names (`"align.l0.self.wq"`, `"heads.aux.mask"`, ...). The
//! map is ordered, so every iteration over parameters is deterministic.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A parameter tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct GradSlot {
    pub value: Tensor,
    pub grad: Tensor,
}

impl GradSlot {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    slots: BTreeMap<String, GradSlot>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.slots.insert(name.to_string(), GradSlot::new(value));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .slots
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .slots
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self
            .slots
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .grad
    }

    /// Additively accumulate a gradient contribution.
    pub fn accumulate(&mut self, name: &str, contribution: &Tensor) {
        let slot = self
            .slots
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        slot.grad.add_assign(contribution);
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad = Tensor::zeros(slot.value.shape());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &GradSlot)> {
        self.slots.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut GradSlot)> {
        self.slots.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Serialize all tensors into a flat little-endian f64 container plus a
    /// JSON manifest describing name, shape and byte offset of each entry.
    pub fn save(&self, bin_path: &Path, manifest_path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut bin = Vec::new();
        let mut entries = Vec::new();
        for (name, slot) in &self.slots {
            entries.push(serde_json::json!({
                "name": name,
                "shape": slot.value.shape(),
                "offset": bin.len(),
            }));
            for v in slot.value.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = serde_json::json!({
            "dtype": "f64le",
            "tensors": entries,
            "extra": extra,
        });
        std::fs::File::create(bin_path)?.write_all(&bin)?;
        std::fs::File::create(manifest_path)?
            .write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(())
    }

    /// Load values for the existing key set from a saved container.
    pub fn load(&mut self, bin_path: &Path, manifest_path: &Path) -> Result<serde_json::Value> {
        let mut bin = Vec::new();
        std::fs::File::open(bin_path)?.read_to_end(&mut bin)?;
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        let tensors = manifest["tensors"]
            .as_array()
            .ok_or_else(|| Error::Input("manifest missing tensors array".into()))?;
        for entry in tensors {
            let name = entry["name"]
                .as_str()
                .ok_or_else(|| Error::Input("tensor entry missing name".into()))?;
            let shape: Vec<usize> = entry["shape"]
                .as_array()
                .ok_or_else(|| Error::Input("tensor entry missing shape".into()))?
                .iter()
                .map(|v| v.as_u64().unwrap_or(0) as usize)
                .collect();
            let offset = entry["offset"].as_u64().unwrap_or(0) as usize;
            let n: usize = shape.iter().product();
            if offset + 8 * n > bin.len() {
                return Err(Error::Input(format!("tensor {name} overruns container")));
            }
            let data: Vec<f64> = (0..n)
                .map(|i| {
                    let o = offset + 8 * i;
                    f64::from_le_bytes(bin[o..o + 8].try_into().unwrap())
                })
                .collect();
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::Input(format!("checkpoint key {name} not in model")))?;
            if slot.value.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "checkpoint {name}: {:?} vs model {:?}",
                    shape,
                    slot.value.shape()
                )));
            }
            slot.value = Tensor::new(&shape, data)?;
        }
        Ok(manifest["extra"].clone())
    }
}

/// Decoupled weight decay Adam.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, slot) in params.iter_mut() {
            let n = slot.value.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let value = slot.value.data_mut();
            let grad = slot.grad.data();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps)
                    + self.weight_decay * value[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_accumulate_and_reset() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::from_vec(vec![1.0, 2.0]));
        p.accumulate("w", &Tensor::from_vec(vec![0.5, 0.5]));
        p.accumulate("w", &Tensor::from_vec(vec![0.5, 0.5]));
        assert_eq!(p.grad("w").data(), &[1.0, 1.0]);
        p.zero_grads();
        assert_eq!(p.grad("w").data(), &[0.0, 0.0]);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize (w-3)^2
        let mut p = ModelParams::new();
        p.insert("w", Tensor::from_vec(vec![0.0]));
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..200 {
            p.zero_grads();
            let w = p.get("w").data()[0];
            p.accumulate("w", &Tensor::from_vec(vec![2.0 * (w - 3.0)]));
            opt.step(&mut p);
        }
        assert!((p.get("w").data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ckpt.bin");
        let man = dir.path().join("ckpt.json");
        let mut p = ModelParams::new();
        p.insert("a", Tensor::from_vec(vec![1.5, -2.25]));
        p.insert("b", Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        p.save(&bin, &man, serde_json::json!({"note": "t"})).unwrap();

        let mut q = ModelParams::new();
        q.insert("a", Tensor::from_vec(vec![0.0, 0.0]));
        q.insert("b", Tensor::zeros(&[2, 2]));
        let extra = q.load(&bin, &man).unwrap();
        assert_eq!(extra["note"], "t");
        assert_eq!(q.get("a").data(), p.get("a").data());
        assert_eq!(q.get("b").data(), p.get("b").data());
    }
}
