//! Named parameter storage shared by all model parts.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct LayerParam {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<LayerParam>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(LayerParam {
            name,
            tensor,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &LayerParam {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &LayerParam)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Concatenated little-endian bytes of every parameter under `prefix`, in
    /// registration order.
    pub fn bytes_with_prefix(&self, prefix: &str) -> Vec<u8> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.tensor.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Copies values of same-named-after-prefix parameters from another store.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, from: &str, to: &str) -> Result<usize> {
        let mut copied = 0;
        for p in other.params.iter().filter(|p| p.name.starts_with(from)) {
            let target = format!("{to}{}", &p.name[from.len()..]);
            let id = self
                .id(&target)
                .ok_or_else(|| Error::Config(format!("no parameter {target} to copy into")))?;
            let dst = self.tensor_mut(id);
            if dst.shape() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "shape mismatch copying {} into {target}",
                    p.name
                )));
            }
            dst.data_mut().copy_from_slice(p.tensor.data());
            copied += 1;
        }
        Ok(copied)
    }
}

/// He-style fan-in scaled normal initialization.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * standard_normal(rng)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn trainable_prefix_toggle() {
        let mut s = ParamStore::new();
        let a = s.add("enc.w", Tensor::zeros(&[1])).unwrap();
        let b = s.add("cls.w", Tensor::zeros(&[1])).unwrap();
        s.set_trainable("cls.", false);
        assert!(s.get(a).trainable);
        assert!(!s.get(b).trainable);
    }

    #[test]
    fn he_normal_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = he_normal(&[64, 8, 3, 3], 72, &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f32>() / t.len() as f32;
        assert!((var - 2.0 / 72.0).abs() < 0.1 * 2.0 / 72.0, "{var}");
    }
}
