use rand::Rng;

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named, ordered collection of model parameters.
///
/// Layers keep [`ParamId`]s and look their tensors up at forward time; the
/// store is what the optimizer, checkpoints and freezing operate on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, data: Vec<f32>, shape: &[usize]) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let tensor = Tensor::param(data, shape)?;
        self.entries.push(Entry {
            name,
            tensor,
            trainable: true,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// `N(0, std²)` initialised parameter.
    pub fn randn<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f32, rng: &mut R) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, rng);
        self.add(name, t.to_vec(), shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, vec![value; n], shape)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    /// Frozen parameters are plain constants: ops on them build no graph.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut hit = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            if e.trainable != trainable {
                e.tensor = e.tensor.clone().into_leaf(trainable);
                e.trainable = trainable;
            }
            hit += 1;
        }
        hit
    }

    pub fn zero_grad(&self) {
        for e in &self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Overwrites the values of parameter `name`, keeping its trainability.
    pub fn set_values(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if e.tensor.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?}, model expects {:?}",
                shape,
                e.tensor.shape()
            )));
        }
        e.tensor = Tensor::new(data, shape)?.into_leaf(e.trainable);
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, bool)> {
        self.entries
            .iter_mut()
            .map(|e| (e.name.as_str(), &mut e.tensor, e.trainable))
    }

    /// FNV-1a over names, shapes and value bits. Equal fingerprints mean the
    /// parameters were not modified.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for e in &self.entries {
            feed(e.name.as_bytes());
            for &d in e.tensor.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
