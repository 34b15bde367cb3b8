use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{ConvGeometry, PadMode};
use crate::tensor::Tensor;

/// Named parameter tensors, keyed by module path (`encoder.stage1.weight`).
///
/// Ordered by name so iteration, serialization and optimizer updates are
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Replaces matching tensors from `other`; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for (name, value) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let slot = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, file has {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// A 2-D convolution layer: parameter names plus geometry.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            geom: ConvGeometry::same(kernel, 1, PadMode::Zero),
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn dilated(mut self, dilation: usize, pad_mode: PadMode) -> Self {
        self.geom = ConvGeometry::same(self.geom.kernel, dilation, pad_mode);
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn num_params(&self) -> usize {
        let k = self.geom.kernel;
        self.out_channels * self.in_channels * k * k + if self.bias { self.out_channels } else { 0 }
    }

    /// He-normal weights, zero bias. The stream is keyed by `(seed, name)`,
    /// so a layer initializes identically whatever else is built around it.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = layer_rng(seed, &self.name);
        let k = self.geom.kernel;
        let fan_in = (self.in_channels * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let shape = [self.out_channels, self.in_channels, k, k];
        let weight = Tensor::from_fn(shape, |_, _, _, _| normal.sample(&mut rng));
        store.insert(self.weight_name(), weight);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros([1, self.out_channels, 1, 1]));
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let channels = g.shape(x)[1];
        if channels != self.in_channels {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {}",
                self.name, self.in_channels, channels
            )));
        }
        let w = g.param(store, &self.weight_name())?;
        let b = if self.bias {
            Some(g.param(store, &self.bias_name())?)
        } else {
            None
        };
        g.conv2d(x, w, b, self.geom)
    }
}

/// Deterministic RNG for the layer called `name` under `seed` (FNV-1a mix).
pub fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
