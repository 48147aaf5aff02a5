//! Parameter storage and the small set of layers the network is built from.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Named parameter tensors, ordered by name.
///
/// Each tensor is initialised from an RNG seeded by `(seed, name)`, so two
/// models that share a parameter name and shape start from the same values no
/// matter what else they contain.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

/// How a freshly registered tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±gain * sqrt(6 / fan_in)`.
    Kaiming { gain: f64 },
    Zeros,
    Constant(f64),
}

impl Init {
    pub const DEFAULT: Init = Init::Kaiming { gain: 1.0 };
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, params: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    /// Registers `name` with the given shape. `fan_in` scales Kaiming init.
    pub fn register(&mut self, name: &str, shape: Shape, fan_in: usize, init: Init) -> String {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, v),
            Init::Kaiming { gain } => {
                let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = self.rng_for(name);
                let data = (0..shape.numel()).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::from_vec(shape, data).expect("shape and data agree")
            }
        };
        assert!(
            self.params.insert(name.to_string(), t).is_none(),
            "parameter {name} registered twice"
        );
        name.to_string()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Replaces the value of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter {name} has shape {}, got {}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn scalars_under(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.register(
            &scoped(name, "weight"),
            Shape::new(out_channels, in_channels, kernel, kernel),
            fan_in,
            init,
        );
        let bias = Some(store.register(&scoped(name, "bias"), Shape::new(1, out_channels, 1, 1), fan_in, Init::Zeros));
        Conv2d { weight, bias, in_channels, out_channels, kernel, stride }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.kernel / 2)
    }
}

/// `x + conv(silu(conv(x)))`, width preserving.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        ResBlock {
            conv1: Conv2d::new(store, &scoped(name, "conv1"), width, width, 3, 1, Init::DEFAULT),
            conv2: Conv2d::new(store, &scoped(name, "conv2"), width, width, 3, 1, Init::Kaiming { gain: 0.1 }),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        g.add(x, h)
    }
}

/// A chain of residual blocks.
#[derive(Clone, Debug)]
pub struct ResStack {
    blocks: Vec<ResBlock>,
}

impl ResStack {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, count: usize) -> Self {
        let blocks = (0..count).map(|i| ResBlock::new(store, &scoped(name, &i.to_string()), width)).collect();
        ResStack { blocks }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        self.blocks.iter().fold(x, |h, b| b.forward(g, h))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Modulated deformable 3x3 convolution layer.
#[derive(Clone, Debug)]
pub struct DeformConv2d {
    weight: String,
    bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DeformConv2d {
    pub const KERNEL: usize = 3;

    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize) -> Self {
        let k = Self::KERNEL;
        let fan_in = in_channels * k * k;
        let weight = store.register(
            &scoped(name, "weight"),
            Shape::new(out_channels, in_channels, k, k),
            fan_in,
            Init::DEFAULT,
        );
        let bias = store.register(&scoped(name, "bias"), Shape::new(1, out_channels, 1, 1), fan_in, Init::Zeros);
        DeformConv2d { weight, bias, in_channels, out_channels }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, offsets: Var, mask: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.deform_conv(x, w, Some(b), offsets, mask)
    }
}
