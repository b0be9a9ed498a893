//! A small neural-network core with hand-written reverse-mode gradients.
//!
//! Every layer follows the same protocol: a training-mode `forward` stores
//! what its `backward` needs, `backward` consumes that trace, accumulates
//! parameter gradients into [`Param::grad`] and returns the gradient with
//! respect to the layer input. Calling `backward` without a preceding
//! training-mode forward is an error.
//!
//! Layers are generic over [`Real`] so the same code runs in `f64` for
//! finite-difference checks and in `f32` for training.

mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod model;
mod real;

use serde::{Deserialize, Serialize};

use crate::config::Preset;
use crate::error::{Error, Result};

pub use attention::{MultiHeadAttention, TransformerBlock};
pub use layers::{AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Dropout, LayerNorm, Linear, Relu, ResBlock};
pub use model::{flops_estimate, Cnn, Freeze, Model, ModelDims, ParamGroup, INPUT_PLANES};
pub use real::{matmul, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let n = value.len();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: vec![T::zero(); n],
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n])
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    /// Parameters in a fixed order.
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>));

    /// Non-trainable state saved in checkpoints (batch-norm running stats).
    fn visit_buffers<'a>(&'a mut self, _f: &mut dyn FnMut(&'a mut Param<T>)) {}

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        self.visit_params(&mut |p| v.push(p));
        v
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }
}

/// Architecture hyperparameters. Input and output sizes come from the
/// system configuration, see [`ModelDims`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of the initial convolution.
    pub stem_channels: usize,
    /// Channels of the three residual blocks.
    pub channels: usize,
    /// Adaptive pooling grid [H_p, W_p].
    pub pool_grid: [usize; 2],
    pub d_emb: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub causal: bool,
    /// Standard deviation of linear and embedding weight init.
    pub init_std: f64,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                stem_channels: 32,
                channels: 64,
                pool_grid: [4, 4],
                d_emb: 512,
                num_heads: 8,
                num_layers: 4,
                ffn_dim: 2048,
                dropout: 0.2,
                causal: true,
                init_std: 0.02,
            },
            Preset::Desk => Self {
                stem_channels: 8,
                channels: 16,
                pool_grid: [2, 2],
                d_emb: 64,
                num_heads: 4,
                num_layers: 2,
                ffn_dim: 256,
                dropout: 0.1,
                causal: true,
                init_std: 0.02,
            },
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stem_channels == 0 || self.channels == 0 || self.d_emb == 0 || self.ffn_dim == 0 {
            return bad("model widths must be positive".into());
        }
        if self.num_heads == 0 || self.d_emb % self.num_heads != 0 {
            return bad(format!(
                "d_emb {} is not divisible by num_heads {}",
                self.d_emb, self.num_heads
            ));
        }
        if self.pool_grid.contains(&0) {
            return bad("pooling grid must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std >= 0.0) {
            return bad("init_std must be non-negative".into());
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::preset(Preset::Paper).validate().unwrap();
        ModelConfig::preset(Preset::Desk).validate().unwrap();
        assert_eq!(ModelConfig::preset(Preset::Paper).head_dim(), 64);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut c = ModelConfig::default();
        c.num_heads = 5;
        assert!(c.validate().is_err());
    }
}
