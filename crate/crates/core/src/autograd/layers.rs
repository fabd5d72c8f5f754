//! Layer descriptors. Layers only hold parameter handles; values live in a
//! [`ParamStore`](super::ParamStore).

use serde::{Deserialize, Serialize};

use super::params::{BnId, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Lipschitz constant over the real line.
    pub fn lipschitz(self) -> f64 {
        1.0
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// 2-D convolution with zero padding. Weight layout is
/// `(out_channels, in_channels / groups, kernel, kernel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_per_group(),
            self.kernel,
            self.kernel,
        ]
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        if input.channels != self.in_channels {
            return Err(Error::dim(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let out = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::dim(format!(
                    "kernel {} larger than padded input {padded}",
                    self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok(Dims::new(
            input.batch,
            self.out_channels,
            out(input.height)?,
            out(input.width)?,
        ))
    }

    /// Multiply-accumulate count for one sample.
    pub fn macs(&self, input: Dims) -> Result<u64> {
        let o = self.output_dims(input.with_batch(1))?;
        Ok((o.height * o.width * self.out_channels * self.in_per_group() * self.kernel * self.kernel)
            as u64)
    }

    pub fn weight_count(&self) -> u64 {
        (self.out_channels * self.in_per_group() * self.kernel * self.kernel) as u64
    }
}

/// Fully connected layer over the flattened sample; weight is
/// `(out_features, in_features)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub id: BnId,
    pub channels: usize,
}

/// One element of a sequential block.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Dense(Dense),
    Norm(BatchNorm),
}
