//! Static building blocks: batch norm, convolution and the linear head.

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// He-scaled truncated normal: std `sqrt(2 / fan_in)`, truncated at ±2 std.
pub fn he_truncated_normal<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut SeededRng,
) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.truncated_normal(std)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.register(
                &format!("{prefix}.gamma"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Trainable,
            )?,
            beta: store.register(
                &format!("{prefix}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::Trainable,
            )?,
            running_mean: store.register(
                &format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            )?,
            running_var: store.register(
                &format!("{prefix}.running_var"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Buffer,
            )?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        sess.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
        )
    }
}

/// Convolution with a fixed kernel.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: ConvSpec,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        spec.validate()?;
        let w = he_truncated_normal(&spec.weight_shape(), spec.fan_in(), rng);
        let weight = store.register(&format!("{prefix}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.register(
                &format!("{prefix}.bias"),
                Tensor::zeros(&[spec.out_channels]),
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Conv { weight, bias, spec })
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = sess.param(self.weight)?;
        let b = self.bias.map(|b| sess.param(b)).transpose()?;
        sess.tape.conv3d(x, w, b, &self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.spec.weight_shape().iter().product::<usize>()
            + if self.bias.is_some() {
                self.spec.out_channels
            } else {
                0
            }
    }
}

/// `y = x·W + b` for `x: B×in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = he_truncated_normal(&[in_features, out_features], in_features, rng);
        Ok(Linear {
            weight: store.register(&format!("{prefix}.weight"), w, ParamKind::Trainable)?,
            bias: store.register(
                &format!("{prefix}.bias"),
                Tensor::zeros(&[out_features]),
                ParamKind::Trainable,
            )?,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = sess.param(self.weight)?;
        let b = sess.param(self.bias)?;
        let y = sess.tape.matmul(x, w)?;
        sess.tape.add_bias(y, b)
    }
}
