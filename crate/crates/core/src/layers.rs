//! Parameterized building blocks shared by the network branches.
//!
//! Layers only hold [`ParamId`]s; the weights live in a [`ParamStore`], so
//! the same architecture value drives `f32` training and `f64` checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Mode, NormStats, ParamId, ParamKind, ParamStore, Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// He-uniform sample: `U(−√(6/fan_in), √(6/fan_in))`.
fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Fully connected layer, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = he_uniform(&[inputs, outputs], inputs, rng);
        Self {
            weight: store.add(format!("{name}.weight"), ParamKind::Trainable, w),
            bias: store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[outputs])),
        }
    }

    /// All-zero weight and bias.
    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), ParamKind::Trainable, Tensor::zeros(&[inputs, outputs])),
            bias: store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[outputs])),
        }
    }

    /// Zero weight and a flattened `k×k` identity bias, so the layer emits the
    /// identity matrix for any input.
    pub fn identity_transform<T: Real>(store: &mut ParamStore<T>, name: &str, inputs: usize, k: usize) -> Self {
        let mut bias = Tensor::zeros(&[k * k]);
        for i in 0..k {
            bias.data_mut()[i * k + i] = T::one();
        }
        Self {
            weight: store.add(format!("{name}.weight"), ParamKind::Trainable, Tensor::zeros(&[inputs, k * k])),
            bias: store.add(format!("{name}.bias"), ParamKind::Trainable, bias),
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.dense(x, w, b)
    }
}

/// 2-D convolution, kernel stored `[F, C, K, K]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = inputs * kernel * kernel;
        let w = he_uniform(&[filters, inputs, kernel, kernel], fan_in, rng);
        Self {
            weight: store.add(format!("{name}.weight"), ParamKind::Trainable, w),
            bias: store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[filters])),
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self::with_gain(store, name, channels, 1.0)
    }

    /// Like [`BatchNorm::new`] with every `gamma` set to `gain`.
    pub fn with_gain<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, gain: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(&[channels], T::of(gain))),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::full(&[channels], T::one()),
            ),
        }
    }

    /// Normalizes `x`; in train mode queues the running-stat update on `g`.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let stats = NormStats {
            running_mean: store.get(self.running_mean).data(),
            running_var: store.get(self.running_var).data(),
            eps: T::of(BN_EPS),
            momentum: T::of(BN_MOMENTUM),
        };
        let (y, updated) = g.batchnorm(x, gamma, beta, stats, mode)?;
        if let Some((mean, var)) = updated {
            g.push_update(self.running_mean, mean);
            g.push_update(self.running_var, var);
        }
        Ok(y)
    }
}

/// `ReLU(BN(x·W + b))` applied row-wise to `[M, in]`.
#[derive(Clone, Debug)]
pub struct DenseBnRelu {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl DenseBnRelu {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            linear: Linear::new(store, name, inputs, outputs, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), outputs),
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.linear.forward(store, g, x)?;
        let y = self.bn.forward(store, g, y, mode)?;
        Ok(g.relu(y))
    }
}

/// Stack of [`DenseBnRelu`] layers with the given widths.
pub fn mlp<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    inputs: usize,
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<DenseBnRelu> {
    let mut prev = inputs;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let layer = DenseBnRelu::new(store, &format!("{name}{i}"), prev, w, rng);
            prev = w;
            layer
        })
        .collect()
}

pub fn mlp_forward<T: Real>(
    layers: &[DenseBnRelu],
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    mut x: Var,
    mode: Mode,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(store, g, x, mode)?;
    }
    Ok(x)
}
