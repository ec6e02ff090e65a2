use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

use super::params::{ParamId, ParamKind, ParamSet};
use super::session::Session;

/// Allocates and initializes parameters while a network is being assembled.
pub(crate) struct Builder<'a, T> {
    pub params: &'a mut ParamSet<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    pub fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.gen_range(-bound..=bound)))
            .collect();
        let t = Tensor::new(shape, data).expect("consistent shape");
        self.params.add(name, t, ParamKind::Weight)
    }

    /// Scaled-uniform fan-based initialization, bound √(6 / (fan_in + fan_out)).
    pub fn xavier(&mut self, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, value: f64, kind: ParamKind) -> ParamId {
        self.params.add(name, Tensor::full(shape, T::from_f64(value)), kind)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = b.xavier(format!("{name}.weight"), vec![inputs, outputs], inputs, outputs);
        let bias = b.constant(format!("{name}.bias"), vec![outputs], 0.0, ParamKind::Weight);
        Self {
            name: name.to_string(),
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    /// `x[B×in] -> [B×out]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.tape.matmul(x, w)?;
        s.tape.add_bias(y, b)
    }
}

/// Embedding dimension rule: half the number of categories, rounded up,
/// capped at 50.
pub fn embedding_dim(cardinality: usize) -> Result<usize> {
    if cardinality == 0 {
        return Err(Error::Contract("embedding cardinality must be >= 1".into()));
    }
    Ok(cardinality.div_ceil(2).min(50).max(1))
}

/// Lookup table for one categorical feature. Row `vocab_size` is the
/// reserved unknown-category row.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub feature: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub table: ParamId,
}

impl Embedding {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, feature: &str, vocab_size: usize, dim: usize) -> Self {
        let table = b.uniform(format!("s2v.emb.{feature}"), vec![vocab_size + 1, dim], 0.05);
        Self {
            feature: feature.to_string(),
            vocab_size,
            dim,
            table,
        }
    }

    pub fn rows(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, indices: &[usize]) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows()) {
            return Err(Error::Index {
                feature: self.feature.clone(),
                value: bad,
                cardinality: self.rows(),
            });
        }
        let w = s.param(self.table);
        s.tape.gather_rows(w, indices)
    }
}

#[derive(Debug, Clone)]
pub struct CausalConv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl CausalConv1d {
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let weight = b.xavier(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel],
            in_channels * kernel,
            out_channels * kernel,
        );
        let bias = b.constant(format!("{name}.bias"), vec![out_channels], 0.0, ParamKind::Weight);
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight,
            bias,
        }
    }

    /// Left zero-padding length.
    pub fn padding(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    /// `x[C_in × B × T] -> [C_out × B × T]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.conv1d_causal(x, w, b, self.dilation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchNormSpec {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormSpec {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub module: String,
    pub spec: BatchNormSpec,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm1d {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, spec: BatchNormSpec) -> Self {
        Self::with_gamma(b, name, channels, spec, 1.0)
    }

    pub(crate) fn with_gamma<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        spec: BatchNormSpec,
        gamma: f64,
    ) -> Self {
        Self {
            module: name.to_string(),
            spec,
            gamma: b.constant(format!("{name}.gamma"), vec![channels], gamma, ParamKind::Weight),
            beta: b.constant(format!("{name}.beta"), vec![channels], 0.0, ParamKind::Weight),
            running_mean: b.constant(format!("{name}.running_mean"), vec![channels], 0.0, ParamKind::Buffer),
            running_var: b.constant(format!("{name}.running_var"), vec![channels], 1.0, ParamKind::Buffer),
        }
    }

    /// Normalizes `x[C × ...]` per channel. In training mode it uses batch
    /// statistics and queues a running-statistics update on the session.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.is_training(&self.module) {
            let (y, stats) = s.tape.batch_norm_train(x, gamma, beta, self.spec.eps)?;
            let m = T::from_f64(self.spec.momentum);
            let keep = T::ONE - m;
            let blend = |old: &[T], new: &[T]| -> Vec<T> {
                old.iter().zip(new).map(|(&o, &n)| keep * o + m * n).collect()
            };
            let rm = blend(s.params().tensor(self.running_mean).data(), &stats.mean);
            let rv = blend(s.params().tensor(self.running_var).data(), &stats.var);
            s.record_buffer(self.running_mean, rm);
            s.record_buffer(self.running_var, rv);
            Ok(y)
        } else {
            let rm = s.params().tensor(self.running_mean).data().to_vec();
            let rv = s.params().tensor(self.running_var).data().to_vec();
            s.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, self.spec.eps)
        }
    }
}

/// Inverted dropout; identity outside training mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub module: String,
    pub p: f64,
}

impl Dropout {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        if self.p <= 0.0 || !s.is_training(&self.module) {
            return Ok(x);
        }
        let n = s.tape.value(x).numel();
        let mask = s.dropout_mask(n, self.p);
        s.tape.mul_mask(x, mask)
    }
}

/// Two causal convolutions sharing one dilation:
/// `conv → dropout → bn → ReLU → conv → dropout → bn`, then the skip path is
/// added and the sum passed through a final ReLU. The second batch norm
/// starts with a zero scale, so a fresh block is the identity (up to the
/// ReLU). A 1×1 convolution sits on the skip path when channel counts differ.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub name: String,
    pub conv1: CausalConv1d,
    pub bn1: BatchNorm1d,
    pub conv2: CausalConv1d,
    pub bn2: BatchNorm1d,
    pub skip: Option<CausalConv1d>,
    pub dropout: Dropout,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        channels: usize,
        kernel: usize,
        dilation: usize,
        dropout: f64,
        bn: BatchNormSpec,
    ) -> Self {
        let conv1 = CausalConv1d::new(b, &format!("{name}.conv1"), in_channels, channels, kernel, dilation);
        let bn1 = BatchNorm1d::new(b, &format!("{name}.bn1"), channels, bn);
        let conv2 = CausalConv1d::new(b, &format!("{name}.conv2"), channels, channels, kernel, dilation);
        let bn2 = BatchNorm1d::with_gamma(b, &format!("{name}.bn2"), channels, bn, 0.0);
        let skip = (in_channels != channels)
            .then(|| CausalConv1d::new(b, &format!("{name}.skip"), in_channels, channels, 1, 1));
        Self {
            name: name.to_string(),
            conv1,
            bn1,
            conv2,
            bn2,
            skip,
            dropout: Dropout {
                module: name.to_string(),
                p: dropout,
            },
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.dropout.forward(s, h)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.tape.relu(h)?;
        let h = self.conv2.forward(s, h)?;
        let h = self.dropout.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(s, x)?,
            None => x,
        };
        let sum = s.tape.add(h, skip)?;
        s.tape.relu(sum)
    }

    pub fn convs(&self) -> [&CausalConv1d; 2] {
        [&self.conv1, &self.conv2]
    }
}

/// Parameter builder seeded directly, for assembling single layers in tests.
#[cfg(test)]
pub(crate) fn test_builder<T: Scalar>(params: &mut ParamSet<T>, seed: u64) -> Builder<'_, T> {
    use rand::SeedableRng;
    Builder {
        params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}
