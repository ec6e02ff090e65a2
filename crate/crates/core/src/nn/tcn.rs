use crate::autodiff::{Scalar, Var};
use crate::error::{Error, Result};

use super::layers::{BatchNormSpec, Builder, CausalConv1d, ResidualBlock};
use super::session::Session;
use super::spec::TcnSpec;

/// Stack of dilated residual blocks followed by a 1×1 convolution head.
///
/// As a standalone forecaster the head has one output channel and no
/// activation. Inside a hybrid it widens to the feature-map size and is
/// followed by a ReLU.
#[derive(Debug, Clone)]
pub struct TcnStack {
    pub in_channels: usize,
    pub spec: TcnSpec,
    pub blocks: Vec<ResidualBlock>,
    pub head: CausalConv1d,
    pub head_name: String,
    pub activate_head: bool,
}

impl TcnStack {
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        in_channels: usize,
        spec: TcnSpec,
        bn: BatchNormSpec,
        outputs: usize,
        head_name: &str,
        activate_head: bool,
    ) -> Self {
        let mut blocks = Vec::with_capacity(spec.blocks);
        let mut c_in = in_channels;
        for (i, d) in spec.dilations().enumerate() {
            blocks.push(ResidualBlock::new(
                b,
                &format!("tcn.blocks.{i}"),
                c_in,
                spec.channels,
                spec.kernel,
                d,
                spec.dropout,
                bn,
            ));
            c_in = spec.channels;
        }
        let head = CausalConv1d::new(b, head_name, spec.channels, outputs, 1, 1);
        Self {
            in_channels,
            spec,
            blocks,
            head,
            head_name: head_name.to_string(),
            activate_head,
        }
    }

    pub fn receptive_field(&self) -> usize {
        1 + self
            .blocks
            .iter()
            .flat_map(|b| b.convs())
            .map(|c| c.padding())
            .sum::<usize>()
    }

    /// Per-time-step outputs: `x[C_in × B × T] -> [out × B × T]`.
    pub fn forward_sequence<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::dim("tcn input", &[self.in_channels, 0, 0], &shape));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(s, h)?;
        }
        let y = self.head.forward(s, h)?;
        if self.activate_head {
            s.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Output at the last time step: `[B × out]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward_sequence(s, x)?;
        let t = s.tape.shape(y)[2];
        s.tape.time_step(y, t - 1)
    }

    /// Closed form: per block `C_in·C·k + C + C·C·k + C + 4C` (+ `C_in·C + C`
    /// for a skip projection), then the head `C·out + out`.
    pub fn parameter_count(in_channels: usize, spec: &TcnSpec, outputs: usize) -> usize {
        let (c, k) = (spec.channels, spec.kernel);
        let mut total = 0;
        let mut c_in = in_channels;
        for _ in 0..spec.blocks {
            total += c_in * c * k + c + c * c * k + c + 4 * c;
            if c_in != c {
                total += c_in * c + c;
            }
            c_in = c;
        }
        total + c * outputs + outputs
    }
}
