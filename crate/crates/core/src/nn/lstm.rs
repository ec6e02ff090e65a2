use crate::autodiff::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

use super::layers::{Builder, Dense};
use super::params::{ParamId, ParamKind};
use super::session::Session;
use super::spec::LstmSpec;

/// One recurrent layer with fused gate weights in the order input, forget,
/// cell, output.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub inputs: usize,
    pub hidden: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmLayer {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, inputs: usize, hidden: usize) -> Self {
        let w_ih = b.xavier(format!("{name}.w_ih"), vec![inputs, 4 * hidden], inputs, 4 * hidden);
        let w_hh = b.xavier(format!("{name}.w_hh"), vec![hidden, 4 * hidden], hidden, 4 * hidden);
        // Forget-gate bias starts at 1 so early gradients flow through time.
        let mut bias = vec![T::ZERO; 4 * hidden];
        bias[hidden..2 * hidden].fill(T::ONE);
        let bias = b.params.add(
            format!("{name}.bias"),
            Tensor::new(vec![4 * hidden], bias).expect("bias shape"),
            ParamKind::Weight,
        );
        Self {
            inputs,
            hidden,
            w_ih,
            w_hh,
            bias,
        }
    }

    /// Runs the layer over `steps` (each `[B × inputs]`) and returns every
    /// hidden state.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, steps: &[Var]) -> Result<Vec<Var>> {
        let Some(&first) = steps.first() else {
            return Err(Error::EmptyInput("lstm"));
        };
        let batch = s.tape.shape(first)[0];
        let (w_ih, w_hh, bias) = (s.param(self.w_ih), s.param(self.w_hh), s.param(self.bias));
        let hdim = self.hidden;
        let mut h = s.tape.constant(Tensor::zeros(vec![batch, hdim]));
        let mut c = s.tape.constant(Tensor::zeros(vec![batch, hdim]));
        let mut out = Vec::with_capacity(steps.len());
        for &x in steps {
            let gx = s.tape.matmul(x, w_ih)?;
            let gh = s.tape.matmul(h, w_hh)?;
            let g = s.tape.add(gx, gh)?;
            let g = s.tape.add_bias(g, bias)?;
            let i = s.tape.slice_cols(g, 0, hdim)?;
            let f = s.tape.slice_cols(g, hdim, hdim)?;
            let u = s.tape.slice_cols(g, 2 * hdim, hdim)?;
            let o = s.tape.slice_cols(g, 3 * hdim, hdim)?;
            let i = s.tape.sigmoid(i)?;
            let f = s.tape.sigmoid(f)?;
            let u = s.tape.tanh(u)?;
            let o = s.tape.sigmoid(o)?;
            let keep = s.tape.mul(f, c)?;
            let write = s.tape.mul(i, u)?;
            c = s.tape.add(keep, write)?;
            let tc = s.tape.tanh(c)?;
            h = s.tape.mul(o, tc)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Stacked LSTM whose last hidden state feeds a dense projection.
#[derive(Debug, Clone)]
pub struct LstmStack {
    pub in_channels: usize,
    pub layers: Vec<LstmLayer>,
    pub head: Dense,
    pub activate_head: bool,
}

impl LstmStack {
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        in_channels: usize,
        spec: LstmSpec,
        outputs: usize,
        head_name: &str,
        activate_head: bool,
    ) -> Self {
        let mut layers = Vec::with_capacity(spec.layers);
        let mut inputs = in_channels;
        for i in 0..spec.layers {
            layers.push(LstmLayer::new(b, &format!("lstm.layers.{i}"), inputs, spec.hidden));
            inputs = spec.hidden;
        }
        let head = Dense::new(b, head_name, spec.hidden, outputs);
        Self {
            in_channels,
            layers,
            head,
            activate_head,
        }
    }

    /// `x[C × B × T] -> [B × out]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::dim("lstm input", &[self.in_channels, 0, 0], &shape));
        }
        let mut steps = (0..shape[2])
            .map(|t| s.tape.time_step(x, t))
            .collect::<Result<Vec<_>>>()?;
        for layer in &self.layers {
            steps = layer.forward(s, &steps)?;
        }
        let last = *steps.last().expect("non-empty window");
        let y = self.head.forward(s, last)?;
        if self.activate_head {
            s.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Closed form: per layer `4H·(in + H) + 4H`, then `H·out + out`.
    pub fn parameter_count(in_channels: usize, spec: &LstmSpec, outputs: usize) -> usize {
        let h = spec.hidden;
        let mut total = 0;
        let mut inputs = in_channels;
        for _ in 0..spec.layers {
            total += 4 * h * (inputs + h) + 4 * h;
            inputs = h;
        }
        total + h * outputs + outputs
    }
}
