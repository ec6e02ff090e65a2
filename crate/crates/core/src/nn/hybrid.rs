use crate::autodiff::{Scalar, Var};
use crate::error::Result;

use super::layers::{Builder, Dense};
use super::lstm::LstmStack;
use super::session::Session;
use super::spec::ModelSpec;
use super::stock2vec::Stock2VecTrunk;
use super::tcn::TcnStack;

#[derive(Debug, Clone)]
pub enum Temporal {
    Tcn(TcnStack),
    Lstm(LstmStack),
}

impl Temporal {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, history: Var) -> Result<Var> {
        match self {
            Temporal::Tcn(t) => t.forward(s, history),
            Temporal::Lstm(l) => l.forward(s, history),
        }
    }
}

/// Embedding trunk and temporal feature map concatenated, then a small dense
/// head down to one output.
#[derive(Debug, Clone)]
pub struct HybridNet {
    pub trunk: Stock2VecTrunk,
    pub temporal: Temporal,
    pub head: Vec<Dense>,
    pub out: Dense,
}

impl HybridNet {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, spec: &ModelSpec, temporal: Temporal) -> Self {
        let trunk = Stock2VecTrunk::new(b, spec);
        let mut width = trunk.output_width() + spec.feature_map;
        let mut head = Vec::with_capacity(spec.head.len());
        for (i, &units) in spec.head.iter().enumerate() {
            head.push(Dense::new(b, &format!("head.fc.{i}"), width, units));
            width = units;
        }
        let out = Dense::new(b, "head.out", width, 1);
        Self {
            trunk,
            temporal,
            head,
            out,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        cats: &[Vec<usize>],
        conts: Var,
        history: Var,
    ) -> Result<Var> {
        let a = self.trunk.forward(s, cats, conts)?;
        let b = self.temporal.forward(s, history)?;
        let mut h = s.tape.concat(&[a, b], 1)?;
        for dense in &self.head {
            h = dense.forward(s, h)?;
            h = s.tape.relu(h)?;
        }
        self.out.forward(s, h)
    }

    /// Closed form for the head: `Σ (w_in·w_out + w_out)` starting from
    /// `trunk width + feature map`, ending in one output.
    pub fn head_parameter_count(spec: &ModelSpec) -> usize {
        let mut width = spec.dense.last().map_or(0, |d| d.units) + spec.feature_map;
        let mut total = 0;
        for &u in spec.head.iter().chain(std::iter::once(&1)) {
            total += width * u + u;
            width = u;
        }
        total
    }
}
