use crate::autodiff::{Scalar, Var};
use crate::error::{Error, Result};

use super::layers::{Builder, Dense, Dropout, Embedding};
use super::session::Session;
use super::spec::ModelSpec;

/// Entity embeddings concatenated with the continuous features and passed
/// through the dense ReLU layers.
#[derive(Debug, Clone)]
pub struct Stock2VecTrunk {
    pub embeddings: Vec<Embedding>,
    pub continuous: usize,
    pub layers: Vec<(Dense, Dropout)>,
}

impl Stock2VecTrunk {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, spec: &ModelSpec) -> Self {
        let embeddings = spec
            .categorical
            .iter()
            .map(|c| Embedding::new(b, &c.name, c.vocab_size, c.dim))
            .collect();
        let mut width = spec.trunk_input_width();
        let mut layers = Vec::with_capacity(spec.dense.len());
        for (i, d) in spec.dense.iter().enumerate() {
            let name = format!("s2v.fc.{i}");
            let dense = Dense::new(b, &name, width, d.units);
            layers.push((dense, Dropout { module: name, p: d.dropout }));
            width = d.units;
        }
        Self {
            embeddings,
            continuous: spec.continuous.len(),
            layers,
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |(d, _)| d.outputs)
    }

    /// The concatenated input row `[B × (Σ dims + continuous)]`.
    pub fn input<T: Scalar>(&self, s: &mut Session<'_, T>, cats: &[Vec<usize>], conts: Var) -> Result<Var> {
        if cats.len() != self.embeddings.len() {
            return Err(Error::Schema(format!(
                "expected {} categorical columns, got {}",
                self.embeddings.len(),
                cats.len()
            )));
        }
        let cshape = s.tape.shape(conts).to_vec();
        if cshape.len() != 2 || cshape[1] != self.continuous {
            return Err(Error::dim("continuous features", &[0, self.continuous], &cshape));
        }
        let mut parts = Vec::with_capacity(cats.len() + 1);
        for (emb, idx) in self.embeddings.iter().zip(cats) {
            if idx.len() != cshape[0] {
                return Err(Error::dim("categorical column", &[cshape[0]], &[idx.len()]));
            }
            parts.push(emb.forward(s, idx)?);
        }
        parts.push(conts);
        s.tape.concat(&parts, 1)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, cats: &[Vec<usize>], conts: Var) -> Result<Var> {
        let mut h = self.input(s, cats, conts)?;
        for (dense, drop) in &self.layers {
            h = dense.forward(s, h)?;
            h = s.tape.relu(h)?;
            h = drop.forward(s, h)?;
        }
        Ok(h)
    }

    /// Closed form: `Σ (V_j + 1)·d_j` for the tables plus `Σ (w_in·w_out + w_out)`.
    pub fn parameter_count(spec: &ModelSpec) -> usize {
        let tables: usize = spec.categorical.iter().map(|c| (c.vocab_size + 1) * c.dim).sum();
        let mut width = spec.trunk_input_width();
        let mut dense = 0;
        for d in &spec.dense {
            dense += width * d.units + d.units;
            width = d.units;
        }
        tables + dense
    }
}

/// Stand-alone embedding network: trunk plus a single-output layer.
#[derive(Debug, Clone)]
pub struct Stock2VecNet {
    pub trunk: Stock2VecTrunk,
    pub out: Dense,
}

impl Stock2VecNet {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, spec: &ModelSpec) -> Self {
        let trunk = Stock2VecTrunk::new(b, spec);
        let out = Dense::new(b, "s2v.out", trunk.output_width(), 1);
        Self { trunk, out }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, cats: &[Vec<usize>], conts: Var) -> Result<Var> {
        let h = self.trunk.forward(s, cats, conts)?;
        self.out.forward(s, h)
    }
}
