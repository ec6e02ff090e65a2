use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::Result;

use super::params::{under_prefix, ParamId, ParamKind, ParamSet};

/// One forward pass over a read-only parameter set.
///
/// Parameters are bound to tape leaves lazily. A parameter receives a
/// gradient only if it is a weight, the session is in training mode (or was
/// opened with [`Session::eval_with_gradients`]) and the parameter is not
/// under a frozen prefix. Frozen modules also run in
/// evaluation mode (no dropout, running batch-norm statistics), so a frozen
/// stage leaves them bit-identical.
pub struct Session<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    differentiable: bool,
    frozen: Vec<String>,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Vec<T>)>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn eval(params: &'p ParamSet<T>) -> Self {
        Self::new(params, false, false, 0)
    }

    pub fn train(params: &'p ParamSet<T>, dropout_seed: u64) -> Self {
        Self::new(params, true, true, dropout_seed)
    }

    /// Evaluation behaviour (no dropout, running batch-norm statistics) with
    /// weights still recorded as differentiable leaves, for gradient checks
    /// of the deployed function.
    pub fn eval_with_gradients(params: &'p ParamSet<T>) -> Self {
        Self::new(params, false, true, 0)
    }

    fn new(params: &'p ParamSet<T>, training: bool, differentiable: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            training,
            differentiable,
            frozen: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    pub fn with_frozen(mut self, prefixes: &[String]) -> Self {
        self.frozen = prefixes.to_vec();
        self
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| under_prefix(name, p))
    }

    /// Whether the module at `prefix` runs with training behaviour.
    pub fn is_training(&self, prefix: &str) -> bool {
        self.training && !self.is_frozen(prefix)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.params.get(id);
        let trainable =
            self.differentiable && entry.kind == ParamKind::Weight && !self.is_frozen(&entry.name);
        let v = if trainable {
            self.tape.leaf(entry.tensor.clone().with_grad())
        } else {
            self.tape.constant(entry.tensor.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted-dropout mask: kept entries are scaled by `1 / (1 - p)`.
    ///
    /// Dropped positions are found by sampling the geometric gaps between
    /// them, which draws from the same i.i.d. Bernoulli law as one coin per
    /// entry but needs only about `p·len` random numbers.
    pub fn dropout_mask(&mut self, len: usize, p: f64) -> Vec<T> {
        let mut mask = vec![T::from_f64(1.0 / (1.0 - p)); len];
        if p >= 1.0 {
            mask.iter_mut().for_each(|m| *m = T::ZERO);
            return mask;
        }
        let gaps = Geometric::new(p).expect("dropout probability in (0, 1)");
        let mut pos = 0u64;
        loop {
            pos = pos.saturating_add(self.rng.sample(gaps));
            if pos >= len as u64 {
                return mask;
            }
            mask[pos as usize] = T::ZERO;
            pos += 1;
        }
    }

    pub(crate) fn record_buffer(&mut self, id: ParamId, data: Vec<T>) {
        self.buffer_updates.push((id, data));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Backpropagates `loss` and returns per-parameter gradients (indexed by
    /// [`ParamId`]); `None` for parameters that did not receive one.
    pub fn gradients(&mut self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(|g| g.to_vec())))
            .collect())
    }
}
