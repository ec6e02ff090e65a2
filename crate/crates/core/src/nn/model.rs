use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::sub_seed;

use super::hybrid::{HybridNet, Temporal};
use super::layers::Builder;
use super::lstm::LstmStack;
use super::params::ParamSet;
use super::session::Session;
use super::spec::{ModelKind, ModelSpec};
use super::stock2vec::{Stock2VecNet, Stock2VecTrunk};
use super::tcn::TcnStack;

/// Model inputs for one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// One index column per categorical feature, each of batch length.
    pub cats: Vec<Vec<usize>>,
    /// `[B × continuous]`.
    pub conts: Tensor<T>,
    /// `[channels × B × window]`.
    pub history: Tensor<T>,
    /// Scaled targets, length `B`.
    pub targets: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum Network {
    Tcn(TcnStack),
    Lstm(LstmStack),
    Stock2Vec(Stock2VecNet),
    Hybrid(HybridNet),
}

/// A network together with the parameters it owns.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
    pub net: Network,
}

/// Which modules a hybrid takes from which pretrained model.
pub fn transfer_plan(kind: ModelKind) -> Vec<(ModelKind, Vec<String>)> {
    let s2v = (ModelKind::Stock2Vec, vec!["s2v.emb".to_string(), "s2v.fc".to_string()]);
    match kind {
        ModelKind::TcnStock2Vec => vec![s2v, (ModelKind::TsTcn, vec!["tcn.blocks".to_string()])],
        ModelKind::LstmStock2Vec => vec![s2v, (ModelKind::TsLstm, vec!["lstm.layers".to_string()])],
        _ => Vec::new(),
    }
}

impl<T: Scalar> Model<T> {
    /// Builds the network with parameters initialized from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, "init")),
        };
        let c = spec.history_channels;
        let bn = spec.batch_norm;
        let net = match spec.kind {
            ModelKind::TsTcn => Network::Tcn(TcnStack::new(&mut b, c, spec.tcn, bn, 1, "tcn.out", false)),
            ModelKind::TsLstm => Network::Lstm(LstmStack::new(&mut b, c, spec.lstm, 1, "lstm.out", false)),
            ModelKind::Stock2Vec => Network::Stock2Vec(Stock2VecNet::new(&mut b, &spec)),
            ModelKind::TcnStock2Vec => {
                let t = TcnStack::new(&mut b, c, spec.tcn, bn, spec.feature_map, "tcn.proj", true);
                Network::Hybrid(HybridNet::new(&mut b, &spec, Temporal::Tcn(t)))
            }
            ModelKind::LstmStock2Vec => {
                let l = LstmStack::new(&mut b, c, spec.lstm, spec.feature_map, "lstm.proj", true);
                Network::Hybrid(HybridNet::new(&mut b, &spec, Temporal::Lstm(l)))
            }
        };
        Ok(Self { spec, params, net })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_weights()
    }

    /// Closed-form parameter count for a spec, independent of any instance.
    pub fn expected_parameters(spec: &ModelSpec) -> usize {
        let c = spec.history_channels;
        match spec.kind {
            ModelKind::TsTcn => TcnStack::parameter_count(c, &spec.tcn, 1),
            ModelKind::TsLstm => LstmStack::parameter_count(c, &spec.lstm, 1),
            ModelKind::Stock2Vec => {
                let last = spec.dense.last().map_or(0, |d| d.units);
                Stock2VecTrunk::parameter_count(spec) + last + 1
            }
            ModelKind::TcnStock2Vec => {
                Stock2VecTrunk::parameter_count(spec)
                    + TcnStack::parameter_count(c, &spec.tcn, spec.feature_map)
                    + HybridNet::head_parameter_count(spec)
            }
            ModelKind::LstmStock2Vec => {
                Stock2VecTrunk::parameter_count(spec)
                    + LstmStack::parameter_count(c, &spec.lstm, spec.feature_map)
                    + HybridNet::head_parameter_count(spec)
            }
        }
    }

    /// Forward pass producing `[B × 1]` predictions.
    pub fn forward(&self, s: &mut Session<'_, T>, batch: &Batch<T>) -> Result<Var> {
        let b = batch.len();
        let history = || -> Result<Tensor<T>> {
            let shape = batch.history.shape();
            let want = [self.spec.history_channels, b, self.spec.window];
            if shape != want {
                return Err(Error::dim("history", &want, shape));
            }
            Ok(batch.history.clone())
        };
        let y = match &self.net {
            Network::Tcn(t) => {
                let h = s.tape.constant(history()?);
                t.forward(s, h)?
            }
            Network::Lstm(l) => {
                let h = s.tape.constant(history()?);
                l.forward(s, h)?
            }
            Network::Stock2Vec(n) => {
                let c = s.tape.constant(batch.conts.clone());
                n.forward(s, &batch.cats, c)?
            }
            Network::Hybrid(n) => {
                let c = s.tape.constant(batch.conts.clone());
                let h = s.tape.constant(history()?);
                n.forward(s, &batch.cats, c, h)?
            }
        };
        if s.tape.shape(y) != [b, 1] {
            return Err(Error::dim("prediction", &[b, 1], s.tape.shape(y)));
        }
        Ok(y)
    }

    /// Evaluation-mode predictions.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<T>> {
        let mut s = Session::eval(&self.params);
        let y = self.forward(&mut s, batch)?;
        Ok(s.tape.value(y).data().to_vec())
    }

    /// Copies every array under `prefixes` from `source` (by name). Names and
    /// shapes must match exactly. Returns the number of arrays copied.
    pub fn transfer_from(&mut self, source: &Model<T>, prefixes: &[String]) -> Result<usize> {
        let ids = self.params.ids_under(prefixes);
        if ids.is_empty() {
            return Err(Error::Protocol(format!("no parameters under {prefixes:?}")));
        }
        for &id in &ids {
            let name = self.params.get(id).name.clone();
            let src = source.params.by_name(&name).ok_or_else(|| {
                Error::Protocol(format!("pretrained {} model has no `{name}`", source.kind()))
            })?;
            let dst = self.params.tensor_mut(id);
            if src.tensor.shape() != dst.shape() {
                return Err(Error::Protocol(format!(
                    "shape mismatch for `{name}`: pretrained {:?}, target {:?}",
                    src.tensor.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(ids.len())
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamSet::new();
        for (_, e) in self.params.iter() {
            params.add(e.name.clone(), e.tensor.cast(), e.kind);
        }
        Model {
            spec: self.spec.clone(),
            params,
            net: self.net.clone(),
        }
    }
}
