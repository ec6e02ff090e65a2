//! Layers, architectures and the parameter store they share.
//!
//! Every array a model owns lives in one [`ParamSet`] under a dotted name
//! (`s2v.emb.symbol`, `tcn.blocks.3.conv1.weight`, …); module prefixes are
//! what transfer and freezing operate on.

mod hybrid;
mod layers;
mod lstm;
mod model;
mod params;
mod session;
mod spec;
mod stock2vec;
mod tcn;

pub use hybrid::{HybridNet, Temporal};
#[cfg(test)]
pub(crate) use layers::test_builder as layers_builder;
pub use layers::{embedding_dim, BatchNorm1d, BatchNormSpec, CausalConv1d, Dense, Dropout, Embedding, ResidualBlock};
pub use lstm::{LstmLayer, LstmStack};
pub use model::{transfer_plan, Batch, Model, Network};
pub use params::{under_prefix, ParamEntry, ParamId, ParamKind, ParamSet};
pub use session::Session;
pub use spec::{CategoricalSpec, DenseLayerSpec, LstmSpec, ModelKind, ModelSpec, TcnSpec};
pub use stock2vec::{Stock2VecNet, Stock2VecTrunk};
pub use tcn::TcnStack;

#[cfg(test)]
mod tests;
