use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::layers::{embedding_dim, BatchNormSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "ts-tcn")]
    TsTcn,
    #[serde(rename = "ts-lstm")]
    TsLstm,
    #[serde(rename = "stock2vec")]
    Stock2Vec,
    #[serde(rename = "lstm-stock2vec")]
    LstmStock2Vec,
    #[serde(rename = "tcn-stock2vec")]
    TcnStock2Vec,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::TsTcn,
        ModelKind::TsLstm,
        ModelKind::Stock2Vec,
        ModelKind::LstmStock2Vec,
        ModelKind::TcnStock2Vec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::TsTcn => "ts-tcn",
            ModelKind::TsLstm => "ts-lstm",
            ModelKind::Stock2Vec => "stock2vec",
            ModelKind::LstmStock2Vec => "lstm-stock2vec",
            ModelKind::TcnStock2Vec => "tcn-stock2vec",
        }
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, ModelKind::LstmStock2Vec | ModelKind::TcnStock2Vec)
    }

    pub fn uses_history(self) -> bool {
        self != ModelKind::Stock2Vec
    }

    pub fn uses_tabular(self) -> bool {
        !matches!(self, ModelKind::TsTcn | ModelKind::TsLstm)
    }

    /// The time-series-only model whose temporal module a hybrid reuses.
    pub fn temporal_source(self) -> Option<ModelKind> {
        match self {
            ModelKind::TcnStock2Vec => Some(ModelKind::TsTcn),
            ModelKind::LstmStock2Vec => Some(ModelKind::TsLstm),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalSpec {
    pub name: String,
    /// Number of categories seen in training (the unknown row is extra).
    pub vocab_size: usize,
    pub dim: usize,
}

impl CategoricalSpec {
    pub fn with_default_dim(name: impl Into<String>, vocab_size: usize) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            vocab_size,
            dim: embedding_dim(vocab_size)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseLayerSpec {
    pub units: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnSpec {
    /// Residual blocks; block `b` uses dilation `2^b` in both convolutions.
    pub blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for TcnSpec {
    fn default() -> Self {
        Self {
            blocks: 8,
            channels: 16,
            kernel: 2,
            dropout: 0.01,
        }
    }
}

impl TcnSpec {
    pub fn dilations(&self) -> impl Iterator<Item = usize> {
        (0..self.blocks).map(|b| 1usize << b)
    }

    /// `1 + Σ (k - 1)·d` over every convolution (two per block).
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations().map(|d| 2 * (self.kernel - 1) * d).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmSpec {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for LstmSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 50,
        }
    }
}

/// Declarative description of one architecture with all its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub categorical: Vec<CategoricalSpec>,
    pub continuous: Vec<String>,
    pub history_channels: usize,
    pub window: usize,
    pub dense: Vec<DenseLayerSpec>,
    pub tcn: TcnSpec,
    pub lstm: LstmSpec,
    pub feature_map: usize,
    pub head: Vec<usize>,
    pub batch_norm: BatchNormSpec,
}

impl ModelSpec {
    /// Reference hyperparameters: 1024/512 dense trunk with dropout
    /// 0.001/0.01, 8-block TCN with 16 channels and width-2 kernels, 2×50
    /// LSTM, 30-wide temporal feature map.
    pub fn new(
        kind: ModelKind,
        categorical: Vec<CategoricalSpec>,
        continuous: Vec<String>,
        history_channels: usize,
        window: usize,
    ) -> Self {
        Self {
            kind,
            categorical,
            continuous,
            history_channels,
            window,
            dense: vec![
                DenseLayerSpec {
                    units: 1024,
                    dropout: 0.001,
                },
                DenseLayerSpec {
                    units: 512,
                    dropout: 0.01,
                },
            ],
            tcn: TcnSpec::default(),
            lstm: LstmSpec::default(),
            feature_map: 30,
            head: vec![128],
            batch_norm: BatchNormSpec::default(),
        }
    }

    pub fn with_kind(&self, kind: ModelKind) -> Self {
        Self {
            kind,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Schema(m));
        if self.kind.uses_history() && (self.history_channels == 0 || self.window == 0) {
            return fail(format!("{} needs history_channels >= 1 and window >= 1", self.kind));
        }
        if self.kind.uses_tabular() {
            if self.dense.is_empty() {
                return fail("embedding network needs at least one dense layer".into());
            }
            if self.categorical.is_empty() && self.continuous.is_empty() {
                return fail("embedding network needs at least one input feature".into());
            }
        }
        for c in &self.categorical {
            if c.vocab_size == 0 || c.dim == 0 || c.dim > c.vocab_size.max(1) {
                return fail(format!(
                    "embedding `{}`: need 1 <= dim <= vocab_size, got dim {} for {} categories",
                    c.name, c.dim, c.vocab_size
                ));
            }
        }
        for d in &self.dense {
            if d.units == 0 || !(0.0..1.0).contains(&d.dropout) {
                return fail(format!("invalid dense layer {d:?}"));
            }
        }
        if self.tcn.kernel == 0 || self.tcn.channels == 0 || self.tcn.blocks == 0 {
            return fail(format!("invalid TCN configuration {:?}", self.tcn));
        }
        if self.lstm.layers == 0 || self.lstm.hidden == 0 {
            return fail(format!("invalid LSTM configuration {:?}", self.lstm));
        }
        if self.feature_map == 0 {
            return fail("feature map width must be >= 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Width of the trunk input: Σ embedding dims + continuous features.
    pub fn trunk_input_width(&self) -> usize {
        self.categorical.iter().map(|c| c.dim).sum::<usize>() + self.continuous.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_tcn_receptive_field() {
        let tcn = TcnSpec::default();
        assert_eq!(tcn.dilations().collect::<Vec<_>>(), vec![1, 2, 4, 8, 16, 32, 64, 128]);
        assert_eq!(tcn.receptive_field(), 511);
        assert!(tcn.receptive_field() >= 252);
    }

    #[test]
    fn kind_round_trips_through_strings() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("xgboost".parse::<ModelKind>().is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let spec = ModelSpec::new(ModelKind::Stock2Vec, vec![], vec!["x".into()], 1, 8);
        let mut other = spec.clone();
        assert_eq!(spec.hash(), other.hash());
        other.feature_map = 31;
        assert_ne!(spec.hash(), other.hash());
    }
}
