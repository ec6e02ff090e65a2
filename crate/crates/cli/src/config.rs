//! Run configuration.
//!
//! One TOML file describes a run. Every key is optional and falls back to the
//! reference default; unknown keys are rejected. Dates are quoted ISO strings
//! (`valid_start = "2019-08-16"`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use s2v_core::data::{synthetic_schema, Preprocessor, Schema, SplitDates, TabularDataset};
use s2v_core::nn::{BatchNormSpec, DenseLayerSpec, LstmSpec, ModelKind, ModelSpec, TcnSpec};
use s2v_core::training::ProtocolConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub training: ProtocolConfig,
    pub pretrained: PretrainedConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Stock2Vec,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            training: ProtocolConfig::default(),
            pretrained: PretrainedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub categorical: Vec<String>,
    pub continuous: Vec<String>,
    /// History length fed to the temporal models.
    pub window: usize,
    pub valid_start: Option<NaiveDate>,
    pub test_start: Option<NaiveDate>,
    /// Used only when the split dates are not given: the last
    /// `valid_fraction + test_fraction` of the distinct dates are held out.
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let schema = synthetic_schema();
        Self {
            path: None,
            categorical: schema.categorical,
            continuous: schema.continuous,
            window: 260,
            valid_start: None,
            test_start: None,
            valid_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub dense: Vec<DenseLayerSpec>,
    pub tcn: TcnSpec,
    pub lstm: LstmSpec,
    pub feature_map: usize,
    pub head: Vec<usize>,
    pub batch_norm: BatchNormSpec,
    /// Per-feature embedding widths overriding the default rule.
    pub embedding_dims: BTreeMap<String, usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let reference = ModelSpec::new(ModelKind::Stock2Vec, vec![], vec![], 1, 1);
        Self {
            dense: reference.dense,
            tcn: reference.tcn,
            lstm: reference.lstm,
            feature_map: reference.feature_map,
            head: reference.head,
            batch_norm: reference.batch_norm,
            embedding_dims: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainedConfig {
    pub stock2vec: Option<PathBuf>,
    /// TS-TCN checkpoint for `tcn-stock2vec`, TS-LSTM for `lstm-stock2vec`.
    pub temporal: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.data;
        if d.window == 0 {
            bail!("data.window must be >= 1");
        }
        let fractions = [d.valid_fraction, d.test_fraction];
        if fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) || d.valid_fraction + d.test_fraction >= 1.0 {
            bail!("data.valid_fraction and data.test_fraction must be in (0, 1) and sum below 1");
        }
        match (d.valid_start, d.test_start) {
            (Some(v), Some(t)) if v >= t => bail!("data.valid_start {v} must precede data.test_start {t}"),
            (Some(_), None) | (None, Some(_)) => bail!("give both data.valid_start and data.test_start, or neither"),
            _ => {}
        }
        for (name, dim) in &self.network.embedding_dims {
            if !d.categorical.contains(name) {
                bail!("network.embedding_dims names `{name}`, which is not a categorical column");
            }
            if *dim == 0 {
                bail!("network.embedding_dims.{name} must be >= 1");
            }
        }
        let t = &self.training;
        if t.batch_size == 0 {
            bail!("training.batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            categorical: self.data.categorical.clone(),
            continuous: self.data.continuous.clone(),
        }
    }

    /// Split dates from the config, or from the distinct dates of `ds`.
    pub fn split_for(&self, ds: &TabularDataset) -> anyhow::Result<SplitDates> {
        if let (Some(v), Some(t)) = (self.data.valid_start, self.data.test_start) {
            return Ok(SplitDates::new(v, t)?);
        }
        let mut dates: Vec<NaiveDate> = ds.rows().iter().map(|r| r.date).collect();
        dates.sort();
        dates.dedup();
        let n = dates.len();
        let at = |fraction: f64| ((n as f64 * (1.0 - fraction)).floor() as usize).min(n.saturating_sub(1));
        let (v, t) = (at(self.data.valid_fraction + self.data.test_fraction), at(self.data.test_fraction));
        if n < 3 || v == 0 || v >= t {
            bail!("{n} distinct dates are too few to split by fractions; set data.valid_start and data.test_start");
        }
        Ok(SplitDates::new(dates[v], dates[t])?)
    }

    /// Model specification for `kind` over the fitted preprocessing.
    pub fn model_spec(&self, kind: ModelKind, pre: &Preprocessor) -> anyhow::Result<ModelSpec> {
        let mut categorical = pre.categorical_specs()?;
        for c in &mut categorical {
            if let Some(&dim) = self.network.embedding_dims.get(&c.name) {
                c.dim = dim;
            }
        }
        let n = &self.network;
        let mut spec = ModelSpec::new(
            kind,
            categorical,
            pre.schema.continuous.clone(),
            s2v_core::data::HISTORY_CHANNELS,
            pre.window,
        );
        spec.dense = n.dense.clone();
        spec.tcn = n.tcn;
        spec.lstm = n.lstm;
        spec.feature_map = n.feature_map;
        spec.head = n.head.clone();
        spec.batch_norm = n.batch_norm;
        spec.validate()?;
        Ok(spec)
    }

    /// The configuration as TOML with a provenance note on every default:
    /// `published` marks values taken from the reference method, `chosen`
    /// marks choices of this implementation. Feeding the dump back in
    /// reproduces the run.
    pub fn effective_toml(&self) -> anyhow::Result<String> {
        let defaults = keyed_lines(&toml::to_string(&RunConfig::default())?);
        let body = toml::to_string(self)?;
        let mut out = String::from("# Effective run configuration.\n");
        for (full, line) in keyed_lines(&body) {
            out.push_str(&line);
            if let Some(full) = full {
                let value = line.split_once(" = ").map(|(_, v)| v);
                let default = defaults.iter().find(|(k, _)| k.as_deref() == Some(&full));
                let default = default.and_then(|(_, l)| l.split_once(" = ")).map(|(_, v)| v);
                let note = provenance(&full);
                match (note, default) {
                    (Some(n), Some(d)) if Some(d) != value => out.push_str(&format!("  # {n}; default {d}")),
                    (Some(n), _) => out.push_str(&format!("  # {n}")),
                    (None, _) => {}
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Pairs each TOML line with the dotted key it assigns, if any.
fn keyed_lines(body: &str) -> Vec<(Option<String>, String)> {
    let mut section = String::new();
    body.lines()
        .map(|line| {
            let trimmed = line.trim();
            if trimmed.starts_with('[') {
                section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
                return (None, line.to_string());
            }
            let key = trimmed.split_once(" = ").map(|(k, _)| {
                if section.is_empty() {
                    k.to_string()
                } else {
                    format!("{section}.{k}")
                }
            });
            (key, line.to_string())
        })
        .collect()
}

fn provenance(key: &str) -> Option<&'static str> {
    Some(match key {
        "model" => "one of ts-tcn, ts-lstm, stock2vec, lstm-stock2vec, tcn-stock2vec",
        "seed" => "root seed; init, shuffle, dropout and data streams derive from it",
        "out_dir" => "chosen",
        "data.categorical" | "data.continuous" => "chosen: synthetic-market schema",
        "data.window" => "chosen: about one trading year",
        "data.valid_start" | "data.test_start" => "inclusive chronological boundaries",
        "data.valid_fraction" | "data.test_fraction" => "chosen: used when no split dates are given",
        "network.dense.units" | "network.dense.dropout" => "published: 1024/512 dense layers, dropout 0.001/0.01",
        "network.feature_map" => "published: 30-wide temporal feature map",
        "network.head" => "chosen: head width not published",
        "network.tcn.blocks" => "published: dilations 1..128",
        "network.tcn.channels" | "network.tcn.kernel" | "network.tcn.dropout" => "published",
        "network.lstm.layers" | "network.lstm.hidden" => "published: 2 layers of 50",
        "network.batch_norm.momentum" | "network.batch_norm.eps" => "chosen",
        "training.batch_size" => "published",
        "training.ts_lr" => "published: Adam at 1e-4",
        "training.s2v_max_lr" | "training.s2v_cycle_epochs" => "published: one-cycle, 3-epoch cycles",
        "training.head_max_lr" | "training.head_cycle_epochs" | "training.head_cycles" => {
            "published: frozen head stage, 2 cycles of 2 epochs"
        }
        "training.finetune_lr" | "training.finetune_epochs" => "published: 10-epoch fine-tune at 1e-5",
        "training.clip_norm" => "chosen: global-norm clipping",
        "training.ts_epochs" | "training.s2v_cycles" => "chosen: epoch budget not published",
        "training.early_stopping.patience" | "training.early_stopping.min_delta" => "chosen",
        "training.record_wall_clock" => "chosen: off keeps logs byte-reproducible",
        _ => return None,
    })
}
