//! The five subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use chrono::NaiveDate;

use s2v_core::analysis::{
    analyze, embedding_features, export_report, extract_embeddings, group_purity, nearest_neighbors,
};
use s2v_core::data::{
    gen_synthetic, load_csv, make_windows, prepare, write_csv, Partition, PreparedData, Preprocessor, SyntheticConfig,
    TabularDataset,
};
use s2v_core::metrics::{aggregate, compute_metrics, format_table, write_report_csv, Forecast, GroupBy, MetricReport};
use s2v_core::nn::{Model, ModelKind};
use s2v_core::seed::sub_seed;
use s2v_core::training::{predict_scaled, run_protocol, write_epoch_log, Checkpoint, Pretrained};

use crate::config::RunConfig;
use crate::UsageError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const CONFIG_DUMP_FILE: &str = "config.toml";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const PRETRAIN_DIR: &str = "pretrain";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub struct GenArgs {
    pub series: usize,
    pub groups: usize,
    pub days: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub factor_vol: Option<f64>,
    pub seasonal_amp: Option<f64>,
    pub idio_vol: Option<f64>,
    pub ar: Option<f64>,
    pub price_spread: Option<f64>,
}

pub fn gen_synthetic_cmd(args: &GenArgs) -> anyhow::Result<()> {
    let mut cfg = SyntheticConfig::new(args.series, args.groups, args.days, args.seed);
    cfg.factor_vol = args.factor_vol.unwrap_or(cfg.factor_vol);
    cfg.seasonal_amp = args.seasonal_amp.unwrap_or(cfg.seasonal_amp);
    cfg.idio_vol = args.idio_vol.unwrap_or(cfg.idio_vol);
    cfg.ar = args.ar.unwrap_or(cfg.ar);
    cfg.price_spread = args.price_spread.unwrap_or(cfg.price_spread);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = gen_synthetic(&cfg)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_csv(&ds, &args.out)?;
    println!(
        "wrote {} rows for {} series in {} groups to {}",
        ds.len(),
        cfg.series,
        cfg.groups,
        args.out.display()
    );
    Ok(())
}

/// Flags shared by commands that read a run configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub model: Option<ModelKind>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.model {
            cfg.model = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(d) = &self.data {
            cfg.data.path = Some(d.clone());
        }
        cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
        Ok(cfg)
    }
}

fn data_path(cfg: &RunConfig) -> anyhow::Result<&Path> {
    cfg.data
        .path
        .as_deref()
        .ok_or_else(|| usage("no data file: set data.path in the config or pass --data"))
}

pub fn train_cmd(ov: &Overrides, pretrain_auto: bool) -> anyhow::Result<()> {
    let cfg = ov.resolve()?;
    let kind = cfg.model;
    let path = data_path(&cfg)?;
    if kind.is_hybrid() && !pretrain_auto {
        let missing: Vec<&str> = [("stock2vec", &cfg.pretrained.stock2vec), ("temporal", &cfg.pretrained.temporal)]
            .into_iter()
            .filter(|(_, p)| p.is_none())
            .map(|(n, _)| n)
            .collect();
        if !missing.is_empty() {
            return Err(usage(format!(
                "protocol error: {kind} starts from pretrained modules; set pretrained.{} or pass --pretrain-auto",
                missing.join(" and pretrained.")
            )));
        }
    }
    let ds = load_csv(path, &cfg.schema())?;
    let split = cfg.split_for(&ds)?;
    let data = prepare::<f32>(&ds, split, cfg.data.window)?;
    log::info!(
        "{} train / {} valid / {} test samples (valid from {}, test from {})",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        split.valid_start,
        split.test_start
    );
    create_dir(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_DUMP_FILE), cfg.effective_toml()?)?;

    let mut sources = Vec::new();
    if kind.is_hybrid() {
        let temporal_kind = kind.temporal_source().expect("hybrids have a temporal source");
        for (source_kind, configured) in [
            (ModelKind::Stock2Vec, &cfg.pretrained.stock2vec),
            (temporal_kind, &cfg.pretrained.temporal),
        ] {
            let model = match configured {
                Some(p) => load_pretrained(p, source_kind, &data.pre)?,
                None => {
                    let dir = cfg.out_dir.join(PRETRAIN_DIR).join(source_kind.as_str());
                    let seed = sub_seed(cfg.seed, &format!("pretrain/{source_kind}"));
                    train_one(&cfg, source_kind, seed, &data, &Pretrained::default(), &dir)?
                }
            };
            sources.push(model);
        }
    }
    let pretrained = Pretrained {
        stock2vec: sources.first(),
        temporal: sources.get(1),
    };
    train_one(&cfg, kind, cfg.seed, &data, &pretrained, &cfg.out_dir)?;
    Ok(())
}

fn load_pretrained(path: &Path, kind: ModelKind, pre: &Preprocessor) -> anyhow::Result<Model<f32>> {
    let ckpt = Checkpoint::<f32>::load(path, None).with_context(|| format!("loading {}", path.display()))?;
    if ckpt.model.kind() != kind {
        bail!("{} holds a {} model, expected {kind}", path.display(), ckpt.model.kind());
    }
    if ckpt.preprocessor.as_ref() != Some(pre) {
        bail!(
            "{} was fitted on different data (vocabularies, scalers or window differ)",
            path.display()
        );
    }
    Ok(ckpt.model)
}

/// Trains one architecture and writes its checkpoint and epoch log to `dir`.
pub fn train_one(
    cfg: &RunConfig,
    kind: ModelKind,
    seed: u64,
    data: &PreparedData<f32>,
    pretrained: &Pretrained<'_, f32>,
    dir: &Path,
) -> anyhow::Result<Model<f32>> {
    create_dir(dir)?;
    let spec = cfg.model_spec(kind, &data.pre)?;
    let model = Model::<f32>::new(spec, sub_seed(seed, "init"))?;
    log::info!("training {kind} ({} parameters)", model.num_parameters());
    let plan = cfg.training.plan(kind);
    let out = run_protocol(
        model,
        &plan,
        &data.train,
        &data.valid,
        pretrained,
        sub_seed(seed, "train"),
        cfg.training.record_wall_clock,
    )?;
    write_epoch_log(&out.report, &dir.join(EPOCH_LOG_FILE))?;
    let best = out.report.best_valid();
    let ckpt = Checkpoint {
        model: out.model,
        optimizer: Some(out.optimizer),
        seed,
        best_valid: best,
        preprocessor: Some(data.pre.clone()),
    };
    let path = dir.join(CHECKPOINT_FILE);
    ckpt.save(&path)?;
    println!(
        "{kind}: best validation MSE {:.6} over {} epochs -> {}",
        best.unwrap_or(f64::NAN),
        out.report.epochs().count(),
        path.display()
    );
    Ok(ckpt.model)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(Checkpoint<f32>, Preprocessor)> {
    let ckpt = Checkpoint::<f32>::load(path, None).with_context(|| format!("loading {}", path.display()))?;
    let pre = ckpt
        .preprocessor
        .clone()
        .ok_or_else(|| anyhow!("{} carries no fitted preprocessing", path.display()))?;
    Ok((ckpt, pre))
}

/// Predictions in price units with their bookkeeping.
fn forecast(
    ckpt: &Checkpoint<f32>,
    pre: &Preprocessor,
    ds: &TabularDataset,
    keep: impl Fn(NaiveDate) -> bool,
) -> anyhow::Result<Vec<Forecast>> {
    let samples: Vec<_> = make_windows(ds, pre.window)?.into_iter().filter(|s| keep(s.date)).collect();
    if samples.is_empty() {
        bail!("no samples to predict");
    }
    let enc = pre.encode::<f32>(&samples)?;
    let scaled = predict_scaled(&ckpt.model, &enc)?;
    Ok(enc
        .meta
        .iter()
        .zip(scaled)
        .map(|(m, p)| Forecast {
            series_id: m.series_id.clone(),
            group: m.group.clone(),
            date: m.date,
            actual: m.actual,
            predicted: pre.price.inverse(p),
        })
        .collect())
}

fn write_predictions(fs: &[Forecast], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["date", "series_id", "group", "actual", "predicted"])?;
    for f in fs {
        w.write_record([
            f.date.to_string(),
            f.series_id.clone(),
            f.group.clone(),
            f.actual.to_string(),
            f.predicted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Valid,
    Test,
    All,
}

pub fn evaluate_cmd(ov: &Overrides, checkpoint: &Path, split: SplitChoice) -> anyhow::Result<()> {
    let cfg = ov.resolve()?;
    let (ckpt, pre) = load_checkpoint(checkpoint)?;
    let ds = load_csv(data_path(&cfg)?, &pre.schema)?;
    let dates = cfg.split_for(&ds)?;
    let wanted = match split {
        SplitChoice::Train => Some(Partition::Train),
        SplitChoice::Valid => Some(Partition::Valid),
        SplitChoice::Test => Some(Partition::Test),
        SplitChoice::All => None,
    };
    let forecasts = forecast(&ckpt, &pre, &ds, |d| wanted.is_none_or(|p| dates.partition(d) == p))?;
    create_dir(&cfg.out_dir)?;
    write_predictions(&forecasts, &cfg.out_dir.join(PREDICTIONS_FILE))?;
    let global = vec![("all".to_string(), compute_metrics(&forecasts)?)];
    let groups: Vec<(String, MetricReport)> = aggregate(&forecasts, GroupBy::Group)?.into_iter().collect();
    let series: Vec<(String, MetricReport)> = aggregate(&forecasts, GroupBy::Series)?.into_iter().collect();
    for (name, rows) in [("global", &global), ("group", &groups), ("series", &series)] {
        let path = cfg.out_dir.join(format!("metrics_{name}.csv"));
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_report_csv(rows, file)?;
    }
    print!("{}", format_table(&format!("{} on {} records", ckpt.model.kind(), forecasts.len()), &global));
    print!("{}", format_table("by group", &groups));
    Ok(())
}

pub fn predict_cmd(ov: &Overrides, checkpoint: &Path, from: Option<NaiveDate>, out: &Path) -> anyhow::Result<()> {
    let cfg = ov.resolve()?;
    let (ckpt, pre) = load_checkpoint(checkpoint)?;
    let ds = load_csv(data_path(&cfg)?, &pre.schema)?;
    let forecasts = forecast(&ckpt, &pre, &ds, |d| from.is_none_or(|f| d >= f))?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_predictions(&forecasts, out)?;
    println!("wrote {} predictions to {}", forecasts.len(), out.display());
    Ok(())
}

pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub feature: String,
    pub k: usize,
    pub neighbors: Option<String>,
    pub normalize: bool,
    pub group_column: String,
}

/// Label → group, read by column name from a data file that has both
/// columns (the group column need not be a model input).
fn label_groups(path: &Path, feature: &str, group_column: &str) -> anyhow::Result<Option<BTreeMap<String, String>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let (Some(f), Some(g)) = (
        headers.iter().position(|h| h == feature),
        headers.iter().position(|h| h == group_column),
    ) else {
        return Ok(None);
    };
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        out.entry(rec[f].to_string()).or_insert_with(|| rec[g].to_string());
    }
    Ok(Some(out))
}

pub fn analyze_cmd(ov: &Overrides, args: &AnalyzeArgs) -> anyhow::Result<()> {
    let cfg = ov.resolve()?;
    let (ckpt, _) = load_checkpoint(&args.checkpoint)?;
    if embedding_features(&ckpt.model).is_empty() {
        bail!(
            "a {} checkpoint has no embedding layers; analyze a stock2vec or hybrid checkpoint",
            ckpt.model.kind()
        );
    }
    let mut em = extract_embeddings(&ckpt, &args.feature)?;
    if args.normalize {
        em = em.normalized()?;
    }
    if let Some(label) = &args.neighbors {
        println!("{} nearest neighbours of {label} by cosine distance:", args.k);
        for (rank, (name, d)) in nearest_neighbors(&em, label, args.k)?.into_iter().enumerate() {
            println!("{:>3}. {name:<12} {d:.6}", rank + 1);
        }
    }
    let table_k = args.k.min(em.len().saturating_sub(1));
    if table_k < args.k {
        log::warn!("only {} `{}` categories; listing {table_k} neighbours each", em.len(), args.feature);
    }
    let report = analyze(em, table_k)?;
    let groups = match &cfg.data.path {
        Some(p) => label_groups(p, &args.feature, &args.group_column)?,
        None => None,
    };
    create_dir(&cfg.out_dir)?;
    let files = export_report(&report, groups.as_ref(), &cfg.out_dir)?;
    let ratios = &report.pca.explained_variance_ratio;
    let shown: Vec<String> = ratios.iter().take(5).map(|r| format!("{r:.4}")).collect();
    println!(
        "`{}`: {} vectors of width {}; explained variance {}",
        args.feature,
        report.embeddings.len(),
        report.embeddings.dim(),
        shown.join(" ")
    );
    if let Some(p) = groups.as_ref().and_then(|g| group_purity(&report.neighbors, g)) {
        println!("neighbour group purity: {p:.4}");
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
