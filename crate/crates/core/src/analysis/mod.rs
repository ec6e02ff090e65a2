//! Analysis of learned embedding tables: extraction from a trained model,
//! principal components with explained-variance ratios, and cosine
//! nearest-neighbour queries. Results export as plot-ready CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{Scalar, Tensor};
use crate::data::Preprocessor;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::training::Checkpoint;

mod jacobi;

pub use jacobi::{symmetric_eigen, SymmetricEigen, JACOBI_MAX_SWEEPS, JACOBI_TOL};

/// Number of neighbours listed per label unless asked otherwise.
pub const DEFAULT_NEIGHBORS: usize = 6;

/// Rows of one embedding table with their category labels, in vocabulary
/// order. The reserved unknown-category row is not included.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub feature: String,
    pub labels: Vec<String>,
    /// `[labels.len() × dim]`.
    pub vectors: Tensor<f64>,
}

impl EmbeddingMatrix {
    pub fn new(feature: impl Into<String>, labels: Vec<String>, vectors: Tensor<f64>) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] != labels.len() {
            return Err(Error::dim("embedding matrix", vectors.shape(), &[labels.len()]));
        }
        let mut sorted: Vec<&String> = labels.iter().collect();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!("duplicate embedding label `{}`", w[0])));
        }
        Ok(Self {
            feature: feature.into(),
            labels,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Copy with every row scaled to unit Euclidean norm.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.vectors.numel());
        for (i, label) in self.labels.iter().enumerate() {
            let row = self.row(i);
            let norm = norm(row);
            if norm == 0.0 {
                return Err(Error::DegenerateVector(label.clone()));
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        Ok(Self {
            feature: self.feature.clone(),
            labels: self.labels.clone(),
            vectors: Tensor::new(self.vectors.shape().to_vec(), data)?,
        })
    }
}

/// Names of the categorical features that own an embedding table.
pub fn embedding_features<T: Scalar>(model: &Model<T>) -> Vec<String> {
    model
        .params
        .iter()
        .filter_map(|(_, e)| e.name.strip_prefix("s2v.emb.").map(str::to_string))
        .collect()
}

/// Reads the embedding table of `feature` from `model`. Labels come from the
/// fitted vocabulary when one is given, otherwise they are row indices.
pub fn embeddings_from_model<T: Scalar>(
    model: &Model<T>,
    preprocessor: Option<&Preprocessor>,
    feature: &str,
) -> Result<EmbeddingMatrix> {
    let entry = model
        .params
        .by_name(&format!("s2v.emb.{feature}"))
        .ok_or_else(|| Error::Lookup {
            feature: feature.to_string(),
            available: embedding_features(model),
        })?;
    let (rows, dim) = (entry.tensor.shape()[0], entry.tensor.shape()[1]);
    let known = rows - 1;
    let labels = match preprocessor.and_then(|p| p.vocabs.iter().find(|v| v.name == feature)) {
        Some(vocab) if vocab.len() == known => vocab.values.clone(),
        Some(vocab) => {
            return Err(Error::Schema(format!(
                "vocabulary `{feature}` has {} entries but the embedding has {known} rows",
                vocab.len()
            )))
        }
        None => (0..known).map(|i| i.to_string()).collect(),
    };
    let data = entry.tensor.data()[..known * dim].iter().map(|v| v.to_f64()).collect();
    EmbeddingMatrix::new(feature, labels, Tensor::new(vec![known, dim], data)?)
}

pub fn extract_embeddings<T: Scalar>(checkpoint: &Checkpoint<T>, feature: &str) -> Result<EmbeddingMatrix> {
    embeddings_from_model(&checkpoint.model, checkpoint.preprocessor.as_ref(), feature)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Column means removed before the decomposition.
    pub mean: Vec<f64>,
    /// `[D × D]`; row `j` is the `j`-th principal axis.
    pub components: Tensor<f64>,
    /// Sample-covariance eigenvalues, descending (tiny negatives clamped to 0).
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// `[n × D]` coordinates of the centered rows on every axis.
    pub projections: Tensor<f64>,
}

impl PcaResult {
    pub fn cumulative_ratio(&self) -> Vec<f64> {
        self.explained_variance_ratio
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect()
    }
}

/// Principal component analysis of the rows of `em`: the sample covariance
/// (divisor `n - 1`) of the centered rows is diagonalized by cyclic Jacobi
/// rotations. Each axis is signed so that its largest-magnitude entry is
/// positive.
pub fn pca(em: &EmbeddingMatrix) -> Result<PcaResult> {
    let (n, d) = (em.len(), em.dim());
    if n < 2 {
        return Err(Error::Contract(format!("PCA needs at least 2 rows, got {n}")));
    }
    let x = em.vectors.data();
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<f64> = (0..n * d).map(|k| x[k] - mean[k % d]).collect();
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let s = (0..n).map(|i| centered[i * d + a] * centered[i * d + b]).sum::<f64>() / (n - 1) as f64;
            cov[a * d + b] = s;
            cov[b * d + a] = s;
        }
    }
    let eig = symmetric_eigen(&cov, d)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.values[b].total_cmp(&eig.values[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(d * d);
    let mut eigenvalues = Vec::with_capacity(d);
    for &j in &order {
        let mut axis: Vec<f64> = (0..d).map(|r| eig.vectors[r * d + j]).collect();
        let lead = axis
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > axis[best].abs() { i } else { best });
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.extend(axis);
        eigenvalues.push(eig.values[j].max(0.0));
    }
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric("embedding rows have zero total variance".into()));
    }
    let explained_variance_ratio = eigenvalues.iter().map(|v| v / total).collect();
    let mut projections = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for c in 0..d {
            projections.push(dot(row, &components[c * d..(c + 1) * d]));
        }
    }
    Ok(PcaResult {
        mean,
        components: Tensor::new(vec![d, d], components)?,
        eigenvalues,
        explained_variance_ratio,
        projections: Tensor::new(vec![n, d], projections)?,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `1 - u·v / (‖u‖‖v‖)`. Symmetric in its arguments bit for bit.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Option<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    Some(1.0 - dot(u, v) / (nu * nv))
}

/// The `k` labels closest to `label` in cosine distance, ascending, with ties
/// broken by label. The query itself is excluded.
pub fn nearest_neighbors(em: &EmbeddingMatrix, label: &str, k: usize) -> Result<Vec<(String, f64)>> {
    let q = em
        .position(label)
        .ok_or_else(|| Error::Contract(format!("label `{label}` is not in embedding `{}`", em.feature)))?;
    if k >= em.len() {
        return Err(Error::Contract(format!(
            "asked for {k} neighbours among {} labels",
            em.len()
        )));
    }
    let query = em.row(q);
    if norm(query) == 0.0 {
        return Err(Error::DegenerateVector(label.to_string()));
    }
    let mut out = Vec::with_capacity(em.len() - 1);
    for (i, other) in em.labels.iter().enumerate() {
        if i == q {
            continue;
        }
        let d = cosine_distance(query, em.row(i)).ok_or_else(|| Error::DegenerateVector(other.clone()))?;
        out.push((other.clone(), d));
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(k);
    Ok(out)
}

/// Neighbour lists for every label, in label order.
pub type NeighborTable = Vec<(String, Vec<(String, f64)>)>;

pub fn all_neighbors(em: &EmbeddingMatrix, k: usize) -> Result<NeighborTable> {
    em.labels
        .iter()
        .map(|l| Ok((l.clone(), nearest_neighbors(em, l, k)?)))
        .collect()
}

/// Average over labels of the fraction of neighbours that share the label's
/// group. Labels without a known group are skipped.
pub fn group_purity(table: &NeighborTable, groups: &BTreeMap<String, String>) -> Option<f64> {
    let mut scores = Vec::new();
    for (label, neighbors) in table {
        let Some(g) = groups.get(label) else { continue };
        if neighbors.is_empty() {
            continue;
        }
        let same = neighbors.iter().filter(|(n, _)| groups.get(n) == Some(g)).count();
        scores.push(same as f64 / neighbors.len() as f64);
    }
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// One line per label: `label: n1 n2 … nk`.
pub fn format_neighbors(table: &NeighborTable) -> String {
    let mut out = String::new();
    for (label, neighbors) in table {
        let names: Vec<&str> = neighbors.iter().map(|(n, _)| n.as_str()).collect();
        let _ = writeln!(out, "{label}: {}", names.join(" "));
    }
    out
}

/// Everything the analysis command produces for one embedding.
#[derive(Debug, Clone)]
pub struct EmbeddingReport {
    pub embeddings: EmbeddingMatrix,
    pub pca: PcaResult,
    pub neighbors: NeighborTable,
}

pub fn analyze(em: EmbeddingMatrix, k: usize) -> Result<EmbeddingReport> {
    let pca = pca(&em)?;
    let neighbors = all_neighbors(&em, k)?;
    Ok(EmbeddingReport {
        embeddings: em,
        pca,
        neighbors,
    })
}

pub const PROJECTIONS_FILE: &str = "projections.csv";
pub const VARIANCE_FILE: &str = "variance.csv";
pub const NEIGHBORS_FILE: &str = "neighbors.csv";

/// Writes `projections.csv` (label, group, pc1..pcD), `variance.csv`
/// (component, ratio, cumulative) and `neighbors.csv` (label, rank,
/// neighbor, distance) into `dir`. `groups` fills the group column; unknown
/// labels get an empty group.
pub fn export_report(
    report: &EmbeddingReport,
    groups: Option<&BTreeMap<String, String>>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let em = &report.embeddings;
    let d = em.dim();

    let projections = dir.join(PROJECTIONS_FILE);
    let mut w = csv_writer(&projections)?;
    let mut header = vec!["label".to_string(), "group".to_string()];
    header.extend((1..=d).map(|c| format!("pc{c}")));
    w.write_record(&header)?;
    for (i, label) in em.labels.iter().enumerate() {
        let group = groups.and_then(|g| g.get(label)).cloned().unwrap_or_default();
        let mut rec = vec![label.clone(), group];
        rec.extend(report.pca.projections.data()[i * d..(i + 1) * d].iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    flush(w, &projections)?;

    let variance = dir.join(VARIANCE_FILE);
    let mut w = csv_writer(&variance)?;
    w.write_record(["component", "ratio", "cumulative"])?;
    for (c, (r, cum)) in report
        .pca
        .explained_variance_ratio
        .iter()
        .zip(report.pca.cumulative_ratio())
        .enumerate()
    {
        w.write_record([format!("pc{}", c + 1), r.to_string(), cum.to_string()])?;
    }
    flush(w, &variance)?;

    let neighbors = dir.join(NEIGHBORS_FILE);
    let mut w = csv_writer(&neighbors)?;
    w.write_record(["label", "rank", "neighbor", "distance"])?;
    for (label, list) in &report.neighbors {
        for (rank, (n, dist)) in list.iter().enumerate() {
            w.write_record([label.clone(), (rank + 1).to_string(), n.clone(), dist.to_string()])?;
        }
    }
    flush(w, &neighbors)?;

    Ok(vec![projections, variance, neighbors])
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}
