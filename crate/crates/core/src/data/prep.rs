use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Batch, CategoricalSpec};

use super::dataset::{Schema, TabularDataset};
use super::split::{chrono_split, Partition, SplitDates};
use super::window::{make_windows, WindowedSample};

pub const STD_FLOOR: f64 = 1e-12;

/// Number of history channels fed to temporal models: scaled price and
/// scaled log-return.
pub const HISTORY_CHANNELS: usize = 2;

/// Category vocabulary frozen from the training split. Index `len()` is the
/// reserved unknown category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub name: String,
    pub values: Vec<String>,
}

impl Vocab {
    pub fn fit<'a>(name: &str, values: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v: Vec<String> = values.into_iter().map(str::to_string).collect();
        v.sort();
        v.dedup();
        Self {
            name: name.to_string(),
            values: v,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn unk(&self) -> usize {
        self.values.len()
    }

    pub fn index(&self, value: &str) -> usize {
        self.values
            .binary_search_by(|v| v.as_str().cmp(value))
            .unwrap_or(self.unk())
    }
}

/// Standardization `(x - mean) / std` with the population standard deviation
/// floored at 1e-12.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit a scaler on no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        })
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Log-return between consecutive prices; 0 when either price is not
/// positive.
pub fn log_return(prev: f64, next: f64) -> f64 {
    if prev > 0.0 && next > 0.0 {
        (next / prev).ln()
    } else {
        0.0
    }
}

/// Everything fitted on the training split that is needed to encode new data
/// the same way: vocabularies, feature scalers, window length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessor {
    pub schema: Schema,
    pub window: usize,
    pub vocabs: Vec<Vocab>,
    pub continuous: Vec<Scaler>,
    /// Applied to targets and to the price history channel.
    pub price: Scaler,
    pub returns: Scaler,
}

impl Preprocessor {
    pub fn fit(train: &TabularDataset, window: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if window == 0 {
            return Err(Error::Window("window length must be >= 1".into()));
        }
        let schema = train.schema.clone();
        let vocabs = schema
            .categorical
            .iter()
            .enumerate()
            .map(|(j, name)| Vocab::fit(name, train.rows().iter().map(|r| r.cats[j].as_str())))
            .collect();
        let continuous = (0..schema.continuous.len())
            .map(|j| Scaler::fit(&train.rows().iter().map(|r| r.conts[j]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let price = Scaler::fit(&train.rows().iter().map(|r| r.target).collect::<Vec<_>>())?;
        let mut rets = Vec::new();
        for rows in train.series() {
            rets.extend(rows.windows(2).map(|w| log_return(w[0].target, w[1].target)));
        }
        if rets.is_empty() {
            rets.push(0.0);
        }
        let returns = Scaler::fit(&rets)?;
        Ok(Self {
            schema,
            window,
            vocabs,
            continuous,
            price,
            returns,
        })
    }

    pub fn categorical_specs(&self) -> Result<Vec<CategoricalSpec>> {
        self.vocabs
            .iter()
            .map(|v| CategoricalSpec::with_default_dim(&v.name, v.len()))
            .collect()
    }

    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        if *schema != self.schema {
            return Err(Error::Schema(format!(
                "data columns {:?} do not match the trained columns {:?}",
                schema.header(),
                self.schema.header()
            )));
        }
        Ok(())
    }

    /// Encodes windowed samples into model inputs.
    pub fn encode<T: Scalar>(&self, samples: &[WindowedSample]) -> Result<Encoded<T>> {
        let group_col = self.schema.categorical.iter().position(|c| c == "group");
        let nc = self.schema.continuous.len();
        let w = self.window;
        let mut enc = Encoded {
            meta: Vec::with_capacity(samples.len()),
            cats: vec![Vec::with_capacity(samples.len()); self.vocabs.len()],
            conts: Vec::with_capacity(samples.len() * nc),
            continuous: nc,
            history: Vec::with_capacity(samples.len() * HISTORY_CHANNELS * w),
            window: w,
            targets: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            if s.cats.len() != self.vocabs.len() || s.conts.len() != nc {
                return Err(Error::Schema(format!("sample for `{}` has the wrong feature count", s.series_id)));
            }
            if s.history.len() != w {
                return Err(Error::Window(format!(
                    "history of length {} for a window of {w}",
                    s.history.len()
                )));
            }
            for (col, (v, c)) in enc.cats.iter_mut().zip(self.vocabs.iter().zip(&s.cats)) {
                col.push(v.index(c));
            }
            enc.conts
                .extend(s.conts.iter().zip(&self.continuous).map(|(&x, sc)| T::from_f64(sc.transform(x))));
            enc.history.extend(s.history.iter().map(|&p| T::from_f64(self.price.transform(p))));
            enc.history.push(T::from_f64(self.returns.transform(0.0)));
            enc.history.extend(
                s.history
                    .windows(2)
                    .map(|p| T::from_f64(self.returns.transform(log_return(p[0], p[1])))),
            );
            enc.targets.push(T::from_f64(self.price.transform(s.target)));
            enc.meta.push(SampleMeta {
                series_id: s.series_id.clone(),
                group: group_col.map_or_else(|| s.series_id.clone(), |g| s.cats[g].clone()),
                date: s.date,
                actual: s.target,
            });
        }
        Ok(enc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub series_id: String,
    pub group: String,
    pub date: NaiveDate,
    /// Unscaled target.
    pub actual: f64,
}

/// Encoded samples stored column-wise, ready to be sliced into batches.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub meta: Vec<SampleMeta>,
    cats: Vec<Vec<usize>>,
    conts: Vec<T>,
    continuous: usize,
    /// Per sample `[channels × window]`.
    history: Vec<T>,
    window: usize,
    pub targets: Vec<T>,
}

impl<T: Scalar> Encoded<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<T> {
        let b = idx.len();
        let (nc, w, c) = (self.continuous, self.window, HISTORY_CHANNELS);
        let cats = self.cats.iter().map(|col| idx.iter().map(|&i| col[i]).collect()).collect();
        let mut conts = Vec::with_capacity(b * nc);
        for &i in idx {
            conts.extend_from_slice(&self.conts[i * nc..(i + 1) * nc]);
        }
        let mut history = Vec::with_capacity(c * b * w);
        for ch in 0..c {
            for &i in idx {
                let base = (i * c + ch) * w;
                history.extend_from_slice(&self.history[base..base + w]);
            }
        }
        Batch {
            cats,
            conts: Tensor::new(vec![b, nc], conts).expect("conts shape"),
            history: Tensor::new(vec![c, b, w], history).expect("history shape"),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// Consecutive batches covering every sample in order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Batch<T>> + '_ {
        let all: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = all.chunks(size.max(1)).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}

/// Train / valid / test inputs plus the preprocessing fitted on train.
#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub pre: Preprocessor,
    pub train: Encoded<T>,
    pub valid: Encoded<T>,
    pub test: Encoded<T>,
}

/// Splits, fits preprocessing on the training rows and encodes windows.
/// Windows are built over the full series, so validation and test samples
/// see history from earlier partitions; each sample belongs to the partition
/// of its row date.
pub fn prepare<T: Scalar>(ds: &TabularDataset, split: SplitDates, window: usize) -> Result<PreparedData<T>> {
    let (train_rows, _, _) = chrono_split(ds, split)?;
    let pre = Preprocessor::fit(&train_rows, window)?;
    let samples = make_windows(ds, window)?;
    let pick = |p: Partition| -> Vec<WindowedSample> {
        samples.iter().filter(|s| split.partition(s.date) == p).cloned().collect()
    };
    let train = pre.encode(&pick(Partition::Train))?;
    let valid = pre.encode(&pick(Partition::Valid))?;
    let test = pre.encode(&pick(Partition::Test))?;
    for (name, e) in [("train", train.len()), ("valid", valid.len()), ("test", test.len())] {
        if e == 0 {
            return Err(Error::Split(format!("no {name} samples after windowing")));
        }
    }
    Ok(PreparedData {
        pre,
        train,
        valid,
        test,
    })
}
