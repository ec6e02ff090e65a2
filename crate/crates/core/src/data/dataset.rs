use std::collections::HashSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Declared feature columns. The file layout is
/// `date,series_id,<categorical…>,<continuous…>,target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub categorical: Vec<String>,
    pub continuous: Vec<String>,
}

impl Schema {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["date".to_string(), "series_id".to_string()];
        h.extend(self.categorical.iter().cloned());
        h.extend(self.continuous.iter().cloned());
        h.push("target".into());
        h
    }

    fn validate(&self) -> Result<()> {
        let header = self.header();
        let mut seen = HashSet::new();
        for name in &header {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("column `{name}` declared twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub date: NaiveDate,
    pub series_id: String,
    pub cats: Vec<String>,
    pub conts: Vec<f64>,
    /// Price at the next trading date of this series.
    pub target: f64,
}

/// Rows sorted by `(series_id, date)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub schema: Schema,
    rows: Vec<Row>,
}

impl TabularDataset {
    /// Sorts rows and checks the per-series date invariant.
    pub fn new(schema: Schema, mut rows: Vec<Row>) -> Result<Self> {
        schema.validate()?;
        for (i, r) in rows.iter().enumerate() {
            if r.cats.len() != schema.categorical.len() || r.conts.len() != schema.continuous.len() {
                return Err(Error::Schema(format!("row {i} does not match the declared columns")));
            }
        }
        rows.sort_by(|a, b| (&a.series_id, a.date).cmp(&(&b.series_id, b.date)));
        if let Some(w) = rows
            .windows(2)
            .find(|w| w[0].series_id == w[1].series_id && w[0].date == w[1].date)
        {
            return Err(Error::Data(format!(
                "duplicate row for series `{}` on {}",
                w[0].series_id, w[0].date
            )));
        }
        Ok(Self { schema, rows })
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows grouped by series, each group in date order.
    pub fn series(&self) -> impl Iterator<Item = &[Row]> {
        self.rows.chunk_by(|a, b| a.series_id == b.series_id)
    }

    pub fn filter(&self, keep: impl Fn(&Row) -> bool) -> Self {
        Self {
            schema: self.schema.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.categorical.iter().position(|c| c == name)
    }
}

/// Reads a dataset. Columns are matched by name; extra columns are ignored.
/// Rows with an empty continuous value are dropped (and counted in the log).
pub fn load_csv(path: &Path, schema: &Schema) -> Result<TabularDataset> {
    schema.validate()?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Load {
            row: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let date_col = col("date")?;
    let series_col = col("series_id")?;
    let cat_cols = schema.categorical.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let cont_cols = schema.continuous.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let target_col = col("target")?;

    let mut rows = Vec::new();
    let mut dropped = 0usize;
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        // Line numbers count the header as row 1.
        let row_no = i + 2;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let fail = |message: String| Error::Load { row: row_no, message };
        let date = NaiveDate::parse_from_str(field(date_col), DATE_FORMAT)
            .map_err(|e| fail(format!("bad date `{}`: {e}", field(date_col))))?;
        let series_id = field(series_col).to_string();
        if series_id.is_empty() {
            return Err(fail("empty series_id".into()));
        }
        let cats = cat_cols
            .iter()
            .zip(&schema.categorical)
            .map(|(&c, name)| {
                let v = field(c);
                if v.is_empty() {
                    Err(fail(format!("empty categorical `{name}`")))
                } else {
                    Ok(v.to_string())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let parse = |c: usize, name: &str| -> Result<f64> {
            let v = field(c);
            let x: f64 = v.parse().map_err(|_| fail(format!("unparseable `{name}` value `{v}`")))?;
            if !x.is_finite() {
                return Err(fail(format!("non-finite `{name}` value `{v}`")));
            }
            Ok(x)
        };
        if cont_cols.iter().any(|&c| field(c).is_empty()) {
            dropped += 1;
            continue;
        }
        let conts = cont_cols
            .iter()
            .zip(&schema.continuous)
            .map(|(&c, name)| parse(c, name))
            .collect::<Result<Vec<_>>>()?;
        let target = parse(target_col, "target")?;
        if !seen.insert((series_id.clone(), date)) {
            return Err(fail(format!("duplicate (series_id, date) = ({series_id}, {date})")));
        }
        rows.push(Row {
            date,
            series_id,
            cats,
            conts,
            target,
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing continuous values");
    }
    if rows.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    TabularDataset::new(schema.clone(), rows)
}

pub fn write_csv(ds: &TabularDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(ds, std::io::BufWriter::new(file))
}

/// Floats are written in shortest round-trip form, so reading the file back
/// reproduces every value exactly.
pub fn write_csv_to<W: std::io::Write>(ds: &TabularDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ds.schema.header())?;
    for r in ds.rows() {
        let mut rec = vec![r.date.format(DATE_FORMAT).to_string(), r.series_id.clone()];
        rec.extend(r.cats.iter().cloned());
        rec.extend(r.conts.iter().map(|x| x.to_string()));
        rec.push(r.target.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
