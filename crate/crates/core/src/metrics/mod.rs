//! Forecast error metrics (RMSE, MAE, MAPE, RMSPE), per-series and per-group
//! aggregation, and absolute-error distribution statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets with `|y| <= EPS` make the percentage metrics undefined.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub series_id: String,
    pub group: String,
    pub date: NaiveDate,
    pub actual: f64,
    pub predicted: f64,
}

impl Forecast {
    fn label(&self) -> String {
        format!("{} on {} (actual {})", self.series_id, self.date, self.actual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub rmspe: f64,
    pub count: usize,
    pub median_abs_err: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub median_abs_err: f64,
    pub iqr: f64,
}

fn check(fs: &[Forecast]) -> Result<()> {
    if fs.is_empty() {
        return Err(Error::EmptyInput("metrics"));
    }
    if let Some(f) = fs.iter().find(|f| !f.actual.is_finite() || !f.predicted.is_finite()) {
        return Err(Error::Data(format!("non-finite value in forecast {}", f.label())));
    }
    Ok(())
}

pub fn compute_metrics(fs: &[Forecast]) -> Result<MetricReport> {
    check(fs)?;
    if let Some(f) = fs.iter().find(|f| f.actual.abs() <= EPS) {
        return Err(Error::PercentageMetric(f.label()));
    }
    let h = fs.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut ape = 0.0;
    let mut spe = 0.0;
    for f in fs {
        let e = f.actual - f.predicted;
        let pe = e / f.actual;
        se += e * e;
        ae += e.abs();
        ape += pe.abs();
        spe += pe * pe;
    }
    let dist = error_distribution(fs)?;
    Ok(MetricReport {
        rmse: (se / h).sqrt(),
        mae: ae / h,
        mape: 100.0 * ape / h,
        rmspe: 100.0 * (spe / h).sqrt(),
        count: fs.len(),
        median_abs_err: dist.median_abs_err,
        iqr: dist.iqr,
    })
}

/// Linear-interpolation (type 7) quantile of ascending `sorted` values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn error_distribution(fs: &[Forecast]) -> Result<ErrorDistribution> {
    check(fs)?;
    let mut errs: Vec<f64> = fs.iter().map(|f| (f.actual - f.predicted).abs()).collect();
    errs.sort_by(f64::total_cmp);
    Ok(ErrorDistribution {
        median_abs_err: quantile(&errs, 0.5),
        iqr: quantile(&errs, 0.75) - quantile(&errs, 0.25),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Series,
    Group,
}

/// Metrics computed separately over each key's records.
pub fn aggregate(fs: &[Forecast], by: GroupBy) -> Result<BTreeMap<String, MetricReport>> {
    let mut groups: BTreeMap<String, Vec<Forecast>> = BTreeMap::new();
    for f in fs {
        let key = match by {
            GroupBy::Series => &f.series_id,
            GroupBy::Group => &f.group,
        };
        groups.entry(key.clone()).or_default().push(f.clone());
    }
    groups
        .into_iter()
        .map(|(k, v)| compute_metrics(&v).map(|r| (k, r)))
        .collect()
}

pub const REPORT_HEADER: [&str; 8] = ["key", "rmse", "mae", "mape", "rmspe", "H", "median_abs_err", "iqr"];

pub fn write_report_csv<W: std::io::Write>(rows: &[(String, MetricReport)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_HEADER)?;
    for (key, r) in rows {
        w.write_record([
            key.clone(),
            r.rmse.to_string(),
            r.mae.to_string(),
            r.mape.to_string(),
            r.rmspe.to_string(),
            r.count.to_string(),
            r.median_abs_err.to_string(),
            r.iqr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report output>", e))?;
    Ok(())
}

/// Fixed-width text table, one row per key.
pub fn format_table(title: &str, rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(3).max(3);
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:<width$}  {:>10}  {:>10}  {:>8}  {:>8}  {:>6}  {:>14}",
        "key", "RMSE", "MAE", "MAPE", "RMSPE", "H", "median (IQR)"
    );
    for (k, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.4}  {:>10.4}  {:>8.3}  {:>8.3}  {:>6}  {:>6.3} ({:.3})",
            k, r.rmse, r.mae, r.mape, r.rmspe, r.count, r.median_abs_err, r.iqr
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc(pairs: &[(f64, f64)]) -> Vec<Forecast> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(y, p))| Forecast {
                series_id: format!("S{}", i % 2),
                group: "G".into(),
                date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i as u64),
                actual: y,
                predicted: p,
            })
            .collect()
    }

    #[test]
    fn hand_examples() {
        let r = compute_metrics(&fc(&[(100.0, 90.0), (100.0, 110.0)])).unwrap();
        assert_eq!((r.rmse, r.mae, r.mape, r.rmspe), (10.0, 10.0, 10.0, 10.0));
        let r = compute_metrics(&fc(&[(2.0, 1.0)])).unwrap();
        assert_eq!((r.rmse, r.mae, r.mape, r.rmspe), (1.0, 1.0, 50.0, 50.0));
        let r = compute_metrics(&fc(&[(3.0, 3.0), (-7.0, -7.0)])).unwrap();
        assert_eq!((r.rmse, r.mae, r.mape, r.rmspe), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_target_names_the_record() {
        match compute_metrics(&fc(&[(1.0, 1.0), (0.0, 0.5)])) {
            Err(Error::PercentageMetric(m)) => assert!(m.contains("S1") && m.contains("2020-01-02")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(compute_metrics(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn quantile_examples() {
        let d = error_distribution(&fc(&[(1.0, 0.0), (1.0, 2.0), (1.0, 0.0)])).unwrap();
        assert_eq!((d.median_abs_err, d.iqr), (1.0, 0.0));
        let d = error_distribution(&fc(&[(5.0, 5.0), (5.0, 4.0), (5.0, 7.0), (5.0, 2.0)])).unwrap();
        assert_eq!((d.median_abs_err, d.iqr), (1.5, 1.5));
    }

    #[test]
    fn aggregation_partitions_records() {
        let mut fs = fc(&[(1.0, 1.0), (2.0, 3.0), (4.0, 4.0), (5.0, 1.0)]);
        fs[1].group = "H".into();
        fs[3].group = "H".into();
        let by_group = aggregate(&fs, GroupBy::Group).unwrap();
        assert_eq!(by_group["G"].rmse, 0.0);
        assert!(by_group["H"].rmse > 0.0);
        assert_eq!(by_group.values().map(|r| r.count).sum::<usize>(), fs.len());
        let single = aggregate(&fc(&[(1.0, 2.0), (3.0, 1.0)]), GroupBy::Group).unwrap();
        assert_eq!(single["G"], compute_metrics(&fc(&[(1.0, 2.0), (3.0, 1.0)])).unwrap());
    }

    #[test]
    fn csv_and_table_render() {
        let r = compute_metrics(&fc(&[(100.0, 90.0), (100.0, 110.0)])).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&[("all".into(), r)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "key,rmse,mae,mape,rmspe,H,median_abs_err,iqr\nall,10,10,10,10,2,10,0\n");
        assert!(format_table("Test", &[("all".into(), r)]).contains("10.0000"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn forecasts() -> impl Strategy<Value = Vec<(f64, f64)>> {
            prop::collection::vec(
                ((0.01f64..1e3).prop_flat_map(|m| (Just(m), any::<bool>())), -1e3f64..1e3)
                    .prop_map(|((m, neg), p)| (if neg { -m } else { m }, p)),
                1..50,
            )
        }

        proptest! {
            #[test]
            fn root_means_dominate_plain_means(pairs in forecasts()) {
                let r = compute_metrics(&fc(&pairs)).unwrap();
                prop_assert!(r.rmse >= r.mae * (1.0 - 1e-12));
                prop_assert!(r.rmspe >= r.mape * (1.0 - 1e-12));
                prop_assert!(r.iqr >= 0.0 && r.median_abs_err >= 0.0);
                prop_assert_eq!(r.count, pairs.len());
            }

            #[test]
            fn percentage_metrics_ignore_scale(pairs in forecasts(), k in 0.1f64..100.0) {
                let a = compute_metrics(&fc(&pairs)).unwrap();
                let scaled: Vec<_> = pairs.iter().map(|&(y, p)| (y * k, p * k)).collect();
                let b = compute_metrics(&fc(&scaled)).unwrap();
                prop_assert!((a.mape - b.mape).abs() <= 1e-9 * a.mape.max(1.0));
                prop_assert!((a.rmspe - b.rmspe).abs() <= 1e-9 * a.rmspe.max(1.0));
                prop_assert!((a.rmse * k - b.rmse).abs() <= 1e-9 * b.rmse.max(1.0));
            }

            #[test]
            fn group_counts_partition_the_records(pairs in forecasts()) {
                let agg = aggregate(&fc(&pairs), GroupBy::Series).unwrap();
                prop_assert_eq!(agg.values().map(|r| r.count).sum::<usize>(), pairs.len());
            }
        }
    }
}
