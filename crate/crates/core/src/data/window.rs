use chrono::NaiveDate;

use crate::error::{Error, Result};

use super::dataset::TabularDataset;

/// One forecasting example before encoding.
///
/// The row dated `date` carries the features observed on that date and the
/// price of the following trading date as its target. `history` holds the
/// series' own prices up to and including `date`, i.e. ending the trading day
/// before the target date.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub series_id: String,
    pub date: NaiveDate,
    /// Date of the last history value (always equal to `date`).
    pub history_end: NaiveDate,
    pub cats: Vec<String>,
    pub conts: Vec<f64>,
    /// `window` prices, oldest first.
    pub history: Vec<f64>,
    /// Number of left-padded positions (0 for a full window).
    pub padded: usize,
    pub target: f64,
}

impl WindowedSample {
    pub fn is_padded(&self) -> bool {
        self.padded > 0
    }
}

/// Builds one sample per row that has at least one earlier row in its series.
///
/// The price on row `j`'s date is row `j-1`'s target, so a window of `window`
/// prices needs `window` earlier rows; shorter histories are left-padded with
/// the series' earliest price and marked as padded.
pub fn make_windows(ds: &TabularDataset, window: usize) -> Result<Vec<WindowedSample>> {
    if window == 0 {
        return Err(Error::Window("window length must be >= 1".into()));
    }
    let mut out = Vec::new();
    for rows in ds.series() {
        let prices: Vec<f64> = rows.iter().map(|r| r.target).collect();
        for j in 1..rows.len() {
            let start = j.saturating_sub(window);
            let have = &prices[start..j];
            let padded = window - have.len();
            let mut history = vec![prices[0]; padded];
            history.extend_from_slice(have);
            let r = &rows[j];
            out.push(WindowedSample {
                series_id: r.series_id.clone(),
                date: r.date,
                history_end: r.date,
                cats: r.cats.clone(),
                conts: r.conts.clone(),
                history,
                padded,
                target: r.target,
            });
        }
    }
    Ok(out)
}
