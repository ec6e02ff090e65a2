use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dataset::TabularDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Valid,
    Test,
}

/// Chronological boundaries; both starts are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitDates {
    pub valid_start: NaiveDate,
    pub test_start: NaiveDate,
}

impl SplitDates {
    pub fn new(valid_start: NaiveDate, test_start: NaiveDate) -> Result<Self> {
        if valid_start >= test_start {
            return Err(Error::Split(format!(
                "valid_start {valid_start} must precede test_start {test_start}"
            )));
        }
        Ok(Self {
            valid_start,
            test_start,
        })
    }

    pub fn partition(&self, date: NaiveDate) -> Partition {
        if date >= self.test_start {
            Partition::Test
        } else if date >= self.valid_start {
            Partition::Valid
        } else {
            Partition::Train
        }
    }
}

/// Splits rows by date into train / valid / test. Every partition must be
/// non-empty.
pub fn chrono_split(
    ds: &TabularDataset,
    dates: SplitDates,
) -> Result<(TabularDataset, TabularDataset, TabularDataset)> {
    let dates = SplitDates::new(dates.valid_start, dates.test_start)?;
    let part = |p| ds.filter(|r| dates.partition(r.date) == p);
    let (train, valid, test) = (part(Partition::Train), part(Partition::Valid), part(Partition::Test));
    for (name, d) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if d.is_empty() {
            return Err(Error::Split(format!(
                "{name} partition is empty (valid_start {}, test_start {})",
                dates.valid_start, dates.test_start
            )));
        }
    }
    Ok((train, valid, test))
}
