//! Tabular and time-series ingestion: CSV I/O, chronological splits,
//! history windows, scaling and a synthetic market generator.

mod dataset;
mod prep;
mod split;
mod synthetic;
mod window;

pub use dataset::{load_csv, read_csv, write_csv, write_csv_to, Row, Schema, TabularDataset, DATE_FORMAT};
pub use prep::{log_return, prepare, Encoded, PreparedData, Preprocessor, SampleMeta, Scaler, Vocab, HISTORY_CHANNELS, STD_FLOOR};
pub use split::{chrono_split, Partition, SplitDates};
pub use synthetic::{gen_synthetic, simulate, synthetic_schema, trading_days, SyntheticConfig, SyntheticMarket, BURN_IN};
pub use window::{make_windows, WindowedSample};
