use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::sub_seed;

use super::dataset::{Row, Schema, TabularDataset};

/// Rows start once the longest moving average is fully populated.
pub const BURN_IN: usize = 20;

/// Parameters of the synthetic market.
///
/// Daily log-return of series `i` in group `g`:
/// `r_i(t) = β_i·(factor_vol·ξ_g(t) + s_g(weekday(t))) + a_i(t)`, with
/// `a_i(t) = ar·a_i(t-1) + idio_vol·η_i(t)`. The group factor and weekday
/// pattern are shared across a group (cross-sectional signal); the AR term is
/// each series' own short-horizon dynamics (temporal signal). The default
/// negative `ar` makes idiosyncratic moves mean-revert, so a series' recent
/// history predicts its next move while its long-run level stays anchored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub series: usize,
    pub groups: usize,
    /// Simulated trading days; `days - BURN_IN` rows are emitted per series.
    pub days: usize,
    pub seed: u64,
    pub factor_vol: f64,
    pub seasonal_amp: f64,
    pub idio_vol: f64,
    pub ar: f64,
    /// Initial prices are drawn uniformly from `100·(1 ± price_spread)`.
    pub price_spread: f64,
}

impl SyntheticConfig {
    pub fn new(series: usize, groups: usize, days: usize, seed: u64) -> Self {
        Self {
            series,
            groups,
            days,
            seed,
            factor_vol: 0.003,
            seasonal_amp: 0.05,
            idio_vol: 0.012,
            ar: -0.85,
            price_spread: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.series < self.groups {
            return Err(Error::Contract(format!(
                "need series >= groups >= 1, got {} series and {} groups",
                self.series, self.groups
            )));
        }
        if self.days < 30 {
            return Err(Error::Contract(format!("need at least 30 days, got {}", self.days)));
        }
        let scales = [self.factor_vol, self.seasonal_amp, self.idio_vol];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) || !(self.ar.abs() < 1.0) {
            return Err(Error::Contract("scales must be >= 0 and |ar| < 1".into()));
        }
        if !(0.0..1.0).contains(&self.price_spread) {
            return Err(Error::Contract(format!(
                "price_spread must lie in [0, 1), got {}",
                self.price_spread
            )));
        }
        Ok(())
    }
}

pub fn synthetic_schema() -> Schema {
    Schema {
        categorical: ["symbol", "group", "day_of_week", "month"].map(String::from).to_vec(),
        continuous: ["lag1", "ma5", "ma20"].map(String::from).to_vec(),
    }
}

/// Raw simulated paths, kept for inspection and tests.
#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    pub dates: Vec<NaiveDate>,
    pub symbols: Vec<String>,
    pub groups: Vec<usize>,
    pub betas: Vec<f64>,
    /// `prices[i][t]`.
    pub prices: Vec<Vec<f64>>,
    /// Cumulative group factor (log scale), `factors[g][t]`.
    pub factors: Vec<Vec<f64>>,
}

/// Consecutive weekdays starting Monday 2017-01-02.
pub fn trading_days(n: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2017, 1, 2).expect("valid date");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

pub fn simulate(cfg: &SyntheticConfig) -> Result<SyntheticMarket> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "synthetic"));
    let (k, g, n) = (cfg.series, cfg.groups, cfg.days);
    let dates = trading_days(n);
    let groups: Vec<usize> = (0..k).map(|i| i % g).collect();
    let betas: Vec<f64> = (0..k).map(|_| rng.gen_range(0.8..1.2)).collect();
    let base: Vec<f64> = (0..k)
        .map(|_| 100.0 * (1.0 + cfg.price_spread * rng.gen_range(-1.0..1.0)))
        .collect();
    let mut seasonal = vec![[0.0f64; 5]; g];
    for s in seasonal.iter_mut() {
        for v in s.iter_mut() {
            *v = cfg.seasonal_amp * rng.gen_range(-1.0..1.0);
        }
        let mean = s.iter().sum::<f64>() / 5.0;
        s.iter_mut().for_each(|v| *v -= mean);
    }
    let mut log_p: Vec<f64> = base.iter().map(|b| b.ln()).collect();
    let mut ar = vec![0.0f64; k];
    let mut prices = vec![Vec::with_capacity(n); k];
    let mut factors = vec![Vec::with_capacity(n); g];
    let mut cum = vec![0.0f64; g];
    for (t, date) in dates.iter().enumerate() {
        if t > 0 {
            let dow = date.weekday().num_days_from_monday() as usize;
            let shock: Vec<f64> = (0..g)
                .map(|j| cfg.factor_vol * rng.sample::<f64, _>(StandardNormal) + seasonal[j][dow])
                .collect();
            for j in 0..g {
                cum[j] += shock[j];
            }
            for i in 0..k {
                let eta: f64 = rng.sample(StandardNormal);
                ar[i] = cfg.ar * ar[i] + cfg.idio_vol * eta;
                log_p[i] += betas[i] * shock[groups[i]] + ar[i];
            }
        }
        for i in 0..k {
            prices[i].push(log_p[i].exp());
        }
        for j in 0..g {
            factors[j].push(cum[j]);
        }
    }
    Ok(SyntheticMarket {
        dates,
        symbols: (0..k).map(|i| format!("S{i:03}")).collect(),
        groups,
        betas,
        prices,
        factors,
    })
}

impl SyntheticMarket {
    /// Feature rows: categorical `symbol, group, day_of_week, month`;
    /// continuous `lag1` (price on the row date), `ma5`, `ma20`; target is the
    /// next day's price.
    pub fn dataset(&self) -> Result<TabularDataset> {
        let n = self.dates.len();
        let mut rows = Vec::with_capacity(self.symbols.len() * n.saturating_sub(BURN_IN));
        for (i, sym) in self.symbols.iter().enumerate() {
            let p = &self.prices[i];
            for t in BURN_IN - 1..n - 1 {
                let ma = |w: usize| p[t + 1 - w..=t].iter().sum::<f64>() / w as f64;
                let date = self.dates[t];
                rows.push(Row {
                    date,
                    series_id: sym.clone(),
                    cats: vec![
                        sym.clone(),
                        format!("G{}", self.groups[i]),
                        date.format("%a").to_string(),
                        format!("{:02}", date.month()),
                    ],
                    conts: vec![p[t], ma(5), ma(20)],
                    target: p[t + 1],
                });
            }
        }
        TabularDataset::new(synthetic_schema(), rows)
    }
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<TabularDataset> {
    simulate(cfg)?.dataset()
}
