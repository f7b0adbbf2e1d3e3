//! Generated datasets for tests and demos.
//!
//! [`desk_frame`] has a return that is a fixed function of lagged features
//! plus a little noise. [`market_csv`] imitates the layout of public
//! daily-indicator tables (a `Name` column, 82 numeric features, a few blank
//! cells) with a weak, mostly hidden predictable component.

use std::fmt::Write as _;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{FeatureFrame, DATE_FORMAT};
use crate::tensor::Tensor;

/// Consecutive weekdays starting at 2010-01-04.
pub fn trading_days(count: usize) -> Vec<NaiveDate> {
    let mut day = NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(day);
        }
        day = day + Days::new(1);
    }
    out
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `days × 10` features; the return on day `t` is
/// `0.01·(0.8·x0[t−1] − 0.6·x1[t−2] + 0.5·sin(π·x2[t−1])) + 0.0005·ε`.
pub fn desk_frame(days: usize, seed: u64) -> FeatureFrame {
    const N: usize = 10;
    const PHI: [f64; N] = [0.5, 0.3, 0.6, 0.9, 0.0, 0.7, 0.2, 0.8, 0.4, 0.95];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![[0.0; N]; days];
    for t in 0..days {
        for j in 0..N {
            let prev = if t > 0 { x[t - 1][j] } else { 0.0 };
            x[t][j] = PHI[j] * prev + (1.0 - PHI[j] * PHI[j]).sqrt() * normal(&mut rng);
        }
    }
    let mut close = vec![100.0; days];
    for t in 1..days {
        let lag2 = if t >= 2 { x[t - 2][1] } else { 0.0 };
        let signal = 0.8 * x[t - 1][0] - 0.6 * lag2 + 0.5 * (std::f64::consts::PI * x[t - 1][2]).sin();
        let r = 0.01 * signal + 0.0005 * normal(&mut rng);
        close[t] = close[t - 1] * (1.0 + r);
    }
    FeatureFrame {
        dates: trading_days(days),
        features: Tensor::new(vec![days, N], x.concat()).expect("shape"),
        close,
        feature_names: (0..N).map(|j| format!("x{j}")).collect(),
        dropped_rows: 0,
        ignored_columns: Vec::new(),
    }
}

const TECHNICAL: [&str; 13] = [
    "Volume", "mom", "mom1", "mom2", "mom3", "ROC_5", "ROC_10", "ROC_15", "ROC_20", "EMA_10", "EMA_20", "EMA_50",
    "EMA_200",
];

const EXOGENOUS: [&str; 40] = [
    "DTB4WK", "DTB3", "DTB6", "DGS5", "DGS10", "Oil", "Gold", "DAAA", "DBAA", "GBP", "JPY", "CAD", "CNY", "AAPL",
    "AMZN", "GE", "JNJ", "JPM", "MSFT", "WFC", "XOM", "FCHI", "FTSE", "GDAXI", "GSPC", "HSI", "IXIC", "SSEC", "RUT",
    "NYSE", "TE1", "TE2", "TE3", "TE5", "TE6", "DE1", "DE2", "DE4", "DE5", "DE6",
];

/// Feature count of [`market_csv`].
pub const MARKET_FEATURES: usize = 82;

/// CNNpred-style table with `days` rows: `Date, Close, Name` and 82 features.
///
/// A latent AR(1) factor `s` drives the next day's return
/// (`r[t] = 0.0003 + 0.005·s[t−1] + 0.01·ε`) and is observed only through ten
/// noisy proxies; the other columns are price-derived indicators, same-day
/// co-moving markets, random-walk levels and pure noise. The first rows of the
/// long-horizon average are blank.
pub fn market_csv(days: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = 0.0;
    let mut close = vec![1000.0];
    let mut latent = vec![0.0];
    for t in 1..days {
        let r = 0.0003 + 0.005 * latent[t - 1] + 0.01 * normal(&mut rng);
        close.push(close[t - 1] * (1.0 + r));
        s = 0.9 * s + (1.0f64 - 0.81).sqrt() * normal(&mut rng);
        latent.push(s);
    }
    let ret = |t: usize, lag: usize| {
        if t > lag {
            close[t - lag] / close[t - lag - 1] - 1.0
        } else {
            0.0
        }
    };
    let roc = |t: usize, k: usize| if t >= k { close[t] / close[t - k] - 1.0 } else { 0.0 };
    let mut ema = [10.0, 20.0, 50.0, 200.0].map(|span| (2.0 / (span + 1.0), close[0]));
    let mut levels = vec![0.0f64; EXOGENOUS.len()];
    let n_noise = MARKET_FEATURES - TECHNICAL.len() - EXOGENOUS.len() - 10;

    let mut out = String::from("Date,Close,Name");
    for name in TECHNICAL.iter().chain(EXOGENOUS.iter()) {
        write!(out, ",{name}").unwrap();
    }
    for i in 1..=10 {
        write!(out, ",SENT_{i}").unwrap();
    }
    for i in 1..=n_noise {
        write!(out, ",AUX_{i}").unwrap();
    }
    out.push('\n');

    for (t, date) in trading_days(days).into_iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(MARKET_FEATURES);
        let volume = (15.0 + 0.3 * normal(&mut rng)).exp();
        row.push(format!("{volume:.0}"));
        for lag in 0..4 {
            row.push(format!("{:.6}", ret(t, lag)));
        }
        for k in [5, 10, 15, 20] {
            row.push(format!("{:.6}", 100.0 * roc(t, k)));
        }
        for (i, (alpha, value)) in ema.iter_mut().enumerate() {
            *value = *alpha * close[t] + (1.0 - *alpha) * *value;
            let blank = i == 3 && t < 3;
            row.push(if blank { String::new() } else { format!("{:.6}", close[t] / *value - 1.0) });
        }
        for (j, level) in levels.iter_mut().enumerate() {
            // Half co-move with today's index return, half drift as levels.
            if j % 2 == 0 {
                let v = 0.6 * ret(t, 0) / 0.01 + 0.8 * normal(&mut rng);
                row.push(format!("{:.6}", v / 100.0));
            } else {
                *level += 0.05 * normal(&mut rng);
                row.push(format!("{:.6}", *level));
            }
        }
        for _ in 0..10 {
            row.push(format!("{:.6}", latent[t] + 1.5 * normal(&mut rng)));
        }
        for _ in 0..n_noise {
            row.push(format!("{:.6}", normal(&mut rng)));
        }
        writeln!(out, "{},{:.4},NASDAQ,{}", date.format(DATE_FORMAT), close[t], row.join(",")).unwrap();
    }
    out
}
