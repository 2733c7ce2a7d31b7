//! Hourly electricity price series: CSV ingestion, train/eval split, synthesis
//! and the lookback window fed into the environment state.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::seeded;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";

/// Last day of month (inclusive) that belongs to the training part.
pub const TRAIN_DAYS_PER_MONTH: u32 = 20;

#[derive(Debug, Error)]
pub enum PriceError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("gap in price series: missing hour {missing}")]
    GapDetected { missing: NaiveDateTime },
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(NaiveDateTime),
    #[error("non-finite price at {0}")]
    NonFinitePrice(NaiveDateTime),
    #[error("timestamp {0} is not aligned to the hour")]
    NotHourAligned(NaiveDateTime),
    #[error("price series is empty")]
    Empty,
    #[error("hour index {index} out of range for series of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PricePoint {
    pub timestamp: NaiveDateTime,
    pub price: f64,
}

/// Gap-free, strictly increasing hourly prices.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    points: Vec<PricePoint>,
}

impl PriceSeries {
    /// Validates ordering, hour alignment, contiguity and finiteness.
    pub fn new(points: Vec<PricePoint>) -> Result<Self, PriceError> {
        if points.is_empty() {
            return Err(PriceError::Empty);
        }
        for p in &points {
            if p.timestamp.minute() != 0 || p.timestamp.second() != 0 || p.timestamp.nanosecond() != 0 {
                return Err(PriceError::NotHourAligned(p.timestamp));
            }
            if !p.price.is_finite() {
                return Err(PriceError::NonFinitePrice(p.timestamp));
            }
        }
        for pair in points.windows(2) {
            let (a, b) = (pair[0].timestamp, pair[1].timestamp);
            if b == a {
                return Err(PriceError::DuplicateTimestamp(b));
            }
            let expected = a + Duration::hours(1);
            if b != expected {
                return Err(PriceError::GapDetected { missing: expected });
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[PricePoint] {
        &self.points
    }

    pub fn price(&self, index: usize) -> f64 {
        self.points[index].price
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.points[index].timestamp
    }

    pub fn prices(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.price).collect()
    }

    pub fn mean(&self) -> f64 {
        self.points.iter().map(|p| p.price).sum::<f64>() / self.len() as f64
    }

    /// Index of the point stamped `ts`, if the series covers it.
    pub fn index_of(&self, ts: NaiveDateTime) -> Option<usize> {
        let first = self.points[0].timestamp;
        if ts < first {
            return None;
        }
        let idx = (ts - first).num_hours() as usize;
        (idx < self.len() && self.points[idx].timestamp == ts).then_some(idx)
    }

    /// Indices of every midnight in the series.
    pub fn midnights(&self) -> Vec<usize> {
        self.points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.timestamp.hour() == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Contiguous sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, PriceError> {
        if start >= end || end > self.len() {
            return Err(PriceError::IndexOutOfRange { index: end, len: self.len() });
        }
        Ok(Self { points: self.points[start..end].to_vec() })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), PriceError> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| PriceError::Io(std::io::Error::other(e));
        w.write_record(["timestamp", "price"]).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.timestamp.format(TIMESTAMP_FORMAT).to_string(), p.price.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<PriceSeries, PriceError> {
    let file = std::fs::File::open(path)?;
    parse_csv(file)
}

/// Parses `timestamp,price` rows after a mandatory header line. Rows may come
/// in any order; they are sorted before validation.
pub fn parse_csv<R: Read>(reader: R) -> Result<PriceSeries, PriceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut points = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| PriceError::MalformedRow { line, reason: e.to_string() })?;
        if record.len() != 2 {
            return Err(PriceError::MalformedRow {
                line,
                reason: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let timestamp = NaiveDateTime::parse_from_str(&record[0], TIMESTAMP_FORMAT).map_err(|e| {
            PriceError::MalformedRow { line, reason: format!("bad timestamp {:?}: {e}", &record[0]) }
        })?;
        let price: f64 = record[1].parse().map_err(|e| PriceError::MalformedRow {
            line,
            reason: format!("bad price {:?}: {e}", &record[1]),
        })?;
        points.push(PricePoint { timestamp, price });
    }
    points.sort_by_key(|p| p.timestamp);
    PriceSeries::new(points)
}

/// Train/eval partition. Day-of-month splitting makes each part discontiguous,
/// so both are kept as ordered lists of contiguous segments.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSplit {
    pub train: Vec<PriceSeries>,
    pub eval: Vec<PriceSeries>,
}

impl PriceSplit {
    pub fn train_hours(&self) -> usize {
        self.train.iter().map(PriceSeries::len).sum()
    }

    pub fn eval_hours(&self) -> usize {
        self.eval.iter().map(PriceSeries::len).sum()
    }

    /// Mean raw price over the training hours.
    pub fn train_mean(&self) -> Option<f64> {
        let n = self.train_hours();
        (n > 0).then(|| {
            self.train.iter().flat_map(|s| s.points()).map(|p| p.price).sum::<f64>() / n as f64
        })
    }
}

/// Hours on days 1..=20 of each month go to training, the rest to evaluation.
pub fn split_train_eval(series: &PriceSeries) -> PriceSplit {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut current: Vec<PricePoint> = Vec::new();
    let mut current_is_train = None;
    for p in series.points() {
        let is_train = p.timestamp.day() <= TRAIN_DAYS_PER_MONTH;
        if current_is_train.is_some_and(|c| c != is_train) {
            let seg = PriceSeries { points: std::mem::take(&mut current) };
            if current_is_train == Some(true) {
                train.push(seg);
            } else {
                eval.push(seg);
            }
        }
        current_is_train = Some(is_train);
        current.push(*p);
    }
    if !current.is_empty() {
        let seg = PriceSeries { points: current };
        if current_is_train == Some(true) {
            train.push(seg);
        } else {
            eval.push(seg);
        }
    }
    PriceSplit { train, eval }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub days: usize,
    pub base: f64,
    pub amplitude: f64,
    pub noise_sd: f64,
    pub start: NaiveDate,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            // Jan 1 through Jun 19
            days: 170,
            base: 30.0,
            amplitude: 15.0,
            noise_sd: 2.0,
            start: NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date"),
        }
    }
}

/// Daily sinusoid (trough at midnight, peak at noon) plus seeded Gaussian
/// noise, floored at zero.
pub fn synthesize_prices(params: &SynthParams) -> Result<PriceSeries, PriceError> {
    if params.days == 0 {
        return Err(PriceError::InvalidParam("days must be >= 1".into()));
    }
    if !(params.amplitude >= 0.0) {
        return Err(PriceError::InvalidParam(format!("amplitude {} < 0", params.amplitude)));
    }
    if !(params.noise_sd >= 0.0) {
        return Err(PriceError::InvalidParam(format!("noise_sd {} < 0", params.noise_sd)));
    }
    if !params.base.is_finite() {
        return Err(PriceError::InvalidParam("base must be finite".into()));
    }
    let mut rng = seeded(params.seed);
    let noise = Normal::new(0.0, params.noise_sd)
        .map_err(|e| PriceError::InvalidParam(e.to_string()))?;
    let start = params.start.and_hms_opt(0, 0, 0).expect("midnight");
    let points = (0..params.days * 24)
        .map(|h| {
            let hour_of_day = (h % 24) as f64;
            let eps = noise.sample(&mut rng);
            let price = params.base + params.amplitude * (2.0 * PI * (hour_of_day - 6.0) / 24.0).sin() + eps;
            PricePoint { timestamp: start + Duration::hours(h as i64), price: price.max(0.0) }
        })
        .collect();
    PriceSeries::new(points)
}

/// `(p[t-n], ..., p[t])`, repeating the first price for indices before the start.
pub fn window(series: &PriceSeries, t: usize, n: usize) -> Result<Vec<f64>, PriceError> {
    if t >= series.len() {
        return Err(PriceError::IndexOutOfRange { index: t, len: series.len() });
    }
    Ok((0..=n)
        .map(|k| {
            let idx = (t + k).saturating_sub(n);
            series.price(idx)
        })
        .collect())
}
