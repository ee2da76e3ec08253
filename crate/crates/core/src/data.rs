//! Ventilator CSV ingestion, imputation, robust scaling, breath grouping
//! and a synthetic lung generator.
//!
//! Rows are kept as [`VentRecord`]s through preprocessing so imputation and
//! scaling can be fitted on one split and replayed on another. Missing
//! numeric cells are represented as `NaN` until imputed.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Column {
    R,
    C,
    #[serde(rename = "time_step")]
    TimeStep,
    #[serde(rename = "u_in")]
    UIn,
    #[serde(rename = "u_out")]
    UOut,
    #[serde(rename = "pressure")]
    Pressure,
}

impl Column {
    pub const ALL: [Column; 6] = [
        Column::R,
        Column::C,
        Column::TimeStep,
        Column::UIn,
        Column::UOut,
        Column::Pressure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Column::R => "R",
            Column::C => "C",
            Column::TimeStep => "time_step",
            Column::UIn => "u_in",
            Column::UOut => "u_out",
            Column::Pressure => "pressure",
        }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Column {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Column::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown column `{s}`")))
    }
}

/// Model input columns, in tensor order.
pub const FEATURE_COLUMNS: [Column; 5] = [
    Column::R,
    Column::C,
    Column::TimeStep,
    Column::UIn,
    Column::UOut,
];

/// Index of `u_out` within [`FEATURE_COLUMNS`].
pub const U_OUT_FEATURE: usize = 4;

/// Columns robust-scaled unless configured otherwise.
pub const DEFAULT_SCALED_COLUMNS: [Column; 3] = [Column::TimeStep, Column::UIn, Column::Pressure];

/// One row of the ventilator dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct VentRecord {
    pub id: u64,
    pub breath_id: u64,
    /// Airway restriction, cmH2O/L/s.
    pub r: f64,
    /// Lung compliance, mL/cmH2O.
    pub c: f64,
    /// Seconds since breath start.
    pub time_step: f64,
    /// Inspiratory valve opening, 0..=100.
    pub u_in: f64,
    /// Expiratory valve, 0 (closed) or 1 (open).
    pub u_out: f64,
    /// Airway pressure in cmH2O. `None` when the file has no pressure column.
    pub pressure: Option<f64>,
}

impl VentRecord {
    pub fn get(&self, col: Column) -> Option<f64> {
        match col {
            Column::R => Some(self.r),
            Column::C => Some(self.c),
            Column::TimeStep => Some(self.time_step),
            Column::UIn => Some(self.u_in),
            Column::UOut => Some(self.u_out),
            Column::Pressure => self.pressure,
        }
    }

    fn get_mut(&mut self, col: Column) -> Option<&mut f64> {
        match col {
            Column::R => Some(&mut self.r),
            Column::C => Some(&mut self.c),
            Column::TimeStep => Some(&mut self.time_step),
            Column::UIn => Some(&mut self.u_in),
            Column::UOut => Some(&mut self.u_out),
            Column::Pressure => self.pressure.as_mut(),
        }
    }
}

pub fn has_pressure(records: &[VentRecord]) -> bool {
    records.first().is_some_and(|r| r.pressure.is_some())
}

const REQUIRED_HEADERS: [&str; 7] = ["id", "breath_id", "R", "C", "time_step", "u_in", "u_out"];

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<VentRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
}

/// Parses comma-separated records with a header row. A `pressure` column is
/// optional; all other columns of the schema are required, extra columns are
/// ignored. Empty, `NaN` and `NA` cells are read as missing.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<VentRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_HEADERS) {
        *slot = find(name).ok_or_else(|| Error::Schema(format!("missing column `{name}`")))?;
    }
    let pressure_idx = find("pressure");

    let mut out = Vec::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                return Err(Error::Parse {
                    line: e.position().map_or(line, |p| p.line()),
                    message: e.to_string(),
                })
            }
        }
        let line = row.position().map_or(line, |p| p.line());
        let cell = |k: usize| row.get(k).unwrap_or("").trim();
        let int = |k: usize, name: &str| -> Result<u64> {
            cell(k).parse::<u64>().map_err(|_| Error::Parse {
                line,
                message: format!("column `{name}`: expected an integer, got `{}`", cell(k)),
            })
        };
        let real = |k: usize, name: &str| -> Result<f64> { parse_real(cell(k), name, line) };
        let u_out = real(idx[6], "u_out")?;
        if !(u_out.is_nan() || u_out == 0.0 || u_out == 1.0) {
            return Err(Error::Parse {
                line,
                message: format!("column `u_out`: expected 0 or 1, got `{}`", cell(idx[6])),
            });
        }
        out.push(VentRecord {
            id: int(idx[0], "id")?,
            breath_id: int(idx[1], "breath_id")?,
            r: real(idx[2], "R")?,
            c: real(idx[3], "C")?,
            time_step: real(idx[4], "time_step")?,
            u_in: real(idx[5], "u_in")?,
            u_out,
            pressure: pressure_idx.map(|k| real(k, "pressure")).transpose()?,
        });
    }
    Ok(out)
}

/// Writes records with the input schema; the pressure column is present
/// iff the records are labeled.
pub fn write_csv<W: Write>(records: &[VentRecord], mut w: W) -> std::io::Result<()> {
    let labeled = has_pressure(records);
    write!(w, "id,breath_id,R,C,time_step,u_in,u_out")?;
    writeln!(w, "{}", if labeled { ",pressure" } else { "" })?;
    for r in records {
        write!(
            w,
            "{},{},{},{},{},{},{}",
            r.id, r.breath_id, r.r, r.c, r.time_step, r.u_in, r.u_out
        )?;
        match r.pressure {
            Some(p) if labeled => writeln!(w, ",{p}")?,
            _ => writeln!(w)?,
        }
    }
    Ok(())
}

pub fn save_csv(records: &[VentRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(records, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn parse_real(s: &str, name: &str, line: u64) -> Result<f64> {
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            line,
            message: format!("column `{name}`: expected a number, got `{s}`"),
        }),
    }
}

/// Linear-interpolation quantile at position `p·(n−1)` of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted_column(records: &[VentRecord], col: Column) -> Vec<f64> {
    let mut v: Vec<f64> = records
        .iter()
        .filter_map(|r| r.get(col))
        .filter(|x| !x.is_nan())
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Per-column medians used to fill missing cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub fill: Vec<(Column, f64)>,
}

impl Imputer {
    /// Medians over the non-missing values of every present column. The
    /// `u_out` fill is rounded to the nearest valve state.
    pub fn fit(records: &[VentRecord]) -> Result<Self> {
        let labeled = has_pressure(records);
        let mut fill = Vec::new();
        for col in Column::ALL {
            if col == Column::Pressure && !labeled {
                continue;
            }
            let values = sorted_column(records, col);
            if values.is_empty() {
                return Err(Error::Data(format!(
                    "column `{col}` has no values to impute from"
                )));
            }
            let mut median = quantile_sorted(&values, 0.5);
            if col == Column::UOut {
                median = if median >= 0.5 { 1.0 } else { 0.0 };
            }
            fill.push((col, median));
        }
        Ok(Imputer { fill })
    }

    pub fn apply(&self, mut records: Vec<VentRecord>) -> Result<Vec<VentRecord>> {
        for rec in &mut records {
            for &(col, value) in &self.fill {
                if let Some(x) = rec.get_mut(col) {
                    if x.is_nan() {
                        *x = value;
                    }
                }
            }
            if Column::ALL
                .iter()
                .any(|&c| rec.get(c).is_some_and(f64::is_nan))
            {
                return Err(Error::Data(format!(
                    "row id {} has a missing cell with no fill value",
                    rec.id
                )));
            }
        }
        Ok(records)
    }
}

/// Fills missing cells with medians computed from `records` themselves.
pub fn impute_missing(records: Vec<VentRecord>) -> Result<Vec<VentRecord>> {
    Imputer::fit(&records)?.apply(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub column: Column,
    pub median: f64,
    pub iqr: f64,
}

impl ColumnScale {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.median) / self.iqr
    }

    #[inline]
    pub fn invert(&self, x: f64) -> f64 {
        x * self.iqr + self.median
    }
}

/// Fitted robust-scaling parameters, `(x − median) / IQR` per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub columns: Vec<ColumnScale>,
}

impl ScalerParams {
    pub fn get(&self, col: Column) -> Option<&ColumnScale> {
        self.columns.iter().find(|c| c.column == col)
    }

    pub fn target(&self) -> Option<&ColumnScale> {
        self.get(Column::Pressure)
    }

    pub fn column_names(&self) -> Vec<&'static str> {
        self.columns.iter().map(|c| c.column.name()).collect()
    }
}

fn check_scalable(col: Column) -> Result<()> {
    if col == Column::UOut {
        return Err(Error::Usage(
            "u_out is a valve state and is never scaled".into(),
        ));
    }
    Ok(())
}

pub fn fit_scaler(records: &[VentRecord], columns: &[Column]) -> Result<ScalerParams> {
    let mut out = Vec::with_capacity(columns.len());
    for &col in columns {
        check_scalable(col)?;
        if col == Column::Pressure && !has_pressure(records) {
            return Err(Error::Usage(
                "cannot fit a pressure scale on unlabeled records".into(),
            ));
        }
        let values = sorted_column(records, col);
        if values.len() != records.len() {
            return Err(Error::Data(format!(
                "column `{col}` has missing values; impute before fitting the scaler"
            )));
        }
        if values.is_empty() || values.first() == values.last() {
            return Err(Error::DegenerateColumn(col.name().into()));
        }
        let iqr = quantile_sorted(&values, 0.75) - quantile_sorted(&values, 0.25);
        if iqr <= 0.0 {
            return Err(Error::DegenerateColumn(col.name().into()));
        }
        out.push(ColumnScale {
            column: col,
            median: quantile_sorted(&values, 0.5),
            iqr,
        });
    }
    Ok(ScalerParams { columns: out })
}

/// Scales every column named in `s`. A pressure scale is skipped for
/// unlabeled records.
pub fn apply_scaler(mut records: Vec<VentRecord>, s: &ScalerParams) -> Result<Vec<VentRecord>> {
    for cs in &s.columns {
        check_scalable(cs.column)?;
        if cs.iqr.is_nan() || cs.iqr <= 0.0 {
            return Err(Error::DegenerateColumn(cs.column.name().into()));
        }
    }
    for rec in &mut records {
        for cs in &s.columns {
            if let Some(x) = rec.get_mut(cs.column) {
                *x = cs.apply(*x);
            }
        }
    }
    Ok(records)
}

/// Imputation and scaling fitted together on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub imputer: Imputer,
    pub scaler: ScalerParams,
}

impl Preprocessor {
    /// Fits both stages on `train` only.
    pub fn fit(train: &[VentRecord], columns: &[Column]) -> Result<Self> {
        let imputer = Imputer::fit(train)?;
        let filled = imputer.apply(train.to_vec())?;
        let scaler = fit_scaler(&filled, columns)?;
        Ok(Preprocessor { imputer, scaler })
    }

    pub fn apply(&self, records: Vec<VentRecord>) -> Result<Vec<VentRecord>> {
        apply_scaler(self.imputer.apply(records)?, &self.scaler)
    }
}

/// One breath: `features` is `[T, 5]` in [`FEATURE_COLUMNS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct BreathSequence<T> {
    pub breath_id: u64,
    /// Row ids in time order.
    pub ids: Vec<u64>,
    pub features: Tensor<T>,
    /// `[T]`, absent for unlabeled data.
    pub target: Option<Tensor<T>>,
}

impl<T: Scalar> BreathSequence<T> {
    pub fn steps(&self) -> usize {
        self.features.shape()[0]
    }

    /// `true` at inspiratory timesteps (`u_out == 0`).
    pub fn inspiratory(&self) -> Vec<bool> {
        (0..self.steps())
            .map(|t| self.features.get(&[t, U_OUT_FEATURE]) == T::zero())
            .collect()
    }
}

/// Groups rows by `breath_id` (ascending) and orders each breath by
/// `time_step`, ties broken by row id. All breaths must have equal length.
pub fn group_breaths<T: Scalar>(records: &[VentRecord]) -> Result<Vec<BreathSequence<T>>> {
    let mut groups: BTreeMap<u64, Vec<&VentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.breath_id).or_default().push(r);
    }
    let mut lengths: BTreeMap<usize, usize> = BTreeMap::new();
    for rows in groups.values() {
        *lengths.entry(rows.len()).or_default() += 1;
    }
    if lengths.len() > 1 {
        let (&modal, _) = lengths
            .iter()
            .max_by_key(|&(len, n)| (*n, std::cmp::Reverse(*len)))
            .unwrap();
        let offending: Vec<String> = groups
            .iter()
            .filter(|(_, rows)| rows.len() != modal)
            .map(|(id, rows)| format!("{id} ({} rows)", rows.len()))
            .take(20)
            .collect();
        return Err(Error::Data(format!(
            "breaths must share one length ({modal} rows); offending breath ids: {}",
            offending.join(", ")
        )));
    }
    let labeled = has_pressure(records);
    let mut out = Vec::with_capacity(groups.len());
    for (breath_id, mut rows) in groups {
        rows.sort_by(|a, b| a.time_step.total_cmp(&b.time_step).then(a.id.cmp(&b.id)));
        let steps = rows.len();
        let mut feats = Vec::with_capacity(steps * FEATURE_COLUMNS.len());
        for r in &rows {
            feats.extend(FEATURE_COLUMNS.iter().map(|&c| T::lit(r.get(c).unwrap())));
        }
        let target = if labeled {
            let p = rows
                .iter()
                .map(|r| {
                    r.pressure.map(T::lit).ok_or_else(|| {
                        Error::Data(format!("row id {} lacks a pressure value", r.id))
                    })
                })
                .collect::<Result<Vec<T>>>()?;
            Some(Tensor::new(&[steps], p)?)
        } else {
            None
        };
        out.push(BreathSequence {
            breath_id,
            ids: rows.iter().map(|r| r.id).collect(),
            features: Tensor::new(&[steps, FEATURE_COLUMNS.len()], feats)?,
            target,
        });
    }
    Ok(out)
}

/// Inverse of [`group_breaths`] for rows already in breath/time order.
pub fn flatten_breaths<T: Scalar>(seqs: &[BreathSequence<T>]) -> Vec<VentRecord> {
    let mut out = Vec::new();
    for s in seqs {
        for t in 0..s.steps() {
            let f = |k: usize| s.features.get(&[t, k]).as_f64();
            out.push(VentRecord {
                id: s.ids[t],
                breath_id: s.breath_id,
                r: f(0),
                c: f(1),
                time_step: f(2),
                u_in: f(3),
                u_out: f(4),
                pressure: s.target.as_ref().map(|p| p.data()[t].as_f64()),
            });
        }
    }
    out
}

/// Splits rows by breath id: the last `fraction` of distinct breath ids
/// (rounded down) go to validation, at least one breath stays in training.
pub fn split_by_breath(
    records: Vec<VentRecord>,
    fraction: f64,
) -> (Vec<VentRecord>, Vec<VentRecord>) {
    let mut ids: Vec<u64> = records.iter().map(|r| r.breath_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let n_val = ((ids.len() as f64 * fraction).floor() as usize).min(ids.len().saturating_sub(1));
    if n_val == 0 {
        return (records, Vec::new());
    }
    let cutoff = ids[ids.len() - n_val];
    records.into_iter().partition(|r| r.breath_id < cutoff)
}

/// `[batch, T, 5]` features of the selected breaths.
pub fn stack_features<T: Scalar>(seqs: &[&BreathSequence<T>]) -> Result<Tensor<T>> {
    let steps = seqs.first().map_or(0, |s| s.steps());
    let width = FEATURE_COLUMNS.len();
    let mut data = Vec::with_capacity(seqs.len() * steps * width);
    for s in seqs {
        data.extend_from_slice(s.features.data());
    }
    Tensor::new(&[seqs.len(), steps, width], data)
}

/// `[batch, T, 1]` targets of the selected breaths.
pub fn stack_targets<T: Scalar>(seqs: &[&BreathSequence<T>]) -> Result<Tensor<T>> {
    let steps = seqs.first().map_or(0, |s| s.steps());
    let mut data = Vec::with_capacity(seqs.len() * steps);
    for s in seqs {
        let t = s.target.as_ref().ok_or_else(|| {
            Error::Usage(format!("breath {} has no target pressure", s.breath_id))
        })?;
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[seqs.len(), steps, 1], data)
}

/// `[batch, T, 1]` weights: 1 at inspiratory steps, 0 elsewhere.
pub fn stack_inspiratory_mask<T: Scalar>(seqs: &[&BreathSequence<T>]) -> Result<Tensor<T>> {
    let steps = seqs.first().map_or(0, |s| s.steps());
    let data = seqs
        .iter()
        .flat_map(|s| s.inspiratory())
        .map(|m| if m { T::one() } else { T::zero() })
        .collect();
    Tensor::new(&[seqs.len(), steps, 1], data)
}

/// Row count and pressure extrema of a loaded file.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestSummary {
    pub rows: usize,
    pub breaths: usize,
    pub pressure_range: Option<(f64, f64)>,
}

pub const REFERENCE_TRAIN_ROWS: usize = 6_036_000;
pub const REFERENCE_TEST_ROWS: usize = 4_024_000;
/// Extrema of the reference training pressures, cmH2O, to four decimals.
pub const REFERENCE_PRESSURE_RANGE: (f64, f64) = (-1.8957, 64.8209);

pub fn summarize(records: &[VentRecord]) -> IngestSummary {
    let mut ids: Vec<u64> = records.iter().map(|r| r.breath_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let pressure_range = records
        .iter()
        .filter_map(|r| r.pressure)
        .filter(|p| !p.is_nan())
        .fold(None, |acc: Option<(f64, f64)>, p| match acc {
            None => Some((p, p)),
            Some((lo, hi)) => Some((lo.min(p), hi.max(p))),
        });
    IngestSummary {
        rows: records.len(),
        breaths: ids.len(),
        pressure_range,
    }
}

fn truncate4(x: f64) -> f64 {
    (x * 1e4).trunc() / 1e4
}

/// Discrepancies between a file that has the reference training-set size
/// and the published reference extrema. Empty for other files.
pub fn reference_warnings(summary: &IngestSummary) -> Vec<String> {
    let mut out = Vec::new();
    let labeled = summary.pressure_range.is_some();
    if labeled && summary.rows == REFERENCE_TRAIN_ROWS {
        let (lo, hi) = summary.pressure_range.unwrap();
        let (ref_lo, ref_hi) = REFERENCE_PRESSURE_RANGE;
        if (truncate4(lo) - ref_lo).abs() > 1e-9 || (truncate4(hi) - ref_hi).abs() > 1e-9 {
            out.push(format!(
                "pressure range [{lo}, {hi}] differs from the reference training set [{ref_lo}, {ref_hi}]"
            ));
        }
    } else if !labeled
        && summary.rows != REFERENCE_TEST_ROWS
        && summary.rows > REFERENCE_TEST_ROWS / 2
    {
        out.push(format!(
            "{} unlabeled rows; the reference test set has {REFERENCE_TEST_ROWS}",
            summary.rows
        ));
    } else if labeled && summary.rows > REFERENCE_TRAIN_ROWS / 2 {
        out.push(format!(
            "{} labeled rows; the reference training set has {REFERENCE_TRAIN_ROWS}",
            summary.rows
        ));
    }
    out
}

/// Airway resistance settings sampled by the generator, cmH2O/L/s.
pub const SYNTH_R_LEVELS: [f64; 3] = [5.0, 20.0, 50.0];
/// Compliance settings sampled by the generator, mL/cmH2O.
pub const SYNTH_C_LEVELS: [f64; 3] = [10.0, 20.0, 50.0];

/// Constants of the single-compartment lung recurrence
/// `p ← p + dt·(u_in·flow_gain/C − p/(R·C·tau_scale))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub dt: f64,
    pub flow_gain: f64,
    /// Converts `R·C` (cmH2O/L/s · mL/cmH2O) to seconds.
    pub tau_scale: f64,
    pub noise_sigma: f64,
    /// Range of the per-breath peak inspiratory valve opening.
    pub u_in_peak: (f64, f64),
    pub initial_pressure: (f64, f64),
    /// Fraction of the breath spent in inspiration (`u_out = 0`).
    pub inspiratory_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dt: 0.033,
            flow_gain: 30.0,
            tau_scale: 1e-3,
            noise_sigma: 0.01,
            u_in_peak: (5.0, 40.0),
            initial_pressure: (4.0, 7.0),
            inspiratory_fraction: 0.375,
        }
    }
}

impl SynthConfig {
    #[inline]
    pub fn lung_step(&self, pressure: f64, u_in: f64, r: f64, c: f64) -> f64 {
        pressure + self.dt * (u_in * self.flow_gain / c - pressure / (r * c * self.tau_scale))
    }
}

/// Deterministic synthetic records: `n_breaths` breaths of `steps` rows.
pub fn synth_records(
    n_breaths: usize,
    steps: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Vec<VentRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite noise sigma");
    let insp = ((steps as f64 * cfg.inspiratory_fraction).round() as usize).clamp(1, steps);
    let mut out = Vec::with_capacity(n_breaths * steps);
    let mut id = 1u64;
    for b in 0..n_breaths {
        let r = SYNTH_R_LEVELS[rng.random_range(0..SYNTH_R_LEVELS.len())];
        let c = SYNTH_C_LEVELS[rng.random_range(0..SYNTH_C_LEVELS.len())];
        let peak = sample_range(&mut rng, cfg.u_in_peak);
        let ramp = rng.random_range(1..=insp.clamp(1, 6));
        let sag = rng.random_range(0.0..0.5);
        let mut p = sample_range(&mut rng, cfg.initial_pressure);
        for t in 0..steps {
            let u_in = if t >= insp {
                0.0
            } else if t < ramp {
                peak * (t + 1) as f64 / ramp as f64
            } else {
                peak * (1.0 - sag * (t - ramp) as f64 / (insp - ramp).max(1) as f64)
            };
            let observed = if cfg.noise_sigma > 0.0 {
                p + noise.sample(&mut rng)
            } else {
                p
            };
            out.push(VentRecord {
                id,
                breath_id: b as u64 + 1,
                r,
                c,
                time_step: t as f64 * cfg.dt,
                u_in,
                u_out: if t < insp { 0.0 } else { 1.0 },
                pressure: Some(observed),
            });
            id += 1;
            p = cfg.lung_step(p, u_in, r, c);
        }
    }
    out
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Synthetic breaths with the default generator constants.
pub fn synth_generate<T: Scalar>(
    n_breaths: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<BreathSequence<T>>> {
    if n_breaths == 0 || steps < 2 {
        return Err(Error::Usage(format!(
            "synthetic data needs at least one breath of two steps, got {n_breaths}×{steps}"
        )));
    }
    group_breaths(&synth_records(
        n_breaths,
        steps,
        seed,
        &SynthConfig::default(),
    ))
}
