//! Dataset ingestion, chronological splitting, window splicing, and a
//! synthetic multi-periodic generator for the forecasting pipeline.

use crate::error::Error;
use crate::rng::{self, tag};
use crate::Result;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::ops::Range;
use std::path::Path;

/// A multivariate series stored column-major: one contiguous slice per
/// variate, which is the access pattern of the channel-independent model.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    names: Vec<String>,
    /// values[m * len + t]
    values: Vec<f64>,
    len: usize,
    pub timestamps: Option<Vec<String>>,
}

impl MultivariateSeries {
    /// Build from row-major records (each row = one time step across M variates).
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Data("series needs at least one variate".into()));
        }
        let m = names.len();
        let len = rows.len();
        let mut values = vec![0.0; m * len];
        for (t, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Data(format!(
                    "row {t} has {} values, expected {m}",
                    row.len()
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                values[c * len + t] = v;
            }
        }
        Ok(MultivariateSeries { names, values, len, timestamps: None })
    }

    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Data(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        if names.is_empty() {
            return Err(Error::Data("series needs at least one variate".into()));
        }
        let len = columns[0].len();
        if columns.iter().any(|c| c.len() != len) {
            return Err(Error::Data("columns have unequal lengths".into()));
        }
        let mut values = Vec::with_capacity(names.len() * len);
        for col in &columns {
            values.extend_from_slice(col);
        }
        Ok(MultivariateSeries { names, values, len, timestamps: None })
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_variates(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, m: usize) -> &[f64] {
        &self.values[m * self.len..(m + 1) * self.len]
    }

    pub fn at(&self, t: usize, m: usize) -> f64 {
        self.values[m * self.len + t]
    }
}

/// Split tag for window construction and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val, or test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Contiguous prefix/middle/suffix row ranges. Val and test sizes use floor
/// arithmetic on their ratios; train takes the remainder rows.
pub fn chronological_split(
    n: usize,
    ratios: (f64, f64, f64),
) -> Result<(Range<usize>, Range<usize>, Range<usize>)> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be positive, got ({rt}, {rv}, {rs})"
        )));
    }
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }
    let val = (n as f64 * rv).floor() as usize;
    let test = (n as f64 * rs).floor() as usize;
    if val + test > n {
        return Err(Error::Config(format!(
            "series of {n} rows cannot host val {val} + test {test}"
        )));
    }
    let train = n - val - test;
    Ok((0..train, train..train + val, train + val..n))
}

/// Stride-1 windows over one split. A window at start `t` reads its input
/// from rows [t, t+L) and its target from rows [t+L, t+L+T).
#[derive(Debug, Clone)]
pub struct WindowSet<'a> {
    pub series: &'a MultivariateSeries,
    pub split: Split,
    pub starts: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
}

impl<'a> WindowSet<'a> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn num_variates(&self) -> usize {
        self.series.num_variates()
    }

    pub fn input(&self, i: usize, m: usize) -> &'a [f64] {
        let t = self.starts[i];
        &self.series.column(m)[t..t + self.lookback]
    }

    pub fn target(&self, i: usize, m: usize) -> &'a [f64] {
        let t = self.starts[i] + self.lookback;
        &self.series.column(m)[t..t + self.horizon]
    }
}

/// Construct the window set for one split. Train windows lie wholly inside
/// the train segment; val/test targets lie wholly inside their segments
/// while inputs may reach back into preceding rows for look-back context.
pub fn make_windows<'a>(
    series: &'a MultivariateSeries,
    segment: Range<usize>,
    split: Split,
    lookback: usize,
    horizon: usize,
) -> Result<WindowSet<'a>> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config(format!(
            "window sizes must be positive (look-back {lookback}, horizon {horizon})"
        )));
    }
    if segment.end > series.len() {
        return Err(Error::Data(format!(
            "segment {segment:?} exceeds series of {} rows",
            series.len()
        )));
    }
    let starts: Vec<usize> = match split {
        Split::Train => {
            let lo = segment.start;
            (lo..segment.end.saturating_sub(lookback + horizon - 1).max(lo))
                .filter(|t| t + lookback + horizon <= segment.end)
                .collect()
        }
        Split::Val | Split::Test => {
            // target [t+L, t+L+T) inside the segment, input may start before
            (0..series.len())
                .filter(|t| {
                    t + lookback >= segment.start && t + lookback + horizon <= segment.end
                })
                .collect()
        }
    };
    if starts.is_empty() {
        return Err(Error::Data(format!(
            "{split} segment of {} rows yields no windows for look-back {lookback} + horizon {horizon}",
            segment.len()
        )));
    }
    Ok(WindowSet { series, split, starts, lookback, horizon })
}

/// Split a series and build all three window sets in one call.
pub fn split_windows<'a>(
    series: &'a MultivariateSeries,
    ratios: (f64, f64, f64),
    lookback: usize,
    horizon: usize,
) -> Result<(WindowSet<'a>, WindowSet<'a>, WindowSet<'a>)> {
    let (tr, va, te) = chronological_split(series.len(), ratios)?;
    Ok((
        make_windows(series, tr, Split::Train, lookback, horizon)?,
        make_windows(series, va, Split::Val, lookback, horizon)?,
        make_windows(series, te, Split::Test, lookback, horizon)?,
    ))
}

/// Load a CSV with a header row; an optional leading "date" column holds
/// timestamps, every other column is a numeric variate.
pub fn load_csv(path: &Path) -> Result<MultivariateSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?
        .clone();
    let has_date = headers.get(0) == Some("date");
    let first_col = usize::from(has_date);
    let names: Vec<String> = headers.iter().skip(first_col).map(str::to_owned).collect();
    if names.is_empty() {
        return Err(Error::Data(format!(
            "{}: no variate columns after the date column",
            path.display()
        )));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut timestamps = if has_date { Some(Vec::new()) } else { None };
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 1; // 1-based data row, header excluded
        let record =
            record.map_err(|e| Error::Data(format!("{}: row {row_no}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {row_no} has {} fields, header has {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        if let Some(ts) = &mut timestamps {
            ts.push(record[0].to_owned());
        }
        let mut row = Vec::with_capacity(names.len());
        for (c, field) in record.iter().enumerate().skip(first_col) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: cannot parse '{}' as a number at row {row_no}, column {}",
                    path.display(),
                    field,
                    c + 1
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let mut series = MultivariateSeries::from_rows(names, &rows)?;
    series.timestamps = timestamps;
    Ok(series)
}

/// Write a series back to CSV (with a date column when timestamps exist).
/// Values use the shortest decimal form that parses back to the same bits,
/// so a round trip is exact.
pub fn write_csv(path: &Path, series: &MultivariateSeries) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut header: Vec<&str> = Vec::new();
    if series.timestamps.is_some() {
        header.push("date");
    }
    header.extend(series.names.iter().map(String::as_str));
    writer
        .write_record(&header)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for t in 0..series.len() {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = &series.timestamps {
            record.push(ts[t].clone());
        }
        for m in 0..series.num_variates() {
            record.push(series.at(t, m).to_string());
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub length: usize,
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub slope: f64,
    pub sigma: f64,
    pub variates: usize,
}

/// Each variate is a sum of sinusoids with seed-drawn phases, plus a linear
/// trend and Gaussian noise. Fully determined by (seed, spec).
pub fn synth_multi_periodic(seed: u64, spec: &SynthSpec) -> Result<MultivariateSeries> {
    if spec.periods.is_empty() {
        return Err(Error::Config("synth spec needs at least one period".into()));
    }
    if spec.periods.len() != spec.amplitudes.len() {
        return Err(Error::Config(format!(
            "{} periods but {} amplitudes",
            spec.periods.len(),
            spec.amplitudes.len()
        )));
    }
    if spec.periods.iter().any(|&p| p <= 0.0) {
        return Err(Error::Config("periods must be positive".into()));
    }
    if spec.sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be ≥ 0, got {}", spec.sigma)));
    }
    if spec.variates == 0 || spec.length == 0 {
        return Err(Error::Config("synth spec needs ≥ 1 variate and ≥ 1 row".into()));
    }

    let names = (0..spec.variates).map(|m| format!("v{m}")).collect();
    let mut columns = Vec::with_capacity(spec.variates);
    for m in 0..spec.variates {
        let mut phase_rng = rng::stream(seed, &[tag::SYNTH_PHASE, m as u64]);
        let phases: Vec<f64> = spec
            .periods
            .iter()
            .map(|_| phase_rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        let mut noise_rng = rng::stream(seed, &[tag::SYNTH_NOISE, m as u64]);
        let normal = Normal::new(0.0, spec.sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
        let col = (0..spec.length)
            .map(|t| {
                let t = t as f64;
                let mut v = spec.slope * t;
                for ((&p, &a), &ph) in spec.periods.iter().zip(&spec.amplitudes).zip(&phases) {
                    v += a * (std::f64::consts::TAU * t / p + ph).sin();
                }
                if spec.sigma > 0.0 {
                    v += normal.sample(&mut noise_rng);
                }
                v
            })
            .collect();
        columns.push(col);
    }
    MultivariateSeries::from_columns(names, columns)
}
