//! Data plumbing: CSV ingestion, chronological splits, z-score
//! normalization, rolling-window enumeration, calendar features, and a
//! deterministic synthetic generator for desk-scale experiments.
//!
//! A [`SeriesTable`] is an hourly-or-coarser regular multivariate series.
//! Rolling windows pair an encoder context of `encoder_len` rows with a
//! forecast target of `pred_len` rows; consecutive windows advance by
//! `stride`. Window *counts* follow direct enumeration of valid start
//! offsets — see [`count_windows`] for the off-by-one this sidesteps.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Calendar features per timestamp: month (1–12), day of month (1–31),
/// weekday (0 = Monday), hour (0–23).
pub type Marks = [usize; 4];

// ---------------------------------------------------------------------------
// SeriesTable
// ---------------------------------------------------------------------------

/// A regularly sampled multivariate series.
///
/// `values` is row-major `[n_rows x d_f]`. Construction validates the
/// invariants: strictly increasing, uniformly spaced timestamps; at least
/// one feature; finite values.
#[derive(Clone)]
pub struct SeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_index: usize,
}

impl std::fmt::Debug for SeriesTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeriesTable")
            .field("n_rows", &self.n_rows())
            .field("features", &self.feature_names)
            .field("target_index", &self.target_index)
            .finish()
    }
}


impl SeriesTable {
    /// Builds a table and validates the series invariants.
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        values: Vec<f64>,
        feature_names: Vec<String>,
        target_index: usize,
    ) -> Result<SeriesTable> {
        let d_f = feature_names.len();
        if d_f == 0 {
            return Err(Error::Ingest { row: None, msg: "no feature columns".into() });
        }
        if target_index >= d_f {
            return Err(Error::Config(format!(
                "target index {target_index} out of range for {d_f} features"
            )));
        }
        if values.len() != timestamps.len() * d_f {
            return Err(Error::Dimension(format!(
                "{} values cannot fill {} rows of {} features",
                values.len(),
                timestamps.len(),
                d_f
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Ingest {
                row: Some(bad / d_f + 1),
                msg: "non-finite value".into(),
            });
        }
        if timestamps.len() >= 2 {
            let delta = timestamps[1] - timestamps[0];
            for (i, pair) in timestamps.windows(2).enumerate() {
                let d = pair[1] - pair[0];
                if d <= chrono::Duration::zero() {
                    return Err(Error::Ingest {
                        row: Some(i + 2),
                        msg: format!("timestamp {} does not increase", pair[1]),
                    });
                }
                if d != delta {
                    return Err(Error::Ingest {
                        row: Some(i + 2),
                        msg: format!(
                            "irregular spacing: {} then {} (expected uniform steps)",
                            pair[0], pair[1]
                        ),
                    });
                }
            }
        }
        Ok(SeriesTable { timestamps, values, feature_names, target_index })
    }

    /// Number of rows (time steps).
    pub fn n_rows(&self) -> usize {
        self.timestamps.len()
    }

    /// Number of features.
    pub fn d_f(&self) -> usize {
        self.feature_names.len()
    }

    /// One row of values.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d_f();
        &self.values[i * d..(i + 1) * d]
    }

    /// Calendar features for row `i`.
    pub fn marks(&self, i: usize) -> Marks {
        calendar_features(self.timestamps[i])
    }

    /// A contiguous row range as a new table.
    pub fn slice(&self, start: usize, end: usize) -> SeriesTable {
        let d = self.d_f();
        SeriesTable {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start * d..end * d].to_vec(),
            feature_names: self.feature_names.clone(),
            target_index: self.target_index,
        }
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion and serialization
// ---------------------------------------------------------------------------

fn parse_datetime(text: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M"))
        .ok()
}

/// Loads a header-first CSV into a [`SeriesTable`].
///
/// `datetime_col` defaults to `"date"`; every other column becomes a numeric
/// feature. `target_col` picks the target by name and defaults to the last
/// feature column. Rows are sorted by timestamp after parsing, so shuffled
/// files load identically to sorted ones. Row numbers in errors are 1-based
/// file lines (the header is line 1).
pub fn load_csv(
    path: &Path,
    datetime_col: Option<&str>,
    target_col: Option<&str>,
) -> Result<SeriesTable> {
    let dt_name = datetime_col.unwrap_or("date");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingest { row: None, msg: format!("cannot open {path:?}: {e}") })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest { row: Some(1), msg: e.to_string() })?
        .clone();
    let dt_idx = headers.iter().position(|h| h == dt_name).ok_or_else(|| Error::Ingest {
        row: Some(1),
        msg: format!("no datetime column named {dt_name:?} in header"),
    })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != dt_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(Error::Ingest { row: Some(1), msg: "no feature columns in header".into() });
    }
    let target_index = match target_col {
        Some(name) => feature_names.iter().position(|f| f == name).ok_or_else(|| {
            Error::Config(format!("target column {name:?} not present in header"))
        })?,
        None => feature_names.len() - 1,
    };

    let mut rows: Vec<(NaiveDateTime, Vec<f64>, usize)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Ingest { row: None, msg: e.to_string() })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(Error::Ingest {
                row: Some(line),
                msg: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        let ts = parse_datetime(&record[dt_idx]).ok_or_else(|| Error::Ingest {
            row: Some(line),
            msg: format!("unparsable datetime {:?}", &record[dt_idx]),
        })?;
        let mut vals = Vec::with_capacity(feature_names.len());
        for (i, cell) in record.iter().enumerate() {
            if i == dt_idx {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                row: Some(line),
                msg: format!("non-numeric cell {:?} in column {:?}", cell, &headers[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row: Some(line),
                    msg: format!("non-finite value in column {:?}", &headers[i]),
                });
            }
            vals.push(v);
        }
        rows.push((ts, vals, line));
    }

    rows.sort_by_key(|(ts, _, _)| *ts);
    for pair in rows.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Ingest {
                row: Some(pair[1].2),
                msg: format!("duplicate timestamp {}", pair[1].0),
            });
        }
    }

    let timestamps: Vec<NaiveDateTime> = rows.iter().map(|(ts, _, _)| *ts).collect();
    let mut values = Vec::with_capacity(rows.len() * feature_names.len());
    for (_, vals, _) in &rows {
        values.extend_from_slice(vals);
    }
    SeriesTable::new(timestamps, values, feature_names, target_index)
}

/// Formats a float for CSV output (13 significant digits, round-trips well
/// beyond the 1e-9 tolerances used downstream).
pub fn fmt_float(v: f64) -> String {
    format!("{v:.12e}")
}

/// Writes a table in the same CSV format [`load_csv`] reads, atomically
/// (temp file + rename).
pub fn write_csv(table: &SeriesTable, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("date");
    for name in &table.feature_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..table.n_rows() {
        let _ = write!(out, "{}", table.timestamps[i].format("%Y-%m-%d %H:%M:%S"));
        for v in table.row(i) {
            out.push(',');
            out.push_str(&fmt_float(*v));
        }
        out.push('\n');
    }
    crate::checkpoint::atomic_write(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// Splits and normalization
// ---------------------------------------------------------------------------

/// Splits a table into contiguous chronological train/val/test segments with
/// boundaries at `floor(n * cumulative_ratio)`.
pub fn split(
    table: &SeriesTable,
    ratios: (f64, f64, f64),
) -> Result<(SeriesTable, SeriesTable, SeriesTable)> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} do not sum to 1")));
    }
    let n = table.n_rows();
    let b1 = (n as f64 * r_train).floor() as usize;
    let b2 = (n as f64 * (r_train + r_val)).floor() as usize;
    Ok((table.slice(0, b1), table.slice(b1, b2), table.slice(b2, n)))
}

/// [`split`] plus the window-feasibility check: every segment must hold at
/// least one full window of `spec`.
pub fn split_checked(
    table: &SeriesTable,
    ratios: (f64, f64, f64),
    spec: &WindowSpec,
) -> Result<(SeriesTable, SeriesTable, SeriesTable)> {
    let parts = split(table, ratios)?;
    let s_w = spec.window_size();
    for (name, part) in [("train", &parts.0), ("val", &parts.1), ("test", &parts.2)] {
        if part.n_rows() < s_w {
            return Err(Error::Config(format!(
                "{name} segment has {} rows, shorter than one window of {s_w}",
                part.n_rows()
            )));
        }
    }
    Ok(parts)
}

/// Per-feature z-score statistics, fitted on the training split only.
#[derive(Clone, Debug)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalizer {
    /// Fits means and standard deviations per feature; deviations are
    /// floored at `1e-8` so normalization never divides by zero.
    pub fn fit(table: &SeriesTable) -> Normalizer {
        let (n, d) = (table.n_rows(), table.d_f());
        let mut means = vec![0.0; d];
        for i in 0..n {
            for (m, v) in means.iter_mut().zip(table.row(i)) {
                *m += v;
            }
        }
        for m in means.iter_mut() {
            *m /= n.max(1) as f64;
        }
        let mut stds = vec![0.0; d];
        for i in 0..n {
            for (j, v) in table.row(i).iter().enumerate() {
                let c = v - means[j];
                stds[j] += c * c;
            }
        }
        for s in stds.iter_mut() {
            *s = (*s / n.max(1) as f64).sqrt().max(1e-8);
        }
        Normalizer { means, stds }
    }

    /// `(x - mean) / std` over a row-major `[rows x d_f]` buffer.
    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        let d = self.means.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.means[i % d]) / self.stds[i % d])
            .collect()
    }

    /// Inverse of [`Normalizer::normalize`].
    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        let d = self.means.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.stds[i % d] + self.means[i % d])
            .collect()
    }

    /// A copy of `table` with normalized values.
    pub fn apply(&self, table: &SeriesTable) -> SeriesTable {
        SeriesTable {
            timestamps: table.timestamps.clone(),
            values: self.normalize(&table.values),
            feature_names: table.feature_names.clone(),
            target_index: table.target_index,
        }
    }
}

// ---------------------------------------------------------------------------
// Rolling windows
// ---------------------------------------------------------------------------

/// Rolling-window geometry: encoder context, decoder seed length, forecast
/// horizon, and stride between consecutive windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub encoder_len: usize,
    pub decoder_len: usize,
    pub pred_len: usize,
    pub stride: usize,
}

impl WindowSpec {
    /// Validates the window geometry.
    pub fn new(encoder_len: usize, decoder_len: usize, pred_len: usize, stride: usize) -> Result<WindowSpec> {
        if encoder_len == 0 || decoder_len == 0 || pred_len == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "window lengths and stride must be positive: enc {encoder_len}, dec {decoder_len}, pred {pred_len}, stride {stride}"
            )));
        }
        if decoder_len > encoder_len {
            return Err(Error::Config(format!(
                "decoder length {decoder_len} exceeds encoder length {encoder_len} (the decoder seed is the encoder tail)"
            )));
        }
        Ok(WindowSpec { encoder_len, decoder_len, pred_len, stride })
    }

    /// Total rows one window covers: encoder context plus horizon.
    pub fn window_size(&self) -> usize {
        self.encoder_len + self.pred_len
    }
}

/// One training/evaluation sample cut from a series.
#[derive(Clone, Debug)]
pub struct WindowSample {
    /// Start row of the encoder context within the source table.
    pub offset: usize,
    /// `[encoder_len x d_f]` encoder context values.
    pub enc_input: Vec<f64>,
    /// `[decoder_len x d_f]` decoder seed values (the encoder tail).
    pub dec_input: Vec<f64>,
    /// `[pred_len x d_f]` ground-truth horizon values.
    pub target: Vec<f64>,
    /// Calendar features aligned to the encoder rows.
    pub enc_marks: Vec<Marks>,
    /// Calendar features covering the decoder seed plus the horizon
    /// (`decoder_len + pred_len` known future timestamps).
    pub dec_marks: Vec<Marks>,
}

/// Number of rolling windows in a series of `n_rows` rows.
///
/// This is the count of valid start offsets `{0, stride, 2·stride, ...}`
/// with `offset + window_size <= n_rows` — i.e. `floor((n − S_w)/S_s) + 1`.
/// The closed formula `floor((n − S_w + 1)/S_s)` undercounts by one whenever
/// the stride does not divide `n − S_w + 1`; enumeration is authoritative
/// and the discrepancy is pinned by a regression test.
pub fn count_windows(n_rows: usize, spec: &WindowSpec) -> usize {
    let s_w = spec.window_size();
    if n_rows < s_w {
        return 0;
    }
    (n_rows - s_w) / spec.stride + 1
}

/// Cuts every rolling window out of `table` in chronological order.
///
/// Values are normalized through `normalizer` when one is supplied (the
/// table is assumed pre-normalized otherwise); calendar marks always come
/// from the raw timestamps.
pub fn iter_windows(
    table: &SeriesTable,
    spec: &WindowSpec,
    normalizer: Option<&Normalizer>,
) -> Vec<WindowSample> {
    let d = table.d_f();
    let n = table.n_rows();
    let count = count_windows(n, spec);
    let mut out = Vec::with_capacity(count);
    let norm = |vals: &[f64]| match normalizer {
        Some(nrm) => nrm.normalize(vals),
        None => vals.to_vec(),
    };
    for i in 0..count {
        let offset = i * spec.stride;
        let enc_end = offset + spec.encoder_len;
        let tgt_end = enc_end + spec.pred_len;
        let enc_input = norm(&table.values[offset * d..enc_end * d]);
        let dec_start = enc_end - spec.decoder_len;
        let dec_input = enc_input[(dec_start - offset) * d..].to_vec();
        let target = norm(&table.values[enc_end * d..tgt_end * d]);
        let enc_marks = (offset..enc_end).map(|r| table.marks(r)).collect();
        let dec_marks = (dec_start..tgt_end).map(|r| table.marks(r)).collect();
        out.push(WindowSample { offset, enc_input, dec_input, target, enc_marks, dec_marks });
    }
    out
}

/// Fractional overlap between two consecutive encoder inputs at the given
/// stride: `max(0, (L_S − stride)/L_S)`.
pub fn similarity(spec: &WindowSpec, stride: usize) -> f64 {
    let l_s = spec.encoder_len as f64;
    ((l_s - stride as f64) / l_s).max(0.0)
}

/// Calendar features of a timestamp: month (1–12), day of month (1–31),
/// weekday (0 = Monday .. 6 = Sunday), hour (0–23).
pub fn calendar_features(ts: NaiveDateTime) -> Marks {
    [
        ts.month() as usize,
        ts.day() as usize,
        ts.weekday().num_days_from_monday() as usize,
        ts.hour() as usize,
    ]
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Component amplitudes for the synthetic generator. The defaults give a
/// learnable but non-trivial series; tests zero individual components to
/// isolate them.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub points: usize,
    pub features: usize,
    pub seed: u64,
    /// Amplitude of the 24-hour sinusoid.
    pub daily_amp: f64,
    /// Amplitude of the 168-hour sinusoid.
    pub weekly_amp: f64,
    /// Total linear drift across the series.
    pub trend: f64,
    /// Coupling strength onto the shared latent sinusoid (period 56 h, a
    /// divisor of the weekly period so the noiseless signal stays
    /// weekly-periodic plus trend).
    pub coupling: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
}

impl SynthConfig {
    /// Default component mix for `points` rows, `features` columns.
    pub fn new(points: usize, features: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            points,
            features,
            seed,
            daily_amp: 1.0,
            weekly_amp: 0.5,
            trend: 0.6,
            coupling: 0.4,
            noise: 0.1,
        }
    }
}

/// Deterministic multivariate synthetic series: per feature, a daily and a
/// weekly sinusoid with feature-specific amplitude and phase, a linear
/// trend, coupling onto one shared latent sinusoid, and Gaussian noise.
pub fn synth_generate(n_points: usize, d_f: usize, seed: u64) -> Result<SeriesTable> {
    synth_generate_cfg(&SynthConfig::new(n_points, d_f, seed))
}

/// [`synth_generate`] with explicit component amplitudes.
pub fn synth_generate_cfg(cfg: &SynthConfig) -> Result<SeriesTable> {
    if cfg.points == 0 {
        return Err(Error::Config("synthetic series needs at least one point".into()));
    }
    if cfg.features == 0 {
        return Err(Error::Config("synthetic series needs at least one feature".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tau = std::f64::consts::TAU;

    struct FeatureMix {
        daily_scale: f64,
        daily_phase: f64,
        weekly_scale: f64,
        weekly_phase: f64,
        slope: f64,
        couple: f64,
    }
    let mixes: Vec<FeatureMix> = (0..cfg.features)
        .map(|_| FeatureMix {
            daily_scale: rng.gen_range(0.5..1.5),
            daily_phase: rng.gen_range(0.0..tau),
            weekly_scale: rng.gen_range(0.5..1.5),
            weekly_phase: rng.gen_range(0.0..tau),
            slope: rng.gen_range(-1.0..1.0),
            couple: rng.gen_range(0.5..1.5),
        })
        .collect();

    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        // Box-Muller from two uniforms in (0, 1].
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (tau * u2).cos()
    };

    let n = cfg.points;
    let mut values = Vec::with_capacity(n * cfg.features);
    for t in 0..n {
        let tf = t as f64;
        let latent = (tau * tf / 56.0).sin();
        for mix in &mixes {
            let mut v = cfg.daily_amp * mix.daily_scale * (tau * tf / 24.0 + mix.daily_phase).sin()
                + cfg.weekly_amp * mix.weekly_scale * (tau * tf / 168.0 + mix.weekly_phase).sin()
                + cfg.trend * mix.slope * (tf / n as f64)
                + cfg.coupling * mix.couple * latent;
            if cfg.noise > 0.0 {
                v += cfg.noise * gauss(&mut rng);
            }
            values.push(v);
        }
    }

    let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let timestamps: Vec<NaiveDateTime> =
        (0..n).map(|t| start + chrono::Duration::hours(t as i64)).collect();
    let feature_names: Vec<String> = (0..cfg.features).map(|f| format!("f{f}")).collect();
    let target = feature_names.len() - 1;
    SeriesTable::new(timestamps, values, feature_names, target)
}
