//! Run configuration: plain-text dotted key-value files resolved against
//! per-horizon default buckets.
//!
//! A config file holds one `key = value` pair per line (`#` starts a
//! comment). Defaults depend on the prediction length: horizons of
//! {24, 48, 168, 336, 720} steps select context/feed lengths of
//! {48, 96, 168, 168, 336} / {48, 48, 168, 168, 336}, batch sizes of
//! {32, 32, 8, 8, 4}, and {1, 1, 2, 2, 2} encoder layers. Explicit keys
//! always override the bucket. [`RunConfig::echo`] emits the fully resolved
//! configuration in the same syntax, so feeding the echo back reproduces
//! the run exactly.

use std::path::Path;

use crate::data::WindowSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainSchedule;

/// Where the series comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv {
        path: String,
        /// Header of the timestamp column; default "date".
        datetime_col: Option<String>,
        /// Header of the target feature; default last column.
        target_col: Option<String>,
    },
    Synth {
        points: usize,
        features: usize,
        /// Generator seed (independent of the run seed).
        seed: u64,
    },
}

/// Fully resolved run description: data source, splits, windowing, model
/// shape, training schedule, and run-level knobs. `model.d_f` and
/// `model.output_dim` stay 0 until [`RunConfig::model_config`] patches them
/// from the ingested table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub split: (f64, f64, f64),
    pub window: WindowSpec,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: String,
}

/// Per-horizon defaults: `(context_len, feed_len, batch_size, enc_layers)`.
/// Horizons between buckets take the next bucket up; horizons beyond 720
/// take the largest.
pub fn bucket_defaults(pred_len: usize) -> (usize, usize, usize, usize) {
    const BUCKETS: [(usize, usize, usize, usize, usize); 5] = [
        (24, 48, 48, 32, 1),
        (48, 96, 48, 32, 1),
        (168, 168, 168, 8, 2),
        (336, 168, 168, 8, 2),
        (720, 336, 336, 4, 2),
    ];
    for (cap, l_s, l_dec, batch, enc) in BUCKETS {
        if pred_len <= cap {
            return (l_s, l_dec, batch, enc);
        }
    }
    let (_, l_s, l_dec, batch, enc) = BUCKETS[4];
    (l_s, l_dec, batch, enc)
}

impl RunConfig {
    /// Bucket defaults for a horizon of `pred_len` steps on synthetic data.
    pub fn default_for(pred_len: usize) -> RunConfig {
        let (l_s, l_dec, batch, enc_layers) = bucket_defaults(pred_len);
        RunConfig {
            data: DataSource::Synth { points: 2000, features: 3, seed: 11 },
            split: (0.7, 0.1, 0.2),
            window: WindowSpec {
                encoder_len: l_s,
                decoder_len: l_dec,
                pred_len,
                stride: 1,
            },
            model: ModelConfig {
                d_model: 1024,
                d_ff: 2048,
                n_heads: 8,
                enc_layers,
                dec_layers: 1,
                base_dropout: 0.1,
                l_s,
                l_dec,
                l_p: pred_len,
                d_f: 0,
                output_dim: 0,
                n_slots: 1,
                mem_heads: 4,
                memory_enabled: true,
                decode_then_update: false,
                gates_use_prev_feed: false,
            },
            schedule: TrainSchedule::default(),
            batch_size: batch,
            seed: 0,
            out_dir: "out".to_string(),
        }
    }

    /// Copy of `model` with feature counts patched in from the data and the
    /// window lengths mirrored, validated as a whole.
    pub fn model_config(&self, d_f: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.d_f = d_f;
        m.output_dim = d_f;
        m.l_s = self.window.encoder_len;
        m.l_dec = self.window.decoder_len;
        m.l_p = self.window.pred_len;
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::Config(format!(
                "split ratios ({a}, {b}, {c}) must all be positive"
            )));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios ({a}, {b}, {c}) must sum to 1"
            )));
        }
        // Re-run the windowing invariants (fields may have been assigned
        // directly during parsing).
        WindowSpec::new(
            self.window.encoder_len,
            self.window.decoder_len,
            self.window.pred_len,
            self.window.stride,
        )?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if let DataSource::Synth { points, features, .. } = &self.data {
            if *points == 0 || *features == 0 {
                return Err(Error::Config(
                    "synthetic source needs positive data.points and data.features".into(),
                ));
            }
        }
        Ok(())
    }

    /// The resolved configuration as a parseable key-value listing.
    /// `parse_config(cfg.echo())` reconstructs `cfg` exactly.
    pub fn echo(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        match &self.data {
            DataSource::Csv { path, datetime_col, target_col } => {
                s.push_str("data.source = csv\n");
                s.push_str(&format!("data.path = {path}\n"));
                if let Some(c) = datetime_col {
                    s.push_str(&format!("data.datetime_col = {c}\n"));
                }
                if let Some(c) = target_col {
                    s.push_str(&format!("data.target_col = {c}\n"));
                }
            }
            DataSource::Synth { points, features, seed } => {
                s.push_str("data.source = synth\n");
                s.push_str(&format!("data.points = {points}\n"));
                s.push_str(&format!("data.features = {features}\n"));
                s.push_str(&format!("data.seed = {seed}\n"));
            }
        }
        s.push_str(&format!("split.train = {}\n", self.split.0));
        s.push_str(&format!("split.val = {}\n", self.split.1));
        s.push_str(&format!("split.test = {}\n", self.split.2));
        s.push_str(&format!("window.pred_len = {}\n", self.window.pred_len));
        s.push_str(&format!("window.encoder_len = {}\n", self.window.encoder_len));
        s.push_str(&format!("window.decoder_len = {}\n", self.window.decoder_len));
        s.push_str(&format!("window.stride = {}\n", self.window.stride));
        let m = &self.model;
        s.push_str(&format!("model.d_model = {}\n", m.d_model));
        s.push_str(&format!("model.d_ff = {}\n", m.d_ff));
        s.push_str(&format!("model.n_heads = {}\n", m.n_heads));
        s.push_str(&format!("model.enc_layers = {}\n", m.enc_layers));
        s.push_str(&format!("model.dec_layers = {}\n", m.dec_layers));
        s.push_str(&format!("model.dropout = {}\n", m.base_dropout));
        s.push_str(&format!("model.n_slots = {}\n", m.n_slots));
        s.push_str(&format!("model.mem_heads = {}\n", m.mem_heads));
        s.push_str(&format!("model.memory_enabled = {}\n", m.memory_enabled));
        s.push_str(&format!("model.decode_then_update = {}\n", m.decode_then_update));
        s.push_str(&format!("model.gates_use_prev_feed = {}\n", m.gates_use_prev_feed));
        let t = &self.schedule;
        s.push_str(&format!("train.theta_max = {}\n", t.theta_max));
        s.push_str(&format!("train.gamma_decay = {}\n", t.gamma_decay));
        s.push_str(&format!("train.cadence = {}\n", t.cadence));
        s.push_str(&format!("train.epochs = {}\n", t.epochs));
        s.push_str(&format!("train.patience = {}\n", t.patience));
        s.push_str(&format!("train.lr0 = {}\n", t.lr0));
        s.push_str(&format!("train.curriculum = {}\n", t.curriculum));
        s.push_str(&format!("train.batch_size = {}\n", self.batch_size));
        s.push_str(&format!("run.seed = {}\n", self.seed));
        s.push_str(&format!("run.out_dir = {}\n", self.out_dir));
        s
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "line {line}: invalid value '{value}' for {key} (expected {})",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: invalid value '{value}' for {key} (expected true/false)"
        ))),
    }
}

/// Splits config text into `(line_number, key, value)` triples, dropping
/// comments and blanks. Line numbers are 1-based.
fn tokenize(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {line}: expected 'key = value', got '{stripped}'"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "line {line}: empty key or value in '{stripped}'"
            )));
        }
        pairs.push((line, key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Parses a config file's text into a fully resolved [`RunConfig`].
///
/// Resolution order: the horizon (`window.pred_len`, default 24) selects the
/// default bucket; every explicit key then overrides its default, later
/// duplicates winning. Errors carry the 1-based line number and key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let pairs = tokenize(text)?;
    let mut pred_len = 24usize;
    for (line, key, value) in &pairs {
        if key == "window.pred_len" {
            pred_len = parse_num(*line, key, value)?;
        }
    }
    let mut cfg = RunConfig::default_for(pred_len);

    // The CSV source needs a path, so data keys accumulate separately and
    // combine once all lines are seen.
    let mut source: Option<String> = None;
    let mut csv_path: Option<String> = None;
    let mut datetime_col: Option<String> = None;
    let mut target_col: Option<String> = None;
    let (mut synth_points, mut synth_features, mut synth_seed) =
        match cfg.data {
            DataSource::Synth { points, features, seed } => (points, features, seed),
            _ => unreachable!("defaults are synthetic"),
        };
    let mut data_line = 0usize;

    for (line, key, value) in &pairs {
        let (line, value) = (*line, value.as_str());
        match key.as_str() {
            "data.source" => {
                if value != "csv" && value != "synth" {
                    return Err(Error::Config(format!(
                        "line {line}: data.source must be 'csv' or 'synth', got '{value}'"
                    )));
                }
                source = Some(value.to_string());
                data_line = line;
            }
            "data.path" => csv_path = Some(value.to_string()),
            "data.datetime_col" => datetime_col = Some(value.to_string()),
            "data.target_col" => target_col = Some(value.to_string()),
            "data.points" => synth_points = parse_num(line, key, value)?,
            "data.features" => synth_features = parse_num(line, key, value)?,
            "data.seed" => synth_seed = parse_num(line, key, value)?,
            "split.train" => cfg.split.0 = parse_num(line, key, value)?,
            "split.val" => cfg.split.1 = parse_num(line, key, value)?,
            "split.test" => cfg.split.2 = parse_num(line, key, value)?,
            "window.pred_len" => {
                cfg.window.pred_len = parse_num(line, key, value)?;
                cfg.model.l_p = cfg.window.pred_len;
            }
            "window.encoder_len" => {
                cfg.window.encoder_len = parse_num(line, key, value)?;
                cfg.model.l_s = cfg.window.encoder_len;
            }
            "window.decoder_len" => {
                cfg.window.decoder_len = parse_num(line, key, value)?;
                cfg.model.l_dec = cfg.window.decoder_len;
            }
            "window.stride" => cfg.window.stride = parse_num(line, key, value)?,
            "model.d_model" => cfg.model.d_model = parse_num(line, key, value)?,
            "model.d_ff" => cfg.model.d_ff = parse_num(line, key, value)?,
            "model.n_heads" => cfg.model.n_heads = parse_num(line, key, value)?,
            "model.enc_layers" => cfg.model.enc_layers = parse_num(line, key, value)?,
            "model.dec_layers" => cfg.model.dec_layers = parse_num(line, key, value)?,
            "model.dropout" => cfg.model.base_dropout = parse_num(line, key, value)?,
            "model.n_slots" => cfg.model.n_slots = parse_num(line, key, value)?,
            "model.mem_heads" => cfg.model.mem_heads = parse_num(line, key, value)?,
            "model.memory_enabled" => cfg.model.memory_enabled = parse_bool(line, key, value)?,
            "model.decode_then_update" => {
                cfg.model.decode_then_update = parse_bool(line, key, value)?
            }
            "model.gates_use_prev_feed" => {
                cfg.model.gates_use_prev_feed = parse_bool(line, key, value)?
            }
            "train.theta_max" => cfg.schedule.theta_max = parse_num(line, key, value)?,
            "train.gamma_decay" => cfg.schedule.gamma_decay = parse_num(line, key, value)?,
            "train.cadence" => cfg.schedule.cadence = parse_num(line, key, value)?,
            "train.epochs" => cfg.schedule.epochs = parse_num(line, key, value)?,
            "train.patience" => cfg.schedule.patience = parse_num(line, key, value)?,
            "train.lr0" => cfg.schedule.lr0 = parse_num(line, key, value)?,
            "train.curriculum" => cfg.schedule.curriculum = parse_bool(line, key, value)?,
            "train.batch_size" => cfg.batch_size = parse_num(line, key, value)?,
            "run.seed" => cfg.seed = parse_num(line, key, value)?,
            "run.out_dir" => cfg.out_dir = value.to_string(),
            _ => {
                return Err(Error::Config(format!("line {line}: unknown key '{key}'")));
            }
        }
    }

    match source.as_deref() {
        Some("csv") => {
            let path = csv_path.ok_or_else(|| {
                Error::Config(format!(
                    "line {data_line}: data.source = csv requires data.path"
                ))
            })?;
            cfg.data = DataSource::Csv { path, datetime_col, target_col };
        }
        _ => {
            cfg.data = DataSource::Synth {
                points: synth_points,
                features: synth_features,
                seed: synth_seed,
            };
        }
    }

    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file; I/O errors carry the path.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_config(&text)
}
