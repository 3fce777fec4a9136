//! Command implementations behind the `memcast` binary: train, eval,
//! forecast, selfcheck, and synth. Each command is an ordinary function
//! returning a structured outcome, so integration tests drive them without
//! spawning processes; the binary maps errors to exit codes (1 usage,
//! 2 data, 3 numeric).
//!
//! Training writes three artifacts into the output directory — the
//! checkpoint, the per-epoch history CSV, and a resolved-config echo that
//! reproduces the run when fed back through `--config`. All writes are
//! atomic (temp file + rename), so failures leave no partial artifacts.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{
    iter_windows, load_csv, split_checked, synth_generate_cfg, write_csv, Normalizer, SeriesTable,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::memory::{self, MemoryState};
use crate::model::Forecaster;
use crate::selfcheck::{run_selfcheck, SelfCheckReport};
use crate::train::{evaluate, fit, FitReport};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const FORECAST_FILE: &str = "forecast.csv";

/// Materializes the configured data source into a series table.
pub fn load_table(source: &DataSource) -> Result<SeriesTable> {
    match source {
        DataSource::Csv { path, datetime_col, target_col } => {
            load_csv(Path::new(path), datetime_col.as_deref(), target_col.as_deref())
        }
        DataSource::Synth { points, features, seed } => {
            synth_generate_cfg(&SynthConfig::new(*points, *features, *seed))
        }
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    pub config_path: PathBuf,
    pub report: FitReport,
    /// Test-split metrics under the trained model, memory continuing from
    /// the best-validation state.
    pub test_mse: f64,
    pub test_mae: f64,
}

/// Runs a full training job from a resolved config and writes the three
/// artifacts into `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let table = load_table(&cfg.data)?;
    let (train_raw, val_raw, test_raw) = split_checked(&table, cfg.split, &cfg.window)?;
    let norm = Normalizer::fit(&train_raw);
    let train = norm.apply(&train_raw);
    let val = norm.apply(&val_raw);
    let test = norm.apply(&test_raw);

    let model_cfg = cfg.model_config(table.d_f())?;
    let model = Forecaster::new(model_cfg, cfg.seed)?;
    let state = model.init_memory()?;
    let report = fit(
        &model,
        state,
        &train,
        &val,
        &cfg.window,
        &cfg.schedule,
        cfg.batch_size,
        cfg.seed,
    )?;
    let mut test_state = report.final_state.clone();
    let (test_mse, test_mae) = evaluate(&model, &mut test_state, &test, &cfg.window)?;

    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Persistence(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut ckpt = Checkpoint::new();
    model.write_checkpoint(&mut ckpt);
    ckpt.add_array("norm.means", vec![1, norm.means.len()], norm.means.clone());
    ckpt.add_array("norm.stds", vec![1, norm.stds.len()], norm.stds.clone());
    ckpt.add_blob("memory_state", memory::persist(&report.final_state));
    ckpt.add_blob("run_config", cfg.echo().into_bytes());
    ckpt.set_field("schedule.ticks", report.dropout_trajectory.len());
    ckpt.set_field("train.best_epoch", report.best_epoch);
    ckpt.set_field("train.best_val_mse", crate::data::fmt_float(report.best_val_mse));

    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    ckpt.save(&checkpoint_path)?;
    let history_path = out_dir.join(HISTORY_FILE);
    crate::checkpoint::atomic_write(&history_path, report.history_csv().as_bytes())?;
    let config_path = out_dir.join(RESOLVED_CONFIG_FILE);
    crate::checkpoint::atomic_write(&config_path, cfg.echo().as_bytes())?;

    Ok(TrainOutcome { checkpoint_path, history_path, config_path, report, test_mse, test_mae })
}

// ---------------------------------------------------------------------------
// checkpoint loading shared by eval / forecast
// ---------------------------------------------------------------------------

/// Everything a checkpoint reconstructs: the model, its memory state, the
/// fitted normalizer, and the resolved run config.
pub struct LoadedRun {
    pub model: Forecaster,
    pub state: MemoryState,
    pub normalizer: Normalizer,
    pub config: RunConfig,
}

/// Loads a checkpoint and restores the run around it. `data_override`
/// replaces the stored data source with a CSV path.
pub fn load_run(ckpt_path: &Path, data_override: Option<&Path>) -> Result<LoadedRun> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = Forecaster::read_checkpoint(&ckpt)?;
    let state = memory::restore(ckpt.blob("memory_state")?)?;
    let means = ckpt.array("norm.means")?.data.clone();
    let stds = ckpt.array("norm.stds")?.data.clone();
    let normalizer = Normalizer { means, stds };
    let echo = std::str::from_utf8(ckpt.blob("run_config")?)
        .map_err(|_| Error::Persistence("run_config blob is not UTF-8".into()))?;
    let mut config = crate::config::parse_config(echo)?;
    if let Some(path) = data_override {
        config.data = DataSource::Csv {
            path: path.display().to_string(),
            datetime_col: None,
            target_col: None,
        };
    }
    Ok(LoadedRun { model, state, normalizer, config })
}

/// The test split of the run's dataset, normalized with the stored
/// statistics. Errors if the dataset's feature count no longer matches the
/// checkpointed model.
fn test_split(run: &LoadedRun) -> Result<SeriesTable> {
    let table = load_table(&run.config.data)?;
    if table.d_f() != run.model.config.d_f {
        return Err(Error::Config(format!(
            "dataset has {} features but the checkpoint was trained on {}",
            table.d_f(),
            run.model.config.d_f
        )));
    }
    if table.d_f() != run.normalizer.means.len() {
        return Err(Error::Persistence(format!(
            "normalizer covers {} features, dataset has {}",
            run.normalizer.means.len(),
            table.d_f()
        )));
    }
    let (_, _, test_raw) = split_checked(&table, run.config.split, &run.config.window)?;
    Ok(run.normalizer.apply(&test_raw))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct EvalOutcome {
    pub mse: f64,
    pub mae: f64,
    pub updates_before: u64,
    pub updates_after: u64,
    pub metrics_path: Option<PathBuf>,
}

/// Evaluates a checkpoint on its dataset's test split. With `freeze_memory`
/// the memory matrix stays inert; otherwise it keeps updating window by
/// window. Writes `metrics.txt` when an output directory is given.
pub fn cmd_eval(
    ckpt_path: &Path,
    data_override: Option<&Path>,
    freeze_memory: bool,
    out_dir: Option<&Path>,
) -> Result<EvalOutcome> {
    let run = load_run(ckpt_path, data_override)?;
    let test = test_split(&run)?;
    let mut state = run.state;
    state.frozen = freeze_memory;
    let updates_before = state.update_count;
    let (mse, mae) = evaluate(&run.model, &mut state, &test, &run.config.window)?;
    let updates_after = state.update_count;

    let metrics_path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| {
                Error::Persistence(format!("cannot create {}: {e}", dir.display()))
            })?;
            let path = dir.join(METRICS_FILE);
            let body = format!(
                "mse = {}\nmae = {}\nwindows_memory_updates = {}\nfrozen = {}\n",
                crate::data::fmt_float(mse),
                crate::data::fmt_float(mae),
                updates_after - updates_before,
                freeze_memory
            );
            crate::checkpoint::atomic_write(&path, body.as_bytes())?;
            Some(path)
        }
        None => None,
    };
    Ok(EvalOutcome { mse, mae, updates_before, updates_after, metrics_path })
}

// ---------------------------------------------------------------------------
// forecast
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ForecastOutcome {
    pub csv_path: Option<PathBuf>,
    /// `(timestamp, truth, prediction, persistence)` per horizon step, in
    /// denormalized target units.
    pub rows: Vec<(String, f64, f64, f64)>,
}

/// Forecasts one rolling window of the test split (by index) and emits the
/// denormalized target trajectory alongside the truth and the
/// repeat-last-value persistence baseline.
pub fn cmd_forecast(
    ckpt_path: &Path,
    data_override: Option<&Path>,
    window_index: usize,
    out_dir: Option<&Path>,
) -> Result<ForecastOutcome> {
    let run = load_run(ckpt_path, data_override)?;
    let test = test_split(&run)?;
    let spec = &run.config.window;
    let windows = iter_windows(&test, spec, None);
    if window_index >= windows.len() {
        return Err(Error::Usage(format!(
            "window index {window_index} out of range: test split holds {} windows",
            windows.len()
        )));
    }
    let window = &windows[window_index];
    let mut state = run.state;
    state.frozen = true;

    let mut tape = crate::tensor::Tape::inference();
    let out = run.model.forward(&mut tape, window, &state, None, 0.0, false, 0)?;
    let pred = out.pred.to_vec();

    let d = test.d_f();
    let target_col = test.target_index;
    let last_obs_row =
        run.normalizer.denormalize(&window.enc_input[(spec.encoder_len - 1) * d..]);
    let persistence = last_obs_row[target_col];

    let mut rows = Vec::with_capacity(spec.pred_len);
    for j in 0..spec.pred_len {
        let truth_row = run.normalizer.denormalize(&window.target[j * d..(j + 1) * d]);
        let pred_row = run.normalizer.denormalize(&pred[j * d..(j + 1) * d]);
        let ts = test.timestamps[window.offset + spec.encoder_len + j]
            .format("%Y-%m-%d %H:%M:%S")
            .to_string();
        rows.push((ts, truth_row[target_col], pred_row[target_col], persistence));
    }

    let csv_path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| {
                Error::Persistence(format!("cannot create {}: {e}", dir.display()))
            })?;
            let path = dir.join(FORECAST_FILE);
            let mut body = String::from("timestamp,true,predicted,persistence\n");
            for (ts, t, p, b) in &rows {
                body.push_str(&format!(
                    "{ts},{},{},{}\n",
                    crate::data::fmt_float(*t),
                    crate::data::fmt_float(*p),
                    crate::data::fmt_float(*b)
                ));
            }
            crate::checkpoint::atomic_write(&path, body.as_bytes())?;
            Some(path)
        }
        None => None,
    };
    Ok(ForecastOutcome { csv_path, rows })
}

// ---------------------------------------------------------------------------
// selfcheck / synth
// ---------------------------------------------------------------------------

/// Runs the gradient battery; the caller renders and picks the exit code.
pub fn cmd_selfcheck(inject_fault: bool) -> Result<SelfCheckReport> {
    run_selfcheck(inject_fault)
}

/// Generates a synthetic dataset CSV in the ingestion format.
pub fn cmd_synth(points: usize, features: usize, seed: u64, out_path: &Path) -> Result<()> {
    let table = synth_generate_cfg(&SynthConfig::new(points, features, seed))?;
    write_csv(&table, out_path)
}
