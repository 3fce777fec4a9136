//! Progressive training loop: curriculum dropout, MSE objective, Adam with
//! global-norm gradient clipping, learning-rate halving, early stopping, and
//! chronological epoch orchestration over rolling windows.
//!
//! The dropout rate follows a curriculum: starting at zero and rising toward
//! `theta_max` as `rate(t) = min(theta_max, (1 - theta_max)(1 - e^(-gamma t)))`
//! where `t` counts blocks of `cadence` optimizer steps. Validation always
//! runs with frozen memory and no dropout so early stopping compares like
//! with like; the best-validation parameters and memory state are restored
//! before returning.

use crate::data::{iter_windows, SeriesTable, WindowSample, WindowSpec};
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::model::{Forecaster, SeedStream};
use crate::tensor::{Tape, Tensor};

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

/// Hyperparameters of the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    /// Upper dropout limit; must lie in (0, 0.5] for the schedule's cap to
    /// be the limit of its rising branch.
    pub theta_max: f64,
    /// Decay constant of the curriculum (per tick).
    pub gamma_decay: f64,
    /// Optimizer steps per schedule tick.
    pub cadence: u64,
    pub epochs: usize,
    pub patience: usize,
    pub lr0: f64,
    /// When false, dropout stays constant at `theta_max` (the conventional
    /// fixed-rate regime, used as the ablation baseline).
    pub curriculum: bool,
}

impl Default for TrainSchedule {
    fn default() -> TrainSchedule {
        TrainSchedule {
            theta_max: 0.1,
            gamma_decay: 0.01,
            cadence: 100,
            epochs: 6,
            patience: 3,
            lr0: 1e-4,
            curriculum: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_max > 0.0 && self.theta_max <= 0.5) {
            return Err(Error::Config(format!(
                "dropout limit {} must lie in (0, 0.5]: beyond 0.5 the schedule's \
                 rising branch tops out below the limit and the cap is unreachable",
                self.theta_max
            )));
        }
        if self.gamma_decay <= 0.0 {
            return Err(Error::Config(format!(
                "curriculum decay {} must be positive",
                self.gamma_decay
            )));
        }
        if self.cadence == 0 {
            return Err(Error::Config("schedule cadence must be positive".into()));
        }
        if self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("epochs and patience must be positive".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr0)));
        }
        Ok(())
    }
}

/// Curriculum dropout rate at tick `t`:
/// `min(theta_max, (1 - theta_max)(1 - e^(-gamma t)))`. Zero at `t = 0`,
/// monotone non-decreasing, capped at `theta_max`.
pub fn dropout_rate(t: u64, schedule: &TrainSchedule) -> f64 {
    let rising = (1.0 - schedule.theta_max) * (1.0 - (-schedule.gamma_decay * t as f64).exp());
    rising.min(schedule.theta_max)
}

/// Learning rate per epoch: `lr0` for the first two epochs, then halved
/// every epoch (`lr0 * 0.5^(epoch-1)` from epoch 2 on).
pub fn learning_rate(epoch: usize, schedule: &TrainSchedule) -> f64 {
    if epoch < 2 {
        schedule.lr0
    } else {
        schedule.lr0 * 0.5f64.powi(epoch as i32 - 1)
    }
}

// ---------------------------------------------------------------------------
// Loss and metrics
// ---------------------------------------------------------------------------

/// Mean squared error over all elements, as a differentiable scalar.
pub fn mse_loss(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(&diff, &diff)?;
    let total = tape.sum(&sq)?;
    tape.scale(&total, 1.0 / pred.len() as f64)
}

/// Plain (non-differentiable) MSE and MAE over two equal-length buffers.
pub fn window_metrics(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let n = pred.len().max(1) as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    (se / n, ae / n)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam accumulators, one moment pair per parameter tensor, plus the global
/// gradient-norm clip applied before every update.
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl OptimizerState {
    /// Fresh state with moment buffers mirroring `params` shapes.
    pub fn new(params: &[(String, Tensor)]) -> OptimizerState {
        OptimizerState {
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Global L2 norm of all populated gradients.
pub fn global_grad_norm(params: &[(String, Tensor)]) -> f64 {
    let mut total = 0.0;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            total += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    total.sqrt()
}

/// One Adam update over every parameter: gradients are globally norm-clipped
/// at `opt.clip_norm`, moments updated with bias correction, parameters
/// adjusted in place, and gradients zeroed afterwards. Parameters without a
/// gradient this step contribute zero.
pub fn optimizer_step(
    params: &[(String, Tensor)],
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != opt.m.len() {
        return Err(Error::Contract(format!(
            "optimizer has {} moment buffers for {} parameters",
            opt.m.len(),
            params.len()
        )));
    }
    let norm = global_grad_norm(params);
    let clip_scale = if norm > opt.clip_norm { opt.clip_norm / norm } else { 1.0 };
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for (i, (name, p)) in params.iter().enumerate() {
        let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        if grad.len() != opt.m[i].len() {
            return Err(Error::Contract(format!(
                "moment buffer for {name} has {} entries, gradient has {}",
                opt.m[i].len(),
                grad.len()
            )));
        }
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        p.with_data_mut(|data| {
            for j in 0..data.len() {
                let g = grad[j] * clip_scale;
                m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g;
                v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        });
        p.zero_grad();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Patience-based early stopping on validation loss.
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    fails: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping { patience, best: f64::INFINITY, fails: 0 }
    }

    /// Feeds one epoch's validation loss. Returns `(is_best, should_stop)`:
    /// a strict improvement resets the failure streak; `patience`
    /// consecutive non-improvements request a stop.
    pub fn observe(&mut self, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.fails = 0;
            (true, false)
        } else {
            self.fails += 1;
            (false, self.fails >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

/// One epoch's summary row.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
    /// Dropout rate in effect at the epoch's last iteration.
    pub dropout_rate: f64,
}

/// Everything [`fit`] produces besides the (in-place updated) parameters.
#[derive(Debug)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    /// Curriculum rate per tick, in tick order.
    pub dropout_trajectory: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    /// Memory state as of the best-validation epoch.
    pub final_state: MemoryState,
}

impl FitReport {
    /// Plain-text CSV of the per-epoch history.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,lr,dropout_rate\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                crate::data::fmt_float(e.train_mse),
                crate::data::fmt_float(e.val_mse),
                crate::data::fmt_float(e.lr),
                crate::data::fmt_float(e.dropout_rate),
            ));
        }
        out
    }
}

/// Forward + loss over one chronological batch of windows. The memory
/// transition runs once per batch on the elementwise mean of the embedded
/// decoder feeds (batch size 1 reproduces literal per-window semantics);
/// every window then decodes under the shared updated matrix.
#[allow(clippy::too_many_arguments)]
fn forward_batch(
    model: &Forecaster,
    tape: &mut Tape,
    batch: &[WindowSample],
    state: &MemoryState,
    prev_summary: Option<&Tensor>,
    rate: f64,
    train: bool,
    seed: u64,
) -> Result<(Tensor, MemoryState, Tensor)> {
    let cfg = &model.config;
    if batch.len() == 1 {
        let out = model.forward(tape, &batch[0], state, prev_summary, rate, train, seed)?;
        let target = Tensor::from_vec(batch[0].target.clone(), &[cfg.l_p, cfg.output_dim])?;
        let loss = mse_loss(tape, &out.pred, &target)?;
        return Ok((loss, out.next_state, out.feed_summary));
    }

    let mut seeds = SeedStream::new(seed);
    let mut enc_embeds = Vec::with_capacity(batch.len());
    let mut feed_embeds = Vec::with_capacity(batch.len());
    for w in batch {
        let enc_x = Tensor::from_vec(w.enc_input.clone(), &[cfg.l_s, cfg.d_f])?;
        enc_embeds.push(crate::embedding::embed(
            tape,
            &enc_x,
            &w.enc_marks,
            &model.enc_embed,
            rate,
            train,
            seeds.next(),
        )?);
        let (feed_values, feed_marks) = crate::model::build_decoder_feed(w, cfg.d_f, cfg.l_p);
        let feed_x = Tensor::from_vec(feed_values, &[cfg.l_dec + cfg.l_p, cfg.d_f])?;
        feed_embeds.push(crate::embedding::embed(
            tape,
            &feed_x,
            &feed_marks,
            &model.dec_embed,
            rate,
            train,
            seeds.next(),
        )?);
    }
    let mut feed_sum = feed_embeds[0].clone();
    for f in &feed_embeds[1..] {
        feed_sum = tape.add(&feed_sum, f)?;
    }
    let feed_avg = tape.scale(&feed_sum, 1.0 / batch.len() as f64)?;
    let (m_t, next_state, summary) = model.memory_step(tape, state, &feed_avg, prev_summary)?;

    let mut loss_sum: Option<Tensor> = None;
    for (i, w) in batch.iter().enumerate() {
        let enc_out = model.encode(tape, &enc_embeds[i], rate, train, &mut seeds)?;
        let dec_out =
            model.decode(tape, &feed_embeds[i], &enc_out, m_t.as_ref(), rate, train, &mut seeds)?;
        let pred = model.project_output(tape, &dec_out)?;
        let target = Tensor::from_vec(w.target.clone(), &[cfg.l_p, cfg.output_dim])?;
        let loss = mse_loss(tape, &pred, &target)?;
        loss_sum = Some(match loss_sum {
            Some(acc) => tape.add(&acc, &loss)?,
            None => loss,
        });
    }
    let loss = tape.scale(&loss_sum.unwrap(), 1.0 / batch.len() as f64)?;
    Ok((loss, next_state, summary))
}

/// Trains `model` in place over chronological rolling windows.
///
/// Tables must already be normalized. Per iteration the dropout rate comes
/// from the curriculum (tick = optimizer steps / cadence), the loss is MSE
/// over all target features, and one Adam step with gradient clipping
/// follows. After each epoch, validation MSE is measured with a frozen copy
/// of the memory and dropout off; early stopping triggers after `patience`
/// epochs without improvement. Parameters and memory are restored to the
/// best-validation epoch before returning.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &Forecaster,
    state: MemoryState,
    train_table: &SeriesTable,
    val_table: &SeriesTable,
    spec: &WindowSpec,
    schedule: &TrainSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<FitReport> {
    schedule.validate()?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let windows = iter_windows(train_table, spec, None);
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "training split of {} rows holds no window of {}",
            train_table.n_rows(),
            spec.window_size()
        )));
    }
    let params = model.named_parameters();
    let mut opt = OptimizerState::new(&params);
    let mut seeds = SeedStream::new(seed);
    let mut stopper = EarlyStopping::new(schedule.patience);

    let snapshot = |params: &[(String, Tensor)]| -> Vec<Vec<f64>> {
        params.iter().map(|(_, p)| p.to_vec()).collect()
    };

    let mut state = state;
    let mut prev_summary: Option<Tensor> = None;
    let mut epochs = Vec::new();
    let mut trajectory: Vec<f64> = Vec::new();
    let mut global_step: u64 = 0;
    let mut best: Option<(usize, f64, Vec<Vec<f64>>, MemoryState)> = None;
    let mut stopped_early = false;

    for epoch in 0..schedule.epochs {
        let lr = learning_rate(epoch, schedule);
        let mut loss_sum = 0.0;
        let mut iterations = 0usize;
        let mut last_rate = 0.0;
        for batch in windows.chunks(batch_size) {
            let tick = global_step / schedule.cadence;
            let rate = if schedule.curriculum {
                dropout_rate(tick, schedule)
            } else {
                schedule.theta_max
            };
            if trajectory.len() == tick as usize {
                trajectory.push(if schedule.curriculum {
                    rate
                } else {
                    schedule.theta_max
                });
            }
            last_rate = rate;

            let mut tape = Tape::new();
            let (loss, next_state, summary) =
                forward_batch(model, &mut tape, batch, &state, prev_summary.as_ref(), rate, true, seeds.next())?;
            let loss_value = loss.value();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became non-finite at epoch {epoch}, iteration {iterations} \
                     (lr {lr:.3e}, dropout {rate:.4})"
                )));
            }
            tape.backward(&loss)?;
            optimizer_step(&params, &mut opt, lr)?;
            state = next_state;
            prev_summary = Some(summary);
            loss_sum += loss_value;
            iterations += 1;
            global_step += 1;
        }
        let train_mse = loss_sum / iterations as f64;

        let mut val_state = state.clone();
        val_state.frozen = true;
        let (val_mse, _) = evaluate(model, &mut val_state, val_table, spec)?;
        epochs.push(EpochStats { epoch, train_mse, val_mse, lr, dropout_rate: last_rate });

        let (is_best, should_stop) = stopper.observe(val_mse);
        if is_best {
            best = Some((epoch, val_mse, snapshot(&params), state.clone()));
        }
        if should_stop {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_mse, best_params, best_state) =
        best.expect("at least one epoch ran");
    for ((_, p), data) in params.iter().zip(best_params) {
        p.set_data(data)?;
    }
    Ok(FitReport {
        epochs,
        dropout_trajectory: trajectory,
        best_epoch,
        best_val_mse,
        stopped_early,
        final_state: best_state,
    })
}

/// Average MSE and MAE over every rolling window of `table`, in normalized
/// space, eval mode. The memory updates chronologically window by window
/// unless `state.frozen` is set.
pub fn evaluate(
    model: &Forecaster,
    state: &mut MemoryState,
    table: &SeriesTable,
    spec: &WindowSpec,
) -> Result<(f64, f64)> {
    let windows = iter_windows(table, spec, None);
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "evaluation split of {} rows holds no window of {}",
            table.n_rows(),
            spec.window_size()
        )));
    }
    let mut mse_sum = 0.0;
    let mut mae_sum = 0.0;
    for w in &windows {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, w, state, None, 0.0, false, 0)?;
        let (mse, mae) = window_metrics(&out.pred.to_vec(), &w.target);
        mse_sum += mse;
        mae_sum += mae;
        *state = out.next_state;
    }
    let n = windows.len() as f64;
    Ok((mse_sum / n, mae_sum / n))
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Persistence forecast: repeat the last observed context row across the
/// horizon. Average MSE/MAE over all windows.
pub fn persistence_baseline(table: &SeriesTable, spec: &WindowSpec) -> Result<(f64, f64)> {
    baseline_over_windows(table, spec, |w, d| {
        let last = w.enc_input[(spec.encoder_len - 1) * d..].to_vec();
        last.iter().cloned().cycle().take(spec.pred_len * d).collect()
    })
}

/// Mean forecast: predict each feature's mean over the whole provided table
/// at every horizon step.
pub fn mean_baseline(table: &SeriesTable, spec: &WindowSpec) -> Result<(f64, f64)> {
    let d = table.d_f();
    let n = table.n_rows().max(1) as f64;
    let mut means = vec![0.0; d];
    for r in 0..table.n_rows() {
        for (m, v) in means.iter_mut().zip(table.row(r)) {
            *m += v / n;
        }
    }
    baseline_over_windows(table, spec, move |_, d| {
        means.iter().cloned().cycle().take(spec.pred_len * d).collect()
    })
}

fn baseline_over_windows(
    table: &SeriesTable,
    spec: &WindowSpec,
    predict: impl Fn(&WindowSample, usize) -> Vec<f64>,
) -> Result<(f64, f64)> {
    let windows = iter_windows(table, spec, None);
    if windows.is_empty() {
        return Err(Error::Config("no windows for baseline evaluation".into()));
    }
    let d = table.d_f();
    let mut mse_sum = 0.0;
    let mut mae_sum = 0.0;
    for w in &windows {
        let pred = predict(w, d);
        let (mse, mae) = window_metrics(&pred, &w.target);
        mse_sum += mse;
        mae_sum += mae;
    }
    let n = windows.len() as f64;
    Ok((mse_sum / n, mae_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Normalizer, SynthConfig};
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand::SeedableRng as _;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            base_dropout: 0.1,
            l_s: 12,
            l_dec: 6,
            l_p: 4,
            d_f: 2,
            output_dim: 2,
            n_slots: 1,
            mem_heads: 2,
            memory_enabled: true,
            decode_then_update: false,
            gates_use_prev_feed: false,
        }
    }

    fn normalized_tables(points: usize, seed: u64) -> (SeriesTable, SeriesTable, SeriesTable) {
        let mut synth = SynthConfig::new(points, 2, seed);
        synth.noise = 0.05;
        let table = crate::data::synth_generate_cfg(&synth).unwrap();
        let (train, val, test) = crate::data::split(&table, (0.6, 0.2, 0.2)).unwrap();
        let norm = Normalizer::fit(&train);
        (norm.apply(&train), norm.apply(&val), norm.apply(&test))
    }

    #[test]
    fn dropout_rate_known_values() {
        let s = TrainSchedule::default(); // theta 0.1, gamma 0.01
        assert_eq!(dropout_rate(0, &s), 0.0);
        // Pinned high-precision evaluation of the rising branch at t=10.
        assert!((dropout_rate(10, &s) - 0.08564632376763644).abs() < 1e-15);
        // By t=1000 the cap is reached.
        assert!(dropout_rate(1000, &s) >= 0.099);
        assert_eq!(dropout_rate(1_000_000, &s), 0.1);
    }

    #[test]
    fn schedule_rejects_theta_above_half() {
        let mut s = TrainSchedule::default();
        s.theta_max = 0.6;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.theta_max = 0.5;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn learning_rate_halves_after_two_epochs() {
        let s = TrainSchedule::default();
        assert_eq!(learning_rate(0, &s), 1e-4);
        assert_eq!(learning_rate(1, &s), 1e-4);
        assert_eq!(learning_rate(2, &s), 5e-5);
        assert!((learning_rate(4, &s) - 1.25e-5).abs() < 1e-20);
    }

    #[test]
    fn mse_loss_known_values_and_oracle() {
        let mut tape = Tape::inference();
        let a = Tensor::from_vec(vec![0.0, 0.0], &[2, 1]).unwrap();
        let b = Tensor::from_vec(vec![1.0, 2.0], &[2, 1]).unwrap();
        assert_eq!(mse_loss(&mut tape, &a, &a).unwrap().value(), 0.0);
        assert_eq!(mse_loss(&mut tape, &a, &b).unwrap().value(), 2.5);
        // Random 7x3 against an elementwise loop.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..21).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..21).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let want: f64 = p.iter().zip(&t).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 21.0;
        let pt = Tensor::from_vec(p, &[7, 3]).unwrap();
        let tt = Tensor::from_vec(t, &[7, 3]).unwrap();
        assert!((mse_loss(&mut tape, &pt, &tt).unwrap().value() - want).abs() < 1e-12);
        // Shape mismatch is a dimension error.
        let c = Tensor::zeros(&[3, 7]);
        assert!(matches!(mse_loss(&mut tape, &pt, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn optimizer_zero_grad_keeps_parameters() {
        let p = Tensor::param(vec![1.0, -2.0], &[1, 2]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = OptimizerState::new(&params);
        optimizer_step(&params, &mut opt, 1e-3).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn optimizer_matches_scalar_adam_recurrence() {
        // Constant gradient on one scalar parameter, including one step
        // whose gradient exceeds the clip norm.
        let grads: [f64; 10] = [7.0, 1.0, 0.3, 0.3, -2.0, 0.3, 0.3, 0.3, 0.3, 0.3];
        let lr = 1e-2;
        let p = Tensor::param(vec![0.5], &[1, 1]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = OptimizerState::new(&params);

        // Hand-iterated reference.
        let (b1, b2, eps, clip): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 5.0);
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.5);
        for (t, &g_raw) in grads.iter().enumerate() {
            let norm = g_raw.abs();
            let g = if norm > clip { g_raw * clip / norm } else { g_raw };
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
            let v_hat: f64 = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        for g in grads {
            // Produce d(loss)/dp = g via loss = g * p.
            let mut tape = Tape::new();
            let scaled = tape.scale(&p, g).unwrap();
            let loss = tape.sum(&scaled).unwrap();
            tape.backward(&loss).unwrap();
            optimizer_step(&params, &mut opt, lr).unwrap();
        }
        assert!((p.value() - x).abs() < 1e-10, "{} vs {x}", p.value());
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn early_stopping_patience_one_stops_after_two_epochs() {
        let mut stop = EarlyStopping::new(1);
        assert_eq!(stop.observe(1.0), (true, false));
        assert_eq!(stop.observe(1.5), (false, true));
        // Patience 2 tolerates one bad epoch.
        let mut stop = EarlyStopping::new(2);
        assert_eq!(stop.observe(1.0), (true, false));
        assert_eq!(stop.observe(1.5), (false, false));
        assert_eq!(stop.observe(0.9), (true, false));
        assert_eq!(stop.observe(0.9), (false, false)); // ties do not improve
        assert_eq!(stop.observe(2.0), (false, true));
        assert_eq!(stop.best(), 0.9);
    }

    #[test]
    fn single_small_step_decreases_loss_across_seeds() {
        let (train, _, _) = normalized_tables(200, 3);
        let spec = WindowSpec::new(12, 6, 4, 1).unwrap();
        let windows = iter_windows(&train, &spec, None);
        for seed in 0..20 {
            let model = Forecaster::new(tiny_config(), seed).unwrap();
            let state = model.init_memory().unwrap();
            let params = model.named_parameters();
            let mut opt = OptimizerState::new(&params);

            let loss_at = |state: &MemoryState| {
                let mut tape = Tape::inference();
                let (loss, _, _) = forward_batch(
                    &model, &mut tape, &windows[..1], state, None, 0.0, false, 0,
                )
                .unwrap();
                loss.value()
            };
            let before = loss_at(&state);
            let mut tape = Tape::new();
            let (loss, _, _) =
                forward_batch(&model, &mut tape, &windows[..1], &state, None, 0.0, false, 0)
                    .unwrap();
            tape.backward(&loss).unwrap();
            optimizer_step(&params, &mut opt, 1e-6).unwrap();
            let after = loss_at(&state);
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn fit_learns_decreases_loss_and_records_history() {
        let (train, val, _) = normalized_tables(300, 4);
        let spec = WindowSpec::new(12, 6, 4, 4);
        let spec = spec.unwrap();
        let model = Forecaster::new(tiny_config(), 5).unwrap();
        let state = model.init_memory().unwrap();
        let mut untrained = state.clone();
        untrained.frozen = true;
        let (pre_mse, _) = evaluate(&model, &mut untrained, &val, &spec).unwrap();

        let mut schedule = TrainSchedule::default();
        schedule.epochs = 4;
        schedule.lr0 = 2e-3;
        schedule.cadence = 10;
        let report =
            fit(&model, state, &train, &val, &spec, &schedule, 1, 42).unwrap();

        assert!(!report.epochs.is_empty());
        assert!(
            report.best_val_mse < pre_mse,
            "validation did not improve: {pre_mse} -> {}",
            report.best_val_mse
        );

        // Trajectory equals the schedule recomputed at each tick.
        for (tick, got) in report.dropout_trajectory.iter().enumerate() {
            let want = dropout_rate(tick as u64, &schedule);
            assert_eq!(*got, want, "tick {tick}");
        }
        // History CSV carries one line per epoch plus the header.
        let csv = report.history_csv();
        assert_eq!(csv.lines().count(), report.epochs.len() + 1);
        assert!(csv.starts_with("epoch,train_mse,val_mse,lr,dropout_rate"));
        // Best epoch is consistent with the recorded history.
        let best_row = &report.epochs[report.best_epoch];
        assert_eq!(best_row.val_mse, report.best_val_mse);
        assert!(report
            .epochs
            .iter()
            .all(|e| e.val_mse >= report.best_val_mse));
    }

    #[test]
    fn fit_is_bit_reproducible_per_seed() {
        let (train, val, _) = normalized_tables(220, 6);
        let spec = WindowSpec::new(12, 6, 4, 6).unwrap();
        let mut schedule = TrainSchedule::default();
        schedule.epochs = 2;
        schedule.lr0 = 1e-3;
        let run = || {
            let model = Forecaster::new(tiny_config(), 9).unwrap();
            let state = model.init_memory().unwrap();
            let report = fit(&model, state, &train, &val, &spec, &schedule, 2, 7).unwrap();
            let param_bits: Vec<u64> = model
                .named_parameters()
                .iter()
                .flat_map(|(_, p)| p.to_vec().into_iter().map(f64::to_bits))
                .collect();
            (report.history_csv(), param_bits)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn fit_aborts_with_diagnostics_on_poisoned_parameters() {
        let (train, val, _) = normalized_tables(200, 8);
        let spec = WindowSpec::new(12, 6, 4, 8).unwrap();
        let model = Forecaster::new(tiny_config(), 10).unwrap();
        model.out_w.with_data_mut(|d| d[0] = f64::NAN);
        let state = model.init_memory().unwrap();
        let err = fit(&model, state, &train, &val, &spec, &TrainSchedule::default(), 1, 0)
            .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numeric(_)), "got {err}");
        assert!(msg.contains("lr") && msg.contains("dropout"), "got {msg}");
    }

    #[test]
    fn evaluate_updates_or_freezes_memory_as_asked() {
        let (_, _, test) = normalized_tables(260, 11);
        let spec = WindowSpec::new(12, 6, 4, 4).unwrap();
        let model = Forecaster::new(tiny_config(), 12).unwrap();
        let mut unfrozen = model.init_memory().unwrap();
        let n_windows = iter_windows(&test, &spec, None).len() as u64;
        let (mse_a, mae_a) = evaluate(&model, &mut unfrozen, &test, &spec).unwrap();
        assert_eq!(unfrozen.update_count, n_windows);
        assert!(mse_a.is_finite() && mae_a.is_finite());

        let mut frozen = model.init_memory().unwrap();
        frozen.frozen = true;
        let (mse_b, _) = evaluate(&model, &mut frozen, &test, &spec).unwrap();
        assert_eq!(frozen.update_count, 0);
        // Frozen evaluation is repeatable bit for bit.
        let mut frozen2 = model.init_memory().unwrap();
        frozen2.frozen = true;
        let (mse_c, _) = evaluate(&model, &mut frozen2, &test, &spec).unwrap();
        assert_eq!(mse_b.to_bits(), mse_c.to_bits());
    }

    #[test]
    fn perfect_and_zero_predictors_hit_known_metrics() {
        // Perfect prediction scores (0, 0).
        let target = vec![0.3, -1.0, 2.0, 0.7];
        assert_eq!(window_metrics(&target, &target), (0.0, 0.0));
        // The mean predictor on a self-normalized table scores MSE ≈ 1 per
        // the z-score property.
        let table = synth_generate(2000, 3, 13).unwrap();
        let norm = Normalizer::fit(&table);
        let normalized = norm.apply(&table);
        let spec = WindowSpec::new(48, 24, 24, 24).unwrap();
        let (mse, _) = mean_baseline(&normalized, &spec).unwrap();
        assert!((mse - 1.0).abs() < 0.1, "zero-predictor MSE {mse}");
    }

    #[test]
    fn persistence_baseline_is_exact_on_constant_series() {
        let mut cfg = SynthConfig::new(100, 2, 14);
        cfg.daily_amp = 0.0;
        cfg.weekly_amp = 0.0;
        cfg.trend = 0.0;
        cfg.coupling = 0.0;
        cfg.noise = 0.0;
        let table = crate::data::synth_generate_cfg(&cfg).unwrap();
        let spec = WindowSpec::new(12, 6, 4, 1).unwrap();
        let (mse, mae) = persistence_baseline(&table, &spec).unwrap();
        assert_eq!((mse, mae), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn dropout_rate_is_monotone_and_capped(
            theta in 0.01f64..0.5,
            gamma in 0.0005f64..0.05,
            t1 in 0u64..5000,
            t2 in 0u64..5000,
        ) {
            let mut s = TrainSchedule::default();
            s.theta_max = theta;
            s.gamma_decay = gamma;
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            prop_assert!(dropout_rate(lo, &s) <= dropout_rate(hi, &s));
            prop_assert!(dropout_rate(hi, &s) <= theta + 1e-15);
            prop_assert_eq!(dropout_rate(0, &s), 0.0);
        }

        #[test]
        fn mae_squared_never_exceeds_mse(seed in 0u64..60) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1usize..40);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (mse, mae) = window_metrics(&p, &t);
            prop_assert!(mae * mae <= mse + 1e-12);
        }
    }
}
