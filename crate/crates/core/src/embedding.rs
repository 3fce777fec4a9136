//! Input embedding: a trainable circular convolution lifts raw feature rows
//! into model space, then fixed sinusoidal positional and calendar encodings
//! are added, and the sum is optionally dropout-regularized in train mode:
//!
//! ```text
//! embed(x, marks) = dropout(delta * context_vector(x) + PE + seasonal(marks))
//! ```
//!
//! The positional and calendar tables are deterministic functions of their
//! dimensions and are never trained; the convolution kernel is the only
//! trainable parameter here.

use rand_chacha::ChaCha8Rng;

use crate::data::Marks;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Width of the circular context convolution.
pub const CONV_WIDTH: usize = 3;

/// Calendar-table cardinalities: month rows 0..=12 (0 is an unused pad so
/// month values index directly), day rows 0..=31, weekday rows 0..=6,
/// hour rows 0..=23.
pub const MONTH_CARD: usize = 13;
pub const DAY_CARD: usize = 32;
pub const WEEKDAY_CARD: usize = 7;
pub const HOUR_CARD: usize = 24;

/// Embedding parameters: one trainable conv kernel plus fixed tables.
pub struct EmbeddingParams {
    /// Trainable kernel `[CONV_WIDTH x d_f x d_model]`.
    pub conv_kernel: Tensor,
    /// Fixed scalar weight on the context vector.
    pub delta: f64,
    d_f: usize,
    d_model: usize,
    month_table: Vec<f64>,
    day_table: Vec<f64>,
    weekday_table: Vec<f64>,
    hour_table: Vec<f64>,
}

impl EmbeddingParams {
    /// Fresh parameters: kernel entries uniform in ±1/sqrt(fan_in) with
    /// fan_in = CONV_WIDTH * d_f; calendar tables computed, not sampled.
    pub fn new(d_f: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Result<EmbeddingParams> {
        if d_f == 0 {
            return Err(Error::Config("embedding needs at least one input feature".into()));
        }
        check_even_d_model(d_model)?;
        let conv_kernel =
            Tensor::uniform_param(&[CONV_WIDTH, d_f, d_model], CONV_WIDTH * d_f, rng);
        Ok(EmbeddingParams {
            conv_kernel,
            delta: 1.0,
            d_f,
            d_model,
            month_table: sinusoid_table(MONTH_CARD, d_model),
            day_table: sinusoid_table(DAY_CARD, d_model),
            weekday_table: sinusoid_table(WEEKDAY_CARD, d_model),
            hour_table: sinusoid_table(HOUR_CARD, d_model),
        })
    }

    /// Rebuilds parameters around an existing kernel (checkpoint restore).
    pub fn from_kernel(conv_kernel: Tensor) -> Result<EmbeddingParams> {
        let shape = conv_kernel.shape();
        if shape.len() != 3 || shape[0] != CONV_WIDTH {
            return Err(Error::Dimension(format!(
                "embedding kernel must be [{CONV_WIDTH} x d_f x d_model], got {shape:?}"
            )));
        }
        let (d_f, d_model) = (shape[1], shape[2]);
        check_even_d_model(d_model)?;
        Ok(EmbeddingParams {
            conv_kernel,
            delta: 1.0,
            d_f,
            d_model,
            month_table: sinusoid_table(MONTH_CARD, d_model),
            day_table: sinusoid_table(DAY_CARD, d_model),
            weekday_table: sinusoid_table(WEEKDAY_CARD, d_model),
            hour_table: sinusoid_table(HOUR_CARD, d_model),
        })
    }

    pub fn d_f(&self) -> usize {
        self.d_f
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

fn check_even_d_model(d_model: usize) -> Result<()> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal encodings need a positive even model width, got {d_model}"
        )));
    }
    Ok(())
}

/// The shared sinusoid recipe: row `pos`, columns `2i` and `2i+1` hold
/// `sin(pos * omega_i)` and `cos(pos * omega_i)` with
/// `omega_i = 10000^(-2i/d_model)`.
fn sinusoid_table(rows: usize, d_model: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_model];
    for pos in 0..rows {
        for i in 0..d_model / 2 {
            let omega = 10000f64.powf(-((2 * i) as f64) / d_model as f64);
            let angle = pos as f64 * omega;
            out[pos * d_model + 2 * i] = angle.sin();
            out[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    out
}

/// Fixed sinusoidal positional encoding `[l x d_model]`.
pub fn positional_encoding(l: usize, d_model: usize) -> Result<Tensor> {
    check_even_d_model(d_model)?;
    if l == 0 {
        return Err(Error::Config("positional encoding needs at least one row".into()));
    }
    Tensor::from_vec(sinusoid_table(l, d_model), &[l, d_model])
}

/// Trainable context vector: circular convolution of width [`CONV_WIDTH`]
/// mapping `[l x d_f]` raw rows to `[l x d_model]`.
pub fn context_vector(tape: &mut Tape, x: &Tensor, params: &EmbeddingParams) -> Result<Tensor> {
    tape.conv1d_circular(x, &params.conv_kernel)
}

/// Fixed calendar embedding: per row, the sum of the month, day, weekday,
/// and hour table rows selected by the marks. Constant w.r.t. training.
pub fn seasonal_embedding(marks: &[Marks], params: &EmbeddingParams) -> Result<Tensor> {
    if marks.is_empty() {
        return Err(Error::Config("seasonal embedding needs at least one mark row".into()));
    }
    let d = params.d_model;
    let mut out = vec![0.0; marks.len() * d];
    for (r, &[month, day, weekday, hour]) in marks.iter().enumerate() {
        let valid = (1..=12).contains(&month)
            && (1..=31).contains(&day)
            && weekday < WEEKDAY_CARD
            && hour < HOUR_CARD;
        if !valid {
            return Err(Error::Ingest {
                row: Some(r + 1),
                msg: format!(
                    "calendar mark out of range: month {month}, day {day}, weekday {weekday}, hour {hour}"
                ),
            });
        }
        let row = &mut out[r * d..(r + 1) * d];
        for (table, idx) in [
            (&params.month_table, month),
            (&params.day_table, day),
            (&params.weekday_table, weekday),
            (&params.hour_table, hour),
        ] {
            for (o, v) in row.iter_mut().zip(&table[idx * d..(idx + 1) * d]) {
                *o += v;
            }
        }
    }
    Tensor::from_vec(out, &[marks.len(), d])
}

/// Full input embedding: `delta * context_vector + positional + seasonal`,
/// with inverted dropout applied in train mode only.
pub fn embed(
    tape: &mut Tape,
    x: &Tensor,
    marks: &[Marks],
    params: &EmbeddingParams,
    dropout_rate: f64,
    train: bool,
    dropout_seed: u64,
) -> Result<Tensor> {
    let l = x.rows();
    if marks.len() != l {
        return Err(Error::Dimension(format!(
            "embedding got {l} value rows but {} mark rows",
            marks.len()
        )));
    }
    let cv = context_vector(tape, x, params)?;
    let scaled = tape.scale(&cv, params.delta)?;
    let pe = positional_encoding(l, params.d_model)?;
    let se = seasonal_embedding(marks, params)?;
    let with_pe = tape.add(&scaled, &pe)?;
    let summed = tape.add(&with_pe, &se)?;
    if train && dropout_rate > 0.0 {
        tape.dropout(&summed, dropout_rate, dropout_seed)
    } else {
        Ok(summed)
    }
}
