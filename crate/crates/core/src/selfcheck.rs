//! Numerical self-check: a gradient battery over every tensor primitive and
//! the key composites, reported line by line with each check's maximum
//! relative error against central finite differences.
//!
//! Primitives must stay under 1e-4 relative error, composites under 1e-3.
//! A fault-injection mode flips the sign of one analytic gradient to prove
//! the harness actually detects broken derivatives.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memory::{init_memory, mdcln, step, MemoryParams};
use crate::model::{Forecaster, ModelConfig};
use crate::tensor::{grad_check, Tape, Tensor};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

/// One battery entry: the check's name, its measured maximum relative
/// gradient error, the tolerance it was held to, and the verdict.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// The whole battery's outcome.
#[derive(Clone, Debug)]
pub struct SelfCheckReport {
    pub lines: Vec<CheckLine>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    /// Plain-text table, one verdict line per check plus a summary row.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&format!(
                "{} {:<34} max rel err {:>12.5e} (tolerance {:.0e})\n",
                if l.passed { "PASS" } else { "FAIL" },
                l.name,
                l.max_rel_err,
                l.tolerance
            ));
        }
        let passed = self.lines.iter().filter(|l| l.passed).count();
        out.push_str(&format!("self-check: {passed}/{} checks passed\n", self.lines.len()));
        out
    }
}

fn rand_mat(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(data, &[rows, cols]).unwrap()
}

/// Like [`grad_check`] but with the analytic gradient's sign flipped — a
/// deliberately broken derivative that a working harness must flag.
fn flipped_grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    x.set_requires_grad(true);
    x.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, x)?;
    tape.backward(&loss)?;
    let analytic = x
        .grad()
        .ok_or_else(|| Error::Contract("no gradient reached the probe".into()))?;
    x.zero_grad();
    let base = x.to_vec();
    let mut max_rel: f64 = 0.0;
    for i in 0..base.len() {
        x.with_data_mut(|d| d[i] = base[i] + h);
        let plus = f(&mut Tape::inference(), x)?.value();
        x.with_data_mut(|d| d[i] = base[i] - h);
        let minus = f(&mut Tape::inference(), x)?.value();
        x.with_data_mut(|d| d[i] = base[i]);
        let fd = (plus - minus) / (2.0 * h);
        let flipped = -analytic[i];
        let rel = (flipped - fd).abs() / flipped.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

type CheckFn<'a> = Box<dyn Fn(&mut Tape, &Tensor) -> Result<Tensor> + 'a>;

/// Runs the full battery. With `inject_fault` set, one extra entry checks a
/// sign-flipped tanh gradient and must FAIL — exercising the detector
/// itself.
pub fn run_selfcheck(inject_fault: bool) -> Result<SelfCheckReport> {
    let h = 1e-5;
    let probe = rand_mat(3, 4, -2.0, 2.0, 101);
    let other = rand_mat(3, 4, -2.0, 2.0, 102);
    let weight = rand_mat(4, 5, -1.0, 1.0, 103);
    let colv = rand_mat(3, 1, 0.5, 2.0, 104);
    let rowv = rand_mat(1, 4, -1.0, 1.0, 105);
    let mix = rand_mat(3, 4, -1.0, 1.0, 106);

    // Each closure maps the probe through one primitive, then contracts to a
    // scalar against fixed random coefficients so no gradient degenerates.
    let contract = |tape: &mut Tape, y: &Tensor, c: &Tensor| -> Result<Tensor> {
        let prod = tape.mul(y, c)?;
        tape.sum(&prod)
    };

    let checks: Vec<(&str, CheckFn)> = vec![
        ("add", Box::new(|t, x| {
            let y = t.add(x, &other)?;
            contract(t, &y, &mix)
        })),
        ("sub", Box::new(|t, x| {
            let y = t.sub(x, &other)?;
            contract(t, &y, &mix)
        })),
        ("mul", Box::new(|t, x| {
            let y = t.mul(x, &other)?;
            contract(t, &y, &mix)
        })),
        ("scale", Box::new(|t, x| {
            let y = t.scale(x, 1.7)?;
            contract(t, &y, &mix)
        })),
        ("sigmoid", Box::new(|t, x| {
            let y = t.sigmoid(x)?;
            contract(t, &y, &mix)
        })),
        ("tanh", Box::new(|t, x| {
            let y = t.tanh(x)?;
            contract(t, &y, &mix)
        })),
        ("gelu", Box::new(|t, x| {
            let y = t.gelu(x)?;
            contract(t, &y, &mix)
        })),
        ("softmax_rows", Box::new(|t, x| {
            let y = t.softmax_rows(x)?;
            contract(t, &y, &mix)
        })),
        ("matmul", Box::new(|t, x| {
            let y = t.matmul(x, &weight)?;
            let c = rand_mat(3, 5, -1.0, 1.0, 107);
            contract(t, &y, &c)
        })),
        ("transpose", Box::new(|t, x| {
            let y = t.transpose(x)?;
            let c = rand_mat(4, 3, -1.0, 1.0, 108);
            contract(t, &y, &c)
        })),
        ("conv1d_circular (input)", Box::new(|t, x| {
            let k = rand_mat(1, 3 * 4 * 2, -1.0, 1.0, 109);
            let k = Tensor::from_vec(k.to_vec(), &[3, 4, 2])?;
            let y = t.conv1d_circular(x, &k)?;
            let c = rand_mat(3, 2, -1.0, 1.0, 110);
            contract(t, &y, &c)
        })),
        ("concat_rows", Box::new(|t, x| {
            let y = t.concat_rows(x, &other)?;
            let c = rand_mat(6, 4, -1.0, 1.0, 113);
            contract(t, &y, &c)
        })),
        ("concat_cols", Box::new(|t, x| {
            let y = t.concat_cols(x, &other)?;
            let c = rand_mat(3, 8, -1.0, 1.0, 114);
            contract(t, &y, &c)
        })),
        ("slice_rows", Box::new(|t, x| {
            let y = t.slice_rows(x, 1, 3)?;
            let c = rand_mat(2, 4, -1.0, 1.0, 115);
            contract(t, &y, &c)
        })),
        ("slice_cols", Box::new(|t, x| {
            let y = t.slice_cols(x, 1, 4)?;
            let c = rand_mat(3, 3, -1.0, 1.0, 116);
            contract(t, &y, &c)
        })),
        ("row_mean", Box::new(|t, x| {
            let y = t.row_mean(x)?;
            let c = rand_mat(3, 1, -1.0, 1.0, 117);
            contract(t, &y, &c)
        })),
        ("row_std", Box::new(|t, x| {
            let y = t.row_std(x)?;
            let c = rand_mat(3, 1, -1.0, 1.0, 118);
            contract(t, &y, &c)
        })),
        ("layer_stats", Box::new(|t, x| {
            let (mean, std) = t.layer_stats(x)?;
            let cm = rand_mat(3, 1, -1.0, 1.0, 119);
            let cs = rand_mat(3, 1, -1.0, 1.0, 120);
            let a = contract(t, &mean, &cm)?;
            let b = contract(t, &std, &cs)?;
            t.add(&a, &b)
        })),
        ("col_mean", Box::new(|t, x| {
            let y = t.col_mean(x)?;
            let c = rand_mat(1, 4, -1.0, 1.0, 121);
            contract(t, &y, &c)
        })),
        ("repeat_rows", Box::new(|t, x| {
            let v = t.col_mean(x)?;
            let y = t.repeat_rows(&v, 5)?;
            let c = rand_mat(5, 4, -1.0, 1.0, 122);
            contract(t, &y, &c)
        })),
        ("sub_col", Box::new(|t, x| {
            let y = t.sub_col(x, &colv)?;
            contract(t, &y, &mix)
        })),
        ("div_col", Box::new(|t, x| {
            let y = t.div_col(x, &colv)?;
            contract(t, &y, &mix)
        })),
        ("mul_row", Box::new(|t, x| {
            let y = t.mul_row(x, &rowv)?;
            contract(t, &y, &mix)
        })),
        ("add_row", Box::new(|t, x| {
            let y = t.add_row(x, &rowv)?;
            contract(t, &y, &mix)
        })),
        ("sum", Box::new(|t, x| {
            let y = t.mul(x, x)?;
            t.sum(&y)
        })),
    ];

    let mut lines = Vec::new();
    for (name, f) in &checks {
        let err = grad_check(f, &probe, h)?;
        lines.push(CheckLine {
            name: (*name).to_string(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOL,
            passed: err < PRIMITIVE_TOL,
        });
    }

    // Dropout is the identity on inference tapes, so its finite differences
    // must run on recording tapes (forward only, tape discarded) to see the
    // same seeded mask as the analytic pass.
    {
        let f = |t: &mut Tape, x: &Tensor| -> Result<Tensor> {
            let y = t.dropout(x, 0.35, 4242)?;
            let prod = t.mul(&y, &mix)?;
            t.sum(&prod)
        };
        probe.set_requires_grad(true);
        probe.zero_grad();
        let mut tape = Tape::new();
        let loss = f(&mut tape, &probe)?;
        tape.backward(&loss)?;
        let analytic = probe
            .grad()
            .ok_or_else(|| Error::Contract("dropout check: no gradient".into()))?;
        probe.zero_grad();
        let base = probe.to_vec();
        let mut max_rel: f64 = 0.0;
        for i in 0..base.len() {
            probe.with_data_mut(|d| d[i] = base[i] + h);
            let plus = f(&mut Tape::new(), &probe)?.value();
            probe.with_data_mut(|d| d[i] = base[i] - h);
            let minus = f(&mut Tape::new(), &probe)?.value();
            probe.with_data_mut(|d| d[i] = base[i]);
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        probe.set_requires_grad(false);
        lines.push(CheckLine {
            name: "dropout".to_string(),
            max_rel_err: max_rel,
            tolerance: PRIMITIVE_TOL,
            passed: max_rel < PRIMITIVE_TOL,
        });
    }

    // Kernel-side convolution gradient: the probe IS the rank-3 kernel.
    {
        let kernel = {
            let flat = rand_mat(1, 3 * 4 * 2, -1.0, 1.0, 109);
            Tensor::from_vec(flat.to_vec(), &[3, 4, 2])?
        };
        let input = rand_mat(5, 4, -1.0, 1.0, 111);
        let c = rand_mat(5, 2, -1.0, 1.0, 112);
        let err = grad_check(
            |t, k| {
                let y = t.conv1d_circular(&input, k)?;
                let prod = t.mul(&y, &c)?;
                t.sum(&prod)
            },
            &kernel,
            h,
        )?;
        lines.push(CheckLine {
            name: "conv1d_circular (kernel)".to_string(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOL,
            passed: err < PRIMITIVE_TOL,
        });
    }

    lines.push(composite_memory_check(h)?);
    lines.push(composite_model_check(h)?);

    if inject_fault {
        let err = flipped_grad_check(
            |t, x| {
                let y = t.tanh(x)?;
                let prod = t.mul(&y, &mix)?;
                t.sum(&prod)
            },
            &probe,
            h,
        )?;
        lines.push(CheckLine {
            name: "fault injection (flipped tanh)".to_string(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOL,
            passed: err < PRIMITIVE_TOL,
        });
    }

    Ok(SelfCheckReport { lines })
}

/// Memory step + conditional layer norm, probed through an attention weight.
fn composite_memory_check(h: f64) -> Result<CheckLine> {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = MemoryParams::new(d, 2, 2, &mut rng)?;
    params.gamma_map.set_data(rand_mat(d, d, -0.5, 0.5, 130).to_vec())?;
    params.beta_map.set_data(rand_mat(d, d, -0.5, 0.5, 131).to_vec())?;
    let feed = rand_mat(3, d, -1.0, 1.0, 132);
    let hidden = rand_mat(3, d, -1.0, 1.0, 133);
    let err = grad_check(
        |tape, _| {
            let state = init_memory(2, d)?;
            let (m_t, _) = step(tape, &state, &feed, None, &params)?;
            let out = mdcln(tape, &hidden, &m_t, &params)?;
            let sq = tape.mul(&out, &out)?;
            tape.sum(&sq)
        },
        &params.w_q,
        h,
    )?;
    Ok(CheckLine {
        name: "composite: memory step + cond. norm".to_string(),
        max_rel_err: err,
        tolerance: COMPOSITE_TOL,
        passed: err < COMPOSITE_TOL,
    })
}

/// Full encoder-decoder forward with memory, probed through the first
/// encoder attention weight.
fn composite_model_check(h: f64) -> Result<CheckLine> {
    let config = ModelConfig {
        d_model: 8,
        d_ff: 16,
        n_heads: 1,
        enc_layers: 1,
        dec_layers: 1,
        base_dropout: 0.0,
        l_s: 6,
        l_dec: 4,
        l_p: 2,
        d_f: 2,
        output_dim: 2,
        n_slots: 1,
        mem_heads: 2,
        memory_enabled: true,
        decode_then_update: false,
        gates_use_prev_feed: false,
    };
    let model = Forecaster::new(config, 31)?;
    let table = crate::data::synth_generate(64, 2, 17)?;
    let spec = crate::data::WindowSpec::new(6, 4, 2, 1)?;
    let window = crate::data::iter_windows(&table, &spec, None)
        .into_iter()
        .next()
        .ok_or_else(|| Error::Contract("self-check fixture produced no window".into()))?;
    let probe = model.named_parameters()[2].1.clone(); // encoder.0.attn.w_q
    let err = grad_check(
        |tape, _| {
            let state = model.init_memory()?;
            let out = model.forward(tape, &window, &state, None, 0.0, false, 0)?;
            let target = Tensor::from_vec(window.target.clone(), &[2, 2])?;
            crate::train::mse_loss(tape, &out.pred, &target)
        },
        &probe,
        h,
    )?;
    Ok(CheckLine {
        name: "composite: full forward + loss".to_string(),
        max_rel_err: err,
        tolerance: COMPOSITE_TOL,
        passed: err < COMPOSITE_TOL,
    })
}
