//! Task-level relational memory.
//!
//! A small matrix `M` of `n_slots x d_rm` rows persists across prediction
//! windows (and across process restarts, via [`persist`]/[`restore`]). Every
//! window it is refreshed in five stages:
//!
//! 1. [`summarize_feed`] — mean-pool the embedded decoder feed and replicate
//!    it to one row per slot;
//! 2. [`memory_attention`] — multi-head attention with queries from `M` and
//!    keys/values from the row-wise concatenation `[M; feed]`;
//! 3. [`memory_candidate`] — `ffn(Z + M) + Z + M`;
//! 4. [`gates`] — input/forget logits `feed_summary·W + tanh(M)·U`;
//! 5. [`update_memory`] — `M_t = sigmoid(G_f) ⊙ M + sigmoid(G_i) ⊙ M̄_t`,
//!    where [`step`] feeds the blend `tanh(M̄_t)` so the running memory stays
//!    bounded over arbitrarily long window chains.
//!
//! The updated matrix conditions decoder normalization through [`mdcln`]:
//! layer norm whose gain and bias are shifted by linear maps of the
//! slot-averaged memory. Gradients flow through one window's update into the
//! model parameters, but the stored state is detached between windows, so
//! backpropagation never crosses window boundaries.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Persistent memory for one forecasting task.
#[derive(Debug)]
pub struct MemoryState {
    /// `[n_slots x d_rm]`, detached from any tape.
    pub m: Tensor,
    /// Number of committed updates since initialization.
    pub update_count: u64,
    /// When set, [`step`] and [`update_memory`] leave the state untouched.
    pub frozen: bool,
}

impl Clone for MemoryState {
    fn clone(&self) -> MemoryState {
        // Deep copy: states are independent task timelines, never aliases.
        MemoryState {
            m: Tensor::from_vec(self.m.to_vec(), &self.m.shape()).unwrap(),
            update_count: self.update_count,
            frozen: self.frozen,
        }
    }
}

/// All trainable parameters of the memory unit, including the conditional
/// layer-norm head that consumes the memory.
pub struct MemoryParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub u_i: Tensor,
    pub u_f: Tensor,
    /// `[d_rm x d_model]` map from slot-averaged memory to a gain shift.
    pub gamma_map: Tensor,
    /// `[d_rm x d_model]` map from slot-averaged memory to a bias shift.
    pub beta_map: Tensor,
    /// Base layer-norm gain `[1 x d_model]`.
    pub gamma: Tensor,
    /// Base layer-norm bias `[1 x d_model]`.
    pub beta: Tensor,
    pub n_slots: usize,
    pub mem_heads: usize,
    /// Ablation: gate logits use the previous window's feed summary instead
    /// of the current one (callers thread the previous summary through).
    pub gates_use_prev_feed: bool,
}

impl MemoryParams {
    /// Fresh parameters. `d_rm` equals the model width (required by the
    /// row-wise concatenation of memory and feed). Projection matrices start
    /// uniform in ±1/sqrt(fan_in); the conditional-norm maps start at zero
    /// so normalization begins exactly as plain layer norm and learns its
    /// memory modulation from there; gain starts at one, biases at zero.
    pub fn new(
        d_rm: usize,
        n_slots: usize,
        mem_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<MemoryParams> {
        if n_slots == 0 {
            return Err(Error::Config("memory needs at least one slot".into()));
        }
        if mem_heads == 0 || d_rm % mem_heads != 0 {
            return Err(Error::Config(format!(
                "memory width {d_rm} must divide evenly into {mem_heads} heads"
            )));
        }
        let square = |rng: &mut ChaCha8Rng| Tensor::uniform_param(&[d_rm, d_rm], d_rm, rng);
        // Gate weights start two orders smaller than the projections so the
        // initial logits sit near zero: both gates open at sigmoid(0) = 0.5,
        // which pins the running memory's equilibrium magnitude near 1
        // instead of the 1/(1-sigmoid) blow-up a saturated forget gate
        // produces. The conditional-norm maps then see O(1) inputs and their
        // gradients do not monopolize the global clipping budget.
        let gate = |rng: &mut ChaCha8Rng| Tensor::uniform_param(&[d_rm, d_rm], d_rm * 10_000, rng);
        Ok(MemoryParams {
            w_q: square(rng),
            w_k: square(rng),
            w_v: square(rng),
            ffn_w1: square(rng),
            ffn_b1: Tensor::param(vec![0.0; d_rm], &[1, d_rm])?,
            ffn_w2: square(rng),
            ffn_b2: Tensor::param(vec![0.0; d_rm], &[1, d_rm])?,
            w_i: gate(rng),
            w_f: gate(rng),
            u_i: gate(rng),
            u_f: gate(rng),
            gamma_map: Tensor::param(vec![0.0; d_rm * d_rm], &[d_rm, d_rm])?,
            beta_map: Tensor::param(vec![0.0; d_rm * d_rm], &[d_rm, d_rm])?,
            gamma: Tensor::param(vec![1.0; d_rm], &[1, d_rm])?,
            beta: Tensor::param(vec![0.0; d_rm], &[1, d_rm])?,
            n_slots,
            mem_heads,
            gates_use_prev_feed: false,
        })
    }

    pub fn d_rm(&self) -> usize {
        self.w_q.rows()
    }

    /// Named views of every trainable tensor, for optimizers and checkpoints.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
            ("w_i", &self.w_i),
            ("w_f", &self.w_f),
            ("u_i", &self.u_i),
            ("u_f", &self.u_f),
            ("gamma_map", &self.gamma_map),
            ("beta_map", &self.beta_map),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ]
        .into_iter()
        .map(|(n, t)| (format!("memory.{n}"), t.clone()))
        .collect()
    }
}

/// Fresh memory: slot `s` gets a one-hot row at column `s`, zero-padded to
/// `d_rm`. Deterministic, and created once per task — never per window.
pub fn init_memory(n_slots: usize, d_rm: usize) -> Result<MemoryState> {
    if n_slots == 0 {
        return Err(Error::Config("memory needs at least one slot".into()));
    }
    if n_slots > d_rm {
        return Err(Error::Config(format!(
            "cannot one-hot initialize {n_slots} slots in width {d_rm}"
        )));
    }
    let mut data = vec![0.0; n_slots * d_rm];
    for s in 0..n_slots {
        data[s * d_rm + s] = 1.0;
    }
    Ok(MemoryState {
        m: Tensor::from_vec(data, &[n_slots, d_rm])?,
        update_count: 0,
        frozen: false,
    })
}

/// Mean over feed rows, replicated to one row per slot. The mean makes the
/// summary invariant to row order and stable in scale across feed lengths.
pub fn summarize_feed(tape: &mut Tape, feed_embed: &Tensor, n_slots: usize) -> Result<Tensor> {
    let mean = tape.col_mean(feed_embed)?;
    tape.repeat_rows(&mean, n_slots)
}

/// Multi-head attention refresh `Z`: queries from the memory alone,
/// keys/values from `[M; feed]` (or `M` alone when no feed is given).
pub fn memory_attention(
    tape: &mut Tape,
    state: &MemoryState,
    feed_embed: Option<&Tensor>,
    params: &MemoryParams,
) -> Result<Tensor> {
    let d_rm = params.d_rm();
    if state.m.cols() != d_rm {
        return Err(Error::Dimension(format!(
            "memory width {} does not match parameter width {d_rm}",
            state.m.cols()
        )));
    }
    let kv_in = match feed_embed {
        Some(feed) => {
            if feed.cols() != d_rm {
                return Err(Error::Dimension(format!(
                    "feed width {} does not match memory width {d_rm}",
                    feed.cols()
                )));
            }
            tape.concat_rows(&state.m, feed)?
        }
        None => state.m.clone(),
    };
    let q = tape.matmul(&state.m, &params.w_q)?;
    let k = tape.matmul(&kv_in, &params.w_k)?;
    let v = tape.matmul(&kv_in, &params.w_v)?;

    let d_head = d_rm / params.mem_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads: Option<Tensor> = None;
    for h in 0..params.mem_heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let qh = tape.slice_cols(&q, lo, hi)?;
        let kh = tape.slice_cols(&k, lo, hi)?;
        let vh = tape.slice_cols(&v, lo, hi)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let scaled = tape.scale(&scores, scale)?;
        let probs = tape.softmax_rows(&scaled)?;
        let zh = tape.matmul(&probs, &vh)?;
        heads = Some(match heads {
            Some(acc) => tape.concat_cols(&acc, &zh)?,
            None => zh,
        });
    }
    Ok(heads.unwrap())
}

/// Candidate memory: `ffn(Z + M) + Z + M`, where the feedforward is
/// linear → GELU → linear with biases.
pub fn memory_candidate(
    tape: &mut Tape,
    z: &Tensor,
    state: &MemoryState,
    params: &MemoryParams,
) -> Result<Tensor> {
    let base = tape.add(z, &state.m)?;
    let h1 = tape.matmul(&base, &params.ffn_w1)?;
    let h1 = tape.add_row(&h1, &params.ffn_b1)?;
    let act = tape.gelu(&h1)?;
    let h2 = tape.matmul(&act, &params.ffn_w2)?;
    let h2 = tape.add_row(&h2, &params.ffn_b2)?;
    tape.add(&h2, &base)
}

/// Pre-sigmoid input/forget gate logits:
/// `G = feed_summary · W + tanh(M) · U`.
pub fn gates(
    tape: &mut Tape,
    feed_summary: &Tensor,
    state: &MemoryState,
    params: &MemoryParams,
) -> Result<(Tensor, Tensor)> {
    let squashed = tape.tanh(&state.m)?;
    let g_i = {
        let a = tape.matmul(feed_summary, &params.w_i)?;
        let b = tape.matmul(&squashed, &params.u_i)?;
        tape.add(&a, &b)?
    };
    let g_f = {
        let a = tape.matmul(feed_summary, &params.w_f)?;
        let b = tape.matmul(&squashed, &params.u_f)?;
        tape.add(&a, &b)?
    };
    Ok((g_i, g_f))
}

/// Commits one gated update:
/// `M_t = sigmoid(G_f) ⊙ M_{t-1} + sigmoid(G_i) ⊙ M̄_t`.
///
/// Returns the in-graph `M_t` (so the surrounding window's loss can reach
/// the gate parameters) together with the next state, whose matrix is a
/// detached copy. A frozen state is returned unchanged with `M_t = M_{t-1}`.
/// A non-finite update aborts with a numeric error before any state change.
pub fn update_memory(
    tape: &mut Tape,
    state: &MemoryState,
    candidate: &Tensor,
    g_i: &Tensor,
    g_f: &Tensor,
) -> Result<(Tensor, MemoryState)> {
    if state.frozen {
        return Ok((state.m.clone(), state.clone()));
    }
    let keep = tape.sigmoid(g_f)?;
    let write = tape.sigmoid(g_i)?;
    let kept = tape.mul(&keep, &state.m)?;
    let written = tape.mul(&write, candidate)?;
    let m_t = tape.add(&kept, &written)?;
    if !m_t.all_finite() {
        return Err(Error::Numeric(format!(
            "memory update produced non-finite entries at update {}",
            state.update_count + 1
        )));
    }
    let next = MemoryState {
        m: m_t.detach(),
        update_count: state.update_count + 1,
        frozen: false,
    };
    Ok((m_t, next))
}

/// Memory-driven conditional layer norm. The slot-averaged memory shifts the
/// gain and bias through the (zero-initialized) linear maps:
///
/// ```text
/// gamma_t = gamma + mean_slots(M_t) · gamma_map
/// beta_t  = beta  + mean_slots(M_t) · beta_map
/// out     = gamma_t ⊙ (h − mu) / sigma + beta_t        (row-wise stats)
/// ```
pub fn mdcln(tape: &mut Tape, h: &Tensor, m_t: &Tensor, params: &MemoryParams) -> Result<Tensor> {
    if h.cols() != params.gamma.cols() {
        return Err(Error::Dimension(format!(
            "mdcln input width {} does not match gain width {}",
            h.cols(),
            params.gamma.cols()
        )));
    }
    let slot_mean = tape.col_mean(m_t)?;
    let gamma_shift = tape.matmul(&slot_mean, &params.gamma_map)?;
    let beta_shift = tape.matmul(&slot_mean, &params.beta_map)?;
    let gamma_t = tape.add(&params.gamma, &gamma_shift)?;
    let beta_t = tape.add(&params.beta, &beta_shift)?;
    let (mu, sigma) = tape.layer_stats(h)?;
    let centered = tape.sub_col(h, &mu)?;
    let normalized = tape.div_col(&centered, &sigma)?;
    let gained = tape.mul_row(&normalized, &gamma_t)?;
    tape.add_row(&gained, &beta_t)
}

/// One full memory step for one prediction window: summarize → attend →
/// candidate → squash → gate → update. Returns the in-graph `M_t` plus the
/// detached next state. `gate_summary` overrides the gating input (used by
/// the previous-feed ablation); the attention always sees the current feed.
///
/// The candidate passes through `tanh` before the gated blend. The raw
/// additive candidate contains `M_{t-1}` itself, so at zero gate logits the
/// recurrence has unit gain on the previous memory plus an attention-driven
/// drift, and once the gate logits saturate roughly half the entries grow
/// exponentially — a task-level memory that runs for hundreds of windows
/// overflows without ever training. Squashing the written content bounds
/// every entry of the running memory near `σ_i/(1−σ_f)`, the standard
/// stabilization in gated relational-memory units.
pub fn step(
    tape: &mut Tape,
    state: &MemoryState,
    feed_embed: &Tensor,
    gate_summary: Option<&Tensor>,
    params: &MemoryParams,
) -> Result<(Tensor, MemoryState)> {
    if state.frozen {
        return Ok((state.m.clone(), state.clone()));
    }
    let summary = summarize_feed(tape, feed_embed, state.m.rows())?;
    let z = memory_attention(tape, state, Some(feed_embed), params)?;
    let candidate = memory_candidate(tape, &z, state, params)?;
    let squashed = tape.tanh(&candidate)?;
    let gate_input = gate_summary.unwrap_or(&summary);
    let (g_i, g_f) = gates(tape, gate_input, state, params)?;
    update_memory(tape, state, &squashed, &g_i, &g_f)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 5] = b"MEMTS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 5 + 4 + 8 + 8 + 8 + 1;

/// Serializes a memory state: magic, version, dimensions, update count,
/// frozen flag, then the matrix rows as little-endian 64-bit floats.
pub fn persist(state: &MemoryState) -> Vec<u8> {
    let shape = state.m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + state.m.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape[0] as u64).to_le_bytes());
    out.extend_from_slice(&(shape[1] as u64).to_le_bytes());
    out.extend_from_slice(&state.update_count.to_le_bytes());
    out.push(state.frozen as u8);
    for v in state.m.to_vec() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`persist`]; round-trips are bit-exact.
pub fn restore(bytes: &[u8]) -> Result<MemoryState> {
    let bad = |msg: &str| Error::Persistence(format!("malformed memory state: {msg}"));
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[..5] != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32le = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let u64le = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
    let version = u32le(&bytes[5..9]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n_slots = u64le(&bytes[9..17]) as usize;
    let d_rm = u64le(&bytes[17..25]) as usize;
    let update_count = u64le(&bytes[25..33]);
    let frozen = match bytes[33] {
        0 => false,
        1 => true,
        other => return Err(bad(&format!("bad frozen flag {other}"))),
    };
    let want = n_slots
        .checked_mul(d_rm)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| bad("shape overflows"))?;
    let data = &bytes[HEADER_LEN..];
    if data.len() != want {
        return Err(bad(&format!("expected {want} matrix bytes, found {}", data.len())));
    }
    let values: Vec<f64> =
        data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(MemoryState {
        m: Tensor::from_vec(values, &[n_slots, d_rm])?,
        update_count,
        frozen,
    })
}
