//! Transformer backbone and the full forecaster.
//!
//! The model is an encoder–decoder Transformer with generative one-shot
//! decoding: the decoder consumes the known tail of the encoder context plus
//! a zero placeholder for the horizon and produces every future step in a
//! single pass — no autoregressive loop exists anywhere.
//!
//! The decoder's post-self-attention normalization is memory-driven (see
//! [`crate::memory::mdcln`]) when the memory unit is enabled; with the unit
//! disabled the same position uses plain layer norm with the same gain/bias
//! tensors, which makes the memory path a strict superset of the vanilla
//! model and enables bit-exact degeneracy comparisons.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{Marks, WindowSample};
use crate::embedding::{embed, EmbeddingParams};
use crate::error::{Error, Result};
use crate::memory::{self, MemoryParams, MemoryState};
use crate::tensor::{Tape, Tensor};

/// Deterministic per-site seed derivation for dropout masks (splitmix64).
pub struct SeedStream {
    state: u64,
}

impl SeedStream {
    pub fn new(base: u64) -> SeedStream {
        SeedStream { state: base }
    }

    pub fn next(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Architecture hyperparameters. Sequence lengths are carried here as well
/// so a checkpoint is self-describing.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub base_dropout: f64,
    pub l_s: usize,
    pub l_dec: usize,
    pub l_p: usize,
    pub d_f: usize,
    pub output_dim: usize,
    pub n_slots: usize,
    pub mem_heads: usize,
    /// Master switch for the memory unit; off = vanilla Transformer.
    pub memory_enabled: bool,
    /// Ablation: decoder consumes the pre-update memory.
    pub decode_then_update: bool,
    /// Ablation: gate logits use the previous window's feed summary.
    pub gates_use_prev_feed: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("model width must be positive and even, got {}", self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "model width {} must divide evenly into {} attention heads",
                self.d_model, self.n_heads
            ));
        }
        if self.mem_heads == 0 || self.d_model % self.mem_heads != 0 {
            return bad(format!(
                "model width {} must divide evenly into {} memory heads",
                self.d_model, self.mem_heads
            ));
        }
        if self.d_ff == 0 {
            return bad("feedforward width must be positive".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer each".into());
        }
        if !(0.0..1.0).contains(&self.base_dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.base_dropout));
        }
        if self.d_f == 0 || self.output_dim == 0 {
            return bad("feature and output dimensions must be positive".into());
        }
        if self.l_s == 0 || self.l_p == 0 || self.l_dec == 0 || self.l_dec > self.l_s {
            return bad(format!(
                "sequence lengths invalid: enc {}, dec {}, pred {}",
                self.l_s, self.l_dec, self.l_p
            ));
        }
        if self.n_slots == 0 || self.n_slots > self.d_model {
            return bad(format!(
                "slot count {} must lie in 1..={}",
                self.n_slots, self.d_model
            ));
        }
        Ok(())
    }

    /// Serializes every field into checkpoint manifest entries.
    pub fn write_fields(&self, ckpt: &mut Checkpoint) {
        ckpt.set_field("model.d_model", self.d_model);
        ckpt.set_field("model.d_ff", self.d_ff);
        ckpt.set_field("model.n_heads", self.n_heads);
        ckpt.set_field("model.enc_layers", self.enc_layers);
        ckpt.set_field("model.dec_layers", self.dec_layers);
        ckpt.set_field("model.base_dropout", self.base_dropout);
        ckpt.set_field("model.l_s", self.l_s);
        ckpt.set_field("model.l_dec", self.l_dec);
        ckpt.set_field("model.l_p", self.l_p);
        ckpt.set_field("model.d_f", self.d_f);
        ckpt.set_field("model.output_dim", self.output_dim);
        ckpt.set_field("model.n_slots", self.n_slots);
        ckpt.set_field("model.mem_heads", self.mem_heads);
        ckpt.set_field("model.memory_enabled", self.memory_enabled);
        ckpt.set_field("model.decode_then_update", self.decode_then_update);
        ckpt.set_field("model.gates_use_prev_feed", self.gates_use_prev_feed);
    }

    /// Inverse of [`ModelConfig::write_fields`].
    pub fn read_fields(ckpt: &Checkpoint) -> Result<ModelConfig> {
        let config = ModelConfig {
            d_model: ckpt.parse_field("model.d_model")?,
            d_ff: ckpt.parse_field("model.d_ff")?,
            n_heads: ckpt.parse_field("model.n_heads")?,
            enc_layers: ckpt.parse_field("model.enc_layers")?,
            dec_layers: ckpt.parse_field("model.dec_layers")?,
            base_dropout: ckpt.parse_field("model.base_dropout")?,
            l_s: ckpt.parse_field("model.l_s")?,
            l_dec: ckpt.parse_field("model.l_dec")?,
            l_p: ckpt.parse_field("model.l_p")?,
            d_f: ckpt.parse_field("model.d_f")?,
            output_dim: ckpt.parse_field("model.output_dim")?,
            n_slots: ckpt.parse_field("model.n_slots")?,
            mem_heads: ckpt.parse_field("model.mem_heads")?,
            memory_enabled: ckpt.parse_field("model.memory_enabled")?,
            decode_then_update: ckpt.parse_field("model.decode_then_update")?,
            gates_use_prev_feed: ckpt.parse_field("model.gates_use_prev_feed")?,
        };
        config.validate()?;
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Standard layer norm: per-row statistics, learned gain and bias.
pub fn layer_norm(tape: &mut Tape, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (mu, sigma) = tape.layer_stats(x)?;
    let centered = tape.sub_col(x, &mu)?;
    let normalized = tape.div_col(&centered, &sigma)?;
    let gained = tape.mul_row(&normalized, gamma)?;
    tape.add_row(&gained, beta)
}

/// Gain/bias pair for one normalization site.
pub struct Ln {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Ln {
    fn new(d: usize) -> Ln {
        Ln {
            gamma: Tensor::param(vec![1.0; d], &[1, d]).unwrap(),
            beta: Tensor::param(vec![0.0; d], &[1, d]).unwrap(),
        }
    }

    fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        layer_norm(tape, x, &self.gamma, &self.beta)
    }
}

/// Query/key/value/output projections for one attention site, logically
/// split into `n_heads` heads of width `d_model / n_heads`.
pub struct AttentionBlock {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub n_heads: usize,
}

impl AttentionBlock {
    fn new(d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> AttentionBlock {
        let square = |rng: &mut ChaCha8Rng| Tensor::uniform_param(&[d_model, d_model], d_model, rng);
        AttentionBlock {
            w_q: square(rng),
            w_k: square(rng),
            w_v: square(rng),
            w_o: square(rng),
            n_heads,
        }
    }
}

/// Additive causal mask: zero on and below the diagonal, a large negative
/// constant above it. Finite (rather than -inf) so masked logits stay in
/// well-defined floating-point territory through softmax.
const CAUSAL_NEG: f64 = -1e30;

fn causal_mask(l: usize) -> Tensor {
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            data[i * l + j] = CAUSAL_NEG;
        }
    }
    Tensor::from_vec(data, &[l, l]).unwrap()
}

/// Multi-head scaled dot-product attention. Queries come from `q_in`,
/// keys/values from `kv_in`; heads are computed independently, concatenated,
/// and projected by `w_o`. In train mode the post-softmax weights are
/// dropout-masked at `dropout_rate`. `causal` adds a lower-triangular mask
/// (requires `q_in` and `kv_in` to have equal length).
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: &Tensor,
    kv_in: &Tensor,
    block: &AttentionBlock,
    causal: bool,
    dropout_rate: f64,
    train: bool,
    seeds: &mut SeedStream,
) -> Result<Tensor> {
    let d_model = block.w_q.rows();
    if q_in.cols() != d_model || kv_in.cols() != d_model {
        return Err(Error::Dimension(format!(
            "attention expects width {d_model}, got query {:?} and key/value {:?}",
            q_in.shape(),
            kv_in.shape()
        )));
    }
    if causal && q_in.rows() != kv_in.rows() {
        return Err(Error::Dimension(
            "causal attention requires equal query and key lengths".into(),
        ));
    }
    let q = tape.matmul(q_in, &block.w_q)?;
    let k = tape.matmul(kv_in, &block.w_k)?;
    let v = tape.matmul(kv_in, &block.w_v)?;
    let d_head = d_model / block.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mask = causal.then(|| causal_mask(q_in.rows()));

    let mut heads: Option<Tensor> = None;
    for h in 0..block.n_heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let qh = tape.slice_cols(&q, lo, hi)?;
        let kh = tape.slice_cols(&k, lo, hi)?;
        let vh = tape.slice_cols(&v, lo, hi)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let mut logits = tape.scale(&scores, scale)?;
        if let Some(mask) = &mask {
            logits = tape.add(&logits, mask)?;
        }
        let mut probs = tape.softmax_rows(&logits)?;
        if train && dropout_rate > 0.0 {
            probs = tape.dropout(&probs, dropout_rate, seeds.next())?;
        }
        let zh = tape.matmul(&probs, &vh)?;
        heads = Some(match heads {
            Some(acc) => tape.concat_cols(&acc, &zh)?,
            None => zh,
        });
    }
    tape.matmul(&heads.unwrap(), &block.w_o)
}

/// Position-wise feedforward: linear → GELU → linear, with biases.
pub struct Ffn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Ffn {
    fn new(d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Ffn {
        Ffn {
            w1: Tensor::uniform_param(&[d_model, d_ff], d_model, rng),
            b1: Tensor::param(vec![0.0; d_ff], &[1, d_ff]).unwrap(),
            w2: Tensor::uniform_param(&[d_ff, d_model], d_ff, rng),
            b2: Tensor::param(vec![0.0; d_model], &[1, d_model]).unwrap(),
        }
    }

    fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.matmul(x, &self.w1)?;
        let h = tape.add_row(&h, &self.b1)?;
        let h = tape.gelu(&h)?;
        let h = tape.matmul(&h, &self.w2)?;
        tape.add_row(&h, &self.b2)
    }
}

/// One encoder layer: self-attention and feedforward sublayers, each with a
/// post-norm residual.
pub struct EncoderLayer {
    pub attn: AttentionBlock,
    pub ln1: Ln,
    pub ffn: Ffn,
    pub ln2: Ln,
}

impl EncoderLayer {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> EncoderLayer {
        EncoderLayer {
            attn: AttentionBlock::new(config.d_model, config.n_heads, rng),
            ln1: Ln::new(config.d_model),
            ffn: Ffn::new(config.d_model, config.d_ff, rng),
            ln2: Ln::new(config.d_model),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        dropout_rate: f64,
        train: bool,
        seeds: &mut SeedStream,
    ) -> Result<Tensor> {
        let attn = multi_head_attention(tape, x, x, &self.attn, false, dropout_rate, train, seeds)?;
        let res = tape.add(x, &attn)?;
        let h = self.ln1.apply(tape, &res)?;
        let ff = self.ffn.apply(tape, &h)?;
        let res = tape.add(&h, &ff)?;
        self.ln2.apply(tape, &res)
    }
}

/// One decoder layer: causal self-attention whose residual is normalized by
/// the memory-driven conditional layer norm (or plain layer norm with the
/// same gain/bias when no memory matrix is supplied), then cross-attention
/// over the encoder output and a feedforward sublayer, both post-normed.
pub struct DecoderLayer {
    pub self_attn: AttentionBlock,
    pub cross_attn: AttentionBlock,
    pub ln2: Ln,
    pub ffn: Ffn,
    pub ln3: Ln,
}

impl DecoderLayer {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> DecoderLayer {
        DecoderLayer {
            self_attn: AttentionBlock::new(config.d_model, config.n_heads, rng),
            cross_attn: AttentionBlock::new(config.d_model, config.n_heads, rng),
            ln2: Ln::new(config.d_model),
            ffn: Ffn::new(config.d_model, config.d_ff, rng),
            ln3: Ln::new(config.d_model),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        enc_out: &Tensor,
        m_t: Option<&Tensor>,
        mem: &MemoryParams,
        dropout_rate: f64,
        train: bool,
        seeds: &mut SeedStream,
    ) -> Result<Tensor> {
        let sa =
            multi_head_attention(tape, x, x, &self.self_attn, true, dropout_rate, train, seeds)?;
        let res = tape.add(x, &sa)?;
        let h = match m_t {
            Some(m) => memory::mdcln(tape, &res, m, mem)?,
            None => layer_norm(tape, &res, &mem.gamma, &mem.beta)?,
        };
        let ca = multi_head_attention(
            tape,
            &h,
            enc_out,
            &self.cross_attn,
            false,
            dropout_rate,
            train,
            seeds,
        )?;
        let res = tape.add(&h, &ca)?;
        let h = self.ln2.apply(tape, &res)?;
        let ff = self.ffn.apply(tape, &h)?;
        let res = tape.add(&h, &ff)?;
        self.ln3.apply(tape, &res)
    }
}

/// Decoder feed per the generative decoding scheme: the decoder seed rows
/// followed by an all-zero placeholder for the horizon, with calendar marks
/// covering every one of the `l_dec + l_p` timestamps (the future timestamps
/// are known even though their values are not).
pub fn build_decoder_feed(window: &WindowSample, d_f: usize, l_p: usize) -> (Vec<f64>, Vec<Marks>) {
    let mut values = window.dec_input.clone();
    values.extend(std::iter::repeat(0.0).take(l_p * d_f));
    (values, window.dec_marks.clone())
}

// ---------------------------------------------------------------------------
// Forecaster
// ---------------------------------------------------------------------------

/// Everything produced by one forward pass over one window.
pub struct ForwardOutput {
    /// `[l_p x output_dim]` predictions in normalized space.
    pub pred: Tensor,
    /// Memory state to carry into the next window (detached).
    pub next_state: MemoryState,
    /// Detached feed summary `[n_slots x d_model]`, for the previous-feed
    /// gating ablation.
    pub feed_summary: Tensor,
}

/// The full memory-driven forecaster.
pub struct Forecaster {
    pub config: ModelConfig,
    pub enc_embed: EmbeddingParams,
    pub dec_embed: EmbeddingParams,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub memory: MemoryParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl Forecaster {
    /// Builds a model with freshly initialized parameters drawn from a
    /// seeded generator; equal seeds give bitwise-equal models.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Forecaster> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_embed = EmbeddingParams::new(config.d_f, config.d_model, &mut rng)?;
        let dec_embed = EmbeddingParams::new(config.d_f, config.d_model, &mut rng)?;
        let encoder = (0..config.enc_layers).map(|_| EncoderLayer::new(&config, &mut rng)).collect();
        let decoder = (0..config.dec_layers).map(|_| DecoderLayer::new(&config, &mut rng)).collect();
        let mut memory = MemoryParams::new(config.d_model, config.n_slots, config.mem_heads, &mut rng)?;
        memory.gates_use_prev_feed = config.gates_use_prev_feed;
        let out_w = Tensor::uniform_param(&[config.d_model, config.output_dim], config.d_model, &mut rng);
        let out_b = Tensor::param(vec![0.0; config.output_dim], &[1, config.output_dim])?;
        Ok(Forecaster { config, enc_embed, dec_embed, encoder, decoder, memory, out_w, out_b })
    }

    /// A fresh memory state shaped for this model.
    pub fn init_memory(&self) -> Result<MemoryState> {
        memory::init_memory(self.config.n_slots, self.config.d_model)
    }

    /// Encoder stack over an embedded input.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x_embed: &Tensor,
        dropout_rate: f64,
        train: bool,
        seeds: &mut SeedStream,
    ) -> Result<Tensor> {
        let mut h = x_embed.clone();
        for layer in &self.encoder {
            h = layer.forward(tape, &h, dropout_rate, train, seeds)?;
        }
        Ok(h)
    }

    /// One memory transition on an embedded decoder feed. Returns the
    /// in-graph matrix for MDCLN (None when the unit is disabled), the
    /// detached next state, and the detached feed summary.
    pub fn memory_step(
        &self,
        tape: &mut Tape,
        state: &MemoryState,
        feed_embed: &Tensor,
        prev_summary: Option<&Tensor>,
    ) -> Result<(Option<Tensor>, MemoryState, Tensor)> {
        let summary = memory::summarize_feed(tape, feed_embed, self.config.n_slots)?;
        if !self.config.memory_enabled {
            return Ok((None, state.clone(), summary.detach()));
        }
        if state.m.cols() != self.config.d_model {
            return Err(Error::Config(format!(
                "memory width {} does not match model width {}",
                state.m.cols(),
                self.config.d_model
            )));
        }
        let gate_override = if self.config.gates_use_prev_feed { prev_summary } else { None };
        let (m_t, next) = if self.config.decode_then_update && !state.frozen {
            // Ablation: the decoder sees the pre-update matrix; the update
            // still runs so later windows observe fresh memory.
            let (_, next) = memory::step(tape, state, feed_embed, gate_override, &self.memory)?;
            (state.m.clone(), next)
        } else {
            memory::step(tape, state, feed_embed, gate_override, &self.memory)?
        };
        Ok((Some(m_t), next, summary.detach()))
    }

    /// Decoder stack over an embedded feed.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        feed_embed: &Tensor,
        enc_out: &Tensor,
        m_t: Option<&Tensor>,
        dropout_rate: f64,
        train: bool,
        seeds: &mut SeedStream,
    ) -> Result<Tensor> {
        let mut h = feed_embed.clone();
        for layer in &self.decoder {
            h = layer.forward(tape, &h, enc_out, m_t, &self.memory, dropout_rate, train, seeds)?;
        }
        Ok(h)
    }

    /// Linear head over the last `l_p` decoder rows.
    pub fn project_output(&self, tape: &mut Tape, dec_out: &Tensor) -> Result<Tensor> {
        let rows = dec_out.rows();
        if rows < self.config.l_p {
            return Err(Error::Dimension(format!(
                "decoder output has {rows} rows, fewer than the {}-step horizon",
                self.config.l_p
            )));
        }
        let tail = tape.slice_rows(dec_out, rows - self.config.l_p, rows)?;
        let proj = tape.matmul(&tail, &self.out_w)?;
        tape.add_row(&proj, &self.out_b)
    }

    /// Full forward pass over one window: embed both streams, run the
    /// memory transition, encode, decode under the updated memory, and
    /// project the horizon — all in one shot.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        window: &WindowSample,
        state: &MemoryState,
        prev_summary: Option<&Tensor>,
        dropout_rate: f64,
        train: bool,
        dropout_seed: u64,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let mut seeds = SeedStream::new(dropout_seed);
        let enc_x = Tensor::from_vec(window.enc_input.clone(), &[cfg.l_s, cfg.d_f])?;
        let enc_embedded = embed(
            tape,
            &enc_x,
            &window.enc_marks,
            &self.enc_embed,
            dropout_rate,
            train,
            seeds.next(),
        )?;
        let (feed_values, feed_marks) = build_decoder_feed(window, cfg.d_f, cfg.l_p);
        let feed_x = Tensor::from_vec(feed_values, &[cfg.l_dec + cfg.l_p, cfg.d_f])?;
        let feed_embedded = embed(
            tape,
            &feed_x,
            &feed_marks,
            &self.dec_embed,
            dropout_rate,
            train,
            seeds.next(),
        )?;
        let (m_t, next_state, feed_summary) =
            self.memory_step(tape, state, &feed_embedded, prev_summary)?;
        let enc_out = self.encode(tape, &enc_embedded, dropout_rate, train, &mut seeds)?;
        let dec_out = self.decode(
            tape,
            &feed_embedded,
            &enc_out,
            m_t.as_ref(),
            dropout_rate,
            train,
            &mut seeds,
        )?;
        let pred = self.project_output(tape, &dec_out)?;
        Ok(ForwardOutput { pred, next_state, feed_summary })
    }

    /// Every trainable tensor with a stable dotted name.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("enc_embed.kernel".to_string(), self.enc_embed.conv_kernel.clone()),
            ("dec_embed.kernel".to_string(), self.dec_embed.conv_kernel.clone()),
        ];
        for (i, layer) in self.encoder.iter().enumerate() {
            let base = format!("encoder.{i}");
            out.extend([
                (format!("{base}.attn.w_q"), layer.attn.w_q.clone()),
                (format!("{base}.attn.w_k"), layer.attn.w_k.clone()),
                (format!("{base}.attn.w_v"), layer.attn.w_v.clone()),
                (format!("{base}.attn.w_o"), layer.attn.w_o.clone()),
                (format!("{base}.ln1.gamma"), layer.ln1.gamma.clone()),
                (format!("{base}.ln1.beta"), layer.ln1.beta.clone()),
                (format!("{base}.ffn.w1"), layer.ffn.w1.clone()),
                (format!("{base}.ffn.b1"), layer.ffn.b1.clone()),
                (format!("{base}.ffn.w2"), layer.ffn.w2.clone()),
                (format!("{base}.ffn.b2"), layer.ffn.b2.clone()),
                (format!("{base}.ln2.gamma"), layer.ln2.gamma.clone()),
                (format!("{base}.ln2.beta"), layer.ln2.beta.clone()),
            ]);
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            let base = format!("decoder.{i}");
            for (name, block) in
                [("self_attn", &layer.self_attn), ("cross_attn", &layer.cross_attn)]
            {
                out.extend([
                    (format!("{base}.{name}.w_q"), block.w_q.clone()),
                    (format!("{base}.{name}.w_k"), block.w_k.clone()),
                    (format!("{base}.{name}.w_v"), block.w_v.clone()),
                    (format!("{base}.{name}.w_o"), block.w_o.clone()),
                ]);
            }
            out.extend([
                (format!("{base}.ln2.gamma"), layer.ln2.gamma.clone()),
                (format!("{base}.ln2.beta"), layer.ln2.beta.clone()),
                (format!("{base}.ffn.w1"), layer.ffn.w1.clone()),
                (format!("{base}.ffn.b1"), layer.ffn.b1.clone()),
                (format!("{base}.ffn.w2"), layer.ffn.w2.clone()),
                (format!("{base}.ffn.b2"), layer.ffn.b2.clone()),
                (format!("{base}.ln3.gamma"), layer.ln3.gamma.clone()),
                (format!("{base}.ln3.beta"), layer.ln3.beta.clone()),
            ]);
        }
        out.extend(self.memory.parameters());
        out.push(("head.w".to_string(), self.out_w.clone()));
        out.push(("head.b".to_string(), self.out_b.clone()));
        out
    }

    /// Writes the architecture fields and every parameter array.
    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        self.config.write_fields(ckpt);
        for (name, tensor) in self.named_parameters() {
            ckpt.add_array(&format!("param.{name}"), tensor.shape(), tensor.to_vec());
        }
    }

    /// Reconstructs a model from checkpoint fields and arrays.
    pub fn read_checkpoint(ckpt: &Checkpoint) -> Result<Forecaster> {
        let config = ModelConfig::read_fields(ckpt)?;
        let model = Forecaster::new(config, 0)?;
        for (name, tensor) in model.named_parameters() {
            let stored = ckpt.array(&format!("param.{name}"))?;
            if stored.shape != tensor.shape() {
                return Err(Error::Persistence(format!(
                    "checkpoint array {name} has shape {:?}, model expects {:?}",
                    stored.shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(stored.data.clone())?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{iter_windows, synth_generate, WindowSpec};
    use crate::tensor::grad_check;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 1,
            enc_layers: 1,
            dec_layers: 1,
            base_dropout: 0.1,
            l_s: 6,
            l_dec: 4,
            l_p: 2,
            d_f: 2,
            output_dim: 2,
            n_slots: 2,
            mem_heads: 2,
            memory_enabled: true,
            decode_then_update: false,
            gates_use_prev_feed: false,
        }
    }

    fn tiny_window(seed: u64) -> WindowSample {
        let cfg = tiny_config();
        let table = synth_generate(cfg.l_s + cfg.l_p + 10, cfg.d_f, seed).unwrap();
        let spec = WindowSpec::new(cfg.l_s, cfg.l_dec, cfg.l_p, 1).unwrap();
        iter_windows(&table, &spec, None).into_iter().next().unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, &[rows, cols]).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_widths() {
        let mut cfg = tiny_config();
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.l_dec = 99;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.base_dropout = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_key_attention_is_the_projected_value_row() {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = AttentionBlock::new(d, 2, &mut rng);
        let x = random_matrix(1, d, 2);
        let mut tape = Tape::inference();
        let mut seeds = SeedStream::new(0);
        let got =
            multi_head_attention(&mut tape, &x, &x, &block, false, 0.0, false, &mut seeds).unwrap();
        // One key: every head's softmax weight is 1, so the output is
        // (x W_v) W_o regardless of the head split.
        let v = tape.matmul(&x, &block.w_v).unwrap();
        let want = tape.matmul(&v, &block.w_o).unwrap();
        for (a, b) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_head_attention_matches_dense_oracle() {
        let d = 4;
        let (l_q, l_k) = (3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = AttentionBlock::new(d, 1, &mut rng);
        let q_in = random_matrix(l_q, d, 4);
        let kv_in = random_matrix(l_k, d, 5);
        let mut tape = Tape::inference();
        let mut seeds = SeedStream::new(0);
        let got = multi_head_attention(&mut tape, &q_in, &kv_in, &block, false, 0.0, false, &mut seeds)
            .unwrap();

        let matmul = |a: &[f64], b: &[f64], n: usize, k: usize, m: usize| -> Vec<f64> {
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for p in 0..k {
                    for j in 0..m {
                        out[i * m + j] += a[i * k + p] * b[p * m + j];
                    }
                }
            }
            out
        };
        let q = matmul(&q_in.to_vec(), &block.w_q.to_vec(), l_q, d, d);
        let k = matmul(&kv_in.to_vec(), &block.w_k.to_vec(), l_k, d, d);
        let v = matmul(&kv_in.to_vec(), &block.w_v.to_vec(), l_k, d, d);
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = vec![0.0; l_q * d];
        for i in 0..l_q {
            let logits: Vec<f64> = (0..l_k)
                .map(|j| (0..d).map(|p| q[i * d + p] * k[j * d + p]).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..l_k {
                for p in 0..d {
                    ctx[i * d + p] += exps[j] / total * v[j * d + p];
                }
            }
        }
        let want = matmul(&ctx, &block.w_o.to_vec(), l_q, d, d);
        for (a, b) in got.to_vec().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn causal_mask_blocks_future_rows() {
        // Perturbing feed rows after position i must not change decoder
        // outputs at or before i (single layer, eval mode, no memory).
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = DecoderLayer::new(&cfg, &mut rng);
        let mem = MemoryParams::new(cfg.d_model, cfg.n_slots, cfg.mem_heads, &mut rng).unwrap();
        let enc_out = random_matrix(cfg.l_s, cfg.d_model, 7);
        let feed = random_matrix(6, cfg.d_model, 8);
        let mut perturbed_data = feed.to_vec();
        let cut = 3; // rows 0..=2 stay identical, 3.. are overwritten
        for v in perturbed_data.iter_mut().skip(cut * cfg.d_model) {
            *v += 13.7;
        }
        let perturbed = Tensor::from_vec(perturbed_data, &[6, cfg.d_model]).unwrap();

        let mut tape = Tape::inference();
        let mut seeds = SeedStream::new(0);
        let a = layer
            .forward(&mut tape, &feed, &enc_out, None, &mem, 0.0, false, &mut seeds)
            .unwrap();
        let b = layer
            .forward(&mut tape, &perturbed, &enc_out, None, &mem, 0.0, false, &mut seeds)
            .unwrap();
        for r in 0..cut {
            for c in 0..cfg.d_model {
                assert!(
                    (a.at(r, c) - b.at(r, c)).abs() < 1e-12,
                    "row {r} changed despite the causal mask"
                );
            }
        }
        // Sanity: later rows do change.
        assert!((a.at(cut, 0) - b.at(cut, 0)).abs() > 1e-9);
    }

    #[test]
    fn encoder_zero_ffn_output_layer_reduces_to_norms() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = EncoderLayer::new(&cfg, &mut rng);
        layer.ffn.w2.set_data(vec![0.0; cfg.d_ff * cfg.d_model]).unwrap();
        let x = random_matrix(cfg.l_s, cfg.d_model, 10);
        let mut tape = Tape::inference();
        let mut seeds = SeedStream::new(0);
        let got = layer.forward(&mut tape, &x, 0.0, false, &mut seeds).unwrap();
        // With ffn ≡ 0 the second sublayer is LN(h + 0) = LN(h).
        let mut seeds = SeedStream::new(0);
        let attn =
            multi_head_attention(&mut tape, &x, &x, &layer.attn, false, 0.0, false, &mut seeds)
                .unwrap();
        let res = tape.add(&x, &attn).unwrap();
        let h = layer.ln1.apply(&mut tape, &res).unwrap();
        let want = layer.ln2.apply(&mut tape, &h).unwrap();
        assert_eq!(got.to_vec(), want.to_vec());
    }

    #[test]
    fn decoder_feed_has_zero_placeholder_and_future_marks() {
        let cfg = tiny_config();
        let w = tiny_window(11);
        let (values, marks) = build_decoder_feed(&w, cfg.d_f, cfg.l_p);
        assert_eq!(values.len(), (cfg.l_dec + cfg.l_p) * cfg.d_f);
        assert_eq!(&values[..cfg.l_dec * cfg.d_f], &w.dec_input[..]);
        assert!(values[cfg.l_dec * cfg.d_f..].iter().all(|v| *v == 0.0));
        assert_eq!(marks.len(), cfg.l_dec + cfg.l_p);
        assert_eq!(marks, w.dec_marks);
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let cfg = tiny_config();
        let model = Forecaster::new(cfg.clone(), 12).unwrap();
        let state = model.init_memory().unwrap();
        let w = tiny_window(13);
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &w, &state, None, 0.0, false, 1).unwrap();
        assert_eq!(out.pred.shape(), vec![cfg.l_p, cfg.output_dim]);
        assert_eq!(out.next_state.update_count, 1);
        let out2 = model.forward(&mut tape, &w, &state, None, 0.0, false, 2).unwrap();
        // Eval mode ignores dropout seeds entirely.
        assert_eq!(out.pred.to_vec(), out2.pred.to_vec());
    }

    #[test]
    fn project_output_sees_only_the_horizon_rows() {
        let cfg = tiny_config();
        let model = Forecaster::new(cfg.clone(), 14).unwrap();
        let rows = cfg.l_dec + cfg.l_p;
        let dec_out = random_matrix(rows, cfg.d_model, 15);
        let mut tape = Tape::inference();
        let a = model.project_output(&mut tape, &dec_out).unwrap();
        // Perturb every row before the horizon.
        let mut data = dec_out.to_vec();
        for v in data.iter_mut().take((rows - cfg.l_p) * cfg.d_model) {
            *v -= 42.0;
        }
        let perturbed = Tensor::from_vec(data, &[rows, cfg.d_model]).unwrap();
        let b = model.project_output(&mut tape, &perturbed).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        // Zero weights and bias → zero predictions.
        model.out_w.set_data(vec![0.0; cfg.d_model * cfg.output_dim]).unwrap();
        let z = model.project_output(&mut tape, &dec_out).unwrap();
        assert!(z.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_frozen_memory_is_bit_identical_to_vanilla() {
        // MDCLN maps start at zero, so freezing M at the zero matrix must
        // reproduce the plain-layer-norm decoder bit for bit.
        let w = tiny_window(16);
        for seed in 0..10 {
            let mut model = Forecaster::new(tiny_config(), 100 + seed).unwrap();
            let zero_state = MemoryState {
                m: Tensor::zeros(&[model.config.n_slots, model.config.d_model]),
                update_count: 0,
                frozen: true,
            };
            let mut tape = Tape::inference();
            let with_memory =
                model.forward(&mut tape, &w, &zero_state, None, 0.0, false, 1).unwrap();
            model.config.memory_enabled = false;
            let vanilla = model.forward(&mut tape, &w, &zero_state, None, 0.0, false, 1).unwrap();
            let (a, b) = (with_memory.pred.to_vec(), vanilla.pred.to_vec());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "seed {seed}");
            }
        }
    }

    #[test]
    fn forward_stays_finite_over_many_random_draws() {
        let w = tiny_window(17);
        for seed in 0..1000 {
            let model = Forecaster::new(tiny_config(), seed).unwrap();
            // Rescale all parameters by 0.1 to probe a different operating
            // region than the init distribution.
            for (_, p) in model.named_parameters() {
                p.with_data_mut(|d| d.iter_mut().for_each(|v| *v *= 0.1));
            }
            let state = model.init_memory().unwrap();
            let mut tape = Tape::inference();
            let out = model.forward(&mut tape, &w, &state, None, 0.0, false, seed).unwrap();
            assert!(out.pred.all_finite(), "non-finite prediction at seed {seed}");
            assert!(out.next_state.m.all_finite(), "non-finite memory at seed {seed}");
        }
    }

    #[test]
    fn end_to_end_gradients_check_out_on_tiny_model() {
        let model = Forecaster::new(tiny_config(), 18).unwrap();
        let w = tiny_window(19);
        let target =
            Tensor::from_vec(w.target.clone(), &[model.config.l_p, model.config.d_f]).unwrap();

        let run = |tape: &mut Tape| -> Result<Tensor> {
            let state = model.init_memory()?;
            let out = model.forward(tape, &w, &state, None, 0.0, false, 0)?;
            let diff = tape.sub(&out.pred, &target)?;
            let sq = tape.mul(&diff, &diff)?;
            tape.sum(&sq)
        };

        // Probe parameters on every path: embedding, encoder, decoder,
        // memory, and the output head.
        let probes = [
            model.enc_embed.conv_kernel.clone(),
            model.dec_embed.conv_kernel.clone(),
            model.encoder[0].attn.w_q.clone(),
            model.decoder[0].self_attn.w_v.clone(),
            model.decoder[0].cross_attn.w_o.clone(),
            model.memory.w_q.clone(),
            model.memory.gamma.clone(),
            model.out_w.clone(),
        ];
        for probe in &probes {
            let err = grad_check(|tape, _| run(tape), probe, 1e-5).unwrap();
            assert!(err < 1e-3, "max relative gradient error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions_bitwise() {
        let model = Forecaster::new(tiny_config(), 20).unwrap();
        let w = tiny_window(21);
        let state = model.init_memory().unwrap();
        let mut tape = Tape::inference();
        let want = model.forward(&mut tape, &w, &state, None, 0.0, false, 3).unwrap();

        let mut ckpt = Checkpoint::new();
        model.write_checkpoint(&mut ckpt);
        let bytes = ckpt.to_bytes();
        let restored = Forecaster::read_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let got = restored.forward(&mut tape, &w, &state, None, 0.0, false, 3).unwrap();
        for (a, b) in want.pred.to_vec().iter().zip(got.pred.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn decode_then_update_ablation_defers_the_memory() {
        let mut cfg = tiny_config();
        cfg.decode_then_update = true;
        let model = Forecaster::new(cfg, 22).unwrap();
        let state = model.init_memory().unwrap();
        let w = tiny_window(23);
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &w, &state, None, 0.0, false, 1).unwrap();
        // The state still advances...
        assert_eq!(out.next_state.update_count, 1);
        assert_ne!(out.next_state.m.to_vec(), state.m.to_vec());
        // ...but the decoder consumed the pre-update matrix, so predictions
        // equal those of a frozen-memory pass over the same window.
        let mut frozen = state.clone();
        frozen.frozen = true;
        let frozen_out = model.forward(&mut tape, &w, &frozen, None, 0.0, false, 1).unwrap();
        assert_eq!(out.pred.to_vec(), frozen_out.pred.to_vec());
    }

    #[test]
    fn gates_prev_feed_ablation_threads_the_summary() {
        let mut cfg = tiny_config();
        cfg.gates_use_prev_feed = true;
        let model = Forecaster::new(cfg, 24).unwrap();
        let state = model.init_memory().unwrap();
        let (w1, w2) = (tiny_window(25), tiny_window(26));
        let mut tape = Tape::inference();
        // First window has no previous summary: falls back to the current
        // feed, identical to the default path.
        let a = model.forward(&mut tape, &w1, &state, None, 0.0, false, 1).unwrap();
        // Threading a different summary changes the update.
        let other = model.forward(&mut tape, &w2, &state, None, 0.0, false, 1).unwrap();
        let b = model
            .forward(&mut tape, &w1, &state, Some(&other.feed_summary), 0.0, false, 1)
            .unwrap();
        assert_ne!(a.next_state.m.to_vec(), b.next_state.m.to_vec());
    }
}
