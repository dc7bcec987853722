//! No-grad inference: full forwards, an incremental sampling session, and
//! the measurement ops built on them (log-probs, perplexity, classify).
//!
//! These paths call the same kernels as the taped forward, in the same
//! order, so a logit computed here is bitwise equal to the one the tape
//! computes for the same parameters and tokens. The KV-cache session in
//! turn reproduces the full forward row arithmetic exactly; only work
//! already proven zero by causal masking is skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernel;
use super::model::{PolicyModel, RewardNet};
use super::tensor::{Scalar, Tensor};
use super::NeuralError;
use crate::par;
use crate::tokenizer::Vocabulary;

fn add_bias_rows_inplace<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn slice_cols<T: Scalar>(src: &[T], rows: usize, src_cols: usize, start: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * width);
    for i in 0..rows {
        out.extend_from_slice(&src[i * src_cols + start..i * src_cols + start + width]);
    }
    out
}

// One output row of x · W^T for W stored [out, in].
fn matvec_nt<T: Scalar>(x: &[T], w: &[T], out_dim: usize) -> Vec<T> {
    let k = x.len();
    let mut out = Vec::with_capacity(out_dim);
    for j in 0..out_dim {
        out.push(kernel::dot(x, &w[j * k..(j + 1) * k]));
    }
    out
}

// Shared trunk forward over the whole sequence. Mirrors the taped trunk
// op for op; keep the two in sync.
fn trunk_infer<T: Scalar>(
    params: &super::model::ParamSet<T>,
    idx: &super::model::TrunkIdx,
    heads: usize,
    d: usize,
    ctx: usize,
    tokens: &[u32],
    causal: bool,
) -> Result<Vec<T>, NeuralError> {
    if tokens.is_empty() {
        return Err(NeuralError::EmptyInput("no tokens"));
    }
    if tokens.len() > ctx {
        return Err(NeuralError::SequenceTooLong { len: tokens.len(), max: ctx });
    }
    let t = tokens.len();
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let p = |i: usize| params.tensor(i).data();

    let vocab = params.tensor(idx.tok_emb).rows();
    let tok_emb = p(idx.tok_emb);
    let pos_emb = p(idx.pos_emb);
    let mut x = vec![T::ZERO; t * d];
    for (pos, &id) in tokens.iter().enumerate() {
        if id as usize >= vocab {
            return Err(NeuralError::TokenOutOfRange { id, vocab });
        }
        for j in 0..d {
            x[pos * d + j] = tok_emb[id as usize * d + j] + pos_emb[pos * d + j];
        }
    }

    for layer in &idx.layers {
        let (ln1, _, _) = kernel::layernorm_rows(&x, p(layer.ln1_gain), p(layer.ln1_bias), t, d);
        let mut qkv = kernel::matmul_nt(&ln1, p(layer.w_qkv), t, d, 3 * d);
        add_bias_rows_inplace(&mut qkv, p(layer.b_qkv));
        let mut ctx_cat = vec![T::ZERO; t * d];
        for h in 0..heads {
            let q = slice_cols(&qkv, t, 3 * d, h * dh, dh);
            let k = slice_cols(&qkv, t, 3 * d, d + h * dh, dh);
            let v = slice_cols(&qkv, t, 3 * d, 2 * d + h * dh, dh);
            let mut scores = kernel::matmul_nt(&q, &k, t, dh, t);
            for s in &mut scores {
                *s *= scale;
            }
            let attn = if causal {
                kernel::softmax_causal(&scores, t)
            } else {
                kernel::softmax_rows(&scores, t, t)
            };
            let ctx_h = kernel::matmul_nn(&attn, &v, t, t, dh);
            for i in 0..t {
                ctx_cat[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&ctx_h[i * dh..(i + 1) * dh]);
            }
        }
        let mut proj = kernel::matmul_nt(&ctx_cat, p(layer.w_proj), t, d, d);
        add_bias_rows_inplace(&mut proj, p(layer.b_proj));
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi = *xi + *pi;
        }

        let (ln2, _, _) = kernel::layernorm_rows(&x, p(layer.ln2_gain), p(layer.ln2_bias), t, d);
        let f = params.tensor(layer.w_ff1).rows();
        let mut h1 = kernel::matmul_nt(&ln2, p(layer.w_ff1), t, d, f);
        add_bias_rows_inplace(&mut h1, p(layer.b_ff1));
        for v in &mut h1 {
            *v = kernel::gelu(*v);
        }
        let mut h2 = kernel::matmul_nt(&h1, p(layer.w_ff2), t, f, d);
        add_bias_rows_inplace(&mut h2, p(layer.b_ff2));
        for (xi, hi) in x.iter_mut().zip(&h2) {
            *xi = *xi + *hi;
        }
    }
    let (xf, _, _) = kernel::layernorm_rows(&x, p(idx.lnf_gain), p(idx.lnf_bias), t, d);
    Ok(xf)
}

/// Full forward without gradients: logits `[t, vocab]` and per-position
/// values.
pub fn forward_lm<T: Scalar>(
    model: &PolicyModel<T>,
    tokens: &[u32],
) -> Result<(Tensor<T>, Vec<T>), NeuralError> {
    let cfg = &model.config;
    let d = cfg.model_dim;
    let xf = trunk_infer(
        &model.params,
        &model.idx,
        cfg.heads,
        d,
        cfg.context_length,
        tokens,
        true,
    )?;
    let t = tokens.len();
    let logits = kernel::matmul_nt(&xf, model.params.tensor(model.idx.tok_emb).data(), t, d, cfg.vocab_size);
    let vw = model.params.tensor(model.value_w).data();
    let vb = model.params.tensor(model.value_b).data()[0];
    let values = (0..t)
        .map(|i| kernel::dot(&xf[i * d..(i + 1) * d], vw) + vb)
        .collect();
    Ok((Tensor::from_vec(&[t, cfg.vocab_size], logits), values))
}

/// Stable per-row `log softmax(logits)[target]`; values are finite and
/// non-positive up to rounding.
pub fn log_probs<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<Vec<T>, NeuralError> {
    let (m, vocab) = (logits.rows(), logits.cols());
    if targets.len() != m {
        return Err(NeuralError::ShapeMismatch {
            op: "log_probs",
            detail: format!("{} targets for {m} rows", targets.len()),
        });
    }
    let mut out = Vec::with_capacity(m);
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(NeuralError::TokenOutOfRange { id: t, vocab });
        }
        out.push(kernel::log_prob_of(&logits.data()[i * vocab..(i + 1) * vocab], t as usize));
    }
    Ok(out)
}

/// Incremental decoding session with per-layer KV caches. Each
/// [`LmSession::push`] appends one token and returns the next-token logits
/// plus the value of the sequence ending at that token, bitwise equal to
/// the corresponding row of [`forward_lm`].
pub struct LmSession<'a, T: Scalar> {
    model: &'a PolicyModel<T>,
    // Per layer, the cached key and value regions, [len, model_dim] each.
    k_cache: Vec<Vec<T>>,
    v_cache: Vec<Vec<T>>,
    len: usize,
}

/// One decoding step: logits over the next token and the value estimate of
/// the state ending here.
pub struct StepOutput<T> {
    pub logits: Vec<T>,
    pub value: T,
}

impl<'a, T: Scalar> LmSession<'a, T> {
    pub fn new(model: &'a PolicyModel<T>) -> Self {
        let layers = model.config.layers;
        LmSession {
            model,
            k_cache: vec![Vec::new(); layers],
            v_cache: vec![Vec::new(); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, token: u32) -> Result<StepOutput<T>, NeuralError> {
        let cfg = &self.model.config;
        let (d, heads) = (cfg.model_dim, cfg.heads);
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let t = self.len;
        if t >= cfg.context_length {
            return Err(NeuralError::SequenceTooLong { len: t + 1, max: cfg.context_length });
        }
        if token as usize >= cfg.vocab_size {
            return Err(NeuralError::TokenOutOfRange { id: token, vocab: cfg.vocab_size });
        }
        let params = &self.model.params;
        let idx = &self.model.idx;
        let p = |i: usize| params.tensor(i).data();

        let tok_emb = p(idx.tok_emb);
        let pos_emb = p(idx.pos_emb);
        let mut x: Vec<T> = (0..d)
            .map(|j| tok_emb[token as usize * d + j] + pos_emb[t * d + j])
            .collect();

        for (l, layer) in idx.layers.iter().enumerate() {
            let (ln1, _, _) = kernel::layernorm_rows(&x, p(layer.ln1_gain), p(layer.ln1_bias), 1, d);
            let mut qkv = matvec_nt(&ln1, p(layer.w_qkv), 3 * d);
            for (v, &b) in qkv.iter_mut().zip(p(layer.b_qkv)) {
                *v += b;
            }
            self.k_cache[l].extend_from_slice(&qkv[d..2 * d]);
            self.v_cache[l].extend_from_slice(&qkv[2 * d..3 * d]);

            let mut ctx_cat = vec![T::ZERO; d];
            for h in 0..heads {
                let q = &qkv[h * dh..(h + 1) * dh];
                let mut scores = Vec::with_capacity(t + 1);
                for j in 0..=t {
                    let krow = &self.k_cache[l][j * d + h * dh..j * d + (h + 1) * dh];
                    scores.push(kernel::dot(q, krow) * scale);
                }
                kernel::softmax_inplace(&mut scores);
                for (j, &w) in scores.iter().enumerate() {
                    let vrow = &self.v_cache[l][j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &vj) in ctx_cat[h * dh..(h + 1) * dh].iter_mut().zip(vrow) {
                        *o += w * vj;
                    }
                }
            }
            let mut proj = matvec_nt(&ctx_cat, p(layer.w_proj), d);
            for (v, &b) in proj.iter_mut().zip(p(layer.b_proj)) {
                *v += b;
            }
            for (xi, &pi) in x.iter_mut().zip(&proj) {
                *xi = *xi + pi;
            }

            let (ln2, _, _) = kernel::layernorm_rows(&x, p(layer.ln2_gain), p(layer.ln2_bias), 1, d);
            let f = params.tensor(layer.w_ff1).rows();
            let mut h1 = matvec_nt(&ln2, p(layer.w_ff1), f);
            for (v, &b) in h1.iter_mut().zip(p(layer.b_ff1)) {
                *v += b;
            }
            for v in &mut h1 {
                *v = kernel::gelu(*v);
            }
            let mut h2 = matvec_nt(&h1, p(layer.w_ff2), d);
            for (v, &b) in h2.iter_mut().zip(p(layer.b_ff2)) {
                *v += b;
            }
            for (xi, &hi) in x.iter_mut().zip(&h2) {
                *xi = *xi + hi;
            }
        }
        let (xf, _, _) = kernel::layernorm_rows(&x, p(idx.lnf_gain), p(idx.lnf_bias), 1, d);
        let logits = matvec_nt(&xf, tok_emb, cfg.vocab_size);
        let vw = p(self.model.value_w);
        let value = kernel::dot(&xf, vw) + p(self.model.value_b)[0];
        self.len += 1;
        Ok(StepOutput { logits, value })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub max_new_tokens: usize,
    /// 0.0 means greedy argmax.
    pub temperature: f64,
    /// 0 means no truncation.
    pub top_k: usize,
    pub stop_token: Option<u32>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { max_new_tokens: 64, temperature: 1.0, top_k: 0, stop_token: None }
    }
}

/// One sampled continuation. `tokens` excludes the prompt and includes the
/// stop token when one was emitted; `logprobs[i]` is the untempered
/// log-probability of `tokens[i]`; `values[i]` is the value estimate of
/// the state from which `tokens[i]` was chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput<T> {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<T>,
    pub values: Vec<T>,
}

// Temperature / top-k choice over one logit row. Probabilities are formed
// in f64; candidate walk order is ascending token id, so the draw is fully
// determined by the rng stream.
fn choose<T: Scalar>(logits: &[T], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let mut candidates: Vec<usize> = (0..logits.len()).collect();
    if top_k > 0 && top_k < logits.len() {
        candidates.sort_by(|&a, &b| {
            logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        candidates.truncate(top_k);
        candidates.sort_unstable();
    }
    let max = candidates
        .iter()
        .map(|&i| logits[i].to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| ((logits[i].to_f64() - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (ci, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return candidates[ci];
        }
    }
    *candidates.last().unwrap()
}

/// Samples a continuation of `prompt`. Deterministic in `(model, prompt,
/// config, seed)`. Generation stops at the stop token, at
/// `max_new_tokens`, or when the context window fills, whichever comes
/// first.
pub fn sample<T: Scalar>(
    model: &PolicyModel<T>,
    prompt: &[u32],
    config: &SamplerConfig,
    seed: u64,
) -> Result<SampleOutput<T>, NeuralError> {
    if prompt.is_empty() {
        return Err(NeuralError::EmptyInput("empty prompt"));
    }
    let ctx = model.config.context_length;
    if prompt.len() >= ctx {
        return Err(NeuralError::SequenceTooLong { len: prompt.len(), max: ctx - 1 });
    }
    let room = ctx - prompt.len();
    let budget = config.max_new_tokens.min(room);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut session = LmSession::new(model);
    let mut step = StepOutput { logits: Vec::new(), value: T::ZERO };
    for &tok in prompt {
        step = session.push(tok)?;
    }
    let mut out = SampleOutput { tokens: Vec::new(), logprobs: Vec::new(), values: Vec::new() };
    while out.tokens.len() < budget {
        let chosen = choose(&step.logits, config.temperature, config.top_k, &mut rng);
        out.values.push(step.value);
        out.logprobs.push(kernel::log_prob_of(&step.logits, chosen));
        out.tokens.push(chosen as u32);
        if Some(chosen as u32) == config.stop_token {
            break;
        }
        if out.tokens.len() == budget {
            break;
        }
        step = session.push(chosen as u32)?;
    }
    Ok(out)
}

/// Perplexity of `model` over `texts`: each text is encoded, cut into
/// context-length windows, and every next-token prediction contributes one
/// NLL term; the result is `exp(mean NLL)` accumulated in f64.
pub fn perplexity<T: Scalar>(
    model: &PolicyModel<T>,
    texts: &[String],
    vocab: &Vocabulary,
) -> Result<f64, NeuralError> {
    let ctx = model.config.context_length;
    let mut windows: Vec<Vec<u32>> = Vec::new();
    for text in texts {
        let tokens = vocab.encode(text);
        for chunk in tokens.chunks(ctx) {
            if chunk.len() >= 2 {
                windows.push(chunk.to_vec());
            }
        }
    }
    if windows.is_empty() {
        return Err(NeuralError::EmptyInput("no next-token predictions"));
    }
    let per_window: Vec<Result<(f64, usize), NeuralError>> = par::map_indexed(windows.len(), |i| {
        let w = &windows[i];
        let (logits, _) = forward_lm(model, w)?;
        let mut nll = 0.0f64;
        for pos in 0..w.len() - 1 {
            let row = &logits.data()[pos * logits.cols()..(pos + 1) * logits.cols()];
            nll -= kernel::log_prob_of(row, w[pos + 1] as usize).to_f64();
        }
        Ok((nll, w.len() - 1))
    });
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in per_window {
        let (nll, c) = r?;
        total += nll;
        count += c;
    }
    Ok((total / count as f64).exp())
}

/// Grant probability for a token sequence: truncates to the net's token
/// cap (and context), runs the encoder, and squashes the pooled logit
/// through a sigmoid in f64.
pub fn classify<T: Scalar>(net: &RewardNet<T>, tokens: &[u32]) -> Result<f64, NeuralError> {
    if tokens.is_empty() {
        return Err(NeuralError::EmptyInput("no tokens"));
    }
    let cfg = &net.config;
    let cap = cfg.token_cap.min(cfg.context_length);
    let tokens = &tokens[..tokens.len().min(cap)];
    let d = cfg.model_dim;
    let xf = trunk_infer(&net.params, &net.idx, cfg.heads, d, cfg.context_length, tokens, false)?;
    let t = tokens.len();
    // Mean pool mirrors the tape op: accumulate rows in order, then scale.
    let inv_t = T::ONE / T::from_f64(t as f64);
    let mut pooled = vec![T::ZERO; d];
    for i in 0..t {
        for j in 0..d {
            pooled[j] += xf[i * d + j];
        }
    }
    for v in &mut pooled {
        *v *= inv_t;
    }
    let logit = kernel::dot(&pooled, net.params.tensor(net.head_w).data())
        + net.params.tensor(net.head_b).data()[0];
    Ok(kernel::sigmoid(logit.to_f64()))
}
