//! Model definitions: a pre-norm causal decoder with tied embeddings and a
//! scalar value head (the policy), and a pre-norm bidirectional encoder
//! with a mean-pooled sigmoid head (the learned reward classifier).
//!
//! Both models share one trunk builder and one taped trunk forward that
//! differ only in the attention softmax (causal vs full). Initialization is
//! fully determined by the config's seed: weights N(0, 0.02), biases and
//! output heads zero, layer-norm gains one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::autograd::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::NeuralError;

/// Named parameters in fixed construction order. Gradients live on the
/// tensors themselves so optimizer state can index by position.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Total scalar elements across all parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Decoder (policy) hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub init_seed: u64,
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        validate_dims(
            self.vocab_size,
            self.context_length,
            self.layers,
            self.heads,
            self.model_dim,
            self.feedforward_dim,
        )
    }
}

/// Encoder (reward classifier) hyperparameters. `token_cap` bounds how many
/// leading tokens [`super::classify`] reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RmConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub token_cap: usize,
    pub init_seed: u64,
}

impl RmConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.token_cap == 0 {
            return Err(NeuralError::InvalidConfig("token_cap must be positive".into()));
        }
        validate_dims(
            self.vocab_size,
            self.context_length,
            self.layers,
            self.heads,
            self.model_dim,
            self.feedforward_dim,
        )
    }
}

fn validate_dims(
    vocab: usize,
    ctx: usize,
    layers: usize,
    heads: usize,
    d: usize,
    f: usize,
) -> Result<(), NeuralError> {
    for (name, v) in [
        ("vocab_size", vocab),
        ("context_length", ctx),
        ("layers", layers),
        ("heads", heads),
        ("model_dim", d),
        ("feedforward_dim", f),
    ] {
        if v == 0 {
            return Err(NeuralError::InvalidConfig(format!("{name} must be positive")));
        }
    }
    if d % heads != 0 {
        return Err(NeuralError::InvalidConfig(format!(
            "model_dim {d} not divisible by heads {heads}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIdx {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_proj: usize,
    pub b_proj: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_ff1: usize,
    pub b_ff1: usize,
    pub w_ff2: usize,
    pub b_ff2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct TrunkIdx {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIdx>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let dist = Normal::new(0.0f64, 0.02).expect("valid stddev");
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data)
}

fn ones_tensor<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![T::ONE; len])
}

fn build_trunk<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    vocab: usize,
    ctx: usize,
    layers: usize,
    d: usize,
    f: usize,
) -> TrunkIdx {
    let tok_emb = params.push("tok_emb", normal_tensor(rng, &[vocab, d]));
    let pos_emb = params.push("pos_emb", normal_tensor(rng, &[ctx, d]));
    let mut layer_idx = Vec::with_capacity(layers);
    for l in 0..layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layer_idx.push(LayerIdx {
            ln1_gain: params.push(p("ln1.gain"), ones_tensor(&[d])),
            ln1_bias: params.push(p("ln1.bias"), Tensor::zeros(&[d])),
            w_qkv: params.push(p("attn.w_qkv"), normal_tensor(rng, &[3 * d, d])),
            b_qkv: params.push(p("attn.b_qkv"), Tensor::zeros(&[3 * d])),
            w_proj: params.push(p("attn.w_proj"), normal_tensor(rng, &[d, d])),
            b_proj: params.push(p("attn.b_proj"), Tensor::zeros(&[d])),
            ln2_gain: params.push(p("ln2.gain"), ones_tensor(&[d])),
            ln2_bias: params.push(p("ln2.bias"), Tensor::zeros(&[d])),
            w_ff1: params.push(p("ff.w1"), normal_tensor(rng, &[f, d])),
            b_ff1: params.push(p("ff.b1"), Tensor::zeros(&[f])),
            w_ff2: params.push(p("ff.w2"), normal_tensor(rng, &[d, f])),
            b_ff2: params.push(p("ff.b2"), Tensor::zeros(&[d])),
        });
    }
    let lnf_gain = params.push("lnf.gain", ones_tensor(&[d]));
    let lnf_bias = params.push("lnf.bias", Tensor::zeros(&[d]));
    TrunkIdx { tok_emb, pos_emb, layers: layer_idx, lnf_gain, lnf_bias }
}

// Taped trunk forward shared by both models; `causal` picks the attention
// softmax. Returns the final layer-normed hidden states `[t, d]`.
fn trunk_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    idx: &TrunkIdx,
    heads: usize,
    d: usize,
    ctx: usize,
    tokens: &[u32],
    causal: bool,
) -> Result<Var, NeuralError> {
    if tokens.is_empty() {
        return Err(NeuralError::EmptyInput("no tokens"));
    }
    if tokens.len() > ctx {
        return Err(NeuralError::SequenceTooLong { len: tokens.len(), max: ctx });
    }
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let positions: Vec<u32> = (0..tokens.len() as u32).collect();

    let tok = tape.embed(vars[idx.tok_emb], tokens)?;
    let pos = tape.embed(vars[idx.pos_emb], &positions)?;
    let mut x = tape.add(tok, pos)?;

    for layer in &idx.layers {
        let ln1 = tape.layernorm_rows(x, vars[layer.ln1_gain], vars[layer.ln1_bias])?;
        let qkv_lin = tape.matmul_nt(ln1, vars[layer.w_qkv])?;
        let qkv = tape.add_bias_rows(qkv_lin, vars[layer.b_qkv])?;
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(qkv, h * dh, dh)?;
            let k = tape.slice_cols(qkv, d + h * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
            let scores_raw = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores_raw, scale)?;
            let attn = if causal {
                tape.softmax_causal(scores)?
            } else {
                tape.softmax_rows(scores)?
            };
            head_outputs.push(tape.matmul_nn(attn, v)?);
        }
        let ctx_cat = tape.concat_cols(&head_outputs)?;
        let proj_lin = tape.matmul_nt(ctx_cat, vars[layer.w_proj])?;
        let proj = tape.add_bias_rows(proj_lin, vars[layer.b_proj])?;
        x = tape.add(x, proj)?;

        let ln2 = tape.layernorm_rows(x, vars[layer.ln2_gain], vars[layer.ln2_bias])?;
        let h1_lin = tape.matmul_nt(ln2, vars[layer.w_ff1])?;
        let h1_biased = tape.add_bias_rows(h1_lin, vars[layer.b_ff1])?;
        let h1 = tape.gelu(h1_biased)?;
        let h2_lin = tape.matmul_nt(h1, vars[layer.w_ff2])?;
        let h2 = tape.add_bias_rows(h2_lin, vars[layer.b_ff2])?;
        x = tape.add(x, h2)?;
    }
    tape.layernorm_rows(x, vars[idx.lnf_gain], vars[idx.lnf_bias])
}

/// Causal language model with tied input/output embeddings and a per-token
/// scalar value head.
#[derive(Clone, Debug)]
pub struct PolicyModel<T: Scalar> {
    pub config: LmConfig,
    pub params: ParamSet<T>,
    pub(crate) idx: TrunkIdx,
    pub(crate) value_w: usize,
    pub(crate) value_b: usize,
}

impl<T: Scalar> PolicyModel<T> {
    pub fn new(config: LmConfig) -> Result<Self, NeuralError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let idx = build_trunk(
            &mut params,
            &mut rng,
            config.vocab_size,
            config.context_length,
            config.layers,
            config.model_dim,
            config.feedforward_dim,
        );
        let value_w = params.push("value_head.weight", Tensor::zeros(&[1, config.model_dim]));
        let value_b = params.push("value_head.bias", Tensor::zeros(&[1]));
        Ok(PolicyModel { config, params, idx, value_w, value_b })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Registers every parameter on the tape, in parameter order. Reuse the
    /// returned vars for all sequences of a batch so their gradients
    /// accumulate.
    pub fn tape_vars(&self, tape: &mut Tape<T>) -> Vec<Var> {
        (0..self.params.len()).map(|i| tape.param(&self.params, i)).collect()
    }

    /// Full-sequence taped forward: logits `[t, vocab]` (tied to the token
    /// embedding) and values `[t, 1]`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: &[u32],
    ) -> Result<(Var, Var), NeuralError> {
        let hidden = trunk_forward(
            tape,
            vars,
            &self.idx,
            self.config.heads,
            self.config.model_dim,
            self.config.context_length,
            tokens,
            true,
        )?;
        let logits = tape.matmul_nt(hidden, vars[self.idx.tok_emb])?;
        let values_lin = tape.matmul_nt(hidden, vars[self.value_w])?;
        let values = tape.add_bias_rows(values_lin, vars[self.value_b])?;
        Ok((logits, values))
    }
}

/// Bidirectional encoder that scores a token sequence with one grant
/// probability logit.
#[derive(Clone, Debug)]
pub struct RewardNet<T: Scalar> {
    pub config: RmConfig,
    pub params: ParamSet<T>,
    pub(crate) idx: TrunkIdx,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
}

impl<T: Scalar> RewardNet<T> {
    pub fn new(config: RmConfig) -> Result<Self, NeuralError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let idx = build_trunk(
            &mut params,
            &mut rng,
            config.vocab_size,
            config.context_length,
            config.layers,
            config.model_dim,
            config.feedforward_dim,
        );
        let head_w = params.push("cls_head.weight", Tensor::zeros(&[1, config.model_dim]));
        let head_b = params.push("cls_head.bias", Tensor::zeros(&[1]));
        Ok(RewardNet { config, params, idx, head_w, head_b })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn tape_vars(&self, tape: &mut Tape<T>) -> Vec<Var> {
        (0..self.params.len()).map(|i| tape.param(&self.params, i)).collect()
    }

    /// Taped forward to the pooled classification logit `[1, 1]`. The
    /// caller is responsible for truncating to `token_cap`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: &[u32],
    ) -> Result<Var, NeuralError> {
        let hidden = trunk_forward(
            tape,
            vars,
            &self.idx,
            self.config.heads,
            self.config.model_dim,
            self.config.context_length,
            tokens,
            false,
        )?;
        let pooled = tape.mean_rows(hidden)?;
        let logit_lin = tape.matmul_nt(pooled, vars[self.head_w])?;
        tape.add_bias_rows(logit_lin, vars[self.head_b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> LmConfig {
        LmConfig {
            vocab_size: 300,
            context_length: 16,
            layers: 2,
            heads: 2,
            model_dim: 8,
            feedforward_dim: 16,
            init_seed: 11,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = PolicyModel::<f32>::new(tiny_config()).unwrap();
        let b = PolicyModel::<f32>::new(tiny_config()).unwrap();
        for i in 0..a.params.len() {
            assert_eq!(a.params.tensor(i).data(), b.params.tensor(i).data());
        }
        let c = PolicyModel::<f32>::new(LmConfig { init_seed: 12, ..tiny_config() }).unwrap();
        assert_ne!(
            a.params.tensor(a.idx.tok_emb).data(),
            c.params.tensor(c.idx.tok_emb).data()
        );
    }

    #[test]
    fn heads_and_value_head_start_at_zero_gains_at_one() {
        let m = PolicyModel::<f32>::new(tiny_config()).unwrap();
        assert!(m.params.tensor(m.value_w).data().iter().all(|&v| v == 0.0));
        assert!(m.params.tensor(m.value_b).data().iter().all(|&v| v == 0.0));
        let g = m.params.tensor(m.idx.lnf_gain);
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn param_count_matches_architecture_arithmetic() {
        let cfg = tiny_config();
        let m = PolicyModel::<f32>::new(cfg).unwrap();
        let d = cfg.model_dim;
        let f = cfg.feedforward_dim;
        let per_layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (f * d + f) + (d * f + d);
        let expected = cfg.vocab_size * d
            + cfg.context_length * d
            + cfg.layers * per_layer
            + 2 * d
            + (d + 1);
        assert_eq!(m.num_params(), expected);
    }

    #[test]
    fn forward_shapes_and_length_guards() {
        let m = PolicyModel::<f32>::new(tiny_config()).unwrap();
        let mut tape = Tape::new();
        let vars = m.tape_vars(&mut tape);
        let (logits, values) = m.forward_tape(&mut tape, &vars, &[1, 2, 3]).unwrap();
        assert_eq!(tape.value(logits).shape(), &[3, 300]);
        assert_eq!(tape.value(values).shape(), &[3, 1]);

        let too_long: Vec<u32> = (0..17).collect();
        assert!(matches!(
            m.forward_tape(&mut tape, &vars, &too_long),
            Err(NeuralError::SequenceTooLong { len: 17, max: 16 })
        ));
        assert!(matches!(
            m.forward_tape(&mut tape, &vars, &[]),
            Err(NeuralError::EmptyInput(_))
        ));
        assert!(matches!(
            m.forward_tape(&mut tape, &vars, &[300]),
            Err(NeuralError::TokenOutOfRange { id: 300, vocab: 300 })
        ));
    }

    #[test]
    fn reward_net_emits_one_logit_and_starts_neutral() {
        let cfg = RmConfig {
            vocab_size: 300,
            context_length: 32,
            layers: 1,
            heads: 2,
            model_dim: 8,
            feedforward_dim: 16,
            token_cap: 20,
            init_seed: 5,
        };
        let net = RewardNet::<f32>::new(cfg).unwrap();
        let mut tape = Tape::new();
        let vars = net.tape_vars(&mut tape);
        let logit = net.forward_tape(&mut tape, &vars, &[4, 5, 6, 7]).unwrap();
        assert_eq!(tape.value(logit).shape(), &[1, 1]);
        // Zero head means an exactly neutral logit regardless of input.
        assert_eq!(tape.scalar(logit), 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_dims() {
        let bad = LmConfig { model_dim: 10, heads: 3, ..tiny_config() };
        assert!(matches!(bad.validate(), Err(NeuralError::InvalidConfig(_))));
        let bad = LmConfig { layers: 0, ..tiny_config() };
        assert!(matches!(bad.validate(), Err(NeuralError::InvalidConfig(_))));
    }
}
