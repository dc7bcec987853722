//! Clipped-surrogate policy optimization against a frozen reference model.
//!
//! Each step samples continuations for a batch of claim prompts, scores
//! them with the configured reward, shapes per-token rewards with a KL
//! penalty toward the reference, estimates advantages, and applies a few
//! epochs of clipped policy plus value-loss updates.
//!
//! Sampled log-probabilities come from the incremental decoding session,
//! which is bitwise equal to the full forward the tape replays, so the
//! importance ratio of the first update epoch is exactly one.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ClaimRecord;
use crate::neural::{
    forward_lm, log_probs, sample, Adam, AdamParams, NeuralError, PolicyModel, SamplerConfig,
    Scalar, Tape, Tensor,
};
use crate::rewards::{self, RewardSpec};
use crate::seed;
use crate::sft::format_training_text;
use crate::tokenizer::{Vocabulary, END_ID};
use crate::{par, rewards::default_terms};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub total_steps: usize,
    pub rollouts_per_step: usize,
    /// Prompt length in tokens; shorter claims are skipped.
    pub prompt_token_count: usize,
    pub max_new_tokens: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub kl_coef: f64,
    pub gae_gamma: f64,
    pub gae_lambda: f64,
    pub advantage_whitening: bool,
    pub ppo_epochs: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            total_steps: 100,
            rollouts_per_step: 8,
            prompt_token_count: 30,
            max_new_tokens: 128,
            learning_rate: 1e-5,
            clip_epsilon: 0.2,
            value_coef: 0.1,
            kl_coef: 0.1,
            gae_gamma: 1.0,
            gae_lambda: 0.95,
            advantage_whitening: true,
            ppo_epochs: 4,
            temperature: 1.0,
            top_k: 0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |msg: &str| Err(PpoError::Neural(NeuralError::InvalidConfig(msg.into())));
        if self.total_steps == 0
            || self.rollouts_per_step == 0
            || self.prompt_token_count == 0
            || self.max_new_tokens == 0
            || self.ppo_epochs == 0
        {
            return bad("step, rollout, token, and epoch counts must be positive");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if self.temperature < 0.0 || self.learning_rate <= 0.0 {
            return bad("temperature must be non-negative and learning_rate positive");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("no prompts: every claim tokenizes shorter than the prompt length")]
    NoPrompts,
    #[error("non-finite loss {loss} at step {step} epoch {epoch}")]
    NonFiniteLoss { step: usize, epoch: usize, loss: f64 },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("samples io for {path}: {msg}")]
    SamplesIo { path: String, msg: String },
}

/// A fixed-length tokenized prompt plus the dataset row it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub record_index: usize,
}

/// Cuts each claim's training text to its first `prompt_token_count`
/// tokens. Claims that tokenize shorter are skipped.
pub fn make_prompts(
    dataset: &[ClaimRecord],
    vocab: &Vocabulary,
    prompt_token_count: usize,
) -> Vec<Prompt> {
    dataset
        .iter()
        .enumerate()
        .filter_map(|(record_index, r)| {
            let tokens = vocab.encode(&format_training_text(r));
            (tokens.len() >= prompt_token_count).then(|| Prompt {
                tokens: tokens[..prompt_token_count].to_vec(),
                record_index,
            })
        })
        .collect()
}

/// One sampled episode with everything the update needs.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub record_index: usize,
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    pub response_text: String,
    /// Raw score of the configured reward on `response_text`.
    pub score: f64,
    /// Per-token shaped rewards: KL penalty everywhere, score at the end.
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
}

impl Rollout {
    /// Mean per-token log-ratio against the reference.
    pub fn kl_mean(&self) -> f64 {
        let n = self.response.len() as f64;
        self.old_logprobs.iter().zip(&self.ref_logprobs).map(|(o, r)| o - r).sum::<f64>() / n
    }
}

fn rollout_one<T: Scalar>(
    policy: &PolicyModel<T>,
    reference: &PolicyModel<T>,
    prompt: &Prompt,
    vocab: &Vocabulary,
    reward: &RewardSpec,
    cfg: &PpoConfig,
    rollout_seed: u64,
) -> Result<Rollout, PpoError> {
    let sampler = SamplerConfig {
        max_new_tokens: cfg.max_new_tokens,
        temperature: cfg.temperature,
        top_k: cfg.top_k,
        stop_token: Some(END_ID),
    };
    let out = sample(policy, &prompt.tokens, &sampler, rollout_seed)?;
    let response = out.tokens;
    let p = prompt.tokens.len();
    let mut full = prompt.tokens.clone();
    full.extend_from_slice(&response);

    // Reference log-probs of the sampled tokens: rows p-1.. of the forward
    // over everything but the final token predict exactly the response.
    let (ref_logits, _) = forward_lm(reference, &full[..full.len() - 1])?;
    let vocab_size = ref_logits.cols();
    let tail = Tensor::from_vec(
        &[response.len(), vocab_size],
        ref_logits.data()[(p - 1) * vocab_size..].to_vec(),
    );
    let ref_logprobs: Vec<f64> =
        log_probs(&tail, &response)?.into_iter().map(|v| v.to_f64()).collect();
    let old_logprobs: Vec<f64> = out.logprobs.iter().map(|v| v.to_f64()).collect();

    // decode_lossy only fails on ids outside the vocabulary, which sampling
    // cannot produce.
    let response_text = vocab.decode_lossy(&response).expect("sampled ids are in-vocab");
    let score = rewards::score(reward, &response_text)?;
    let mut shaped: Vec<f64> = old_logprobs
        .iter()
        .zip(&ref_logprobs)
        .map(|(o, r)| -cfg.kl_coef * (o - r))
        .collect();
    *shaped.last_mut().expect("non-empty response") += score;

    Ok(Rollout {
        record_index: prompt.record_index,
        prompt: prompt.tokens.clone(),
        response,
        response_text,
        score,
        rewards: shaped,
        values: out.values.iter().map(|v| v.to_f64()).collect(),
        old_logprobs,
        ref_logprobs,
    })
}

/// Generalized advantage estimation with a terminal value of zero.
/// Returns `(advantages, returns)`; `returns[t] = advantages[t] +
/// values[t]` is the value-head regression target.
pub fn compute_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// Centers to mean zero and scales to unit variance; the epsilon keeps an
/// all-equal batch at zero instead of dividing by zero.
pub fn whiten(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    for x in xs.iter_mut() {
        *x = (*x - mean) / denom;
    }
}

struct UpdateLosses {
    policy_loss: f64,
    value_loss: f64,
}

// One optimization epoch over the step's rollouts: clipped surrogate on
// replayed log-probs plus scaled value regression, single tape.
fn ppo_epoch<T: Scalar>(
    policy: &mut PolicyModel<T>,
    adam: &mut Adam<T>,
    rollouts: &[Rollout],
    advantages: &[Vec<f64>],
    returns: &[Vec<f64>],
    cfg: &PpoConfig,
    step: usize,
    epoch: usize,
) -> Result<UpdateLosses, PpoError> {
    let mut tape = Tape::new();
    let vars = policy.tape_vars(&mut tape);
    let mut surrogate_parts = Vec::with_capacity(rollouts.len());
    let mut value_parts = Vec::with_capacity(rollouts.len());

    for (ri, rollout) in rollouts.iter().enumerate() {
        let p = rollout.prompt.len();
        let r = rollout.response.len();
        let mut full = rollout.prompt.clone();
        full.extend_from_slice(&rollout.response);
        let (logits, values) = policy.forward_tape(&mut tape, &vars, &full[..full.len() - 1])?;
        let rows: Vec<usize> = (p - 1..p - 1 + r).collect();
        let response_logits = tape.select_rows(logits, &rows)?;
        let response_values = tape.select_rows(values, &rows)?;

        let new_logprobs = tape.gather_log_probs(response_logits, &rollout.response)?;
        let old = tape.constant(Tensor::from_vec(
            &[r, 1],
            rollout.old_logprobs.iter().map(|&v| T::from_f64(v)).collect(),
        ));
        let adv = tape.constant(Tensor::from_vec(
            &[r, 1],
            advantages[ri].iter().map(|&v| T::from_f64(v)).collect(),
        ));
        let diff = tape.sub(new_logprobs, old)?;
        let ratio = tape.exp(diff)?;
        let unclipped = tape.mul(ratio, adv)?;
        let clipped_ratio = tape.clamp(
            ratio,
            T::from_f64(1.0 - cfg.clip_epsilon),
            T::from_f64(1.0 + cfg.clip_epsilon),
        )?;
        let clipped = tape.mul(clipped_ratio, adv)?;
        surrogate_parts.push(tape.min_elem(unclipped, clipped)?);

        let target = tape.constant(Tensor::from_vec(
            &[r, 1],
            returns[ri].iter().map(|&v| T::from_f64(v)).collect(),
        ));
        let err = tape.sub(response_values, target)?;
        value_parts.push(tape.square(err)?);
    }

    let surrogate_all = tape.concat_rows(&surrogate_parts)?;
    let surrogate_mean = tape.mean_all(surrogate_all)?;
    let policy_loss = tape.scale(surrogate_mean, T::from_f64(-1.0))?;
    let value_all = tape.concat_rows(&value_parts)?;
    let value_mean = tape.mean_all(value_all)?;
    let value_loss = tape.scale(value_mean, T::from_f64(cfg.value_coef))?;
    let loss = tape.add(policy_loss, value_loss)?;

    let loss_v = tape.scalar(loss).to_f64();
    if !loss_v.is_finite() {
        return Err(PpoError::NonFiniteLoss { step, epoch, loss: loss_v });
    }
    tape.backward(loss, &mut policy.params)?;
    adam.step(&mut policy.params);
    policy.params.zero_grads();
    Ok(UpdateLosses {
        policy_loss: tape.scalar(policy_loss).to_f64(),
        value_loss: tape.scalar(value_mean).to_f64(),
    })
}

/// Per-step training diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    /// Mean raw reward score across the step's rollouts.
    pub reward_mean: f64,
    /// Mean per-token log-ratio to the reference.
    pub kl_mean: f64,
    /// Mean generated length in characters.
    pub claim_chars_mean: f64,
    /// Mean limiting-term count in the generated text.
    pub limiting_terms_mean: f64,
    /// Fraction of rollouts whose response reached the end tag.
    pub end_tag_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// One qualitative sample row, serialized to JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub doc_id: String,
    pub appl_id: String,
    pub flag_patent: u8,
    pub claim_one: String,
    pub prompt: String,
    pub generated: String,
    /// Active reward name to raw score.
    pub rewards: BTreeMap<String, f64>,
}

pub struct PpoOutput {
    pub log: Vec<TrainLogRow>,
    pub samples: Vec<SampleRecord>,
}

/// Runs the full optimization loop. `reference` is read-only; pass a clone
/// of the starting policy. Prompts cycle through the dataset in order,
/// `rollouts_per_step` at a time.
pub fn train_ppo<T: Scalar>(
    policy: &mut PolicyModel<T>,
    reference: &PolicyModel<T>,
    dataset: &[ClaimRecord],
    vocab: &Vocabulary,
    reward: &RewardSpec,
    cfg: &PpoConfig,
) -> Result<PpoOutput, PpoError> {
    cfg.validate()?;
    let prompts = make_prompts(dataset, vocab, cfg.prompt_token_count);
    if prompts.is_empty() {
        return Err(PpoError::NoPrompts);
    }
    let terms = default_terms();
    let mut adam =
        Adam::new(AdamParams { lr: cfg.learning_rate, ..AdamParams::default() }, &policy.params);
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut samples = Vec::with_capacity(cfg.total_steps * cfg.rollouts_per_step);

    for step in 0..cfg.total_steps {
        let base = step * cfg.rollouts_per_step;
        let results: Vec<Result<Rollout, PpoError>> =
            par::map_indexed(cfg.rollouts_per_step, |i| {
                let prompt = &prompts[(base + i) % prompts.len()];
                let rollout_seed = seed::derive(&[cfg.seed, step as u64, i as u64]);
                rollout_one(policy, reference, prompt, vocab, reward, cfg, rollout_seed)
            });
        let mut rollouts = Vec::with_capacity(cfg.rollouts_per_step);
        for r in results {
            rollouts.push(r?);
        }

        let mut advantages = Vec::with_capacity(rollouts.len());
        let mut returns = Vec::with_capacity(rollouts.len());
        for rollout in &rollouts {
            let (a, ret) =
                compute_advantages(&rollout.rewards, &rollout.values, cfg.gae_gamma, cfg.gae_lambda);
            advantages.push(a);
            returns.push(ret);
        }
        if cfg.advantage_whitening {
            let mut flat: Vec<f64> = advantages.iter().flatten().copied().collect();
            whiten(&mut flat);
            let mut offset = 0;
            for a in advantages.iter_mut() {
                let len = a.len();
                a.copy_from_slice(&flat[offset..offset + len]);
                offset += len;
            }
        }

        let mut last = UpdateLosses { policy_loss: 0.0, value_loss: 0.0 };
        for epoch in 0..cfg.ppo_epochs {
            last = ppo_epoch(policy, &mut adam, &rollouts, &advantages, &returns, cfg, step, epoch)?;
        }

        let n = rollouts.len() as f64;
        let row = TrainLogRow {
            step,
            reward_mean: rollouts.iter().map(|r| r.score).sum::<f64>() / n,
            kl_mean: rollouts.iter().map(|r| r.kl_mean()).sum::<f64>() / n,
            claim_chars_mean: rollouts
                .iter()
                .map(|r| r.response_text.chars().count() as f64)
                .sum::<f64>()
                / n,
            limiting_terms_mean: rollouts
                .iter()
                .map(|r| rewards::limiting_term_reward(&r.response_text, &terms))
                .sum::<f64>()
                / n,
            end_tag_fraction: rollouts
                .iter()
                .filter(|r| r.response.contains(&crate::tokenizer::END_ID))
                .count() as f64
                / n,
            policy_loss: last.policy_loss,
            value_loss: last.value_loss,
        };
        log::info!(
            "ppo step {} reward_mean {:.4} kl {:.4} chars {:.1}",
            row.step,
            row.reward_mean,
            row.kl_mean,
            row.claim_chars_mean
        );
        log.push(row);

        for rollout in &rollouts {
            let record = &dataset[rollout.record_index];
            let mut reward_map = BTreeMap::new();
            reward_map.insert(reward.kind().to_string(), rollout.score);
            samples.push(SampleRecord {
                doc_id: record.doc_id.clone(),
                appl_id: record.appl_id.clone(),
                flag_patent: record.grant_flag,
                claim_one: record.claim_text.clone(),
                prompt: vocab.decode_lossy(&rollout.prompt).unwrap_or_default(),
                generated: rollout.response_text.clone(),
                rewards: reward_map,
            });
        }
    }
    Ok(PpoOutput { log, samples })
}

/// Writes the per-step log as CSV.
pub fn write_train_log(path: &Path, log: &[TrainLogRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRow>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect()
}

/// Writes sample records as JSONL, one object per line.
pub fn write_samples(path: &Path, samples: &[SampleRecord]) -> Result<(), PpoError> {
    let io_err = |msg: String| PpoError::SamplesIo { path: path.display().to_string(), msg };
    let mut f = std::fs::File::create(path).map_err(|e| io_err(e.to_string()))?;
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| io_err(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| io_err(e.to_string()))?;
    }
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleRecord>, PpoError> {
    let io_err = |msg: String| PpoError::SamplesIo { path: path.display().to_string(), msg };
    let f = std::fs::File::open(path).map_err(|e| io_err(e.to_string()))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| io_err(e.to_string()))?;
            serde_json::from_str(&l).map_err(|e| io_err(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::LmConfig;
    use crate::tokenizer;

    // O(T^2) oracle: A_t as the explicit discounted sum of TD errors.
    fn gae_oracle(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                for l in 0..n - t {
                    let next_v = if t + l + 1 < n { values[t + l + 1] } else { 0.0 };
                    let delta = rewards[t + l] + gamma * next_v - values[t + l];
                    sum += (gamma * lambda).powi(l as i32) * delta;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn advantages_match_quadratic_oracle() {
        let rewards = [0.5, -0.25, 0.0, 2.0, -1.5];
        let values = [0.1, 0.2, -0.3, 0.4, 0.0];
        for (gamma, lambda) in [(1.0, 0.95), (0.9, 0.5), (1.0, 1.0), (0.7, 0.0)] {
            let (adv, ret) = compute_advantages(&rewards, &values, gamma, lambda);
            let oracle = gae_oracle(&rewards, &values, gamma, lambda);
            for (a, b) in adv.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
            for ((r, a), v) in ret.iter().zip(&adv).zip(&values) {
                assert_eq!(*r, a + v);
            }
        }
    }

    #[test]
    fn single_token_advantage_is_reward_minus_value() {
        let (adv, ret) = compute_advantages(&[2.0], &[0.5], 1.0, 0.95);
        assert_eq!(adv, vec![1.5]);
        assert_eq!(ret, vec![2.0]);
    }

    #[test]
    fn whitening_centers_and_scales() {
        let mut xs = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        whiten(&mut xs);
        let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
        let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
        let mut flat = vec![3.0, 3.0, 3.0];
        whiten(&mut flat);
        assert!(flat.iter().all(|&x| x == 0.0));
    }

    fn bandit_records() -> Vec<ClaimRecord> {
        // Every claim starts the same but the continuations differ in
        // limiting-term density, so the prompt gives no signal and the
        // policy can only raise its reward by shifting branch mass.
        let texts = [
            "a device apple apple apple apple apple ",
            "a device wherein apple apple wherein apple ",
            "a device apple wherein apple apple apple ",
        ];
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| ClaimRecord {
                doc_id: format!("D{i}"),
                appl_id: format!("A{i}"),
                grant_flag: (i % 2) as u8,
                components: Default::default(),
                claim_text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn limiting_term_reward_rises_on_bandit_corpus() {
        let records = bandit_records();
        let vocab = tokenizer::train_vocab(&records, 300).unwrap();
        let mut policy = PolicyModel::<f32>::new(LmConfig {
            vocab_size: vocab.size(),
            context_length: 32,
            layers: 1,
            heads: 2,
            model_dim: 16,
            feedforward_dim: 32,
            init_seed: 11,
        })
        .unwrap();
        // Warm up until sampling stays on corpus-like branches; the PPO
        // signal is then dense from the first step.
        let sft_cfg = crate::sft::SftConfig {
            epochs: 150,
            batch_size: 3,
            learning_rate: 3e-3,
            eval_every: 0,
            ..Default::default()
        };
        crate::sft::train_sft(&mut policy, &records, &[], &vocab, &sft_cfg).unwrap();
        let reference = policy.clone();

        let cfg = PpoConfig {
            total_steps: 15,
            rollouts_per_step: 8,
            prompt_token_count: 3,
            max_new_tokens: 8,
            learning_rate: 1e-4,
            kl_coef: 0.01,
            ppo_epochs: 2,
            seed: 5,
            ..Default::default()
        };
        let reward = RewardSpec::LimitingTerms { terms: default_terms() };
        let out = train_ppo(&mut policy, &reference, &records, &vocab, &reward, &cfg).unwrap();

        let head: f64 = out.log[..3].iter().map(|r| r.reward_mean).sum::<f64>() / 3.0;
        let tail: f64 = out.log[out.log.len() - 3..].iter().map(|r| r.reward_mean).sum::<f64>() / 3.0;
        assert!(tail > head, "reward did not rise: head {head} tail {tail}");
        assert_eq!(out.log.len(), 15);
        assert_eq!(out.samples.len(), 15 * 8);
        let s = &out.samples[0];
        assert!(s.rewards.contains_key("limiting_terms"));
        assert!(!s.prompt.is_empty());
    }

    #[test]
    fn reference_params_stay_untouched() {
        let records = bandit_records();
        let vocab = tokenizer::train_vocab(&records, 300).unwrap();
        let mut policy = PolicyModel::<f32>::new(LmConfig {
            vocab_size: vocab.size(),
            context_length: 32,
            layers: 1,
            heads: 2,
            model_dim: 16,
            feedforward_dim: 32,
            init_seed: 2,
        })
        .unwrap();
        // Without a warmup the policy equals the reference, every score is
        // zero, and PPO correctly sits at a zero-gradient fixed point;
        // movement needs reward variance across rollouts.
        let sft_cfg = crate::sft::SftConfig {
            epochs: 200,
            batch_size: 3,
            learning_rate: 3e-3,
            eval_every: 0,
            ..Default::default()
        };
        crate::sft::train_sft(&mut policy, &records, &[], &vocab, &sft_cfg).unwrap();
        let reference = policy.clone();
        let before: Vec<Vec<u32>> = (0..reference.params.len())
            .map(|i| reference.params.tensor(i).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let cfg = PpoConfig {
            total_steps: 2,
            rollouts_per_step: 4,
            prompt_token_count: 3,
            max_new_tokens: 8,
            learning_rate: 1e-3,
            ppo_epochs: 2,
            seed: 1,
            ..Default::default()
        };
        let reward = RewardSpec::Joint { max_len: 64, terms: default_terms() };
        train_ppo(&mut policy, &reference, &records, &vocab, &reward, &cfg).unwrap();
        let after: Vec<Vec<u32>> = (0..reference.params.len())
            .map(|i| reference.params.tensor(i).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
        // The policy itself did move.
        let moved = (0..policy.params.len()).any(|i| {
            policy.params.tensor(i).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                != before[i]
        });
        assert!(moved);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let records = bandit_records();
        let vocab = tokenizer::train_vocab(&records, 300).unwrap();
        let make = || {
            PolicyModel::<f32>::new(LmConfig {
                vocab_size: vocab.size(),
                context_length: 32,
                layers: 1,
                heads: 2,
                model_dim: 8,
                feedforward_dim: 16,
                init_seed: 4,
            })
            .unwrap()
        };
        let cfg = PpoConfig {
            total_steps: 3,
            rollouts_per_step: 3,
            prompt_token_count: 3,
            max_new_tokens: 5,
            ppo_epochs: 2,
            seed: 9,
            ..Default::default()
        };
        let reward = RewardSpec::Joint { max_len: 64, terms: default_terms() };
        let run = || {
            let mut policy = make();
            let reference = policy.clone();
            let out =
                train_ppo(&mut policy, &reference, &records, &vocab, &reward, &cfg).unwrap();
            let bits: Vec<u32> =
                policy.params.tensor(0).data().iter().map(|v| v.to_bits()).collect();
            (out.log, bits)
        };
        let (log_a, bits_a) = run();
        let (log_b, bits_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn sample_records_round_trip_jsonl_with_exact_keys() {
        let rec = SampleRecord {
            doc_id: "D1".into(),
            appl_id: "A1".into(),
            flag_patent: 1,
            claim_one: "a latch. ".into(),
            prompt: "<|start_of_claim|>a latch".into(),
            generated: " for a door. <|end_of_claim|>".into(),
            rewards: BTreeMap::from([("joint".to_string(), 2.25)]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        write_samples(&path, &[rec.clone()]).unwrap();
        assert_eq!(read_samples(&path).unwrap(), vec![rec]);

        let line = std::fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        assert_eq!(
            keys,
            ["appl_id", "claim_one", "doc_id", "flag_patent", "generated", "prompt", "rewards"]
        );
    }

    #[test]
    fn short_claims_yield_no_prompts() {
        let records = bandit_records();
        let vocab = tokenizer::train_vocab(&records, 300).unwrap();
        assert!(make_prompts(&records, &vocab, 10_000).is_empty());
        let prompts = make_prompts(&records, &vocab, 3);
        assert_eq!(prompts.len(), 3);
        assert!(prompts.iter().all(|p| p.tokens.len() == 3));
    }
}
