//! Reward definitions: three rule-based scores over generated claim text
//! and the learned grant-probability classifier.
//!
//! Rule rewards see only the generated continuation, never the prompt.
//! Lengths are character counts; term counting is case-sensitive,
//! non-overlapping, and keyed on trailing-space forms so "wherein " never
//! double-counts as "where ".

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ClaimRecord;
use crate::neural::{classify, Adam, AdamParams, NeuralError, RewardNet, Tape};
use crate::seed;
use crate::tokenizer::{Vocabulary, END_OF_CLAIM};

/// The default limiting-term list. Trailing spaces are part of the terms.
pub const DEFAULT_LIMITING_TERMS: [&str; 4] = ["wherein ", "whereby ", "where ", "when "];

pub fn default_terms() -> Vec<String> {
    DEFAULT_LIMITING_TERMS.iter().map(|s| s.to_string()).collect()
}

/// Which reward scores a generated continuation.
#[derive(Clone, Debug)]
pub enum RewardSpec {
    /// Rewards claims that close with the end tag within `max_len` chars.
    Length { max_len: usize },
    /// Counts limiting-term occurrences.
    LimitingTerms { terms: Vec<String> },
    /// Length gate plus term count on the truncated text.
    Joint { max_len: usize, terms: Vec<String> },
    /// Grant probability from a trained classifier.
    Learned { net: Box<RewardNet<f32>>, vocab: Vocabulary },
}

impl RewardSpec {
    /// Short stable name used in logs and manifests.
    pub fn kind(&self) -> &'static str {
        match self {
            RewardSpec::Length { .. } => "length",
            RewardSpec::LimitingTerms { .. } => "limiting_terms",
            RewardSpec::Joint { .. } => "joint",
            RewardSpec::Learned { .. } => "learned",
        }
    }
}

fn truncate_chars(text: &str, max_len: usize) -> &str {
    match text.char_indices().nth(max_len) {
        Some((byte_idx, _)) => &text[..byte_idx],
        None => text,
    }
}

/// Length reward over the first `max_len` characters of `text`: 0 without
/// the end-of-claim tag, otherwise `1 + len/max_len`, so the value is
/// either 0 or in (1, 2].
pub fn length_reward(text: &str, max_len: usize) -> f64 {
    assert!(max_len > 0, "max_len must be positive");
    let s = truncate_chars(text, max_len);
    if !s.contains(END_OF_CLAIM) {
        return 0.0;
    }
    1.0 + s.chars().count() as f64 / max_len as f64
}

/// Total count of non-overlapping, case-sensitive term occurrences over
/// the whole text.
pub fn limiting_term_reward(text: &str, terms: &[String]) -> f64 {
    terms.iter().map(|t| text.matches(t.as_str()).count()).sum::<usize>() as f64
}

/// Length gate and term count on the same truncated text: 0 without the
/// end tag, else `1 + len/max_len + term_count`.
pub fn joint_reward(text: &str, max_len: usize, terms: &[String]) -> f64 {
    assert!(max_len > 0, "max_len must be positive");
    let s = truncate_chars(text, max_len);
    if !s.contains(END_OF_CLAIM) {
        return 0.0;
    }
    1.0 + s.chars().count() as f64 / max_len as f64 + limiting_term_reward(s, terms)
}

/// Scores a generated continuation under `spec`. The learned reward
/// encodes the text and returns the classifier's grant probability.
pub fn score(spec: &RewardSpec, text: &str) -> Result<f64, NeuralError> {
    match spec {
        RewardSpec::Length { max_len } => Ok(length_reward(text, *max_len)),
        RewardSpec::LimitingTerms { terms } => Ok(limiting_term_reward(text, terms)),
        RewardSpec::Joint { max_len, terms } => Ok(joint_reward(text, *max_len, terms)),
        RewardSpec::Learned { net, vocab } => classify(net.as_ref(), &vocab.encode(text)),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("training set has only label {0}; both classes are required")]
    SingleClass(u8),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Classifier training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig { epochs: 1, batch_size: 16, learning_rate: 1e-3, shuffle_seed: 0 }
    }
}

/// One training-log row for the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RmLogRow {
    pub step: usize,
    pub loss: f64,
}

/// Trains the grant/pre-grant classifier with BCE on claim texts truncated
/// to the net's token cap. Returns the training log and final validation
/// accuracy at threshold 0.5 (or `None` with an empty validation set).
pub fn train_reward_model(
    net: &mut RewardNet<f32>,
    train: &[ClaimRecord],
    val: &[ClaimRecord],
    vocab: &Vocabulary,
    cfg: &RmTrainConfig,
) -> Result<(Vec<RmLogRow>, Option<f64>), RewardError> {
    if train.is_empty() {
        return Err(RewardError::EmptyTrainSet);
    }
    let first = train[0].grant_flag;
    if train.iter().all(|r| r.grant_flag == first) {
        return Err(RewardError::SingleClass(first));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(RewardError::Neural(NeuralError::InvalidConfig(
            "epochs and batch_size must be positive".into(),
        )));
    }

    let cap = net.config.token_cap.min(net.config.context_length);
    let encoded: Vec<(Vec<u32>, f32)> = train
        .iter()
        .map(|r| {
            let mut toks = vocab.encode(&r.claim_text);
            toks.truncate(cap);
            (toks, r.grant_flag as f32)
        })
        .collect();

    let mut adam = Adam::new(AdamParams { lr: cfg.learning_rate, ..AdamParams::default() }, &net.params);
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[cfg.shuffle_seed, epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = net.tape_vars(&mut tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (tokens, label) = &encoded[i];
                let logit = net.forward_tape(&mut tape, &vars, tokens)?;
                losses.push(tape.bce_with_logits(logit, &[*label])?);
            }
            let stacked = tape.concat_rows(&losses)?;
            let loss = tape.mean_all(stacked)?;
            tape.backward(loss, &mut net.params)?;
            adam.step(&mut net.params);
            net.params.zero_grads();
            step += 1;
            log.push(RmLogRow { step, loss: tape.scalar(loss) as f64 });
        }
    }

    let accuracy = if val.is_empty() {
        None
    } else {
        let mut correct = 0usize;
        for r in val {
            let p = classify(net, &vocab.encode(&r.claim_text))?;
            let predicted = u8::from(p >= 0.5);
            if predicted == r.grant_flag {
                correct += 1;
            }
        }
        Some(correct as f64 / val.len() as f64)
    };
    Ok((log, accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Character-scan oracle: walk char by char, counting term matches
    // left to right without overlap. Independent of str::matches.
    fn term_count_oracle(text: &str, terms: &[String]) -> f64 {
        let mut total = 0usize;
        for term in terms {
            let tb = term.as_bytes();
            let hay = text.as_bytes();
            let mut i = 0;
            while i + tb.len() <= hay.len() {
                if &hay[i..i + tb.len()] == tb {
                    total += 1;
                    i += tb.len();
                } else {
                    i += 1;
                }
            }
        }
        total as f64
    }

    #[test]
    fn length_reward_end_tag_gate() {
        let good = format!("A system.{END_OF_CLAIM}");
        let r = length_reward(&good, 512);
        assert!(r > 1.0 && r <= 2.0);
        assert_eq!(length_reward("A system with no tag", 512), 0.0);
        // Tag pushed past the cut-off scores zero.
        let late = format!("{}{END_OF_CLAIM}", "x".repeat(512));
        assert_eq!(length_reward(&late, 512), 0.0);
    }

    #[test]
    fn length_reward_formula_on_exact_counts() {
        // 24 characters ending in the tag: 1 + 24/512.
        let text = format!(" widget.{END_OF_CLAIM}");
        assert_eq!(text.chars().count(), 24);
        assert_eq!(length_reward(&text, 512), 1.0 + 24.0 / 512.0);
        assert_eq!(length_reward(&text, 512), 1.046875);
    }

    #[test]
    fn term_counts_are_case_sensitive_and_non_overlapping() {
        let terms = default_terms();
        let text = "wherein the latch, Wherein the bolt, whereby it locks when closed when open";
        // "Wherein" capitalized does not count; "wherein " does not also
        // count as "where ".
        assert_eq!(limiting_term_reward(text, &terms), 1.0 + 1.0 + 2.0);
        assert_eq!(limiting_term_reward(text, &terms), term_count_oracle(text, &terms));
        assert_eq!(limiting_term_reward("where  wherein", &terms), 1.0);
        assert_eq!(limiting_term_reward("", &terms), 0.0);
    }

    #[test]
    fn term_counts_match_oracle_on_varied_texts() {
        let terms = default_terms();
        for text in [
            "when when when ",
            "whereby whereby",
            "awhere where b",
            "wherein wherein wherein wherein ",
            "the claim wherein the part, whereby the whole, where it sits, when it runs ",
        ] {
            assert_eq!(limiting_term_reward(text, &terms), term_count_oracle(text, &terms), "{text:?}");
        }
    }

    #[test]
    fn joint_reward_composes_both_parts() {
        let terms = default_terms();
        let text = format!("A latch wherein the bolt locks when closed.{END_OF_CLAIM}");
        let n = text.chars().count() as f64;
        assert_eq!(joint_reward(&text, 512, &terms), 1.0 + n / 512.0 + 2.0);
        assert_eq!(joint_reward("no tag wherein it fails", 512, &terms), 0.0);
        // Terms beyond the truncation point do not count.
        let long = format!("{END_OF_CLAIM}{}wherein ", " ".repeat(512));
        assert_eq!(joint_reward(&long, 100, &terms), 1.0 + 100.0 / 100.0);
    }

    #[test]
    fn truncation_counts_chars_not_bytes() {
        let text = format!("µµµµ{END_OF_CLAIM}");
        // 4 two-byte chars + 16 tag chars = 20 chars.
        assert_eq!(length_reward(&text, 20), 1.0 + 20.0 / 20.0);
        assert_eq!(length_reward(&text, 19), 0.0);
    }
}
