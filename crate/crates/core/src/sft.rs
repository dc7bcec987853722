//! Supervised fine-tuning: next-token prediction over claim texts wrapped
//! in the start/end tags. The resulting model is both the PPO starting
//! point and the frozen reference it is anchored to.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ClaimRecord;
use crate::neural::{perplexity, Adam, AdamParams, NeuralError, PolicyModel, Scalar, Tape};
use crate::seed;
use crate::tokenizer::{Vocabulary, END_OF_CLAIM, START_OF_CLAIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validation perplexity cadence in optimizer steps; 0 disables
    /// mid-training evaluation (the final step still evaluates).
    pub eval_every: usize,
    pub shuffle_seed: u64,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-3,
            eval_every: 50,
            shuffle_seed: 0,
            max_steps: None,
        }
    }
}

/// One optimizer step of the training log. `val_perplexity` is present on
/// evaluation steps only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftLogRow {
    pub step: usize,
    pub loss: f64,
    pub val_perplexity: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum SftError {
    #[error("no training windows; every text is shorter than two tokens")]
    NoWindows,
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("log io for {path}")]
    LogIo {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// The exact text a claim contributes to training.
pub fn format_training_text(record: &ClaimRecord) -> String {
    format!("{START_OF_CLAIM}{}{END_OF_CLAIM}", record.claim_text)
}

fn windows_of(records: &[ClaimRecord], vocab: &Vocabulary, ctx: usize) -> Vec<Vec<u32>> {
    let mut windows = Vec::new();
    for r in records {
        let tokens = vocab.encode(&format_training_text(r));
        for chunk in tokens.chunks(ctx) {
            if chunk.len() >= 2 {
                windows.push(chunk.to_vec());
            }
        }
    }
    windows
}

/// Trains `model` in place and returns the per-step log. The loss is the
/// mean negative log-likelihood over every next-token prediction in the
/// batch, so long windows weigh more than short ones.
pub fn train_sft<T: Scalar>(
    model: &mut PolicyModel<T>,
    train: &[ClaimRecord],
    val: &[ClaimRecord],
    vocab: &Vocabulary,
    cfg: &SftConfig,
) -> Result<Vec<SftLogRow>, SftError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(SftError::Neural(NeuralError::InvalidConfig(
            "epochs and batch_size must be positive".into(),
        )));
    }
    let ctx = model.config.context_length;
    let windows = windows_of(train, vocab, ctx);
    if windows.is_empty() {
        return Err(SftError::NoWindows);
    }
    let val_texts: Vec<String> = val.iter().map(format_training_text).collect();

    let total_steps = {
        let per_epoch = windows.len().div_ceil(cfg.batch_size);
        let all = per_epoch * cfg.epochs;
        cfg.max_steps.map_or(all, |m| all.min(m))
    };
    let mut adam =
        Adam::new(AdamParams { lr: cfg.learning_rate, ..AdamParams::default() }, &model.params);
    let mut log = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[cfg.shuffle_seed, epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = model.tape_vars(&mut tape);
            let mut gathered = Vec::with_capacity(batch.len());
            for &i in batch {
                let w = &windows[i];
                let (logits, _values) = model.forward_tape(&mut tape, &vars, w)?;
                let preds: Vec<usize> = (0..w.len() - 1).collect();
                let pred_logits = tape.select_rows(logits, &preds)?;
                gathered.push(tape.gather_log_probs(pred_logits, &w[1..])?);
            }
            let all = tape.concat_rows(&gathered)?;
            let mean_lp = tape.mean_all(all)?;
            let loss = tape.scale(mean_lp, T::from_f64(-1.0))?;
            tape.backward(loss, &mut model.params)?;
            adam.step(&mut model.params);
            model.params.zero_grads();
            step += 1;

            let last = step == total_steps;
            let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            let val_perplexity = if (due || last) && !val_texts.is_empty() {
                Some(perplexity(model, &val_texts, vocab)?)
            } else {
                None
            };
            log.push(SftLogRow { step, loss: tape.scalar(loss).to_f64(), val_perplexity });
            if last {
                break 'epochs;
            }
        }
    }
    Ok(log)
}

/// Writes the log as CSV with columns `step,loss,val_perplexity`; the last
/// column is empty on non-evaluation steps.
pub fn write_sft_log(path: &Path, log: &[SftLogRow]) -> Result<(), SftError> {
    let io_err = |source| SftError::LogIo { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(["step", "loss", "val_perplexity"]).map_err(io_err)?;
    for row in log {
        let ppl = row.val_perplexity.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([row.step.to_string(), row.loss.to_string(), ppl]).map_err(io_err)?;
    }
    w.flush().map_err(|e| io_err(csv::Error::from(e)))
}

pub fn read_sft_log(path: &Path) -> Result<Vec<SftLogRow>, SftError> {
    let io_err = |source| SftError::LogIo { path: path.display().to_string(), source };
    let mut r = csv::Reader::from_path(path).map_err(io_err)?;
    let mut out = Vec::new();
    for rec in r.deserialize::<(usize, f64, Option<f64>)>() {
        let (step, loss, val_perplexity) = rec.map_err(io_err)?;
        out.push(SftLogRow { step, loss, val_perplexity });
    }
    Ok(out)
}
