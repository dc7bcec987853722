//! Desk-scale RLHF pipeline for patent-claim text generation.
//!
//! Three training stages over claim-one datasets: supervised fine-tuning of
//! a small decoder-only language model, reward definition (three rule-based
//! rewards plus a learned granted/pre-grant classifier), and PPO against the
//! chosen reward with a per-token KL anchor to the frozen SFT reference.
//!
//! Everything runs seeded on CPU. Data-parallel inner loops (rollout
//! sampling, matmul rows, evaluation prompts) go through [`par`]; with the
//! `parallel` feature disabled the same code runs sequentially and produces
//! byte-identical checkpoints, logs, and sample files.

pub mod corpus;
pub mod evalreport;
pub mod neural;
pub mod par;
pub mod ppo;
pub mod rewards;
pub mod seed;
pub mod sft;
pub mod tokenizer;
