//! Flat `key = value` run configuration with section prefixes. A config
//! file sets any subset of the known keys; later lines win, `--set` flags
//! override the file, and unknown keys are a hard error. Stage seeds
//! default to the global `seed` unless set explicitly.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use claimrl::corpus::{FixtureSpec, SplitConfig};
use claimrl::evalreport::EvalConfig;
use claimrl::neural::{LmConfig, RmConfig};
use claimrl::ppo::PpoConfig;
use claimrl::rewards::RmTrainConfig;
use claimrl::sft::SftConfig;

#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,

    pub split_train_fraction: f64,
    pub split_val_fraction: f64,
    pub split_test_fraction: f64,
    pub split_seed: Option<u64>,

    pub fixture_size: usize,
    pub fixture_seed: Option<u64>,
    pub fixture_granted_len_lo: usize,
    pub fixture_granted_len_hi: usize,
    pub fixture_pregrant_len_lo: usize,
    pub fixture_pregrant_len_hi: usize,
    pub fixture_granted_term_rate: f64,
    pub fixture_pregrant_term_rate: f64,

    pub vocab_size: usize,

    pub model_layers: usize,
    pub model_heads: usize,
    pub model_dim: usize,
    pub model_feedforward_dim: usize,
    pub model_context_length: usize,
    pub model_init_seed: Option<u64>,

    pub rm_layers: usize,
    pub rm_heads: usize,
    pub rm_dim: usize,
    pub rm_feedforward_dim: usize,
    pub rm_context_length: usize,
    pub rm_token_cap: usize,
    pub rm_init_seed: Option<u64>,
    pub rm_epochs: usize,
    pub rm_batch_size: usize,
    pub rm_lr: f64,
    pub rm_shuffle_seed: Option<u64>,

    pub sft_epochs: usize,
    pub sft_batch_size: usize,
    pub sft_lr: f64,
    pub sft_eval_every: usize,
    pub sft_shuffle_seed: Option<u64>,
    pub sft_max_steps: Option<usize>,

    pub ppo_total_steps: usize,
    pub ppo_rollouts_per_step: usize,
    pub ppo_prompt_token_count: usize,
    pub ppo_max_new_tokens: usize,
    pub ppo_lr: f64,
    pub ppo_clip_epsilon: f64,
    pub ppo_value_coef: f64,
    pub ppo_kl_coef: f64,
    pub ppo_gae_gamma: f64,
    pub ppo_gae_lambda: f64,
    pub ppo_advantage_whitening: bool,
    pub ppo_epochs: usize,
    pub ppo_temperature: f64,
    pub ppo_top_k: usize,
    pub ppo_seed: Option<u64>,

    pub eval_n_rows: usize,
    pub eval_prompt_token_count: usize,
    pub eval_max_new_tokens: usize,
    pub eval_temperature: f64,
    pub eval_top_k: usize,
    pub eval_seed: Option<u64>,
}

impl Default for Settings {
    fn default() -> Self {
        let split = SplitConfig::default();
        let fixture = FixtureSpec::default();
        let sft = SftConfig::default();
        let rm = RmTrainConfig::default();
        let ppo = PpoConfig::default();
        let eval = EvalConfig::default();
        Settings {
            seed: 0,
            split_train_fraction: split.train_fraction,
            split_val_fraction: split.val_fraction,
            split_test_fraction: split.test_fraction,
            split_seed: None,
            fixture_size: fixture.size,
            fixture_seed: None,
            fixture_granted_len_lo: fixture.granted_len_range.0,
            fixture_granted_len_hi: fixture.granted_len_range.1,
            fixture_pregrant_len_lo: fixture.pregrant_len_range.0,
            fixture_pregrant_len_hi: fixture.pregrant_len_range.1,
            fixture_granted_term_rate: fixture.granted_term_rate,
            fixture_pregrant_term_rate: fixture.pregrant_term_rate,
            vocab_size: 1024,
            model_layers: 2,
            model_heads: 4,
            model_dim: 64,
            model_feedforward_dim: 128,
            model_context_length: 256,
            model_init_seed: None,
            rm_layers: 2,
            rm_heads: 4,
            rm_dim: 64,
            rm_feedforward_dim: 128,
            rm_context_length: 512,
            rm_token_cap: 500,
            rm_init_seed: None,
            rm_epochs: rm.epochs,
            rm_batch_size: rm.batch_size,
            rm_lr: rm.learning_rate,
            rm_shuffle_seed: None,
            sft_epochs: sft.epochs,
            sft_batch_size: sft.batch_size,
            sft_lr: sft.learning_rate,
            sft_eval_every: sft.eval_every,
            sft_shuffle_seed: None,
            sft_max_steps: sft.max_steps,
            ppo_total_steps: ppo.total_steps,
            ppo_rollouts_per_step: ppo.rollouts_per_step,
            ppo_prompt_token_count: ppo.prompt_token_count,
            ppo_max_new_tokens: ppo.max_new_tokens,
            ppo_lr: ppo.learning_rate,
            ppo_clip_epsilon: ppo.clip_epsilon,
            ppo_value_coef: ppo.value_coef,
            ppo_kl_coef: ppo.kl_coef,
            ppo_gae_gamma: ppo.gae_gamma,
            ppo_gae_lambda: ppo.gae_lambda,
            ppo_advantage_whitening: ppo.advantage_whitening,
            ppo_epochs: ppo.ppo_epochs,
            ppo_temperature: ppo.temperature,
            ppo_top_k: ppo.top_k,
            ppo_seed: None,
            eval_n_rows: eval.n_rows,
            eval_prompt_token_count: eval.prompt_token_count,
            eval_max_new_tokens: eval.max_new_tokens,
            eval_temperature: eval.temperature,
            eval_top_k: eval.top_k,
            eval_seed: None,
        }
    }
}

fn pu(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| anyhow!("{key}: expected a non-negative integer, got {v:?}"))
}

fn pu64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| anyhow!("{key}: expected a non-negative integer, got {v:?}"))
}

fn pf(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| anyhow!("{key}: expected a number, got {v:?}"))
}

fn pb(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(anyhow!("{key}: expected true or false, got {v:?}")),
    }
}

fn opt_u(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "none" {
        Ok(None)
    } else {
        pu(key, v).map(Some)
    }
}

impl Settings {
    /// Applies one `key = value` assignment. Unknown keys error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = pu64(key, v)?,
            "split.train_fraction" => self.split_train_fraction = pf(key, v)?,
            "split.val_fraction" => self.split_val_fraction = pf(key, v)?,
            "split.test_fraction" => self.split_test_fraction = pf(key, v)?,
            "split.seed" => self.split_seed = Some(pu64(key, v)?),
            "fixture.size" => self.fixture_size = pu(key, v)?,
            "fixture.seed" => self.fixture_seed = Some(pu64(key, v)?),
            "fixture.granted_len_lo" => self.fixture_granted_len_lo = pu(key, v)?,
            "fixture.granted_len_hi" => self.fixture_granted_len_hi = pu(key, v)?,
            "fixture.pregrant_len_lo" => self.fixture_pregrant_len_lo = pu(key, v)?,
            "fixture.pregrant_len_hi" => self.fixture_pregrant_len_hi = pu(key, v)?,
            "fixture.granted_term_rate" => self.fixture_granted_term_rate = pf(key, v)?,
            "fixture.pregrant_term_rate" => self.fixture_pregrant_term_rate = pf(key, v)?,
            "tokenizer.vocab_size" => self.vocab_size = pu(key, v)?,
            "model.layers" => self.model_layers = pu(key, v)?,
            "model.heads" => self.model_heads = pu(key, v)?,
            "model.dim" => self.model_dim = pu(key, v)?,
            "model.feedforward_dim" => self.model_feedforward_dim = pu(key, v)?,
            "model.context_length" => self.model_context_length = pu(key, v)?,
            "model.init_seed" => self.model_init_seed = Some(pu64(key, v)?),
            "rm.layers" => self.rm_layers = pu(key, v)?,
            "rm.heads" => self.rm_heads = pu(key, v)?,
            "rm.dim" => self.rm_dim = pu(key, v)?,
            "rm.feedforward_dim" => self.rm_feedforward_dim = pu(key, v)?,
            "rm.context_length" => self.rm_context_length = pu(key, v)?,
            "rm.token_cap" => self.rm_token_cap = pu(key, v)?,
            "rm.init_seed" => self.rm_init_seed = Some(pu64(key, v)?),
            "rm.epochs" => self.rm_epochs = pu(key, v)?,
            "rm.batch_size" => self.rm_batch_size = pu(key, v)?,
            "rm.lr" => self.rm_lr = pf(key, v)?,
            "rm.shuffle_seed" => self.rm_shuffle_seed = Some(pu64(key, v)?),
            "sft.epochs" => self.sft_epochs = pu(key, v)?,
            "sft.batch_size" => self.sft_batch_size = pu(key, v)?,
            "sft.lr" => self.sft_lr = pf(key, v)?,
            "sft.eval_every" => self.sft_eval_every = pu(key, v)?,
            "sft.shuffle_seed" => self.sft_shuffle_seed = Some(pu64(key, v)?),
            "sft.max_steps" => self.sft_max_steps = opt_u(key, v)?,
            "ppo.total_steps" => self.ppo_total_steps = pu(key, v)?,
            "ppo.rollouts_per_step" => self.ppo_rollouts_per_step = pu(key, v)?,
            "ppo.prompt_token_count" => self.ppo_prompt_token_count = pu(key, v)?,
            "ppo.max_new_tokens" => self.ppo_max_new_tokens = pu(key, v)?,
            "ppo.lr" => self.ppo_lr = pf(key, v)?,
            "ppo.clip_epsilon" => self.ppo_clip_epsilon = pf(key, v)?,
            "ppo.value_coef" => self.ppo_value_coef = pf(key, v)?,
            "ppo.kl_coef" => self.ppo_kl_coef = pf(key, v)?,
            "ppo.gae_gamma" => self.ppo_gae_gamma = pf(key, v)?,
            "ppo.gae_lambda" => self.ppo_gae_lambda = pf(key, v)?,
            "ppo.advantage_whitening" => self.ppo_advantage_whitening = pb(key, v)?,
            "ppo.ppo_epochs" => self.ppo_epochs = pu(key, v)?,
            "ppo.temperature" => self.ppo_temperature = pf(key, v)?,
            "ppo.top_k" => self.ppo_top_k = pu(key, v)?,
            "ppo.seed" => self.ppo_seed = Some(pu64(key, v)?),
            "eval.n_rows" => self.eval_n_rows = pu(key, v)?,
            "eval.prompt_token_count" => self.eval_prompt_token_count = pu(key, v)?,
            "eval.max_new_tokens" => self.eval_max_new_tokens = pu(key, v)?,
            "eval.temperature" => self.eval_temperature = pf(key, v)?,
            "eval.top_k" => self.eval_top_k = pu(key, v)?,
            "eval.seed" => self.eval_seed = Some(pu64(key, v)?),
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Parses a config file: one `key = value` per line, `#` comments,
    /// blank lines allowed.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let body = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (i, raw) in body.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), i + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides after the file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set {item:?}: expected key=value"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            train_fraction: self.split_train_fraction,
            val_fraction: self.split_val_fraction,
            test_fraction: self.split_test_fraction,
            seed: self.split_seed.unwrap_or(self.seed),
        }
    }

    pub fn fixture_spec(&self) -> FixtureSpec {
        FixtureSpec {
            seed: self.fixture_seed.unwrap_or(self.seed),
            size: self.fixture_size,
            granted_len_range: (self.fixture_granted_len_lo, self.fixture_granted_len_hi),
            pregrant_len_range: (self.fixture_pregrant_len_lo, self.fixture_pregrant_len_hi),
            granted_term_rate: self.fixture_granted_term_rate,
            pregrant_term_rate: self.fixture_pregrant_term_rate,
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            context_length: self.model_context_length,
            layers: self.model_layers,
            heads: self.model_heads,
            model_dim: self.model_dim,
            feedforward_dim: self.model_feedforward_dim,
            init_seed: self.model_init_seed.unwrap_or(self.seed),
        }
    }

    pub fn rm_config(&self, vocab_size: usize) -> RmConfig {
        RmConfig {
            vocab_size,
            context_length: self.rm_context_length,
            layers: self.rm_layers,
            heads: self.rm_heads,
            model_dim: self.rm_dim,
            feedforward_dim: self.rm_feedforward_dim,
            token_cap: self.rm_token_cap,
            init_seed: self.rm_init_seed.unwrap_or(self.seed),
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            epochs: self.sft_epochs,
            batch_size: self.sft_batch_size,
            learning_rate: self.sft_lr,
            eval_every: self.sft_eval_every,
            shuffle_seed: self.sft_shuffle_seed.unwrap_or(self.seed),
            max_steps: self.sft_max_steps,
        }
    }

    pub fn rm_train_config(&self) -> RmTrainConfig {
        RmTrainConfig {
            epochs: self.rm_epochs,
            batch_size: self.rm_batch_size,
            learning_rate: self.rm_lr,
            shuffle_seed: self.rm_shuffle_seed.unwrap_or(self.seed),
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            total_steps: self.ppo_total_steps,
            rollouts_per_step: self.ppo_rollouts_per_step,
            prompt_token_count: self.ppo_prompt_token_count,
            max_new_tokens: self.ppo_max_new_tokens,
            learning_rate: self.ppo_lr,
            clip_epsilon: self.ppo_clip_epsilon,
            value_coef: self.ppo_value_coef,
            kl_coef: self.ppo_kl_coef,
            gae_gamma: self.ppo_gae_gamma,
            gae_lambda: self.ppo_gae_lambda,
            advantage_whitening: self.ppo_advantage_whitening,
            ppo_epochs: self.ppo_epochs,
            temperature: self.ppo_temperature,
            top_k: self.ppo_top_k,
            seed: self.ppo_seed.unwrap_or(self.seed),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            prompt_token_count: self.eval_prompt_token_count,
            max_new_tokens: self.eval_max_new_tokens,
            temperature: self.eval_temperature,
            top_k: self.eval_top_k,
            n_rows: self.eval_n_rows,
            seed: self.eval_seed.unwrap_or(self.seed),
        }
    }

    /// Every key with its effective (seed-resolved) value, for the run
    /// manifest.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let split = self.split_config();
        let fixture = self.fixture_spec();
        let sft = self.sft_config();
        let rm = self.rm_train_config();
        let ppo = self.ppo_config();
        let eval = self.eval_config();
        let max_steps = match sft.max_steps {
            Some(n) => n.to_string(),
            None => "none".into(),
        };
        BTreeMap::from([
            ("seed".into(), s(self.seed)),
            ("split.train_fraction".into(), s(split.train_fraction)),
            ("split.val_fraction".into(), s(split.val_fraction)),
            ("split.test_fraction".into(), s(split.test_fraction)),
            ("split.seed".into(), s(split.seed)),
            ("fixture.size".into(), s(fixture.size)),
            ("fixture.seed".into(), s(fixture.seed)),
            ("fixture.granted_len_lo".into(), s(fixture.granted_len_range.0)),
            ("fixture.granted_len_hi".into(), s(fixture.granted_len_range.1)),
            ("fixture.pregrant_len_lo".into(), s(fixture.pregrant_len_range.0)),
            ("fixture.pregrant_len_hi".into(), s(fixture.pregrant_len_range.1)),
            ("fixture.granted_term_rate".into(), s(fixture.granted_term_rate)),
            ("fixture.pregrant_term_rate".into(), s(fixture.pregrant_term_rate)),
            ("tokenizer.vocab_size".into(), s(self.vocab_size)),
            ("model.layers".into(), s(self.model_layers)),
            ("model.heads".into(), s(self.model_heads)),
            ("model.dim".into(), s(self.model_dim)),
            ("model.feedforward_dim".into(), s(self.model_feedforward_dim)),
            ("model.context_length".into(), s(self.model_context_length)),
            ("model.init_seed".into(), s(self.model_init_seed.unwrap_or(self.seed))),
            ("rm.layers".into(), s(self.rm_layers)),
            ("rm.heads".into(), s(self.rm_heads)),
            ("rm.dim".into(), s(self.rm_dim)),
            ("rm.feedforward_dim".into(), s(self.rm_feedforward_dim)),
            ("rm.context_length".into(), s(self.rm_context_length)),
            ("rm.token_cap".into(), s(self.rm_token_cap)),
            ("rm.init_seed".into(), s(self.rm_init_seed.unwrap_or(self.seed))),
            ("rm.epochs".into(), s(rm.epochs)),
            ("rm.batch_size".into(), s(rm.batch_size)),
            ("rm.lr".into(), s(rm.learning_rate)),
            ("rm.shuffle_seed".into(), s(rm.shuffle_seed)),
            ("sft.epochs".into(), s(sft.epochs)),
            ("sft.batch_size".into(), s(sft.batch_size)),
            ("sft.lr".into(), s(sft.learning_rate)),
            ("sft.eval_every".into(), s(sft.eval_every)),
            ("sft.shuffle_seed".into(), s(sft.shuffle_seed)),
            ("sft.max_steps".into(), max_steps),
            ("ppo.total_steps".into(), s(ppo.total_steps)),
            ("ppo.rollouts_per_step".into(), s(ppo.rollouts_per_step)),
            ("ppo.prompt_token_count".into(), s(ppo.prompt_token_count)),
            ("ppo.max_new_tokens".into(), s(ppo.max_new_tokens)),
            ("ppo.lr".into(), s(ppo.learning_rate)),
            ("ppo.clip_epsilon".into(), s(ppo.clip_epsilon)),
            ("ppo.value_coef".into(), s(ppo.value_coef)),
            ("ppo.kl_coef".into(), s(ppo.kl_coef)),
            ("ppo.gae_gamma".into(), s(ppo.gae_gamma)),
            ("ppo.gae_lambda".into(), s(ppo.gae_lambda)),
            ("ppo.advantage_whitening".into(), s(ppo.advantage_whitening)),
            ("ppo.ppo_epochs".into(), s(ppo.ppo_epochs)),
            ("ppo.temperature".into(), s(ppo.temperature)),
            ("ppo.top_k".into(), s(ppo.top_k)),
            ("ppo.seed".into(), s(ppo.seed)),
            ("eval.n_rows".into(), s(eval.n_rows)),
            ("eval.prompt_token_count".into(), s(eval.prompt_token_count)),
            ("eval.max_new_tokens".into(), s(eval.max_new_tokens)),
            ("eval.temperature".into(), s(eval.temperature)),
            ("eval.top_k".into(), s(eval.top_k)),
            ("eval.seed".into(), s(eval.seed)),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_then_overrides_win_in_order() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment\n\nseed = 7\nsft.lr = 0.01\nsft.lr = 0.02").unwrap();
        let mut s = Settings::default();
        s.apply_file(f.path()).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.sft_lr, 0.02);
        s.apply_overrides(&["sft.lr=0.03".into()]).unwrap();
        assert_eq!(s.sft_lr, 0.03);
    }

    #[test]
    fn unknown_keys_and_bad_values_error() {
        let mut s = Settings::default();
        let err = s.set("sft.learning_rate", "0.1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
        assert!(s.set("ppo.total_steps", "ten").is_err());
        assert!(s.set("ppo.advantage_whitening", "yes").is_err());
    }

    #[test]
    fn stage_seeds_default_to_global_seed() {
        let mut s = Settings::default();
        s.set("seed", "41").unwrap();
        assert_eq!(s.sft_config().shuffle_seed, 41);
        assert_eq!(s.ppo_config().seed, 41);
        assert_eq!(s.split_config().seed, 41);
        s.set("ppo.seed", "5").unwrap();
        assert_eq!(s.ppo_config().seed, 5);
        assert_eq!(s.eval_config().seed, 41);
    }

    /// Every snapshot key must round-trip through set(), keeping the two
    /// tables in sync.
    #[test]
    fn snapshot_keys_are_all_settable() {
        let s = Settings::default();
        let snap = s.snapshot();
        assert!(snap.len() >= 55);
        let mut t = Settings::default();
        for (key, value) in &snap {
            t.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert_eq!(t.snapshot(), snap);
    }
}
