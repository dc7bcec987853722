//! One function per subcommand: validate paths and config up front (usage
//! errors), run exactly one pipeline stage (runtime errors), quarantine
//! partial outputs on failure, and write a manifest beside the artifacts
//! on success.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};
use claimrl::corpus::{
    build_aipco, compute_stats, ingest_claims, ingest_component_table, ingest_crosswalk,
    read_dataset, split_dataset, synthesize_fixture_corpus, write_dataset, ClaimRecord,
    ComponentTag, CorpusStats,
};
use claimrl::evalreport::{emit_report, granted_ratio_eval, GrantedRatioReport};
use claimrl::neural::checkpoint::{load_policy, load_reward, save_policy, save_reward};
use claimrl::neural::{PolicyModel, RewardNet};
use claimrl::ppo::{train_ppo, write_samples, write_train_log};
use claimrl::rewards::{default_terms, train_reward_model, RewardSpec, RmLogRow};
use claimrl::sft::{train_sft, write_sft_log};
use claimrl::tokenizer::{train_vocab, Vocabulary};

use crate::cli::{
    BuildCorpusArgs, CommonArgs, EvalGrantedRatioArgs, MakeFixtureArgs, ReportArgs, RewardKind,
    TrainPpoArgs, TrainRmArgs, TrainSftArgs, TrainVocabArgs,
};
use crate::config::Settings;
use crate::manifest::{digest_inputs, RunScope};

/// Usage errors exit 2, runtime errors exit 1.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CmdResult = Result<(), Failure>;

fn usage(e: anyhow::Error) -> Failure {
    Failure::Usage(e)
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

/// Every referenced input must exist before any stage runs; the message
/// names the flag that supplied the path.
fn require_input(path: &Path, flag: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!("{flag} {}: file not found", path.display())))
    }
}

fn load_settings(common: &CommonArgs) -> Result<Settings, Failure> {
    let mut settings = Settings::default();
    if let Some(path) = &common.config {
        require_input(path, "--config")?;
        settings.apply_file(path).map_err(usage)?;
    }
    settings.apply_overrides(&common.set).map_err(usage)?;
    if let Some(seed) = common.seed {
        settings.seed = seed;
    }
    Ok(settings)
}

fn print_stats(stats: &CorpusStats) {
    println!("rows {}", stats.rows);
    println!("granted_count {}", stats.granted_count);
    println!("granted_avg_len {:.1}", stats.granted_avg_len);
    println!("pregrant_count {}", stats.pregrant_count);
    println!("pregrant_avg_len {:.1}", stats.pregrant_avg_len);
}

/// Writes the full dataset plus train/val/test splits into `out_dir`.
/// Corpora too small to split get the full file only, with a warning.
fn write_dataset_dir(
    out_dir: &Path,
    records: &[ClaimRecord],
    settings: &Settings,
) -> Result<()> {
    write_dataset(&out_dir.join("dataset.jsonl"), records)?;
    if records.len() < 3 {
        log::warn!("{} records is too few to split; writing dataset.jsonl only", records.len());
        return Ok(());
    }
    let (train, val, test) = split_dataset(records, &settings.split_config())?;
    write_dataset(&out_dir.join("train.jsonl"), &train)?;
    write_dataset(&out_dir.join("val.jsonl"), &val)?;
    write_dataset(&out_dir.join("test.jsonl"), &test)?;
    log::info!("split {} records into {}/{}/{}", records.len(), train.len(), val.len(), test.len());
    Ok(())
}

fn dataset_dir_outputs(out_dir: &Path) -> Vec<PathBuf> {
    ["dataset.jsonl", "train.jsonl", "val.jsonl", "test.jsonl"]
        .iter()
        .map(|n| out_dir.join(n))
        .collect()
}

fn create_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create --out-dir {}", dir.display()))
        .map_err(usage)
}

/// Runs `body`, quarantining the scope's outputs if it fails.
fn guarded(scope: RunScope, body: impl FnOnce() -> Result<()>) -> CmdResult {
    match body() {
        Ok(()) => {
            let path = scope.finish().map_err(runtime)?;
            log::info!("manifest written to {}", path.display());
            Ok(())
        }
        Err(e) => {
            scope.quarantine();
            Err(runtime(e))
        }
    }
}

pub fn build_corpus(args: &BuildCorpusArgs) -> CmdResult {
    let settings = load_settings(&args.common)?;
    require_input(&args.components, "--components")?;
    require_input(&args.granted, "--granted")?;
    require_input(&args.pregrant, "--pregrant")?;
    require_input(&args.crosswalk, "--crosswalk")?;
    let component = ComponentTag::from_str(&args.component)
        .map_err(|e| usage(anyhow!("--component: {e}")))?;
    settings.split_config().validate().map_err(|e| usage(e.into()))?;
    create_out_dir(&args.out_dir)?;

    let inputs =
        digest_inputs(&[&args.components, &args.granted, &args.pregrant, &args.crosswalk])
            .map_err(runtime)?;
    let scope = RunScope::new(
        "build-corpus",
        settings.seed,
        settings.snapshot(),
        inputs,
        dataset_dir_outputs(&args.out_dir),
        args.out_dir.join("manifest.json"),
    );
    guarded(scope, || {
        let rows = ingest_component_table(&args.components)?;
        let granted = ingest_claims(&args.granted)?;
        let pregrant = ingest_claims(&args.pregrant)?;
        let crosswalk = ingest_crosswalk(&args.crosswalk)?;
        let (records, report) = build_aipco(component, &rows, &granted, &pregrant, &crosswalk)?;
        log::info!("{component}: {report}");
        if records.is_empty() {
            log::warn!("no {component} rows resolved; dataset is empty");
        }
        print_stats(&compute_stats(&records));
        write_dataset_dir(&args.out_dir, &records, &settings)
    })
}

pub fn make_fixture(args: &MakeFixtureArgs) -> CmdResult {
    let settings = load_settings(&args.common)?;
    let spec = settings.fixture_spec();
    spec.validate().map_err(|e| usage(e.into()))?;
    settings.split_config().validate().map_err(|e| usage(e.into()))?;
    create_out_dir(&args.out_dir)?;

    let scope = RunScope::new(
        "make-fixture",
        settings.seed,
        settings.snapshot(),
        Default::default(),
        dataset_dir_outputs(&args.out_dir),
        args.out_dir.join("manifest.json"),
    );
    guarded(scope, || {
        let records = synthesize_fixture_corpus(&spec)?;
        print_stats(&compute_stats(&records));
        write_dataset_dir(&args.out_dir, &records, &settings)
    })
}

pub fn train_vocab_cmd(args: &TrainVocabArgs) -> CmdResult {
    let settings = load_settings(&args.common)?;
    require_input(&args.data, "--data")?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))
                .map_err(usage)?;
        }
    }

    let inputs = digest_inputs(&[&args.data]).map_err(runtime)?;
    let scope = RunScope::new(
        "train-vocab",
        settings.seed,
        settings.snapshot(),
        inputs,
        vec![args.out.clone()],
        sibling_manifest(&args.out),
    );
    guarded(scope, || {
        let records = read_dataset(&args.data)?;
        let vocab = train_vocab(&records, settings.vocab_size)?;
        vocab.save(&args.out)?;
        println!("vocab_size {}", vocab.size());
        Ok(())
    })
}

/// `dir/vocab.json` gets its manifest at `dir/vocab.manifest.json`.
fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    out.with_file_name(format!("{stem}.manifest.json"))
}

pub fn train_sft_cmd(args: &TrainSftArgs) -> CmdResult {
    let settings = load_settings(&args.common)?;
    require_input(&args.train, "--train")?;
    require_input(&args.val, "--val")?;
    require_input(&args.vocab, "--vocab")?;
    create_out_dir(&args.out_dir)?;

    let inputs = digest_inputs(&[&args.train, &args.val, &args.vocab]).map_err(runtime)?;
    let model_path = args.out_dir.join("model.ckpt");
    let log_path = args.out_dir.join("sft_log.csv");
    let scope = RunScope::new(
        "train-sft",
        settings.seed,
        settings.snapshot(),
        inputs,
        vec![model_path.clone(), log_path.clone()],
        args.out_dir.join("manifest.json"),
    );

    let vocab = Vocabulary::load(&args.vocab).map_err(|e| usage(e.into()))?;
    let lm = settings.lm_config(vocab.size());
    lm.validate().map_err(|e| usage(e.into()))?;

    guarded(scope, || {
        let train = read_dataset(&args.train)?;
        let val = read_dataset(&args.val)?;
        let mut model = PolicyModel::<f32>::new(lm)?;
        let log = train_sft(&mut model, &train, &val, &vocab, &settings.sft_config())?;
        save_policy(&model_path, &model)?;
        write_sft_log(&log_path, &log)?;
        if let Some(row) = log.last() {
            println!("steps {}", row.step);
            println!("final_loss {:.6}", row.loss);
            if let Some(ppl) = row.val_perplexity {
                println!("val_perplexity {ppl:.6}");
            }
        }
        Ok(())
    })
}

fn write_rm_log(path: &Path, log: &[RmLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train_rm_cmd(args: &TrainRmArgs) -> CmdResult {
    let settings = load_settings(&args.common)?;
    require_input(&args.train, "--train")?;
    require_input(&args.val, "--val")?;
    require_input(&args.vocab, "--vocab")?;
    create_out_dir(&args.out_dir)?;

    let inputs = digest_inputs(&[&args.train, &args.val, &args.vocab]).map_err(runtime)?;
    let model_path = args.out_dir.join("rm.ckpt");
    let log_path = args.out_dir.join("rm_log.csv");
    let scope = RunScope::new(
        "train-rm",
        settings.seed,
        settings.snapshot(),
        inputs,
        vec![model_path.clone(), log_path.clone()],
        args.out_dir.join("manifest.json"),
    );

    let vocab = Vocabulary::load(&args.vocab).map_err(|e| usage(e.into()))?;
    let rm_cfg = settings.rm_config(vocab.size());
    rm_cfg.validate().map_err(|e| usage(e.into()))?;

    guarded(scope, || {
        let train = read_dataset(&args.train)?;
        let val = read_dataset(&args.val)?;
        let mut net = RewardNet::<f32>::new(rm_cfg)?;
        let (log, accuracy) =
            train_reward_model(&mut net, &train, &val, &vocab, &settings.rm_train_config())?;
        save_reward(&model_path, &net)?;
        write_rm_log(&log_path, &log)?;
        if let Some(row) = log.last() {
            println!("steps {}", row.step);
            println!("final_loss {:.6}", row.loss);
        }
        if let Some(acc) = accuracy {
            println!("val_accuracy {acc:.4}");
        }
        Ok(())
    })
}

/// `--terms` splits on commas only; trailing spaces inside each term are
/// significant and preserved.
fn parse_terms(raw: &Option<String>) -> Vec<String> {
    match raw {
        Some(s) => s.split(',').filter(|t| !t.is_empty()).map(str::to_string).collect(),
        None => default_terms(),
    }
}

pub fn train_ppo_cmd(args: &TrainPpoArgs) -> CmdResult {
    let settings = load_settings(&args.common)?;
    require_input(&args.data, "--data")?;
    require_input(&args.vocab, "--vocab")?;
    require_input(&args.checkpoint, "--checkpoint")?;
    let ppo_cfg = settings.ppo_config();
    ppo_cfg.validate().map_err(|e| usage(e.into()))?;
    create_out_dir(&args.out_dir)?;

    let vocab = Vocabulary::load(&args.vocab).map_err(|e| usage(e.into()))?;
    let terms = parse_terms(&args.terms);
    if terms.is_empty() {
        return Err(usage(anyhow!("--terms: no terms given")));
    }
    let reward = match args.reward {
        RewardKind::Length => RewardSpec::Length { max_len: args.max_len },
        RewardKind::Terms => RewardSpec::LimitingTerms { terms },
        RewardKind::Joint => RewardSpec::Joint { max_len: args.max_len, terms },
        RewardKind::Model => {
            let rm_path = args
                .rm_checkpoint
                .as_ref()
                .ok_or_else(|| usage(anyhow!("--reward model requires --rm-checkpoint")))?;
            require_input(rm_path, "--rm-checkpoint")?;
            let net = load_reward(rm_path).map_err(|e| Failure::Runtime(e.into()))?;
            RewardSpec::Learned { net: Box::new(net), vocab: vocab.clone() }
        }
    };

    let mut input_paths: Vec<&Path> = vec![&args.data, &args.vocab, &args.checkpoint];
    if let (RewardKind::Model, Some(rm)) = (args.reward, &args.rm_checkpoint) {
        input_paths.push(rm);
    }
    let inputs = digest_inputs(&input_paths).map_err(runtime)?;
    let model_path = args.out_dir.join("model.ckpt");
    let log_path = args.out_dir.join("train_log.csv");
    let samples_path = args.out_dir.join("samples.jsonl");
    let scope = RunScope::new(
        "train-ppo",
        settings.seed,
        settings.snapshot(),
        inputs,
        vec![model_path.clone(), log_path.clone(), samples_path.clone()],
        args.out_dir.join("manifest.json"),
    );

    guarded(scope, || {
        let records = read_dataset(&args.data)?;
        let mut policy = load_policy(&args.checkpoint)?;
        let reference = policy.clone();
        log::info!("optimizing against the {} reward", reward.kind());
        let out = train_ppo(&mut policy, &reference, &records, &vocab, &reward, &ppo_cfg)?;
        save_policy(&model_path, &policy)?;
        write_train_log(&log_path, &out.log)?;
        write_samples(&samples_path, &out.samples)?;
        if let Some(row) = out.log.last() {
            println!("steps {}", row.step + 1);
            println!("final_reward_mean {:.4}", row.reward_mean);
            println!("final_kl_mean {:.4}", row.kl_mean);
        }
        Ok(())
    })
}

pub fn eval_granted_ratio_cmd(args: &EvalGrantedRatioArgs) -> CmdResult {
    let settings = load_settings(&args.common)?;
    require_input(&args.data, "--data")?;
    require_input(&args.vocab, "--vocab")?;
    require_input(&args.before, "--before")?;
    require_input(&args.after, "--after")?;
    require_input(&args.rm_checkpoint, "--rm-checkpoint")?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))
                .map_err(usage)?;
        }
    }

    let inputs =
        digest_inputs(&[&args.data, &args.vocab, &args.before, &args.after, &args.rm_checkpoint])
            .map_err(runtime)?;
    let scope = RunScope::new(
        "eval-granted-ratio",
        settings.seed,
        settings.snapshot(),
        inputs,
        vec![args.out.clone()],
        sibling_manifest(&args.out),
    );

    let dataset_name = match &args.dataset_name {
        Some(name) => name.clone(),
        None => args.data.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
    };

    guarded(scope, || {
        let vocab = Vocabulary::load(&args.vocab)?;
        let records = read_dataset(&args.data)?;
        let before = load_policy(&args.before)?;
        let after = load_policy(&args.after)?;
        let judge = load_reward(&args.rm_checkpoint)?;
        let report = granted_ratio_eval(
            &before,
            &after,
            &judge,
            &records,
            &dataset_name,
            &vocab,
            &settings.eval_config(),
        )?;
        let body = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&args.out, body + "\n")
            .with_context(|| format!("cannot write {}", args.out.display()))?;
        println!("dataset {}", report.dataset);
        println!("rows {}", report.n_rows);
        println!("before_ratio {:.4}", report.before.ratio);
        println!("after_ratio {:.4}", report.after.ratio);
        println!("delta {:.4}", report.after.ratio - report.before.ratio);
        Ok(())
    })
}

pub fn report_cmd(args: &ReportArgs) -> CmdResult {
    let settings = load_settings(&args.common)?;
    require_input(&args.train_log, "--train-log")?;
    if let Some(granted) = &args.granted {
        require_input(granted, "--granted")?;
    }
    create_out_dir(&args.out_dir)?;

    let mut input_paths: Vec<&Path> = vec![&args.train_log];
    if let Some(granted) = &args.granted {
        input_paths.push(granted);
    }
    let inputs = digest_inputs(&input_paths).map_err(runtime)?;
    let mut outputs: Vec<PathBuf> =
        ["report.csv", "reward_mean.svg", "claim_length.svg", "limiting_terms.svg"]
            .iter()
            .map(|n| args.out_dir.join(n))
            .collect();
    if args.granted.is_some() {
        outputs.push(args.out_dir.join("granted_ratio.json"));
    }
    let scope = RunScope::new(
        "report",
        settings.seed,
        settings.snapshot(),
        inputs,
        outputs,
        args.out_dir.join("manifest.json"),
    );

    guarded(scope, || {
        let log = claimrl::ppo::read_train_log(&args.train_log)?;
        let granted: Option<GrantedRatioReport> = match &args.granted {
            Some(path) => {
                let body = fs::read_to_string(path)
                    .with_context(|| format!("cannot read {}", path.display()))?;
                Some(serde_json::from_str(&body).with_context(|| {
                    format!("{} is not a granted-ratio report", path.display())
                })?)
            }
            None => None,
        };
        let files = emit_report(&args.out_dir, &log, granted.as_ref())?;
        println!("report_csv {}", files.csv.display());
        for svg in &files.svgs {
            println!("svg {}", svg.display());
        }
        if let Some(j) = &files.granted_json {
            println!("granted_json {}", j.display());
        }
        Ok(())
    })
}
