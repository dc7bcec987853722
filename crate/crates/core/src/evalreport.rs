//! Evaluation and report rendering: trailing moving averages, the paired
//! before/after granted-ratio comparison, and the CSV/SVG/JSON report
//! bundle. The SVG plots are rendered by hand so reports need nothing
//! beyond this crate.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ClaimRecord;
use crate::neural::{classify, sample, NeuralError, PolicyModel, RewardNet, SamplerConfig, Scalar};
use crate::ppo::{make_prompts, TrainLogRow};
use crate::seed;
use crate::tokenizer::{Vocabulary, END_ID};
use crate::par;

/// Window of the smoothed report columns.
pub const MA_WINDOW: usize = 100;
/// Grant-probability decision threshold.
pub const GRANT_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("moving average window must be positive")]
    WindowZero,
    #[error("no prompts: every claim tokenizes shorter than the prompt length")]
    NoPrompts,
    #[error("report io for {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Trailing moving average with partial windows at the head: element `i`
/// averages the last `min(i+1, window)` values.
pub fn moving_average(values: &[f64], window: usize) -> Result<Vec<f64>, EvalError> {
    if window == 0 {
        return Err(EvalError::WindowZero);
    }
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    Ok(out)
}

/// Sampling settings for the before/after comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompt_token_count: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    /// Cap on evaluated rows; fewer prompts than this uses them all.
    pub n_rows: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prompt_token_count: 30,
            max_new_tokens: 128,
            temperature: 1.0,
            top_k: 0,
            n_rows: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmTally {
    pub granted: usize,
    pub total: usize,
    pub ratio: f64,
}

impl ArmTally {
    fn new(granted: usize, total: usize) -> Self {
        ArmTally { granted, total, ratio: granted as f64 / total as f64 }
    }
}

/// Classifier-judged grant ratios of the tuned policy against its starting
/// point, sampled from the same prompts with the same seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrantedRatioReport {
    pub dataset: String,
    pub n_rows: usize,
    pub threshold: f64,
    pub before: ArmTally,
    pub after: ArmTally,
}

fn arm_tally<T: Scalar>(
    model: &PolicyModel<T>,
    judge: &RewardNet<T>,
    prompts: &[crate::ppo::Prompt],
    vocab: &Vocabulary,
    cfg: &EvalConfig,
) -> Result<ArmTally, EvalError> {
    let sampler = SamplerConfig {
        max_new_tokens: cfg.max_new_tokens,
        temperature: cfg.temperature,
        top_k: cfg.top_k,
        stop_token: Some(END_ID),
    };
    let grants: Vec<Result<bool, EvalError>> = par::map_indexed(prompts.len(), |i| {
        // Seeds depend on the prompt index only, so both arms face the
        // same draw sequence on the same prompt.
        let out = sample(model, &prompts[i].tokens, &sampler, seed::derive(&[cfg.seed, i as u64]))?;
        let text = vocab.decode_lossy(&out.tokens).expect("sampled ids are in-vocab");
        let p = classify(judge, &vocab.encode(&text))?;
        Ok(p >= GRANT_THRESHOLD)
    });
    let mut granted = 0usize;
    for g in grants {
        if g? {
            granted += 1;
        }
    }
    Ok(ArmTally::new(granted, prompts.len()))
}

/// Samples the first `n_rows` usable prompts from `dataset` through both
/// models and judges each continuation with the classifier.
pub fn granted_ratio_eval<T: Scalar>(
    before: &PolicyModel<T>,
    after: &PolicyModel<T>,
    judge: &RewardNet<T>,
    dataset: &[ClaimRecord],
    dataset_name: &str,
    vocab: &Vocabulary,
    cfg: &EvalConfig,
) -> Result<GrantedRatioReport, EvalError> {
    let mut prompts = make_prompts(dataset, vocab, cfg.prompt_token_count);
    if prompts.is_empty() {
        return Err(EvalError::NoPrompts);
    }
    prompts.truncate(cfg.n_rows);
    Ok(GrantedRatioReport {
        dataset: dataset_name.to_string(),
        n_rows: prompts.len(),
        threshold: GRANT_THRESHOLD,
        before: arm_tally(before, judge, &prompts, vocab, cfg)?,
        after: arm_tally(after, judge, &prompts, vocab, cfg)?,
    })
}

// Fixed-size line plot. Returns a standalone SVG document.
fn render_line_svg(title: &str, series: &[(&str, &[f64])]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const M: f64 = 55.0;
    const COLORS: [&str; 2] = ["#888888", "#c0392b"];

    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let (mut lo, mut hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }

    let x_of = |i: usize| {
        if n <= 1 {
            M
        } else {
            M + (W - 2.0 * M) * i as f64 / (n - 1) as f64
        }
    };
    let y_of = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        W / 2.0
    ));
    // Axes with end labels.
    svg.push_str(&format!(
        "  <line x1=\"{M}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - M,
        W - M
    ));
    svg.push_str(&format!(
        "  <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{lo:.4}</text>\n",
        M - 6.0,
        H - M + 4.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.4}</text>\n",
        M - 6.0,
        M + 4.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{M}\" y=\"{}\" text-anchor=\"middle\">0</text>\n",
        H - M + 20.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        W - M,
        H - M + 20.0,
        n.saturating_sub(1)
    ));

    for (si, (name, values)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let points: Vec<String> =
            values.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v))).collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n",
            W - M - 150.0,
            M + 18.0 * (si as f64 + 1.0)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Everything `emit_report` wrote, for manifests.
pub struct ReportFiles {
    pub csv: PathBuf,
    pub svgs: Vec<PathBuf>,
    pub granted_json: Option<PathBuf>,
}

/// Writes `report.csv` (raw and smoothed series per step), one SVG per
/// tracked metric, and `granted_ratio.json` when a comparison is given.
pub fn emit_report(
    out_dir: &Path,
    log: &[TrainLogRow],
    granted: Option<&GrantedRatioReport>,
) -> Result<ReportFiles, EvalError> {
    let io_err =
        |path: &Path, msg: String| EvalError::Io { path: path.display().to_string(), msg };
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e.to_string()))?;

    let reward: Vec<f64> = log.iter().map(|r| r.reward_mean).collect();
    let chars: Vec<f64> = log.iter().map(|r| r.claim_chars_mean).collect();
    let terms: Vec<f64> = log.iter().map(|r| r.limiting_terms_mean).collect();
    let kl: Vec<f64> = log.iter().map(|r| r.kl_mean).collect();
    let reward_ma = moving_average(&reward, MA_WINDOW)?;
    let chars_ma = moving_average(&chars, MA_WINDOW)?;
    let terms_ma = moving_average(&terms, MA_WINDOW)?;

    let csv_path = out_dir.join("report.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path)
            .map_err(|e| io_err(&csv_path, e.to_string()))?;
        w.write_record([
            "step",
            "reward_mean",
            "reward_mean_ma100",
            "claim_chars_mean",
            "claim_chars_ma100",
            "limiting_terms_mean",
            "limiting_terms_ma100",
            "kl_mean",
        ])
        .map_err(|e| io_err(&csv_path, e.to_string()))?;
        for (i, row) in log.iter().enumerate() {
            w.write_record([
                row.step.to_string(),
                row.reward_mean.to_string(),
                reward_ma[i].to_string(),
                row.claim_chars_mean.to_string(),
                chars_ma[i].to_string(),
                row.limiting_terms_mean.to_string(),
                terms_ma[i].to_string(),
                kl[i].to_string(),
            ])
            .map_err(|e| io_err(&csv_path, e.to_string()))?;
        }
        w.flush().map_err(|e| io_err(&csv_path, e.to_string()))?;
    }

    let mut svgs = Vec::new();
    for (file, title, raw, ma) in [
        ("reward_mean.svg", "Mean reward per step", &reward, &reward_ma),
        ("claim_length.svg", "Mean generated length (chars)", &chars, &chars_ma),
        ("limiting_terms.svg", "Mean limiting-term count", &terms, &terms_ma),
    ] {
        let path = out_dir.join(file);
        let svg = render_line_svg(title, &[("raw", raw), ("ma100", ma)]);
        fs::write(&path, svg).map_err(|e| io_err(&path, e.to_string()))?;
        svgs.push(path);
    }

    let granted_json = match granted {
        Some(report) => {
            let path = out_dir.join("granted_ratio.json");
            let body = serde_json::to_string_pretty(report)
                .map_err(|e| io_err(&path, e.to_string()))?;
            fs::write(&path, body).map_err(|e| io_err(&path, e.to_string()))?;
            Some(path)
        }
        None => None,
    };
    Ok(ReportFiles { csv: csv_path, svgs, granted_json })
}
