//! Claim-one corpus construction.
//!
//! Ingests tab-separated component/claims/crosswalk tables, joins them into
//! a per-component dataset of [`ClaimRecord`]s, computes class statistics,
//! splits into train/val/test, and reads/writes datasets as JSON lines.
//! Also synthesizes a deterministic fixture corpus with controllable class
//! separation for tests and desk runs.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par;
use crate::seed;

/// Technology-component tags, one flag column per tag in the component
/// membership table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ComponentTag {
    Ml,
    Evo,
    Nlp,
    Speech,
    Vision,
    Kr,
    Planning,
    Hardware,
}

impl ComponentTag {
    pub const ALL: [ComponentTag; 8] = [
        ComponentTag::Ml,
        ComponentTag::Evo,
        ComponentTag::Nlp,
        ComponentTag::Speech,
        ComponentTag::Vision,
        ComponentTag::Kr,
        ComponentTag::Planning,
        ComponentTag::Hardware,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentTag::Ml => "ML",
            ComponentTag::Evo => "EVO",
            ComponentTag::Nlp => "NLP",
            ComponentTag::Speech => "SPEECH",
            ComponentTag::Vision => "VISION",
            ComponentTag::Kr => "KR",
            ComponentTag::Planning => "PLANNING",
            ComponentTag::Hardware => "HARDWARE",
        }
    }
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentTag {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, CorpusError> {
        ComponentTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| CorpusError::UnknownComponent(s.to_string()))
    }
}

/// One dataset row: a first claim with its filing identity and class label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub doc_id: String,
    pub appl_id: String,
    /// 1 for granted patents, 0 for pre-grant publications.
    #[serde(rename = "flag_patent")]
    pub grant_flag: u8,
    pub components: BTreeSet<ComponentTag>,
    #[serde(rename = "claim_one")]
    pub claim_text: String,
}

impl ClaimRecord {
    /// Structural validity shared by ingestion, synthesis, and JSONL reads.
    pub fn validate(&self) -> Result<(), String> {
        if self.doc_id.is_empty() {
            return Err("empty doc_id".into());
        }
        if self.appl_id.is_empty() {
            return Err("empty appl_id".into());
        }
        if self.grant_flag > 1 {
            return Err(format!("flag_patent must be 0 or 1, got {}", self.grant_flag));
        }
        if self.components.is_empty() {
            return Err("no component set".into());
        }
        if self.claim_text.is_empty() {
            return Err("empty claim_one".into());
        }
        Ok(())
    }
}

/// One component-table row before the claims join.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentRow {
    pub doc_id: String,
    pub appl_id: String,
    pub components: BTreeSet<ComponentTag>,
}

/// One application-to-grant crosswalk row. `granted_doc_id` is `None` for
/// applications that never granted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrosswalkEntry {
    pub appl_id: String,
    pub granted_doc_id: Option<String>,
}

/// Join accounting from [`build_aipco`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    pub matched: usize,
    /// Component rows whose doc_id resolved in neither claims table.
    pub skipped_unresolved: usize,
    /// Rows whose table-derived grant flag disagrees with the crosswalk.
    pub crosswalk_mismatches: usize,
}

impl fmt::Display for SkipReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "matched {} rows, skipped {} unresolved, {} crosswalk mismatches",
            self.matched, self.skipped_unresolved, self.crosswalk_mismatches
        )
    }
}

/// Per-class corpus statistics; lengths are character counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub rows: usize,
    pub granted_count: usize,
    pub granted_avg_len: f64,
    pub pregrant_count: usize,
    pub pregrant_avg_len: f64,
}

/// Seeded shuffle-and-slice split parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.9,
            val_fraction: 0.05,
            test_fraction: 0.05,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        if !(self.train_fraction > 0.0 && self.val_fraction > 0.0 && self.test_fraction > 0.0) {
            return Err(CorpusError::InvalidSplit(
                "all fractions must be positive".into(),
            ));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!(
                "fractions sum to {sum}, expected 1.0"
            )));
        }
        Ok(())
    }
}

/// Synthetic corpus parameters. Lengths are target character counts drawn
/// uniformly per record; term rates are expected `wherein`-clause counts
/// per claim (fractional part realized as a Bernoulli draw).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub size: usize,
    pub granted_len_range: (usize, usize),
    pub pregrant_len_range: (usize, usize),
    pub granted_term_rate: f64,
    pub pregrant_term_rate: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            seed: 0,
            size: 2000,
            granted_len_range: (260, 420),
            pregrant_len_range: (90, 200),
            granted_term_rate: 2.5,
            pregrant_term_rate: 0.4,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.size == 0 {
            return Err(CorpusError::EmptyFixture);
        }
        for (lo, hi) in [self.granted_len_range, self.pregrant_len_range] {
            if lo == 0 || lo > hi {
                return Err(CorpusError::InvalidFixture(format!(
                    "bad length range ({lo}, {hi})"
                )));
            }
        }
        if self.granted_term_rate < 0.0 || self.pregrant_term_rate < 0.0 {
            return Err(CorpusError::InvalidFixture("negative term rate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Malformed { path: PathBuf, line: u64, msg: String },
    #[error("{path} line {line}: no component set")]
    NoComponents { path: PathBuf, line: u64 },
    #[error("{path}: missing column {column}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("doc_id {0} present in both claims tables")]
    AmbiguousDocId(String),
    #[error("doc_id {0}: empty claim text")]
    EmptyClaim(String),
    #[error("unknown component tag {0:?}")]
    UnknownComponent(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("dataset has {0} records, need at least 3 to split")]
    TooSmall(usize),
    #[error("fixture size must be positive")]
    EmptyFixture,
    #[error("invalid fixture spec: {0}")]
    InvalidFixture(String),
    #[error("{path} line {line}: {msg}")]
    InvalidRecord { path: PathBuf, line: usize, msg: String },
    #[error("{path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: io::Error) -> CorpusError {
    CorpusError::Io { path: path.to_path_buf(), source }
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<File>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_reader(file))
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn csv_err(path: &Path, err: csv::Error) -> CorpusError {
    let line = match err.position() {
        Some(p) => p.line(),
        None => 0,
    };
    CorpusError::Malformed {
        path: path.to_path_buf(),
        line,
        msg: err.to_string(),
    }
}

/// Reads the component membership table: `doc_id`, `appl_id`, then one 0/1
/// column per tag in [`ComponentTag::ALL`]. A row with every flag 0 is an
/// error, not a skip.
pub fn ingest_component_table(path: &Path) -> Result<Vec<ComponentRow>, CorpusError> {
    let mut reader = tsv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| -> Result<usize, CorpusError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CorpusError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let doc_col = col("doc_id")?;
    let appl_col = col("appl_id")?;
    let mut tag_cols = Vec::with_capacity(ComponentTag::ALL.len());
    for tag in ComponentTag::ALL {
        tag_cols.push((tag, col(tag.as_str())?));
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record_line(&record);
        let field = |i: usize| -> Result<&str, CorpusError> {
            record.get(i).ok_or_else(|| CorpusError::Malformed {
                path: path.to_path_buf(),
                line,
                msg: format!("missing field {i}"),
            })
        };
        let doc_id = field(doc_col)?.to_string();
        let appl_id = field(appl_col)?.to_string();
        if doc_id.is_empty() || appl_id.is_empty() {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line,
                msg: "empty doc_id or appl_id".into(),
            });
        }
        let mut components = BTreeSet::new();
        for &(tag, i) in &tag_cols {
            match field(i)? {
                "1" => {
                    components.insert(tag);
                }
                "0" => {}
                other => {
                    return Err(CorpusError::Malformed {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("{tag} flag must be 0 or 1, got {other:?}"),
                    })
                }
            }
        }
        if components.is_empty() {
            return Err(CorpusError::NoComponents { path: path.to_path_buf(), line });
        }
        rows.push(ComponentRow { doc_id, appl_id, components });
    }
    Ok(rows)
}

/// Reads a claims table (`doc_id`, `claim_one`) into a doc_id -> text map.
/// A duplicate doc_id overwrites the earlier row and is logged.
pub fn ingest_claims(path: &Path) -> Result<HashMap<String, String>, CorpusError> {
    let mut reader = tsv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| -> Result<usize, CorpusError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CorpusError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let doc_col = col("doc_id")?;
    let claim_col = col("claim_one")?;

    let mut map = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record_line(&record);
        let doc_id = record.get(doc_col).unwrap_or("").to_string();
        let claim = record.get(claim_col).unwrap_or("").to_string();
        if doc_id.is_empty() {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line,
                msg: "empty doc_id".into(),
            });
        }
        if map.insert(doc_id.clone(), claim).is_some() {
            log::warn!("{}: duplicate doc_id {doc_id} at line {line}, keeping the later row", path.display());
        }
    }
    Ok(map)
}

/// Reads the application-to-grant crosswalk (`appl_id`, `granted_doc_id`;
/// the second field is empty for applications that never granted).
pub fn ingest_crosswalk(path: &Path) -> Result<Vec<CrosswalkEntry>, CorpusError> {
    let mut reader = tsv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| -> Result<usize, CorpusError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CorpusError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let appl_col = col("appl_id")?;
    let doc_col = col("granted_doc_id")?;

    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record_line(&record);
        let appl_id = record.get(appl_col).unwrap_or("").to_string();
        if appl_id.is_empty() {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line,
                msg: "empty appl_id".into(),
            });
        }
        let granted = record.get(doc_col).unwrap_or("");
        entries.push(CrosswalkEntry {
            appl_id,
            granted_doc_id: if granted.is_empty() { None } else { Some(granted.to_string()) },
        });
    }
    Ok(entries)
}

/// Joins component rows against the two claims tables for one component.
///
/// A row's grant flag comes from which claims table resolves its doc_id:
/// granted claims set 1, pre-grant claims set 0. A doc_id present in both
/// tables is an error. Rows resolving in neither table are skipped and
/// counted. The crosswalk never changes labels; it only counts rows whose
/// table-derived flag disagrees with it.
pub fn build_aipco(
    component: ComponentTag,
    rows: &[ComponentRow],
    granted_claims: &HashMap<String, String>,
    pregrant_claims: &HashMap<String, String>,
    crosswalk: &[CrosswalkEntry],
) -> Result<(Vec<ClaimRecord>, SkipReport), CorpusError> {
    let granted_appls: HashMap<&str, Option<&str>> = crosswalk
        .iter()
        .map(|e| (e.appl_id.as_str(), e.granted_doc_id.as_deref()))
        .collect();

    let mut records = Vec::new();
    let mut report = SkipReport::default();
    for row in rows {
        if !row.components.contains(&component) {
            continue;
        }
        let granted_hit = granted_claims.get(&row.doc_id);
        let pregrant_hit = pregrant_claims.get(&row.doc_id);
        let (claim_text, grant_flag) = match (granted_hit, pregrant_hit) {
            (Some(_), Some(_)) => return Err(CorpusError::AmbiguousDocId(row.doc_id.clone())),
            (Some(text), None) => (text, 1u8),
            (None, Some(text)) => (text, 0u8),
            (None, None) => {
                report.skipped_unresolved += 1;
                continue;
            }
        };
        if claim_text.is_empty() {
            return Err(CorpusError::EmptyClaim(row.doc_id.clone()));
        }
        if let Some(xwalk) = granted_appls.get(row.appl_id.as_str()) {
            let xwalk_says_granted = xwalk.is_some();
            if xwalk_says_granted != (grant_flag == 1) {
                report.crosswalk_mismatches += 1;
                log::warn!(
                    "appl_id {}: claims tables say flag_patent={grant_flag} but crosswalk disagrees",
                    row.appl_id
                );
            }
        }
        report.matched += 1;
        records.push(ClaimRecord {
            doc_id: row.doc_id.clone(),
            appl_id: row.appl_id.clone(),
            grant_flag,
            components: row.components.clone(),
            claim_text: claim_text.clone(),
        });
    }
    Ok((records, report))
}

/// Row counts and mean character lengths per grant class. Empty classes
/// report a mean of 0.
pub fn compute_stats(records: &[ClaimRecord]) -> CorpusStats {
    let mut granted_count = 0usize;
    let mut granted_chars = 0usize;
    let mut pregrant_count = 0usize;
    let mut pregrant_chars = 0usize;
    for r in records {
        let len = r.claim_text.chars().count();
        if r.grant_flag == 1 {
            granted_count += 1;
            granted_chars += len;
        } else {
            pregrant_count += 1;
            pregrant_chars += len;
        }
    }
    let avg = |chars: usize, count: usize| if count == 0 { 0.0 } else { chars as f64 / count as f64 };
    CorpusStats {
        rows: records.len(),
        granted_count,
        granted_avg_len: avg(granted_chars, granted_count),
        pregrant_count,
        pregrant_avg_len: avg(pregrant_chars, pregrant_count),
    }
}

/// Seeded shuffle, then contiguous train/val/test slices. Val and test get
/// `floor(n * fraction)` records but never fewer than one; train takes the
/// remainder. The three outputs partition the input.
pub fn split_dataset(
    records: &[ClaimRecord],
    config: &SplitConfig,
) -> Result<(Vec<ClaimRecord>, Vec<ClaimRecord>, Vec<ClaimRecord>), CorpusError> {
    config.validate()?;
    let n = records.len();
    if n < 3 {
        return Err(CorpusError::TooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    // Val and test floor; the `as usize` cast truncates and both operands
    // are non-negative here.
    let n_val = ((n as f64 * config.val_fraction) as usize).max(1);
    let n_test = ((n as f64 * config.test_fraction) as usize).max(1);
    let n_train = n - n_val - n_test;
    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

const FIXTURE_SUBJECTS: [&str; 10] = [
    "system", "method", "apparatus", "device", "controller", "platform", "circuit", "module",
    "assembly", "network",
];
const FIXTURE_DOMAINS: [&str; 8] = [
    "classifying sensor data",
    "generating text sequences",
    "routing network packets",
    "scheduling compute tasks",
    "detecting anomalous signals",
    "encoding image frames",
    "ranking search results",
    "calibrating measurement devices",
];
const FIXTURE_PARTS: [&str; 12] = [
    "processor", "memory", "encoder", "decoder", "buffer", "scheduler", "classifier", "sensor",
    "transmitter", "receiver", "cache", "register",
];
const FIXTURE_ADJECTIVES: [&str; 8] = [
    "first", "second", "digital", "adaptive", "distributed", "embedded", "primary", "auxiliary",
];
const FIXTURE_ACTIONS: [&str; 10] = [
    "receive the input stream",
    "store intermediate results",
    "apply a learned transformation",
    "emit a confidence score",
    "aggregate feature vectors",
    "compress the state representation",
    "forward tokens to the decoder",
    "normalize the activation values",
    "select a candidate response",
    "update the parameter estimates",
];
const FIXTURE_PREDICATES: [&str; 6] = [
    "operates on fixed-length windows",
    "is trained with labeled examples",
    "maintains a rolling average",
    "is coupled to the memory",
    "executes in constant time",
    "shares weights across layers",
];

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn fixture_claim(rng: &mut ChaCha8Rng, target_len: usize, term_count: usize) -> String {
    let mut s = format!(
        "A {} for {}, comprising: a {} {} configured to {}",
        pick(rng, &FIXTURE_SUBJECTS),
        pick(rng, &FIXTURE_DOMAINS),
        pick(rng, &FIXTURE_ADJECTIVES),
        pick(rng, &FIXTURE_PARTS),
        pick(rng, &FIXTURE_ACTIONS),
    );
    // Grow with body clauses toward the target, leaving room for the
    // wherein clauses appended below.
    let reserve = term_count * 40 + 1;
    while s.chars().count() + reserve < target_len {
        let clause = format!(
            "; and a {} {} configured to {}",
            pick(rng, &FIXTURE_ADJECTIVES),
            pick(rng, &FIXTURE_PARTS),
            pick(rng, &FIXTURE_ACTIONS),
        );
        s.push_str(&clause);
    }
    for _ in 0..term_count {
        let clause = format!(
            ", wherein the {} {}",
            pick(rng, &FIXTURE_PARTS),
            pick(rng, &FIXTURE_PREDICATES),
        );
        s.push_str(&clause);
    }
    s.push('.');
    s
}

/// Deterministic synthetic corpus with the texture the pipeline cares
/// about: granted claims run longer and carry more `wherein ` clauses than
/// pre-grant claims, grant flags alternate for an exact 50/50 balance, and
/// every record draws from one per-record child seed so generation order
/// cannot leak between records.
pub fn synthesize_fixture_corpus(spec: &FixtureSpec) -> Result<Vec<ClaimRecord>, CorpusError> {
    spec.validate()?;
    let records = par::map_indexed(spec.size, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[spec.seed, i as u64]));
        let granted = i % 2 == 0;
        let (len_range, term_rate) = if granted {
            (spec.granted_len_range, spec.granted_term_rate)
        } else {
            (spec.pregrant_len_range, spec.pregrant_term_rate)
        };
        let target_len = rng.gen_range(len_range.0..=len_range.1);
        let mut term_count = term_rate.floor() as usize;
        if rng.gen_bool(term_rate.fract()) {
            term_count += 1;
        }
        let claim_text = fixture_claim(&mut rng, target_len, term_count);
        let mut components = BTreeSet::new();
        let n_tags = rng.gen_range(1..=3usize);
        while components.len() < n_tags {
            components.insert(ComponentTag::ALL[rng.gen_range(0..ComponentTag::ALL.len())]);
        }
        ClaimRecord {
            doc_id: format!("FX{i:06}"),
            appl_id: format!("A{:07}", 1_000_000 + i),
            grant_flag: granted as u8,
            components,
            claim_text,
        }
    });
    Ok(records)
}

/// Writes records as JSON lines, one object per line, keys in record-field
/// order.
pub fn write_dataset(path: &Path, records: &[ClaimRecord]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("claim record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a JSON-lines dataset, validating every record. Blank lines are
/// rejected; errors carry 1-based line numbers.
pub fn read_dataset(path: &Path) -> Result<Vec<ClaimRecord>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let record: ClaimRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source: e,
        })?;
        record.validate().map_err(|msg| CorpusError::InvalidRecord {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(doc: &str, flag: u8, text: &str) -> ClaimRecord {
        ClaimRecord {
            doc_id: doc.to_string(),
            appl_id: format!("A{doc}"),
            grant_flag: flag,
            components: BTreeSet::from([ComponentTag::Ml]),
            claim_text: text.to_string(),
        }
    }

    #[test]
    fn component_tag_round_trips_through_str() {
        for tag in ComponentTag::ALL {
            assert_eq!(tag.as_str().parse::<ComponentTag>().unwrap(), tag);
        }
        assert!(matches!(
            "ml".parse::<ComponentTag>(),
            Err(CorpusError::UnknownComponent(_))
        ));
    }

    #[test]
    fn stats_match_hand_computed_values() {
        let records = vec![
            record("a", 1, "abcd"),
            record("b", 1, "abcdefgh"),
            record("c", 0, "xy"),
        ];
        let stats = compute_stats(&records);
        assert_eq!(stats.rows, 3);
        assert_eq!(stats.granted_count, 2);
        assert_eq!(stats.granted_avg_len, 6.0);
        assert_eq!(stats.pregrant_count, 1);
        assert_eq!(stats.pregrant_avg_len, 2.0);
    }

    #[test]
    fn stats_length_is_chars_not_bytes() {
        let stats = compute_stats(&[record("a", 1, "µµµµ")]);
        assert_eq!(stats.granted_avg_len, 4.0);
    }

    #[test]
    fn split_20_records_with_default_fractions_is_18_1_1() {
        let records: Vec<_> = (0..20).map(|i| record(&format!("d{i}"), (i % 2) as u8, "text")).collect();
        let cfg = SplitConfig { seed: 7, ..SplitConfig::default() };
        let (train, val, test) = split_dataset(&records, &cfg).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (18, 1, 1));
    }

    #[test]
    fn split_partitions_without_loss_or_overlap() {
        let records: Vec<_> = (0..53).map(|i| record(&format!("d{i}"), 0, "text")).collect();
        let cfg = SplitConfig { seed: 3, ..SplitConfig::default() };
        let (train, val, test) = split_dataset(&records, &cfg).unwrap();
        let mut ids: Vec<_> = train.iter().chain(&val).chain(&test).map(|r| r.doc_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 53);
    }

    #[test]
    fn split_is_seed_deterministic_and_seed_sensitive() {
        let records: Vec<_> = (0..30).map(|i| record(&format!("d{i}"), 0, "text")).collect();
        let a = split_dataset(&records, &SplitConfig { seed: 1, ..Default::default() }).unwrap();
        let b = split_dataset(&records, &SplitConfig { seed: 1, ..Default::default() }).unwrap();
        let c = split_dataset(&records, &SplitConfig { seed: 2, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn split_rejects_tiny_and_invalid_inputs() {
        let records: Vec<_> = (0..2).map(|i| record(&format!("d{i}"), 0, "text")).collect();
        assert!(matches!(
            split_dataset(&records, &SplitConfig::default()),
            Err(CorpusError::TooSmall(2))
        ));
        let records: Vec<_> = (0..10).map(|i| record(&format!("d{i}"), 0, "text")).collect();
        let bad = SplitConfig { train_fraction: 0.5, val_fraction: 0.3, test_fraction: 0.3, seed: 0 };
        assert!(matches!(split_dataset(&records, &bad), Err(CorpusError::InvalidSplit(_))));
    }

    #[test]
    fn fixture_corpus_is_balanced_and_separated() {
        let spec = FixtureSpec { size: 200, ..FixtureSpec::default() };
        let records = synthesize_fixture_corpus(&spec).unwrap();
        assert_eq!(records.len(), 200);
        for r in &records {
            r.validate().unwrap();
        }
        let stats = compute_stats(&records);
        assert_eq!(stats.granted_count, 100);
        assert_eq!(stats.pregrant_count, 100);
        assert!(stats.granted_avg_len > stats.pregrant_avg_len + 50.0);
        let terms = |flag: u8| -> f64 {
            let rows: Vec<_> = records.iter().filter(|r| r.grant_flag == flag).collect();
            rows.iter().map(|r| r.claim_text.matches("wherein ").count()).sum::<usize>() as f64
                / rows.len() as f64
        };
        assert!(terms(1) > terms(0) + 1.0);
    }

    #[test]
    fn fixture_corpus_is_seed_deterministic() {
        let spec = FixtureSpec { size: 50, ..FixtureSpec::default() };
        assert_eq!(
            synthesize_fixture_corpus(&spec).unwrap(),
            synthesize_fixture_corpus(&spec).unwrap()
        );
    }

    #[test]
    fn fixture_rejects_zero_size() {
        let spec = FixtureSpec { size: 0, ..FixtureSpec::default() };
        assert!(matches!(synthesize_fixture_corpus(&spec), Err(CorpusError::EmptyFixture)));
    }

    #[test]
    fn record_validation_rejects_structural_holes() {
        let mut r = record("d", 1, "text");
        r.grant_flag = 2;
        assert!(r.validate().is_err());
        let mut r = record("d", 1, "text");
        r.claim_text.clear();
        assert!(r.validate().is_err());
        let mut r = record("d", 1, "text");
        r.components.clear();
        assert!(r.validate().is_err());
    }
}
