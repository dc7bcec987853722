//! Reversible word-level tokenizer with byte fallback.
//!
//! The id space is fixed: ids 0..=255 are raw bytes, 256..=259 are the four
//! special tags, and 260.. are frequent words learned from a corpus, each
//! stored with one trailing space. Encoding is longest-match with priority
//! specials > words > byte fallback; because every input byte is always
//! encodable, `decode(encode(text)) == text` for any string, and special
//! tags are atomic: a tag id appears in an encoding exactly where the tag
//! string appears in the text.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ClaimRecord;

pub const START_OF_CLAIM: &str = "<|start_of_claim|>";
pub const END_OF_CLAIM: &str = "<|end_of_claim|>";
pub const PAD: &str = "<|pad|>";
pub const UNK: &str = "<|unk|>";

/// The special tags in id order (256, 257, 258, 259).
pub const SPECIAL_TAGS: [&str; 4] = [START_OF_CLAIM, END_OF_CLAIM, PAD, UNK];

pub const START_ID: u32 = 256;
pub const END_ID: u32 = 257;
pub const PAD_ID: u32 = 258;
pub const UNK_ID: u32 = 259;

/// Ids below this are bytes and specials; learned words start here.
pub const BASE_VOCAB: usize = 260;

/// What one token id decodes to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenForm {
    Byte(u8),
    Special(String),
    /// A frequent word including its single trailing space.
    Word(String),
}

impl TokenForm {
    fn as_bytes(&self) -> &[u8] {
        match self {
            TokenForm::Byte(b) => std::slice::from_ref(b),
            TokenForm::Special(s) | TokenForm::Word(s) => s.as_bytes(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("vocabulary target {target} is below the minimum of {min}")]
    TargetTooSmall { target: usize, min: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("decoded bytes are not valid UTF-8 at offset {0}")]
    InvalidUtf8(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path} line {line}: {msg}")]
    InvalidVocab { path: PathBuf, line: usize, msg: String },
}

/// Immutable token table. Construct with [`train_vocab`] or [`Vocabulary::load`].
#[derive(Clone, Debug)]
pub struct Vocabulary {
    forms: Vec<TokenForm>,
    // Word form bytes (with trailing space) -> id.
    words: HashMap<Vec<u8>, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.forms == other.forms
    }
}

#[derive(Serialize, Deserialize)]
struct VocabRow {
    id: u32,
    #[serde(flatten)]
    form: TokenForm,
}

impl Vocabulary {
    /// Builds the fixed base table (bytes + specials) plus the given word
    /// forms, which must each carry their trailing space.
    fn from_words(word_forms: Vec<String>) -> Self {
        let mut forms = Vec::with_capacity(BASE_VOCAB + word_forms.len());
        for b in 0..=255u8 {
            forms.push(TokenForm::Byte(b));
        }
        for tag in SPECIAL_TAGS {
            forms.push(TokenForm::Special(tag.to_string()));
        }
        let mut words = HashMap::with_capacity(word_forms.len());
        for w in word_forms {
            let id = forms.len() as u32;
            words.insert(w.as_bytes().to_vec(), id);
            forms.push(TokenForm::Word(w));
        }
        Vocabulary { forms, words }
    }

    pub fn size(&self) -> usize {
        self.forms.len()
    }

    pub fn form(&self, id: u32) -> Option<&TokenForm> {
        self.forms.get(id as usize)
    }

    /// Encodes text; every byte is encodable, so this cannot fail.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Longest-match encoding over raw bytes: special tag, else the single
    /// word candidate running to the next space, else one byte.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len() / 4 + 4);
        let mut i = 0;
        'outer: while i < bytes.len() {
            for (k, tag) in SPECIAL_TAGS.iter().enumerate() {
                let tag = tag.as_bytes();
                if bytes[i..].starts_with(tag) {
                    out.push(START_ID + k as u32);
                    i += tag.len();
                    continue 'outer;
                }
            }
            // Word candidate: the run up to and including the next space.
            // Any other terminator (newline, tab, end of input) means no
            // word form can match here.
            let mut j = i;
            while j < bytes.len() && !bytes[j].is_ascii_whitespace() {
                j += 1;
            }
            if j > i && j < bytes.len() && bytes[j] == b' ' {
                if let Some(&id) = self.words.get(&bytes[i..=j]) {
                    out.push(id);
                    i = j + 1;
                    continue;
                }
            }
            out.push(bytes[i] as u32);
            i += 1;
        }
        out
    }

    /// Concatenates the byte forms of `tokens`.
    pub fn decode_bytes(&self, tokens: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in tokens {
            let form = self.form(id).ok_or(TokenizerError::TokenOutOfRange {
                id,
                size: self.size(),
            })?;
            out.extend_from_slice(form.as_bytes());
        }
        Ok(out)
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(tokens)?;
        String::from_utf8(bytes).map_err(|e| TokenizerError::InvalidUtf8(e.utf8_error().valid_up_to()))
    }

    /// Like [`Vocabulary::decode`] but replaces invalid UTF-8 (possible
    /// when a sampled model emits stray continuation bytes) with U+FFFD.
    pub fn decode_lossy(&self, tokens: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(tokens)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Writes one JSON object per token id, in id order.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let file = File::create(path).map_err(|e| TokenizerError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut w = BufWriter::new(file);
        for (id, form) in self.forms.iter().enumerate() {
            let row = VocabRow { id: id as u32, form: form.clone() };
            let line = serde_json::to_string(&row).expect("vocab row serializes");
            writeln!(w, "{line}").map_err(|e| TokenizerError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        }
        w.flush().map_err(|e| TokenizerError::Io { path: path.to_path_buf(), source: e })
    }

    /// Loads and structurally validates a vocabulary file: contiguous ids
    /// from 0, the fixed byte/special prefix, and well-formed word entries.
    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let file = File::open(path).map_err(|e| TokenizerError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let reader = BufReader::new(file);
        let invalid = |line: usize, msg: String| TokenizerError::InvalidVocab {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut word_forms = Vec::new();
        let mut count = 0usize;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| TokenizerError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let row: VocabRow = serde_json::from_str(&line).map_err(|e| TokenizerError::Json {
                path: path.to_path_buf(),
                line: lineno,
                source: e,
            })?;
            if row.id as usize != i {
                return Err(invalid(lineno, format!("expected id {i}, got {}", row.id)));
            }
            match (i, &row.form) {
                (0..=255, TokenForm::Byte(b)) if *b as usize == i => {}
                (0..=255, other) => {
                    return Err(invalid(lineno, format!("id {i} must be byte {i}, got {other:?}")))
                }
                (256..=259, TokenForm::Special(s)) if s == SPECIAL_TAGS[i - 256] => {}
                (256..=259, other) => {
                    return Err(invalid(
                        lineno,
                        format!("id {i} must be special {:?}, got {other:?}", SPECIAL_TAGS[i - 256]),
                    ))
                }
                (_, TokenForm::Word(w)) => {
                    validate_word_form(w).map_err(|msg| invalid(lineno, msg))?;
                    word_forms.push(w.clone());
                }
                (_, other) => {
                    return Err(invalid(lineno, format!("id {i} must be a word, got {other:?}")))
                }
            }
            count += 1;
        }
        if count < BASE_VOCAB {
            return Err(invalid(count, format!("vocabulary truncated at {count} rows")));
        }
        let vocab = Vocabulary::from_words(word_forms);
        if vocab.words.len() + BASE_VOCAB != vocab.forms.len() {
            return Err(invalid(0, "duplicate word form".into()));
        }
        Ok(vocab)
    }
}

fn validate_word_form(w: &str) -> Result<(), String> {
    let bytes = w.as_bytes();
    if bytes.len() < 2 || *bytes.last().unwrap() != b' ' {
        return Err(format!("word form {w:?} must be a nonempty chunk plus one trailing space"));
    }
    let chunk = &bytes[..bytes.len() - 1];
    if chunk.iter().any(|b| b.is_ascii_whitespace()) {
        return Err(format!("word form {w:?} has interior whitespace"));
    }
    for tag in SPECIAL_TAGS {
        if w.contains(tag) {
            return Err(format!("word form {w:?} contains special tag {tag:?}"));
        }
    }
    Ok(())
}

/// Learns the word table from a corpus: claims are split on ASCII
/// whitespace, words containing a special tag are excluded, and the
/// `target_size - 260` most frequent words win, frequency ties broken by
/// byte order. The result has at most `target_size` ids.
pub fn train_vocab(corpus: &[ClaimRecord], target_size: usize) -> Result<Vocabulary, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if target_size < BASE_VOCAB {
        return Err(TokenizerError::TargetTooSmall { target: target_size, min: BASE_VOCAB });
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for record in corpus {
        for word in record
            .claim_text
            .split(|c: char| c.is_ascii_whitespace())
            .filter(|w| !w.is_empty())
        {
            if SPECIAL_TAGS.iter().any(|tag| word.contains(tag)) {
                continue;
            }
            *counts.entry(word).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let word_forms: Vec<String> = ranked
        .into_iter()
        .take(target_size - BASE_VOCAB)
        .map(|(w, _)| format!("{w} "))
        .collect();
    Ok(Vocabulary::from_words(word_forms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClaimRecord, ComponentTag};
    use std::collections::BTreeSet;

    fn corpus_of(texts: &[&str]) -> Vec<ClaimRecord> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| ClaimRecord {
                doc_id: format!("d{i}"),
                appl_id: format!("a{i}"),
                grant_flag: (i % 2) as u8,
                components: BTreeSet::from([ComponentTag::Nlp]),
                claim_text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn base_table_layout_is_fixed() {
        let v = train_vocab(&corpus_of(&["a b"]), 260).unwrap();
        assert_eq!(v.size(), 260);
        assert_eq!(v.form(65), Some(&TokenForm::Byte(65)));
        assert_eq!(v.form(START_ID), Some(&TokenForm::Special(START_OF_CLAIM.into())));
        assert_eq!(v.form(END_ID), Some(&TokenForm::Special(END_OF_CLAIM.into())));
        assert_eq!(v.form(PAD_ID), Some(&TokenForm::Special(PAD.into())));
        assert_eq!(v.form(UNK_ID), Some(&TokenForm::Special(UNK.into())));
    }

    #[test]
    fn frequency_then_byte_order_ranks_words() {
        // "beta" appears three times, "alpha" twice; "gamma" and "delta"
        // once each so byte order decides: "delta" < "gamma".
        let v = train_vocab(&corpus_of(&["beta beta beta alpha alpha gamma delta end"]), 262).unwrap();
        assert_eq!(v.form(260), Some(&TokenForm::Word("beta ".into())));
        assert_eq!(v.form(261), Some(&TokenForm::Word("alpha ".into())));
        let v = train_vocab(&corpus_of(&["beta beta beta alpha alpha gamma delta end"]), 264).unwrap();
        assert_eq!(v.form(262), Some(&TokenForm::Word("delta ".into())));
        assert_eq!(v.form(263), Some(&TokenForm::Word("end ".into())));
    }

    #[test]
    fn words_use_one_id_and_unknown_text_falls_back_to_bytes() {
        let v = train_vocab(&corpus_of(&["method method system "]), 262).unwrap();
        let ids = v.encode("method system zzz");
        // "method " and "system " are single ids; "zzz" (no trailing
        // space) is three byte ids.
        assert_eq!(ids.len(), 2 + 3);
        assert!(ids[0] >= 260 && ids[1] >= 260);
        assert_eq!(&ids[2..], &[b'z' as u32; 3]);
    }

    #[test]
    fn round_trip_covers_non_ascii_and_control_bytes() {
        let v = train_vocab(&corpus_of(&["claim text"]), 270).unwrap();
        for text in [
            "claim text claim",
            "tab\tseparated\nlines",
            "µ-controller with naïve café",
            "trailing space ",
            " leading",
            "",
            "double  space",
        ] {
            assert_eq!(v.decode(&v.encode(text)).unwrap(), text);
        }
    }

    #[test]
    fn special_tags_are_atomic() {
        let v = train_vocab(&corpus_of(&["a method of brewing"]), 300).unwrap();
        let text = format!("{START_OF_CLAIM}a method of brewing{END_OF_CLAIM}");
        let ids = v.encode(&text);
        assert_eq!(ids[0], START_ID);
        assert_eq!(*ids.last().unwrap(), END_ID);
        assert_eq!(ids.iter().filter(|&&i| i == START_ID).count(), 1);
        assert_eq!(ids.iter().filter(|&&i| i == END_ID).count(), 1);
        assert_eq!(v.decode(&ids).unwrap(), text);
        // A tag glued mid-word still comes out atomic.
        let glued = format!("xy{PAD}z");
        let ids = v.encode(&glued);
        assert!(ids.contains(&PAD_ID));
        assert_eq!(v.decode(&ids).unwrap(), glued);
    }

    #[test]
    fn words_containing_tags_never_enter_the_vocab() {
        let text = format!("{END_OF_CLAIM}glued {END_OF_CLAIM}glued {END_OF_CLAIM}glued plain");
        let v = train_vocab(&corpus_of(&[&text]), 300).unwrap();
        for id in BASE_VOCAB..v.size() {
            if let Some(TokenForm::Word(w)) = v.form(id as u32) {
                assert!(!w.contains(END_OF_CLAIM), "vocab contains {w:?}");
            }
        }
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let v = train_vocab(&corpus_of(&["a b"]), 260).unwrap();
        assert!(matches!(
            v.decode(&[260]),
            Err(TokenizerError::TokenOutOfRange { id: 260, .. })
        ));
    }

    #[test]
    fn decode_surfaces_invalid_utf8_and_lossy_replaces_it() {
        let v = train_vocab(&corpus_of(&["a b"]), 260).unwrap();
        // 0xC3 alone is a dangling UTF-8 lead byte.
        assert!(matches!(v.decode(&[0xC3]), Err(TokenizerError::InvalidUtf8(_))));
        assert_eq!(v.decode_lossy(&[0xC3]).unwrap(), "\u{FFFD}");
    }

    #[test]
    fn train_rejects_empty_corpus_and_small_targets() {
        assert!(matches!(train_vocab(&[], 300), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(
            train_vocab(&corpus_of(&["a b"]), 259),
            Err(TokenizerError::TargetTooSmall { target: 259, min: 260 })
        ));
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.jsonl");
        let v = train_vocab(&corpus_of(&["a method for weaving cloth", "a method for brewing"]), 300).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.encode("a method for weaving"), v.encode("a method for weaving"));
    }

    #[test]
    fn load_rejects_tampered_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.jsonl");
        let v = train_vocab(&corpus_of(&["some words here"]), 300).unwrap();
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Corrupt a word row into a tag-bearing form.
        let bad = text.replace("{\"id\":260,\"word\":", "{\"id\":260,\"special\":");
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(TokenizerError::InvalidVocab { .. })));
    }
}
