//! Randomized tokenizer invariants: every encode/decode round-trips
//! losslessly, special tags stay atomic, and ids stay in range no matter
//! what vocabulary was trained or what text arrives.

use std::collections::BTreeSet;

use claimrl::corpus::ClaimRecord;
use claimrl::tokenizer::{
    train_vocab, TokenForm, Vocabulary, BASE_VOCAB, END_ID, END_OF_CLAIM, PAD, PAD_ID,
    SPECIAL_TAGS, START_ID, START_OF_CLAIM, UNK, UNK_ID,
};
use proptest::prelude::*;

fn record(i: usize, text: &str) -> ClaimRecord {
    ClaimRecord {
        doc_id: format!("D{i}"),
        appl_id: format!("A{i:07}"),
        grant_flag: (i % 2) as u8,
        components: BTreeSet::new(),
        claim_text: text.to_string(),
    }
}

fn base_vocab() -> Vocabulary {
    train_vocab(&[record(0, "placeholder")], BASE_VOCAB).unwrap()
}

fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,15}", 1..12)
}

proptest! {
    #[test]
    fn any_text_round_trips_through_base_vocab(text in any::<String>()) {
        let vocab = base_vocab();
        let tokens = vocab.encode(&text);
        prop_assert_eq!(vocab.decode(&tokens).unwrap(), text);
    }

    #[test]
    fn any_text_round_trips_through_trained_vocab(
        texts in corpus_strategy(),
        probe in any::<String>(),
        extra in 0usize..64,
    ) {
        let corpus: Vec<ClaimRecord> =
            texts.iter().enumerate().map(|(i, t)| record(i, t)).collect();
        let vocab = train_vocab(&corpus, BASE_VOCAB + extra).unwrap();
        prop_assert!(vocab.size() <= BASE_VOCAB + extra);
        for text in texts.iter().map(String::as_str).chain([probe.as_str()]) {
            let tokens = vocab.encode(text);
            prop_assert_eq!(vocab.decode(&tokens).unwrap(), text);
            prop_assert!(tokens.iter().all(|&t| (t as usize) < vocab.size()));
        }
    }

    #[test]
    fn arbitrary_bytes_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let vocab = base_vocab();
        let tokens = vocab.encode_bytes(&bytes);
        prop_assert_eq!(vocab.decode_bytes(&tokens).unwrap(), bytes);
    }

    /// Tags embedded between arbitrary tag-free segments come out as single
    /// ids, exactly one per injection.
    #[test]
    fn embedded_tags_stay_atomic(
        segments in prop::collection::vec("[a-zA-Z0-9 .,;]{0,20}", 2..5),
        picks in prop::collection::vec(0usize..SPECIAL_TAGS.len(), 1..4),
    ) {
        let vocab = base_vocab();
        let mut text = String::new();
        let mut expected: Vec<u32> = Vec::new();
        for (i, pick) in picks.iter().enumerate() {
            text.push_str(&segments[i % segments.len()]);
            text.push_str(SPECIAL_TAGS[*pick]);
            expected.push(START_ID + *pick as u32);
        }
        let tokens = vocab.encode(&text);
        let special: Vec<u32> =
            tokens.iter().copied().filter(|&t| (BASE_VOCAB as u32 > t) && t >= START_ID).collect();
        prop_assert_eq!(special, expected);
        prop_assert_eq!(vocab.decode(&tokens).unwrap(), text);
    }

    /// A vocabulary word encodes to its single id; the same word without
    /// its trailing space falls back to bytes instead.
    #[test]
    fn known_words_use_one_id(texts in corpus_strategy()) {
        let corpus: Vec<ClaimRecord> =
            texts.iter().enumerate().map(|(i, t)| record(i, t)).collect();
        let vocab = train_vocab(&corpus, BASE_VOCAB + 32).unwrap();
        for id in BASE_VOCAB as u32..vocab.size() as u32 {
            let TokenForm::Word(form) = vocab.form(id).unwrap() else {
                panic!("id {id} above the base range must be a word");
            };
            prop_assert!(form.ends_with(' '));
            prop_assert_eq!(vocab.encode(form), vec![id]);
            let bare = &form[..form.len() - 1];
            let tokens = vocab.encode(bare);
            prop_assert_eq!(tokens.len(), bare.len());
            prop_assert!(tokens.iter().all(|&t| t < 256));
        }
    }
}

#[test]
fn special_tags_map_to_pinned_ids() {
    let vocab = base_vocab();
    for (tag, id) in [
        (START_OF_CLAIM, START_ID),
        (END_OF_CLAIM, END_ID),
        (PAD, PAD_ID),
        (UNK, UNK_ID),
    ] {
        assert_eq!(vocab.encode(tag), vec![id]);
        assert_eq!(vocab.decode(&[id]).unwrap(), tag);
    }
    assert_eq!(vocab.size(), BASE_VOCAB);
}
