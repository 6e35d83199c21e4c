use std::collections::BTreeMap;

use hmctc::tokenize::{learn_bpe, WordpieceVocab};
use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

fn corpus_strategy() -> impl Strategy<Value = BTreeMap<String, usize>> {
    btree_map("[a-f]{1,7}", 1usize..20, 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn learning_is_deterministic(corpus in corpus_strategy(), extra in 0usize..40) {
        let size = 1 + 2 * 6 + extra;
        let a = learn_bpe(&corpus, size).unwrap();
        let b = learn_bpe(&corpus, size).unwrap();
        prop_assert_eq!(a.merges(), b.merges());
        prop_assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn every_corpus_word_roundtrips(corpus in corpus_strategy(), extra in 0usize..40) {
        let v = learn_bpe(&corpus, 13 + extra).unwrap();
        prop_assert!(v.len() <= v.target_size());
        for word in corpus.keys() {
            let ids = v.encode(word).unwrap();
            prop_assert!(!ids.is_empty());
            prop_assert!(ids.iter().all(|&i| i != 0));
            prop_assert_eq!(v.decode(&ids), vec![word.clone()]);
        }
    }

    #[test]
    fn sentences_decode_to_their_words(corpus in corpus_strategy(), picks in vec(any::<prop::sample::Index>(), 1..6)) {
        let v = learn_bpe(&corpus, 30).unwrap();
        let words: Vec<&String> = corpus.keys().collect();
        let sentence: Vec<String> = picks.iter().map(|i| i.get(&words).to_string()).collect();
        let z = v.encode_words(&sentence).unwrap();
        prop_assert_eq!(v.decode(z.ids()), sentence);
    }

    #[test]
    fn text_form_roundtrips(corpus in corpus_strategy()) {
        let v = learn_bpe(&corpus, 25).unwrap();
        let back = WordpieceVocab::from_text(&v.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), v.to_text());
        prop_assert_eq!(back.merges(), v.merges());
    }
}

#[test]
fn size_below_character_inventory_is_rejected() {
    let corpus: BTreeMap<String, usize> = [("abc".to_owned(), 3)].into();
    assert!(matches!(
        learn_bpe(&corpus, 3),
        Err(hmctc::Error::Config { field, .. }) if field == "vocab.size"
    ));
}
