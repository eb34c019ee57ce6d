use proptest::prelude::*;
use sri_core::text::{encode_batch, tokenize, Vocabulary, PAD, UNK};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tokens_are_clean_and_stable(text in "\\PC{0,60}") {
        if let Ok(tokens) = tokenize(&text) {
            for t in &tokens {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(|c| c.is_whitespace() || c.is_ascii_punctuation()));
                prop_assert_eq!(t.to_lowercase(), t.clone());
            }
            prop_assert_eq!(tokenize(&tokens.join(" ")).unwrap(), tokens);
        }
    }

    #[test]
    fn encoding_round_trips_known_tokens(corpus in prop::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,5}", 1..10), probe in "[a-g]{1,3}( [a-g]{1,3}){0,5}") {
        let vocab = Vocabulary::build(corpus.iter(), 1).unwrap();
        let ids = vocab.encode(&probe).unwrap();
        let tokens = tokenize(&probe).unwrap();
        prop_assert_eq!(ids.len(), tokens.len());
        for (id, t) in ids.iter().zip(&tokens) {
            prop_assert!(*id < vocab.len() && *id != PAD);
            if vocab.contains(t) {
                prop_assert_eq!(vocab.token(*id), Some(t.as_str()));
            } else {
                prop_assert_eq!(*id, UNK);
            }
        }
        prop_assert_eq!(Vocabulary::from_text(&vocab.to_text()).unwrap(), vocab);
    }

    #[test]
    fn batches_pad_on_the_right(rows in prop::collection::vec("[a-c]( [a-c]){0,7}", 1..6), max_len in 1usize..10) {
        let vocab = Vocabulary::build(["a b c"], 1).unwrap();
        let batch = encode_batch(&rows, &vocab, max_len).unwrap();
        let longest = rows.iter().map(|r| tokenize(r).unwrap().len().min(max_len)).max().unwrap();
        prop_assert_eq!(batch.len, longest);
        for (b, r) in rows.iter().enumerate() {
            let want: Vec<usize> = vocab.encode(r).unwrap().into_iter().take(max_len).collect();
            let row = &batch.ids[b * batch.len..(b + 1) * batch.len];
            prop_assert_eq!(batch.lengths[b], want.len());
            prop_assert_eq!(&row[..want.len()], &want[..]);
            prop_assert!(row[want.len()..].iter().all(|&i| i == PAD));
        }
    }
}

#[test]
fn table_examples() {
    let a = tokenize("Air China four two three seven, climb to eight thousand one meters").unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(a[0], "air");
    assert!(a.iter().all(|t| !t.contains(',')));
    assert_eq!(tokenize("Hainan seven four five two, direct to akube").unwrap().len(), 8);
    assert!(tokenize(" ,. ").is_err());
}
