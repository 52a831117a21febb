use mllm_core::checkpoint::Checkpoint;
use mllm_core::corpus::{
    batchify, split_validation, truncate_training, word_count, Sentence, Threshold, Vocabulary, EOS, UNK,
};
use mllm_core::model::{LanguageModel, LanguageSpec, ModelConfig, MultilingualModel, SharingPattern};
use proptest::prelude::*;

fn sentences() -> impl Strategy<Value = Vec<Sentence>> {
    prop::collection::vec(prop::collection::vec("[a-e]{1,2}", 1..6), 1..30)
}

proptest! {
    #[test]
    fn threshold_label_parses_back(n in 1usize..200_000) {
        let t = Threshold::Words(n);
        prop_assert_eq!(t.label().parse::<Threshold>().unwrap(), t);
    }

    #[test]
    fn vocabulary_replaces_a_quarter_and_encodes_in_range(s in sentences()) {
        let vocab = Vocabulary::build(&s).unwrap();
        let mut types: Vec<&String> = s.iter().flatten().collect();
        types.sort();
        types.dedup();
        prop_assert_eq!(vocab.replaced().len(), types.len() / 4);
        prop_assert_eq!(vocab.len(), types.len() - types.len() / 4 + 2);

        let encoded = vocab.encode(&s);
        prop_assert_eq!(encoded.len(), word_count(&s) + s.len());
        let decoded = vocab.decode(&encoded);
        let expected: Vec<&str> = s
            .iter()
            .flat_map(|sent| sent.iter().map(String::as_str).chain([EOS]))
            .collect();
        for (got, want) in decoded.iter().zip(&expected) {
            prop_assert!(got == want || (*got == UNK && vocab.replaced().iter().any(|r| r == want)));
        }
    }

    #[test]
    fn truncation_keeps_a_whole_sentence_prefix(s in sentences(), limit in 5usize..60) {
        if let Ok(kept) = truncate_training(&s, Threshold::Words(limit)) {
            prop_assert!(word_count(kept) <= limit);
            prop_assert_eq!(kept, &s[..kept.len()]);
            if kept.len() < s.len() {
                prop_assert!(word_count(kept) + s[kept.len()].len() > limit);
            }
        }
    }

    #[test]
    fn validation_split_takes_the_shortest_suffix(s in sentences(), target in 1usize..40) {
        if let Ok((train, valid)) = split_validation(&s, target) {
            prop_assert_eq!(train.len() + valid.len(), s.len());
            prop_assert!(!train.is_empty());
            prop_assert!(word_count(valid) >= target);
            prop_assert!(word_count(&valid[1..]) < target);
        }
    }

    #[test]
    fn batchify_rows_are_contiguous(len in 1usize..300, batch in 1usize..9) {
        prop_assume!(len >= batch);
        let stream: Vec<u32> = (0..len as u32).collect();
        let b = batchify(&stream, batch, 0).unwrap();
        let l = len / batch;
        prop_assert_eq!(b.row_len(), l);
        for r in 0..batch {
            prop_assert_eq!(b.row(r), &stream[r * l..(r + 1) * l]);
        }
    }

    #[test]
    fn segments_cycle_through_each_row(len in 2usize..100, batch in 1usize..5, seg in 1usize..30) {
        prop_assume!(len >= 2 * batch);
        let stream: Vec<u32> = (0..len as u32).collect();
        let mut b = batchify(&stream, batch, 0).unwrap();
        let l = b.row_len();
        let mut pos = 0;
        for _ in 0..5 {
            let s = b.next_segment(seg);
            for t in 0..seg {
                for r in 0..batch {
                    let at = (pos + t) % l;
                    prop_assert_eq!(s.inputs[t * batch + r], r * l + at);
                    prop_assert_eq!(s.targets[t * batch + r], r * l + (at + 1) % l);
                }
            }
            pos = (pos + seg) % l;
            prop_assert_eq!(b.cursor(), pos);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        emb in 1usize..5,
        hidden in 1usize..6,
        vocabs in prop::collection::vec(2usize..9, 1..4),
        seed in 0u64..1000,
        lr in 1e-3f64..50.0,
    ) {
        let config = ModelConfig {
            embedding: emb,
            hidden,
            pattern: SharingPattern::PROPOSED,
            languages: vocabs
                .iter()
                .enumerate()
                .map(|(i, &v)| LanguageSpec { name: format!("l{i}"), vocab: v })
                .collect(),
        };
        let hash = config.fingerprint();
        let model = MultilingualModel::build(config, seed).unwrap();
        let ppl = vec![12.5; vocabs.len()];
        let ckpt = Checkpoint::from_store(hash, model.store(), 3, lr, ppl);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(&back, &ckpt);
        let restored = back.to_model().unwrap();
        for id in model.store().ids() {
            prop_assert_eq!(restored.store().get(id), model.store().get(id));
        }
    }
}
