use fashionsap::downstream::recall_at_k;
use fashionsap::graph::Mat;
use fashionsap::objectives::{its_distributions, soft_targets};
use fashionsap::taxonomy::{map_category, CategoryTable, FashionSymbol};
use fashionsap::textpipe::corrupt::trp_count;
use fashionsap::textpipe::{apply_trp_corruption, detokenize, tokenize, LexicalResource, Vocabulary};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn soft_targets_are_distributions(
        (b, m) in (1usize..5, 0usize..5).prop_map(|(b, q)| (b, b + q)),
        alpha in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let sims = Array2::from_shape_fn((b, m), |(r, j)| ((seed as f64 + (r * m + j) as f64) * 0.37).sin());
        let d = its_distributions(&sims, 0.07).unwrap();
        let pos: Vec<usize> = (0..b).collect();
        let y = soft_targets(&pos, m, Some(&d), alpha).unwrap();
        for (r, row) in y.rows().into_iter().enumerate() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!(row[r] >= 1.0 - alpha - 1e-12);
        }
    }

    #[test]
    fn recall_is_monotone_in_k(sims in matrix(6, 9), pos in proptest::collection::vec(0usize..9, 6)) {
        let r = recall_at_k(&sims, &pos, &[1, 2, 5, 9]);
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r[3], 1.0);
    }

    #[test]
    fn trp_replaces_the_advertised_count(n in 1usize..80, seed in any::<u64>()) {
        let vocab = Vocabulary::build(["up", "down", "left", "right", "in", "out"]);
        let lex = LexicalResource::from_json(r#"{"antonyms": {"up": "down", "down": "up"}, "synonyms": {}}"#).unwrap();
        let ids: Vec<_> = (0..n).map(|i| vocab.id(["up", "down", "left", "right", "in", "out"][i % 6]).unwrap()).collect();
        let out = apply_trp_corruption(&ids, &[], &lex, &vocab, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.labels.iter().filter(|&&l| l == 1).count(), trp_count(n));
        prop_assert_eq!(out.original, ids);
    }

    #[test]
    fn tokenize_round_trips_known_words(idx in proptest::collection::vec(0usize..5, 1..10)) {
        let words = ["red", "long", "shirt", "with", "pocket"];
        let vocab = Vocabulary::build(words);
        let text = idx.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
        let seq = tokenize(&text, &vocab, 32);
        prop_assert_eq!(detokenize(&seq, &vocab), text);
    }

    #[test]
    fn category_lookup_never_fails(term in "[a-z][a-z -]{0,19}") {
        let sym = map_category(&term, &CategoryTable::default()).unwrap();
        prop_assert!(FashionSymbol::ALL.contains(&sym));
    }
}
