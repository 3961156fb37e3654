//! Randomized invariants: edit-distance metric laws against a reference
//! implementation, jamo round trips, masking bookkeeping, batch padding,
//! and checkpoint stability under arbitrary seeds.

use std::collections::HashMap;

use gbert_core::checkpoint::{decode_gbert, encode_gbert, CheckpointMeta};
use gbert_core::data::{decompose_hangul, recompose_jamo, Vocabulary, MASK_ID};
use gbert_core::eval::{levenshtein, phoneme_error_rate, word_error_rate};
use gbert_core::gbert::{apply_masking, pad_rows, GbertModel, MaskAction};
use gbert_core::synth::markov_wordlist;
use gbert_core::tensor::IGNORE_ID;
use gbert_core::transformer::ModelConfig;
use gbert_core::SeedRng;
use proptest::prelude::*;

/// Textbook recursion with memoization; deliberately unlike the two-row
/// DP under test.
fn lev_oracle(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            let del = go(a, b, i + 1, j, memo);
            let ins = go(a, b, i, j + 1, memo);
            let sub = go(a, b, i + 1, j + 1, memo);
            1 + del.min(ins).min(sub)
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..=10)
}

proptest! {
    #[test]
    fn levenshtein_is_a_metric(a in seq(), b in seq(), c in seq()) {
        let dab = levenshtein(&a, &b);
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(dab, levenshtein(&b, &a));
        prop_assert!(dab <= levenshtein(&a, &c) + levenshtein(&c, &b));
        prop_assert!(dab >= a.len().abs_diff(b.len()));
        prop_assert!(dab <= a.len().max(b.len()));
        if dab == 0 {
            prop_assert_eq!(&a, &b);
        }
    }

    #[test]
    fn levenshtein_matches_recursive_oracle(
        a in prop::collection::vec(0u8..3, 0..=6),
        b in prop::collection::vec(0u8..3, 0..=6),
    ) {
        prop_assert_eq!(levenshtein(&a, &b), lev_oracle(&a, &b));
    }

    #[test]
    fn hangul_decomposition_round_trips(
        syllables in prop::collection::vec(0xAC00u32..0xAC00 + 11_172, 0..=8),
        tail in "[a-z ]{0,6}",
    ) {
        let mut s: String = syllables
            .iter()
            .map(|&cp| char::from_u32(cp).unwrap())
            .collect();
        s.push_str(&tail);
        prop_assert_eq!(recompose_jamo(&decompose_hangul(&s)), s);
    }

    #[test]
    fn identical_corpora_score_zero(texts in prop::collection::vec(
        prop::collection::vec("[a-z]{1,3}", 1..=5),
        1..=6,
    )) {
        prop_assert_eq!(word_error_rate(&texts, &texts).unwrap(), 0.0);
        prop_assert_eq!(phoneme_error_rate(&texts, &texts).unwrap(), 0.0);
    }

    #[test]
    fn error_rates_stay_in_range(pairs in prop::collection::vec(
        (
            prop::collection::vec("[a-c]", 0..=4),
            prop::collection::vec("[a-c]{1,2}", 1..=4),
        ),
        1..=5,
    )) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let wer = word_error_rate(&hyps, &refs).unwrap();
        prop_assert!((0.0..=100.0).contains(&wer));
        let per = phoneme_error_rate(&hyps, &refs).unwrap();
        prop_assert!(per >= 0.0 && per.is_finite());
    }

    #[test]
    fn masking_selects_the_documented_count(
        word_ids in prop::collection::vec(0u32..12, 1..=12),
        ratio in 0.05f32..0.95,
        seed in 0u64..512,
    ) {
        let tokens: Vec<String> = (0..8).map(|i| format!("g{i}")).collect();
        let vocab = Vocabulary::build(tokens.iter().map(|s| s.as_str()), &["<en>"]);
        let ids: Vec<u32> = word_ids.iter().map(|&i| i % vocab.size() as u32).collect();
        let maskable = ids.iter().filter(|&&id| vocab.is_maskable(id)).count();

        let mut rng = SeedRng::new(seed);
        let ex = apply_masking(&ids, &vocab, ratio, &mut rng);

        if maskable == 0 {
            prop_assert!(ex.actions.is_empty());
            prop_assert_eq!(&ex.input_ids, &ids);
            prop_assert!(ex.target_ids.iter().all(|&t| t == IGNORE_ID));
            return Ok(());
        }
        let expected = ((ratio * maskable as f32).round() as usize).max(1).min(maskable);
        prop_assert_eq!(ex.actions.len(), expected);

        prop_assert!(ex.actions.windows(2).all(|w| w[0].0 < w[1].0));
        let selected: Vec<usize> = ex.actions.iter().map(|&(p, _)| p).collect();
        for (pos, action) in &ex.actions {
            prop_assert!(vocab.is_maskable(ids[*pos]));
            prop_assert_eq!(ex.target_ids[*pos], ids[*pos]);
            match action {
                MaskAction::Mask => prop_assert_eq!(ex.input_ids[*pos], MASK_ID),
                MaskAction::Keep => prop_assert_eq!(ex.input_ids[*pos], ids[*pos]),
                MaskAction::Random => prop_assert!(vocab.is_maskable(ex.input_ids[*pos])),
            }
        }
        for (i, &id) in ids.iter().enumerate() {
            if !selected.contains(&i) {
                prop_assert_eq!(ex.input_ids[i], id);
                prop_assert_eq!(ex.target_ids[i], IGNORE_ID);
            }
        }

        // Same seed, same corruption.
        let mut rng2 = SeedRng::new(seed);
        prop_assert_eq!(ex, apply_masking(&ids, &vocab, ratio, &mut rng2));
    }

    #[test]
    fn padding_squares_off_ragged_rows(
        lens in prop::collection::vec(1usize..=7, 1..=5),
        langs in prop::collection::vec(0u32..3, 5),
    ) {
        let rows: Vec<Vec<u32>> = lens
            .iter()
            .enumerate()
            .map(|(r, &l)| (0..l as u32).map(|i| 10 * r as u32 + i).collect())
            .collect();
        let langs = &langs[..rows.len()];
        let batch = pad_rows(&rows, Some(langs));

        let t = *lens.iter().max().unwrap();
        prop_assert_eq!(batch.batch, rows.len());
        prop_assert_eq!(batch.t, t);
        prop_assert_eq!(batch.ids.len(), rows.len() * t);
        prop_assert_eq!(batch.valid.len(), rows.len());
        let lang_ids = batch.lang_ids.as_ref().unwrap();
        prop_assert_eq!(lang_ids.len(), rows.len() * t);
        for (r, row) in rows.iter().enumerate() {
            prop_assert_eq!(batch.valid[r].len(), t);
            for j in 0..t {
                let flat = r * t + j;
                prop_assert_eq!(batch.valid[r][j], j < row.len());
                prop_assert_eq!(lang_ids[flat], langs[r]);
                if j < row.len() {
                    prop_assert_eq!(batch.ids[flat], row[j]);
                }
            }
        }
    }

    #[test]
    fn gbert_checkpoints_are_stable_for_any_seed(seed in 0u64..1024) {
        let words = markov_wordlist(30, seed);
        let vocab = Vocabulary::build(
            words.iter().flat_map(|w| w.chars().map(|c| c.to_string())),
            &[],
        );
        let cfg = ModelConfig {
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            gbert_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ffn: 16,
            dropout_p: 0.1,
            max_len: 12,
            num_languages: 0,
        };
        let model = GbertModel::new(cfg, vocab, vec![], seed).unwrap();
        let meta = CheckpointMeta { seed, step: 1, metric: 0.0 };
        let bytes = encode_gbert(&model, &meta);
        let (loaded, meta_back) = decode_gbert(&bytes).unwrap();
        prop_assert_eq!(meta_back, meta);
        prop_assert_eq!(encode_gbert(&loaded, &meta), bytes);
    }
}
