mod common;

use common::random_pairs;
use mvsr::data::{SentencePair, Vocab, MASK};
use mvsr::masking::{make_dual_batch, sample_view, DualViewBatch, MaskedView};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TABLE_ONE: &str = "the cat went through an open window in the house .";

fn table_one() -> (Vocab, Vec<u32>) {
    let words: Vec<&str> = TABLE_ONE.split(' ').collect();
    let unique: std::collections::BTreeSet<&str> = words.iter().copied().collect();
    let vocab = Vocab::from_tokens(unique).unwrap();
    let ids = vocab.encode(&words);
    (vocab, ids)
}

#[test]
fn length_one_target_is_always_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let v = sample_view(&[9], &mut rng);
        assert_eq!(v.masked_positions, vec![0]);
        assert_eq!(v.input_ids, vec![MASK]);
        assert!(v.observed_positions.is_empty());
    }
}

#[test]
fn forced_positions_on_table_one() {
    let (vocab, ids) = table_one();
    let v = MaskedView::with_positions(&ids, &[2, 3, 6]);
    let shown: Vec<&str> = v.input_ids.iter().map(|&i| vocab.token(i)).collect();
    assert_eq!(shown.join(" "), "the cat [MASK] [MASK] an open [MASK] in the house .");
    assert_eq!(vocab.decode(&v.masked_targets()), vec!["went", "through", "window"]);
}

#[test]
fn shared_set_on_table_one() {
    let (vocab, ids) = table_one();
    let batch = DualViewBatch::from_views(
        vec![vec![2, 6]],
        vec![MaskedView::with_positions(&ids, &[2, 3, 6])],
        vec![MaskedView::with_positions(&ids, &[5, 6, 9])],
    );
    assert_eq!(batch.shared_positions, vec![vec![6]]);
    assert_eq!(vocab.token(ids[6]), "window");
}

#[test]
fn identical_and_disjoint_views() {
    let ids: Vec<u32> = (10..20).collect();
    let v = MaskedView::with_positions(&ids, &[1, 4, 8]);
    let same = DualViewBatch::from_views(vec![vec![2]], vec![v.clone()], vec![v]);
    assert_eq!(same.shared_positions, vec![vec![1, 4, 8]]);
    let apart = DualViewBatch::from_views(
        vec![vec![2]],
        vec![MaskedView::with_positions(&ids, &[0, 1])],
        vec![MaskedView::with_positions(&ids, &[2, 3])],
    );
    assert_eq!(apart.shared_positions, vec![Vec::<usize>::new()]);
}

#[test]
fn mask_frequency_matches_uniform_count_scheme() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let target: Vec<u32> = (10..20).collect();
    let mut hits = [0usize; 10];
    let draws = 10_000;
    for _ in 0..draws {
        for p in sample_view(&target, &mut rng).masked_positions {
            hits[p] += 1;
        }
    }
    for (p, h) in hits.iter().enumerate() {
        let f = *h as f64 / draws as f64;
        assert!((f - 0.55).abs() <= 0.02, "position {p}: {f}");
    }
}

#[test]
fn views_of_a_batch_differ() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = random_pairs(&mut rng, 32, 30, 20);
    let refs: Vec<&SentencePair> = pairs.iter().collect();
    let b = make_dual_batch(&refs, &mut rng);
    let differing = b.view1.iter().zip(&b.view2).filter(|(a, c)| a.masked_positions != c.masked_positions).count();
    assert!(differing > 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn batch_invariants(seed in 0u64..100_000, n in 1usize..8, max_len in 1usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = random_pairs(&mut rng, n, 40, max_len);
        let refs: Vec<&SentencePair> = pairs.iter().collect();
        let b = make_dual_batch(&refs, &mut rng);
        for (i, p) in pairs.iter().enumerate() {
            for v in [&b.view1[i], &b.view2[i]] {
                prop_assert_eq!(v.reconstruct(), p.target_ids.clone());
                prop_assert!(!v.masked_positions.is_empty() && v.masked_positions.len() <= p.target_len());
                let mut all: Vec<usize> = v.masked_positions.iter().chain(&v.observed_positions).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..p.target_len()).collect::<Vec<_>>());
                for &q in &v.masked_positions {
                    prop_assert_eq!(v.input_ids[q], MASK);
                }
            }
            let shared = &b.shared_positions[i];
            prop_assert!(shared.iter().all(|q| b.view1[i].masked_positions.contains(q)));
            prop_assert!(shared.iter().all(|q| b.view2[i].masked_positions.contains(q)));
            let both = b.view1[i].masked_positions.iter().filter(|q| b.view2[i].masked_positions.contains(q)).count();
            prop_assert_eq!(shared.len(), both);
        }
        prop_assert_eq!(&b.swapped().shared_positions, &b.shared_positions);
    }
}
