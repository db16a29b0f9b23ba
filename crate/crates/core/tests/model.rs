mod common;

use common::{small_model, tiny_model, train_briefly};
use mvsr::data::{PaddedBatch, SentencePair, LEN, MASK};
use mvsr::model::{init_params, predict_length, top_lengths, Cmlm, ModelConfig};
use mvsr::params::ParamStore;
use mvsr_tensor::{grad_check, GradCheckConfig, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    init_params(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn run(cfg: &ModelConfig, p: &ParamStore<f64>, src: &[Vec<u32>], tgt: &[Vec<u32>], dropout: f64, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let out = Cmlm::new(cfg, &bound).forward(&mut g, &PaddedBatch::new(src), &PaddedBatch::new(tgt), dropout, &mut ChaCha8Rng::seed_from_u64(seed));
    (g.value(out.token_logits).clone(), g.value(out.length_logits).clone())
}

#[test]
fn output_shapes() {
    let cfg = tiny_model(13, 9);
    let p = params(&cfg, 1);
    let src = vec![vec![LEN, 6, 7, 8], vec![LEN, 9]];
    let tgt = vec![vec![MASK; 5], vec![6, MASK]];
    let (tok, len) = run(&cfg, &p, &src, &tgt, 0.0, 0);
    assert_eq!(tok.shape(), &[2, 5, 13]);
    assert_eq!(len.shape(), &[2, 9]);
    assert!(tok.is_finite() && len.is_finite());
}

#[test]
fn fully_masked_input_predicts_every_position() {
    let cfg = tiny_model(11, 12);
    let p = params(&cfg, 2);
    for n in [1, 4, 12] {
        let (tok, _) = run(&cfg, &p, &[vec![LEN, 6, 7]], &[vec![MASK; n]], 0.0, 0);
        assert_eq!(tok.shape(), &[1, n, 11]);
        assert!(tok.is_finite());
    }
}

#[test]
fn no_dropout_is_deterministic_and_dropout_replays() {
    let cfg = tiny_model(12, 8);
    let p = params(&cfg, 3);
    let src = vec![vec![LEN, 6, 7, 8, 9]];
    let tgt = vec![vec![6, MASK, 8, MASK]];
    assert_eq!(run(&cfg, &p, &src, &tgt, 0.0, 1), run(&cfg, &p, &src, &tgt, 0.0, 2));
    assert_eq!(run(&cfg, &p, &src, &tgt, 0.3, 5), run(&cfg, &p, &src, &tgt, 0.3, 5));
    assert_ne!(run(&cfg, &p, &src, &tgt, 0.3, 5), run(&cfg, &p, &src, &tgt, 0.3, 6));
}

#[test]
fn padding_does_not_leak_between_sentences() {
    let cfg = tiny_model(12, 8);
    let p = params(&cfg, 4);
    let (alone, _) = run(&cfg, &p, &[vec![LEN, 6]], &[vec![MASK, 7]], 0.0, 0);
    let (batched, _) = run(&cfg, &p, &[vec![LEN, 6], vec![LEN, 8, 9, 10, 11]], &[vec![MASK, 7], vec![MASK; 6]], 0.0, 0);
    for j in 0..2 {
        for v in 0..12 {
            let a = alone.data()[j * 12 + v];
            let b = batched.data()[j * 12 + v];
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn early_positions_see_later_ones() {
    // Distinct target tokens, so each embedding row is used at one position only.
    let cfg = tiny_model(12, 8);
    let p = params(&cfg, 5);
    let src = PaddedBatch::new(&[vec![LEN, 6, 7]]);
    let tgt = PaddedBatch::new(&[vec![MASK, 8, 9, 10]]);
    let names: Vec<String> = p.names().map(str::to_owned).collect();
    let embed_idx = names.iter().position(|n| n == "dec.embed").unwrap();
    let probe = |g: &mut Graph<f64>, vars: &[Var]| {
        let bound = p.bind_vars(vars);
        let out = Cmlm::new(&cfg, &bound).forward(g, &src, &tgt, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let flat = g.reshape(out.token_logits, &[4, 12]);
        let first = g.gather_rows(flat, &[0]);
        g.sum(first)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = p.tensors().into_iter().map(|t| g.param(t)).collect();
    let y = probe(&mut g, &vars);
    g.backward(y);
    let grad = g.grad(vars[embed_idx]);
    for later in [9usize, 10] {
        let row = &grad.data()[later * cfg.d_model..(later + 1) * cfg.d_model];
        assert!(row.iter().any(|&x| x.abs() > 1e-8), "token at a later position has no influence");
    }
    let report = grad_check(probe, &p.tensors(), GradCheckConfig::default());
    assert!(report.passed(), "max rel error {}", report.max_rel_error);
}

#[test]
fn length_candidates() {
    let logits = [0.1f64, 2.0, -1.0, 0.5, 0.0, 1.0, 3.0];
    assert_eq!(top_lengths(&logits, 1)[0].0, 7);
    let five: Vec<usize> = top_lengths(&logits, 5).iter().map(|c| c.0).collect();
    assert_eq!(five, vec![7, 2, 6, 4, 1]);
    let uniform = top_lengths(&[0.0f64; 10], 3);
    assert_eq!(uniform.iter().map(|c| c.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!((uniform[0].1 - (0.1f64).ln()).abs() < 1e-12);

    let cfg = tiny_model(12, 9);
    let p = params(&cfg, 6);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let out = Cmlm::new(&cfg, &bound).forward(
        &mut g,
        &PaddedBatch::new(&[vec![LEN, 6], vec![LEN, 7, 8]]),
        &PaddedBatch::new(&[vec![MASK; 3], vec![MASK; 3]]),
        0.0,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let cands = predict_length(&g, &out, 5);
    for c in &cands {
        let mut lengths: Vec<usize> = c.iter().map(|x| x.0).collect();
        lengths.sort_unstable();
        lengths.dedup();
        assert_eq!(lengths.len(), 5);
        assert!(c.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

/// Targets repeat a random 3-token motif twice and the source carries no
/// information, so masked tokens can only be recovered from the target.
fn motif_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<SentencePair> {
    (0..n)
        .map(|_| {
            let mut words: Vec<u32> = (6..16).collect();
            words.shuffle(rng);
            let m = &words[..3];
            SentencePair::new(&[6], vec![m[0], m[1], m[2], m[0], m[1], m[2]])
        })
        .collect()
}

#[test]
fn trained_model_uses_observed_target_context() {
    let cfg = small_model(16, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs = motif_pairs(&mut rng, 1500);
    let weights = train_briefly(&cfg, &pairs, 400, 3).cast::<f64>();
    let argmax_at = |tgt: &[u32], pos: usize| -> usize {
        let (tok, _) = run(&cfg, &weights, &[vec![LEN, 6]], &[tgt.to_vec()], 0.0, 0);
        let row = &tok.data()[pos * 16..(pos + 1) * 16];
        (0..16).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
    };
    let mut changed = 0;
    for _ in 0..20 {
        let (a, b, c) = loop {
            let (a, b, c) = (rng.gen_range(6..16), rng.gen_range(6..16), rng.gen_range(6..16));
            if a != b && b != c && a != c {
                break (a, b, c);
            }
        };
        // Position 3 is masked; observed positions 0 and 2 are swapped.
        let original = [a, b, c, MASK, b, c];
        let permuted = [c, b, a, MASK, b, c];
        changed += usize::from(argmax_at(&original, 3) != argmax_at(&permuted, 3));
    }
    assert!(changed >= 1);
}
