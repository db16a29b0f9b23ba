use std::fs;

use mvsr::data::*;
use mvsr::Error;
use proptest::prelude::*;

fn vocab_of(words: &[&str]) -> Vocab {
    Vocab::from_tokens(words.iter().copied()).unwrap()
}

#[test]
fn empty_files_give_no_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("s"), dir.path().join("t"));
    fs::write(&s, "").unwrap();
    fs::write(&t, "").unwrap();
    let r = load_parallel(&s, &t, &vocab_of(&["a"]), &WhitespaceTokenizer, 10).unwrap();
    assert!(r.pairs.is_empty());
}

#[test]
fn lines_pair_up_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("s"), dir.path().join("t"));
    fs::write(&s, "a b\nc\nb a c\n").unwrap();
    fs::write(&t, "x\ny z\nz zz\n").unwrap();
    let v = vocab_of(&["a", "b", "c", "x", "y", "z"]);
    let r = load_parallel(&s, &t, &v, &WhitespaceTokenizer, 10).unwrap();
    assert_eq!(r.pairs.len(), 3);
    assert_eq!(r.pairs[0].source_ids, vec![LEN, v.id("a"), v.id("b")]);
    assert_eq!(r.pairs[1].target_ids, vec![v.id("y"), v.id("z")]);
    assert_eq!(r.pairs[2].target_ids, vec![v.id("z"), UNK]);
}

#[test]
fn overlong_target_is_rejected_and_counted() {
    let long = vec!["a"; 1001].join(" ");
    let ok = vec!["a"; 1000].join(" ");
    let v = vocab_of(&["a"]);
    let r = parallel_from_lines(&["a", "a"], &[long.as_str(), ok.as_str()], &v, &WhitespaceTokenizer, 1000).unwrap();
    assert_eq!(r.rejected_too_long, 1);
    assert_eq!(r.pairs.len(), 1);
    assert_eq!(r.pairs[0].target_len(), 1000);
}

#[test]
fn line_count_mismatch_reports_both_counts() {
    let v = vocab_of(&["a"]);
    match parallel_from_lines(&["a", "a"], &["a"], &v, &WhitespaceTokenizer, 10) {
        Err(e @ Error::LineCountMismatch { source_lines: 2, target_lines: 1 }) => {
            let msg = e.to_string();
            assert!(msg.contains('2') && msg.contains('1'));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn reserved_ids_stay_reserved() {
    let v = Vocab::build(["[MASK] b a b", "c"], &WhitespaceTokenizer);
    assert_eq!(v.token(PAD), "[PAD]");
    assert_eq!(v.token(MASK), "[MASK]");
    assert_eq!(v.token(LEN), "[LEN]");
    assert_eq!(v.corpus_tokens().collect::<Vec<_>>(), vec!["b", "a", "c"]);
    assert!(Vocab::from_tokens(["[PAD]"]).is_err());
    assert!(Vocab::from_tokens(["a", "a"]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vocab.txt");
    v.save(&p).unwrap();
    assert_eq!(Vocab::load(&p).unwrap(), v);
}

fn toy(task: ToyTask, seed: u64) -> ToyCorpus {
    gen_toy_corpus(&ToyCorpusSpec::new(task, 10, 50, 6, seed)).unwrap()
}

#[test]
fn copy_and_reverse_examples() {
    let cipher = cipher_table(10, 1);
    assert_eq!(apply_task(ToyTask::Copy, &["a", "b", "c"], &cipher), vec!["a", "b", "c"]);
    assert_eq!(apply_task(ToyTask::Reverse, &["a", "b", "c"], &cipher), vec!["c", "b", "a"]);
    let c = toy(ToyTask::Copy, 3);
    assert_eq!(c.source, c.target);
    let r = toy(ToyTask::Reverse, 3);
    for (s, t) in r.source.iter().zip(&r.target) {
        assert_eq!(s.split(' ').rev().collect::<Vec<_>>().join(" "), *t);
    }
}

#[test]
fn cipher_is_a_fixed_bijection() {
    let c = toy(ToyTask::SubstitutionCipher, 4);
    let table = cipher_table(10, 4);
    let images: std::collections::HashSet<&String> = table.values().collect();
    assert_eq!(images.len(), 10);
    for (s, t) in c.source.iter().zip(&c.target) {
        let mapped: Vec<&str> = s.split(' ').map(|w| table[w].as_str()).collect();
        assert_eq!(mapped.join(" "), *t);
    }
    assert!(gen_toy_corpus(&ToyCorpusSpec::new(ToyTask::Copy, 7, 5, 4, 1)).is_err());
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |tag: &str, seed| {
        let (s, t) = (dir.path().join(format!("{tag}.src")), dir.path().join(format!("{tag}.tgt")));
        toy(ToyTask::SubstitutionCipher, seed).write(&s, &t).unwrap();
        (fs::read(s).unwrap(), fs::read(t).unwrap())
    };
    assert_eq!(write("a", 9), write("b", 9));
    assert_ne!(write("c", 9), write("d", 10));
}

fn pairs_with_lengths(lengths: &[usize]) -> Vec<SentencePair> {
    lengths.iter().map(|&n| SentencePair::new(&[7], vec![8; n])).collect()
}

#[test]
fn batching_examples() {
    assert_eq!(make_batches(&pairs_with_lengths(&[4]), 10, 0).unwrap(), vec![vec![0]]);
    assert_eq!(make_batches(&pairs_with_lengths(&[5, 5]), 10, 0).unwrap().len(), 1);
    assert!(make_batches(&pairs_with_lengths(&[11]), 10, 0).is_err());
    assert!(make_batches(&[], 10, 0).unwrap().is_empty());
}

#[test]
fn padded_batch_reconstructs_members() {
    let seqs = vec![vec![7u32, 8, 9], vec![10], vec![11, 12]];
    let b = PaddedBatch::new(&seqs);
    assert_eq!((b.batch, b.len), (3, 3));
    assert_eq!(b.ids[3..6], [10, PAD, PAD]);
    assert_eq!(b.sequences(), seqs);
    assert_eq!(b.lengths(), vec![3, 1, 2]);
}

proptest! {
    #[test]
    fn batching_conserves_and_respects_budget(
        lengths in prop::collection::vec(1usize..20, 1..60),
        budget in 20usize..200,
        seed in 0u64..1000,
    ) {
        let pairs = pairs_with_lengths(&lengths);
        let batches = make_batches(&pairs, budget, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
        let total: usize = batches.iter().flatten().map(|&i| lengths[i]).sum();
        prop_assert_eq!(total, lengths.iter().sum::<usize>());
        for b in &batches {
            let longest = b.iter().map(|&i| lengths[i]).max().unwrap();
            prop_assert!(b.len() * longest <= budget);
            let members: Vec<Vec<u32>> = b.iter().map(|&i| pairs[i].target_ids.clone()).collect();
            prop_assert_eq!(PaddedBatch::new(&members).sequences(), members);
        }
        prop_assert_eq!(make_batches(&pairs, budget, seed).unwrap(), batches);
    }

    #[test]
    fn whitespace_round_trip(words in prop::collection::vec("[a-z]{1,6}", 0..12), gaps in prop::collection::vec(" {1,3}|\t", 12)) {
        let mut line = String::from("  ");
        for (w, g) in words.iter().zip(&gaps) {
            line.push_str(w);
            line.push_str(g);
        }
        let tok = WhitespaceTokenizer;
        let normalized = words.join(" ");
        prop_assert_eq!(tok.detokenize(&tok.tokenize(&line)), normalized.clone());
        prop_assert_eq!(tok.detokenize(&tok.tokenize(&normalized)), normalized);
    }
}
