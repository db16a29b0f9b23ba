use std::fs;
use std::path::Path;
use std::process::Command;

use mvsr::ablation::{run_ablation, Grid};
use mvsr::bleu::{corpus_bleu, corpus_bleu_lines};
use mvsr::config::RunConfig;
use proptest::prelude::*;

const TINY_CONFIG: &str = "\
d_model = 8
d_inner = 16
n_heads = 2
n_layers_enc = 1
n_layers_dec = 1
n_max = 5
dropout_online = 0.1
dropout_average = 0.1
tokens_per_batch = 40
max_steps = 6
warmup_steps = 2
peak_lr = 0.003
checkpoint_interval = 3
keep_last_k = 2
iterations = 2
length_candidates = 2
toy_task = copy
toy_vocab_size = 8
toy_pairs = 60
toy_max_len = 5
eval_pairs = 12
";

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

#[test]
fn bleu_boundaries() {
    let refs = vec![words("a b c d e"), words("f g h i")];
    assert!((corpus_bleu(&refs, &refs).unwrap().bleu - 100.0).abs() < 1e-9);
    let none = vec![words("x y z w v"), words("q r s t")];
    let r = corpus_bleu(&none, &refs).unwrap();
    assert_eq!(r.bleu, 0.0);
    assert_eq!(r.precisions[0], 0.0);
    assert!(corpus_bleu::<String>(&[], &[]).is_err());
    assert!(corpus_bleu(&refs[..1], &refs).is_err());
}

#[test]
fn bleu_pinned_fixture() {
    let hyps = [
        "the cat sat on the mat today",
        "a quick brown fox jumps over the lazy dog",
        "we will meet again at noon near the old bridge",
    ];
    let refs = [
        "the cat sat on a mat",
        "the quick brown fox jumped over the lazy dog",
        "we shall meet again at noon by the old bridge",
    ];
    let r = corpus_bleu_lines(&hyps, &refs).unwrap();
    assert!((r.bleu - 41.85536390262724).abs() < 1e-9, "{}", r.bleu);
    assert_eq!((r.hyp_len, r.ref_len), (26, 25));
}

proptest! {
    #[test]
    fn bleu_is_order_invariant(
        lines in prop::collection::vec((prop::collection::vec(0u8..6, 1..10), prop::collection::vec(0u8..6, 1..10)), 1..8),
        rot in 0usize..8,
    ) {
        let to_words = |v: &Vec<u8>| v.iter().map(|x| format!("t{x}")).collect::<Vec<_>>();
        let hyps: Vec<Vec<String>> = lines.iter().map(|l| to_words(&l.0)).collect();
        let refs: Vec<Vec<String>> = lines.iter().map(|l| to_words(&l.1)).collect();
        let a = corpus_bleu(&hyps, &refs).unwrap();
        let k = rot % lines.len();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        h2.reverse();
        r2.reverse();
        let b = corpus_bleu(&h2, &r2).unwrap();
        prop_assert!((a.bleu - b.bleu).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a.bleu));
        prop_assert!((corpus_bleu(&refs, &refs).unwrap().bleu - 100.0).abs() < 1e-9);
    }
}

#[test]
fn config_text_round_trips() {
    let cfg = RunConfig::parse(TINY_CONFIG).unwrap();
    assert_eq!(cfg.model.d_model, 8);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(RunConfig::parse("no_such_key = 1").is_err());
    assert!(RunConfig::parse("lambda").is_err());
}

#[test]
fn ablation_tables_have_one_row_per_value() {
    let base = RunConfig::parse(TINY_CONFIG).unwrap();
    let grid = Grid::parse("lambda = 0.1, 0.3, 0.5, 1, 3\ndropout_average = 0.1, 0.2, 0.3, 0.4, 0.5\niterations = 1, 4, 10\n").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tables = run_ablation(&grid, &base, dir.path()).unwrap();
    let shapes: Vec<(&str, usize)> = tables.iter().map(|t| (t.parameter.as_str(), t.rows.len())).collect();
    assert_eq!(shapes, vec![("lambda", 5), ("dropout_average", 5), ("iterations", 3)]);
    for t in &tables {
        assert!(t.rows.iter().all(|r| r.outcome.is_ok()), "{}", t.to_csv());
        let csv = fs::read_to_string(dir.path().join(format!("ablation_{}.csv", t.parameter))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), format!("{},bleu,length_accuracy,exact_match,final_loss,status", t.parameter));
        assert_eq!(lines.count(), t.rows.len());
    }
}

#[test]
fn failed_grid_point_does_not_stop_the_sweep() {
    let base = RunConfig::parse(TINY_CONFIG).unwrap();
    let grid = Grid::parse("dropout_average = 0.1, 1.5, 0.2\n").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tables = run_ablation(&grid, &base, dir.path()).unwrap();
    let ok: Vec<bool> = tables[0].rows.iter().map(|r| r.outcome.is_ok()).collect();
    assert_eq!(ok, vec![true, false, true]);
    assert!(tables[0].to_csv().contains("1.5,,,,,failed"));
    assert!(Grid::parse("d_model = 4, 8").is_err());
}

fn mvsr(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mvsr")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), TINY_CONFIG).unwrap();
    let gen = |tag: &str, seed: &str| {
        let out = mvsr(
            &["gen-toy", "--task", "copy", "--vocab-size", "8", "--pairs", "40", "--max-len", "5", "--seed", seed, "--out-src", &format!("{tag}.src"), "--out-tgt", &format!("{tag}.tgt")],
            d,
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    gen("train", "1");
    gen("test", "2");
    assert_eq!(fs::read(d.join("train.src")).unwrap(), fs::read(d.join("train.tgt")).unwrap());

    let out = mvsr(&["train", "--config", "run.cfg", "--data-src", "train.src", "--data-tgt", "train.tgt", "--out", "model"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("model/metrics.log").exists());
    assert!(d.join("model/vocab.txt").exists());
    assert_eq!(fs::read_to_string(d.join("model/metrics.log")).unwrap().lines().count(), 6);

    for extra in [&[][..], &["--use-average-model"][..], &["--online"][..]] {
        let mut args = vec!["translate", "--ckpt", "model", "--input", "test.src", "--iterations", "2", "--output", "hyp.txt"];
        args.extend_from_slice(extra);
        let out = mvsr(&args, d);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("sentences/s"));
        assert_eq!(fs::read_to_string(d.join("hyp.txt")).unwrap().lines().count(), 40);
    }

    let out = mvsr(&["eval", "--hyp", "test.tgt", "--ref", "test.tgt"], d);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("100.00"), "{}", String::from_utf8_lossy(&out.stdout));

    fs::write(d.join("short.txt"), "w1\n").unwrap();
    let out = mvsr(&["eval", "--hyp", "short.txt", "--ref", "test.tgt"], d);
    assert!(!out.status.success());

    fs::write(d.join("grid.txt"), "iterations = 1, 2\n").unwrap();
    let out = mvsr(&["ablate", "--grid", "grid.txt", "--config", "run.cfg", "--out", "sweep"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("sweep/ablation_iterations.csv").exists());
}
