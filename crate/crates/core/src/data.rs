//! Corpus ingestion, vocabulary, synthetic corpora and token-budget batching.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const LEN: u32 = 2;
pub const UNK: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[MASK]", "[LEN]", "[UNK]", "[BOS]", "[EOS]"];

/// Bijection between tokens and ids. Ids below `RESERVED.len()` belong to
/// the special symbols and are never handed to corpus tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Vocabulary holding the reserved symbols followed by `tokens` in order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    /// Builds a vocabulary from tokenized lines, most frequent first with
    /// ties broken lexicographically.
    pub fn build<'a, I>(lines: I, tokenizer: &dyn Tokenizer) -> Vocab
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in tokenizer.tokenize(line) {
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Vocab::from_tokens(entries.into_iter().map(|(t, _)| t)).expect("corpus tokens are unique")
    }

    /// Reads a vocabulary file: one token per line, id = line number - 1 +
    /// number of reserved symbols.
    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in self.corpus_tokens() {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Tokens other than the reserved symbols, in id order.
    pub fn corpus_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens[RESERVED.len()..].iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    pub fn encode(&self, tokens: &[&str]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

/// Splits lines into tokens and joins them back.
pub trait Tokenizer {
    fn tokenize<'a>(&self, line: &'a str) -> Vec<&'a str>;
    fn detokenize(&self, tokens: &[&str]) -> String;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize<'a>(&self, line: &'a str) -> Vec<&'a str> {
        line.split_whitespace().collect()
    }

    fn detokenize(&self, tokens: &[&str]) -> String {
        tokens.join(" ")
    }
}

/// One training example. `source_ids` starts with [LEN].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

impl SentencePair {
    /// Prepends [LEN] to `source`.
    pub fn new(source: &[u32], target: Vec<u32>) -> SentencePair {
        let mut source_ids = Vec::with_capacity(source.len() + 1);
        source_ids.push(LEN);
        source_ids.extend_from_slice(source);
        SentencePair { source_ids, target_ids: target }
    }

    pub fn target_len(&self) -> usize {
        self.target_ids.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub pairs: Vec<SentencePair>,
    /// Pairs dropped because the target exceeded the maximum length.
    pub rejected_too_long: usize,
    /// Pairs dropped because either side was empty.
    pub rejected_empty: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Reads two aligned files; line `i` of each forms pair `i`.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    vocab: &Vocab,
    tokenizer: &dyn Tokenizer,
    max_target_len: usize,
) -> Result<LoadReport> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    parallel_from_lines(&src, &tgt, vocab, tokenizer, max_target_len)
}

pub fn parallel_from_lines<S: AsRef<str>>(
    src: &[S],
    tgt: &[S],
    vocab: &Vocab,
    tokenizer: &dyn Tokenizer,
    max_target_len: usize,
) -> Result<LoadReport> {
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch { source_lines: src.len(), target_lines: tgt.len() });
    }
    let mut report = LoadReport::default();
    for (i, (s, t)) in src.iter().zip(tgt).enumerate() {
        let s = vocab.encode(&tokenizer.tokenize(s.as_ref()));
        let t = vocab.encode(&tokenizer.tokenize(t.as_ref()));
        if s.is_empty() || t.is_empty() {
            log::warn!("line {}: empty side, pair skipped", i + 1);
            report.rejected_empty += 1;
            continue;
        }
        if t.len() > max_target_len {
            log::warn!("line {}: target length {} exceeds {}, pair skipped", i + 1, t.len(), max_target_len);
            report.rejected_too_long += 1;
            continue;
        }
        report.pairs.push(SentencePair::new(&s, t));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyTask {
    Copy,
    Reverse,
    SubstitutionCipher,
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTask::Copy),
            "reverse" => Ok(ToyTask::Reverse),
            "substitution-cipher" | "cipher" => Ok(ToyTask::SubstitutionCipher),
            other => Err(Error::Config(format!("unknown toy task {other:?}"))),
        }
    }
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyTask::Copy => "copy",
            ToyTask::Reverse => "reverse",
            ToyTask::SubstitutionCipher => "substitution-cipher",
        })
    }
}

/// Parameters of a synthetic parallel corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    pub task: ToyTask,
    /// Number of distinct word types.
    pub vocab_size: usize,
    pub n_pairs: usize,
    /// Sentence lengths are uniform over `1..=max_len`.
    pub max_len: usize,
    /// Drives sentence sampling and target noise.
    pub seed: u64,
    /// Drives the cipher bijection; corpora sharing a key share the mapping.
    pub key_seed: u64,
    /// Probability that a target token is replaced by a random word.
    pub noise: f64,
}

impl ToyCorpusSpec {
    pub fn new(task: ToyTask, vocab_size: usize, n_pairs: usize, max_len: usize, seed: u64) -> Self {
        ToyCorpusSpec { task, vocab_size, n_pairs, max_len, seed, key_seed: seed, noise: 0.0 }
    }
}

pub fn toy_word(i: usize) -> String {
    format!("w{i}")
}

/// Token-level mapping applied by a toy task.
pub fn apply_task<'a>(task: ToyTask, tokens: &[&'a str], cipher: &'a HashMap<String, String>) -> Vec<&'a str> {
    match task {
        ToyTask::Copy => tokens.to_vec(),
        ToyTask::Reverse => tokens.iter().rev().copied().collect(),
        ToyTask::SubstitutionCipher => {
            tokens.iter().map(|t| cipher.get(*t).map(String::as_str).unwrap_or(*t)).collect()
        }
    }
}

/// The fixed random bijection over word types used by the cipher task.
pub fn cipher_table(vocab_size: usize, key_seed: u64) -> HashMap<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(key_seed);
    rng.set_stream(1);
    let mut perm: Vec<usize> = (0..vocab_size).collect();
    perm.shuffle(&mut rng);
    (0..vocab_size).map(|i| (toy_word(i), toy_word(perm[i]))).collect()
}

/// Parallel sentences as whitespace-joined lines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyCorpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl ToyCorpus {
    pub fn write(&self, src_path: &Path, tgt_path: &Path) -> Result<()> {
        let join = |lines: &[String]| lines.iter().map(|l| format!("{l}\n")).collect::<String>();
        fs::write(src_path, join(&self.source)).map_err(|e| Error::io(src_path, e))?;
        fs::write(tgt_path, join(&self.target)).map_err(|e| Error::io(tgt_path, e))
    }
}

pub fn gen_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    if spec.vocab_size < 8 {
        return Err(Error::Config(format!("toy vocab_size must be at least 8, got {}", spec.vocab_size)));
    }
    if spec.max_len == 0 {
        return Err(Error::Config("toy max_len must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::Config(format!("toy noise {} outside [0, 1]", spec.noise)));
    }
    let words: Vec<String> = (0..spec.vocab_size).map(toy_word).collect();
    let cipher = cipher_table(spec.vocab_size, spec.key_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(2);
    let mut corpus = ToyCorpus { source: Vec::with_capacity(spec.n_pairs), target: Vec::with_capacity(spec.n_pairs) };
    for _ in 0..spec.n_pairs {
        let len = rng.gen_range(1..=spec.max_len);
        let src: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..spec.vocab_size)].as_str()).collect();
        let mut tgt = apply_task(spec.task, &src, &cipher);
        for t in tgt.iter_mut() {
            if spec.noise > 0.0 && noise_rng.gen::<f64>() < spec.noise {
                *t = words[noise_rng.gen_range(0..spec.vocab_size)].as_str();
            }
        }
        corpus.source.push(src.join(" "));
        corpus.target.push(tgt.join(" "));
    }
    Ok(corpus)
}

/// Indices into a pair list forming one batch.
pub type Batch = Vec<usize>;

/// Groups pairs of similar target length so that every batch's padded
/// target size (`count * longest target`) stays within `tokens_per_batch`,
/// then shuffles batch order with `seed`.
pub fn make_batches(pairs: &[SentencePair], tokens_per_batch: usize, seed: u64) -> Result<Vec<Batch>> {
    if let Some(longest) = pairs.iter().map(SentencePair::target_len).max() {
        if longest > tokens_per_batch {
            return Err(Error::Config(format!(
                "tokens_per_batch {tokens_per_batch} is smaller than the longest target ({longest})"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tiebreak: Vec<u64> = (0..pairs.len()).map(|_| rng.gen()).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].target_len(), pairs[i].source_ids.len(), tiebreak[i]));

    let mut batches = Vec::new();
    let mut current: Batch = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = pairs[i].target_len();
        let widened = longest.max(len);
        if !current.is_empty() && (current.len() + 1) * widened > tokens_per_batch {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Right-padded `[batch, len]` id matrix with its validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedBatch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> PaddedBatch {
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let batch = seqs.len();
        let mut ids = vec![PAD; batch * len];
        let mut valid = vec![false; batch * len];
        for (b, s) in seqs.iter().enumerate() {
            for (j, &id) in s.as_ref().iter().enumerate() {
                ids[b * len + j] = id;
                valid[b * len + j] = true;
            }
        }
        PaddedBatch { ids, valid, batch, len }
    }

    /// Member sequences recovered through the validity mask.
    pub fn sequences(&self) -> Vec<Vec<u32>> {
        (0..self.batch)
            .map(|b| {
                (0..self.len)
                    .filter(|&j| self.valid[b * self.len + j])
                    .map(|j| self.ids[b * self.len + j])
                    .collect()
            })
            .collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| self.valid[b * self.len..(b + 1) * self.len].iter().filter(|&&v| v).count())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(words: &[&str]) -> Vocab {
        Vocab::from_tokens(words.iter().copied()).unwrap()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab_of(&["a", "b"]);
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.id("[MASK]"), MASK);
        assert_eq!(v.id("[LEN]"), LEN);
        assert_eq!(v.id("[UNK]"), UNK);
        assert_eq!(v.id("[BOS]"), BOS);
        assert_eq!(v.id("[EOS]"), EOS);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.token(7), "b");
    }

    #[test]
    fn corpus_token_cannot_shadow_reserved() {
        assert!(Vocab::from_tokens(["a", "[MASK]"]).is_err());
        assert!(Vocab::from_tokens(["a", "a"]).is_err());
    }

    #[test]
    fn build_orders_by_frequency() {
        let v = Vocab::build(["b a b", "c b a"], &WhitespaceTokenizer);
        assert_eq!(v.corpus_tokens().collect::<Vec<_>>(), vec!["b", "a", "c"]);
    }

    #[test]
    fn whitespace_round_trip_normalizes() {
        let tok = WhitespaceTokenizer;
        let line = "  the  cat\tsat ";
        assert_eq!(tok.detokenize(&tok.tokenize(line)), "the cat sat");
    }

    #[test]
    fn empty_files_give_no_pairs() {
        let v = vocab_of(&["a"]);
        let r = parallel_from_lines::<&str>(&[], &[], &v, &WhitespaceTokenizer, 10).unwrap();
        assert!(r.pairs.is_empty());
    }

    #[test]
    fn three_lines_keep_order() {
        let v = vocab_of(&["a", "b", "c"]);
        let r = parallel_from_lines(&["a", "b", "c"], &["c", "b", "a"], &v, &WhitespaceTokenizer, 10).unwrap();
        assert_eq!(r.pairs.len(), 3);
        assert_eq!(r.pairs[0].source_ids, vec![LEN, 6]);
        assert_eq!(r.pairs[0].target_ids, vec![8]);
        assert_eq!(r.pairs[2].target_ids, vec![6]);
    }

    #[test]
    fn overlong_target_is_rejected_and_counted() {
        let v = vocab_of(&["a"]);
        let long = vec!["a"; 1001].join(" ");
        let ok = vec!["a"; 1000].join(" ");
        let r = parallel_from_lines(&["a", "a"], &[long.as_str(), ok.as_str()], &v, &WhitespaceTokenizer, 1000)
            .unwrap();
        assert_eq!(r.rejected_too_long, 1);
        assert_eq!(r.pairs.len(), 1);
    }

    #[test]
    fn line_count_mismatch_reports_both_counts() {
        let v = vocab_of(&["a"]);
        let err = parallel_from_lines(&["a", "a"], &["a"], &v, &WhitespaceTokenizer, 10).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn toy_tasks() {
        let cipher = HashMap::new();
        assert_eq!(apply_task(ToyTask::Copy, &["a", "b", "c"], &cipher), vec!["a", "b", "c"]);
        assert_eq!(apply_task(ToyTask::Reverse, &["a", "b", "c"], &cipher), vec!["c", "b", "a"]);
    }

    #[test]
    fn cipher_is_a_bijection() {
        let table = cipher_table(32, 9);
        let mut images: Vec<&String> = table.values().collect();
        images.sort();
        images.dedup();
        assert_eq!(images.len(), 32);
    }

    #[test]
    fn toy_corpus_is_deterministic() {
        let spec = ToyCorpusSpec::new(ToyTask::SubstitutionCipher, 16, 50, 8, 4);
        assert_eq!(gen_toy_corpus(&spec).unwrap(), gen_toy_corpus(&spec).unwrap());
        let other = ToyCorpusSpec { seed: 5, ..spec.clone() };
        assert_ne!(gen_toy_corpus(&spec).unwrap(), gen_toy_corpus(&other).unwrap());
    }

    #[test]
    fn toy_vocab_too_small() {
        assert!(gen_toy_corpus(&ToyCorpusSpec::new(ToyTask::Copy, 7, 1, 3, 0)).is_err());
    }

    fn pair(len: usize) -> SentencePair {
        SentencePair::new(&vec![6; len], vec![6; len])
    }

    #[test]
    fn one_pair_one_batch() {
        let b = make_batches(&[pair(3)], 8, 0).unwrap();
        assert_eq!(b, vec![vec![0]]);
    }

    #[test]
    fn two_fives_fit_in_ten() {
        let b = make_batches(&[pair(5), pair(5)], 10, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 2);
    }

    #[test]
    fn batching_conserves_tokens_and_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<SentencePair> = (0..200).map(|_| pair(rng.gen_range(1..=12))).collect();
        let batches = make_batches(&pairs, 40, 17).unwrap();
        let total: usize = batches.iter().flatten().map(|&i| pairs[i].target_len()).sum();
        assert_eq!(total, pairs.iter().map(SentencePair::target_len).sum::<usize>());
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        for b in &batches {
            let longest = b.iter().map(|&i| pairs[i].target_len()).max().unwrap();
            assert!(b.len() * longest <= 40);
        }
        assert_eq!(batches, make_batches(&pairs, 40, 17).unwrap());
    }

    #[test]
    fn budget_below_longest_is_rejected() {
        assert!(make_batches(&[pair(5)], 4, 0).is_err());
    }

    #[test]
    fn padded_batch_reconstructs_members() {
        let seqs = vec![vec![7, 8, 9], vec![10], vec![11, 12]];
        let p = PaddedBatch::new(&seqs);
        assert_eq!(p.len, 3);
        assert_eq!(p.sequences(), seqs);
        assert_eq!(p.lengths(), vec![3, 1, 2]);
    }
}
