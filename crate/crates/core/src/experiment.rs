//! Train-and-evaluate helpers for toy-scale runs.

use std::path::{Path, PathBuf};

use mvsr_tensor::Real;

use crate::bleu::{corpus_bleu, BleuReport};
use crate::checkpoint::{average_checkpoints, list_checkpoints, Checkpoint, CheckpointHeader};
use crate::config::{DataSource, RunConfig};
use crate::data::{
    gen_toy_corpus, load_parallel, parallel_from_lines, toy_word, SentencePair, ToyCorpusSpec, Vocab,
    WhitespaceTokenizer,
};
use crate::decode::{mask_predict, DecodeConfig};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::trainer::train;

const DECODE_CHUNK: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: BleuReport,
    /// Share of sentences whose most probable length is the reference length.
    pub length_accuracy: f64,
    /// Share of sentences translated exactly.
    pub exact_match: f64,
    pub sentences: usize,
}

/// Decodes every source of `pairs` and scores against the targets.
pub fn evaluate<T: Real>(
    model: &ModelConfig,
    params: &ParamStore<T>,
    pairs: &[SentencePair],
    vocab: &Vocab,
    cfg: &DecodeConfig,
) -> Result<EvalReport> {
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    let (mut len_ok, mut exact) = (0usize, 0usize);
    for chunk in pairs.chunks(DECODE_CHUNK) {
        let sources: Vec<Vec<u32>> = chunk.iter().map(|p| p.source_ids.clone()).collect();
        for (d, p) in mask_predict(model, params, &sources, cfg)?.into_iter().zip(chunk) {
            len_ok += usize::from(d.candidates[0].length == p.target_len());
            exact += usize::from(d.best.tokens == p.target_ids);
            hyps.push(vocab.decode(&d.best.tokens).into_iter().map(str::to_owned).collect::<Vec<_>>());
            refs.push(vocab.decode(&p.target_ids).into_iter().map(str::to_owned).collect::<Vec<_>>());
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok(EvalReport {
        bleu: corpus_bleu(&hyps, &refs)?,
        length_accuracy: len_ok as f64 / n,
        exact_match: exact as f64 / n,
        sentences: pairs.len(),
    })
}

/// Vocabulary holding exactly the toy words `w0..w{n-1}`.
pub fn toy_vocab(vocab_size: usize) -> Vocab {
    Vocab::from_tokens((0..vocab_size).map(toy_word)).expect("toy words are distinct")
}

/// Generates a toy corpus and encodes it with `vocab`.
pub fn toy_pairs(spec: &ToyCorpusSpec, vocab: &Vocab) -> Result<Vec<SentencePair>> {
    let corpus = gen_toy_corpus(spec)?;
    Ok(parallel_from_lines(&corpus.source, &corpus.target, vocab, &WhitespaceTokenizer, spec.max_len)?.pairs)
}

/// Removes a directory tree if present.
pub fn clear_dir(dir: &Path) -> Result<()> {
    match std::fs::remove_dir_all(dir) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Which weights to decode with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Online,
    Average,
    /// Mean of the online weights of the newest `k` checkpoints.
    CheckpointAverage(usize),
}

/// Loads weights from a checkpoint file or a training directory. For a
/// directory, `Online` and `Average` read the newest checkpoint; for a file,
/// `CheckpointAverage` reduces to that file's online weights.
pub fn load_weights<T: Real>(path: &Path, source: WeightSource) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let all = list_checkpoints(path)?;
        if all.is_empty() {
            return Err(Error::Invalid(format!("no checkpoints in {}", path.display())));
        }
        all.into_iter().map(|(_, p)| p).collect()
    } else {
        vec![path.to_path_buf()]
    };
    match source {
        WeightSource::Online | WeightSource::Average => {
            let ck = Checkpoint::<T>::load(files.last().expect("non-empty"))?;
            let store = if source == WeightSource::Online { ck.online } else { ck.average };
            Ok((ck.header, store))
        }
        WeightSource::CheckpointAverage(k) => {
            if k == 0 {
                return Err(Error::Config("cannot average zero checkpoints".into()));
            }
            average_checkpoints(&files[files.len().saturating_sub(k)..])
        }
    }
}

/// Vocabulary plus encoded training and evaluation pairs.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub vocab: Vocab,
    pub train: Vec<SentencePair>,
    pub eval: Vec<SentencePair>,
}

impl ExperimentData {
    /// Toy corpora share the word list, so train and eval use one fixed
    /// vocabulary; file corpora build it from the training side.
    pub fn load(source: &DataSource, n_max: usize) -> Result<ExperimentData> {
        match source {
            DataSource::Toy { train, eval_pairs, eval_seed } => {
                let vocab = toy_vocab(train.vocab_size);
                let eval_spec = ToyCorpusSpec { n_pairs: *eval_pairs, seed: *eval_seed, noise: 0.0, ..train.clone() };
                Ok(ExperimentData { train: toy_pairs(train, &vocab)?, eval: toy_pairs(&eval_spec, &vocab)?, vocab })
            }
            DataSource::Files { train_src, train_tgt, eval_src, eval_tgt } => {
                let tok = WhitespaceTokenizer;
                let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
                let (s, t) = (read(train_src)?, read(train_tgt)?);
                let vocab = Vocab::build(s.lines().chain(t.lines()), &tok);
                let train = load_parallel(train_src, train_tgt, &vocab, &tok, n_max)?;
                let eval = load_parallel(eval_src, eval_tgt, &vocab, &tok, n_max)?;
                Ok(ExperimentData { vocab, train: train.pairs, eval: eval.pairs })
            }
        }
    }
}

/// Trains `cfg` on `data` into `dir`, then evaluates the average of the
/// last checkpoints (up to `keep_last_k`) once per iteration count.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    data: &ExperimentData,
    dir: &Path,
    iterations: &[usize],
) -> Result<(LossBreakdown, Vec<EvalReport>)> {
    let model = ModelConfig { vocab_size: data.vocab.len(), ..cfg.model.clone() };
    clear_dir(dir)?;
    let out = train::<f32>(&model, &cfg.train, &data.train, &data.vocab, dir, None)?;
    let last = out.last.unwrap_or_default();
    let (_, weights) = load_weights::<f32>(dir, WeightSource::CheckpointAverage(cfg.train.keep_last_k))?;
    let reports = iterations
        .iter()
        .map(|&t| evaluate(&model, &weights, &data.eval, &data.vocab, &DecodeConfig { iterations: t, ..cfg.decode }))
        .collect::<Result<Vec<_>>>()?;
    Ok((last, reports))
}
