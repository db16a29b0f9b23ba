//! Mask-predict decoding over several predicted target lengths.

use std::cmp::Ordering;

use mvsr_tensor::{Graph, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{PaddedBatch, BOS, EOS, LEN, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{top_lengths, Cmlm, Encoded, ModelConfig};
use crate::params::ParamStore;

/// Which positions get re-masked after the first iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Remask {
    /// `ceil(N * (T - t + 1) / T)` lowest-confidence positions at iteration `t`.
    Linear,
    /// Every position whose probability is below the threshold. Decoding
    /// stops early once no position qualifies.
    Threshold(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub iterations: usize,
    pub length_candidates: usize,
    pub remask: Remask,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { iterations: 10, length_candidates: 5, remask: Remask::Linear }
    }
}

impl DecodeConfig {
    pub fn new(iterations: usize, length_candidates: usize) -> Self {
        DecodeConfig { iterations, length_candidates, remask: Remask::Linear }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.length_candidates < 1 {
            return Err(Error::Config("iterations and length_candidates must be at least 1".into()));
        }
        if let Remask::Threshold(p) = self.remask {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("re-mask threshold {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Log-probability of each token when it was last predicted.
    pub token_logprobs: Vec<f64>,
    /// Mean of `token_logprobs`.
    pub score: f64,
}

impl Hypothesis {
    pub fn new(tokens: Vec<u32>, token_logprobs: Vec<f64>) -> Self {
        assert_eq!(tokens.len(), token_logprobs.len());
        let score = if tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            token_logprobs.iter().sum::<f64>() / tokens.len() as f64
        };
        Hypothesis { tokens, token_logprobs, score }
    }
}

/// Number of positions re-predicted at 1-based iteration `t` of `total`.
pub fn remask_count(n: usize, t: usize, total: usize) -> usize {
    assert!(t >= 1 && t <= total, "iteration {t} outside 1..={total}");
    (n * (total - t + 1)).div_ceil(total)
}

fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Highest score; ties go to the shorter, then lexicographically smaller
/// token sequence.
pub fn select_candidate(hypotheses: &[Hypothesis]) -> Result<&Hypothesis> {
    hypotheses.iter().min_by(|a, b| better(a, b)).ok_or_else(|| Error::Invalid("no hypotheses to select from".into()))
}

/// State of one length candidate after an iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    pub iteration: usize,
    /// Positions predicted in this iteration (all positions at the first).
    pub predicted: Vec<usize>,
    pub tokens: Vec<u32>,
    pub confidences: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateTrace {
    pub length: usize,
    pub length_logprob: f64,
    pub iterations: Vec<IterationTrace>,
    pub hypothesis: Hypothesis,
}

/// Result for one source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub best: Hypothesis,
    pub candidates: Vec<CandidateTrace>,
}

fn never_emitted(id: usize) -> bool {
    [PAD, MASK, LEN, BOS, EOS].contains(&(id as u32))
}

/// Translates a batch of sources (each starting with [LEN]). Dropout is off
/// and nothing is sampled, so the output is a function of the inputs.
pub fn mask_predict<T: Real>(
    model: &ModelConfig,
    params: &ParamStore<T>,
    sources: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>> {
    cfg.validate()?;
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(bad) = sources.iter().position(|s| s.first() != Some(&LEN)) {
        return Err(Error::Invalid(format!("source {bad} does not start with [LEN]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let src = PaddedBatch::new(sources);
    let d = model.d_model;

    let (enc_states, length_rows) = {
        let mut g = Graph::<T>::new();
        let bound = params.bind(&mut g, false);
        let net = Cmlm::new(model, &bound);
        let enc = net.encode(&mut g, &src, 0.0, &mut rng);
        let ll = net.length_logits(&mut g, &enc);
        let rows: Vec<Vec<T>> = (0..src.batch).map(|b| g.value(ll).row(b).to_vec()).collect();
        (g.value(enc.states).clone(), rows)
    };

    struct Cand {
        sentence: usize,
        length: usize,
        length_logprob: f64,
        tokens: Vec<u32>,
        conf: Vec<f64>,
        trace: Vec<IterationTrace>,
        done: bool,
    }
    let k = cfg.length_candidates.min(model.n_max);
    let mut cands: Vec<Cand> = Vec::new();
    for (s, row) in length_rows.iter().enumerate() {
        for (length, lp) in top_lengths(row, k) {
            cands.push(Cand {
                sentence: s,
                length,
                length_logprob: lp,
                tokens: vec![MASK; length],
                conf: vec![f64::NEG_INFINITY; length],
                trace: Vec::new(),
                done: false,
            });
        }
    }

    // Encoder rows replicated per candidate.
    let ls = src.len;
    let mut states = Vec::with_capacity(cands.len() * ls * d);
    let mut valid = Vec::with_capacity(cands.len() * ls);
    for c in &cands {
        let r = c.sentence * ls;
        states.extend_from_slice(&enc_states.data()[r * d..(r + ls) * d]);
        valid.extend_from_slice(&src.valid[r..r + ls]);
    }
    let states = Tensor::new(vec![cands.len() * ls, d], states);

    for t in 1..=cfg.iterations {
        // Which positions each candidate re-predicts this round.
        let mut predict: Vec<Vec<usize>> = Vec::with_capacity(cands.len());
        for c in cands.iter_mut() {
            let n = c.length;
            let chosen: Vec<usize> = if t == 1 {
                (0..n).collect()
            } else if c.done {
                Vec::new()
            } else {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| c.conf[a].total_cmp(&c.conf[b]).then(a.cmp(&b)));
                let count = match cfg.remask {
                    Remask::Linear => remask_count(n, t, cfg.iterations),
                    Remask::Threshold(p) => {
                        let cut = p.ln();
                        order.iter().take_while(|&&i| c.conf[i] < cut).count()
                    }
                };
                let mut pick = order[..count].to_vec();
                pick.sort_unstable();
                pick
            };
            if t > 1 && chosen.is_empty() {
                c.done = true;
            }
            for &p in &chosen {
                c.tokens[p] = MASK;
            }
            predict.push(chosen);
        }
        if predict.iter().all(Vec::is_empty) {
            break;
        }

        let inputs: Vec<&[u32]> = cands.iter().map(|c| c.tokens.as_slice()).collect();
        let tgt = PaddedBatch::new(&inputs);
        let mut g = Graph::<T>::new();
        let bound = params.bind(&mut g, false);
        let net = Cmlm::new(model, &bound);
        let enc = Encoded { states: g.constant(states.clone()), valid: valid.clone(), batch: cands.len(), len: ls };
        let logits = net.decode(&mut g, &enc, &tgt, 0.0, &mut rng);
        let lp = g.log_softmax(logits, 1);
        let lp = g.value(lp);

        for (ci, c) in cands.iter_mut().enumerate() {
            for &p in &predict[ci] {
                let row = lp.row(ci * tgt.len + p);
                let (best, score) = row
                    .iter()
                    .enumerate()
                    .filter(|(id, _)| !never_emitted(*id))
                    .fold((0usize, f64::NEG_INFINITY), |acc, (id, v)| {
                        let v = v.as_f64();
                        if v > acc.1 {
                            (id, v)
                        } else {
                            acc
                        }
                    });
                c.tokens[p] = best as u32;
                c.conf[p] = score;
            }
            if !predict[ci].is_empty() {
                c.trace.push(IterationTrace {
                    iteration: t,
                    predicted: predict[ci].clone(),
                    tokens: c.tokens.clone(),
                    confidences: c.conf.clone(),
                });
            }
        }
    }

    let mut out: Vec<Decoded> = (0..sources.len()).map(|_| Decoded { best: Hypothesis::new(vec![], vec![]), candidates: vec![] }).collect();
    for c in cands {
        let hypothesis = Hypothesis::new(c.tokens, c.conf);
        out[c.sentence].candidates.push(CandidateTrace {
            length: c.length,
            length_logprob: c.length_logprob,
            iterations: c.trace,
            hypothesis,
        });
    }
    for d in &mut out {
        let hyps: Vec<Hypothesis> = d.candidates.iter().map(|c| c.hypothesis.clone()).collect();
        d.best = select_candidate(&hyps)?.clone();
    }
    Ok(out)
}

/// [`mask_predict`] over `sources` in chunks of `chunk` sentences, returning
/// only the selected hypotheses.
pub fn translate_all<T: Real>(
    model: &ModelConfig,
    params: &ParamStore<T>,
    sources: &[Vec<u32>],
    cfg: &DecodeConfig,
    chunk: usize,
) -> Result<Vec<Hypothesis>> {
    let mut out = Vec::with_capacity(sources.len());
    for part in sources.chunks(chunk.max(1)) {
        out.extend(mask_predict(model, params, part, cfg)?.into_iter().map(|d| d.best));
    }
    Ok(out)
}
