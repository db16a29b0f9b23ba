//! Terms of the training objective.
//!
//! Token log-probabilities are `[batch, target_len, vocab]` (or any layout
//! whose rows are `b * target_len + position`). Average-model inputs are
//! detached before use, so no gradient ever reaches the average weights.

use std::fmt;

use mvsr_tensor::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::masking::{DualViewBatch, MaskedView};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the five consistency terms (divided by 5 in the total).
    pub lambda: f64,
    /// Label smoothing mass, applied to the token NLL only.
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.3, label_smoothing: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Scalar values of every objective term, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub nll1: f64,
    pub nll2: f64,
    pub mkl1: f64,
    pub mkl2: f64,
    pub skl1: f64,
    pub skl2: f64,
    pub skl3: f64,
    pub len: f64,
    pub total: f64,
}

pub const BREAKDOWN_FIELDS: [&str; 9] = ["nll1", "nll2", "mkl1", "mkl2", "skl1", "skl2", "skl3", "len", "total"];

impl LossBreakdown {
    /// `total = (nll1 + nll2) / 2 + lambda / 5 * (mkl1 + mkl2 + skl1 + skl2 + skl3) + len`.
    /// The 1/5 factor stays even when some consistency terms are zero.
    #[allow(clippy::too_many_arguments)]
    pub fn combine(nll1: f64, nll2: f64, mkl1: f64, mkl2: f64, skl1: f64, skl2: f64, skl3: f64, len: f64, lambda: f64) -> Self {
        let total = 0.5 * (nll1 + nll2) + lambda / 5.0 * (mkl1 + mkl2 + skl1 + skl2 + skl3) + len;
        LossBreakdown { nll1, nll2, mkl1, mkl2, skl1, skl2, skl3, len, total }
    }

    pub fn values(&self) -> [f64; 9] {
        [self.nll1, self.nll2, self.mkl1, self.mkl2, self.skl1, self.skl2, self.skl3, self.len, self.total]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        LossBreakdown {
            nll1: v[0],
            nll2: v[1],
            mkl1: v[2],
            mkl2: v[3],
            skl1: v[4],
            skl2: v[5],
            skl3: v[6],
            len: v[7],
            total: v[8],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// One metrics-log line: `step=<n> nll1=<x> ... total=<x>`. Values use
    /// shortest round-trip formatting, so records are bit-exact.
    pub fn record(&self, step: u64) -> String {
        let mut s = format!("step={step}");
        for (name, v) in BREAKDOWN_FIELDS.iter().zip(self.values()) {
            s.push_str(&format!(" {name}={v:?}"));
        }
        s
    }

    pub fn parse_record(line: &str) -> Result<(u64, LossBreakdown)> {
        let bad = || Error::Invalid(format!("malformed metrics record: {line:?}"));
        let mut step = None;
        let mut vals = [f64::NAN; 9];
        let mut seen = [false; 9];
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            if k == "step" {
                step = Some(v.parse().map_err(|_| bad())?);
            } else if let Some(i) = BREAKDOWN_FIELDS.iter().position(|f| *f == k) {
                vals[i] = v.parse().map_err(|_| bad())?;
                seen[i] = true;
            }
        }
        match step {
            Some(s) if seen.iter().all(|&x| x) => Ok((s, LossBreakdown::from_values(vals))),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.4} | nll {:.4}/{:.4} | mkl {:.4}/{:.4} | skl {:.4}/{:.4}/{:.4} | len {:.4}",
            self.total, self.nll1, self.nll2, self.mkl1, self.mkl2, self.skl1, self.skl2, self.skl3, self.len
        )
    }
}

fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Label-smoothed negative log-likelihood of the masked tokens, summed over
/// all masked positions of all sentences. Observed positions contribute
/// nothing.
pub fn masked_nll<T: Real>(
    g: &mut Graph<T>,
    log_probs: Var,
    views: &[MaskedView],
    target_len: usize,
    label_smoothing: f64,
) -> Var {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, v) in views.iter().enumerate() {
        for &p in &v.masked_positions {
            rows.push(b * target_len + p);
            targets.push(v.original_ids[p] as usize);
        }
    }
    if rows.is_empty() {
        return zero(g);
    }
    let vocab = g.value(log_probs).cols();
    let picked_rows = g.gather_rows(log_probs, &rows);
    let picked = g.pick(picked_rows, &targets);
    let true_w = vec![T::from_f64(-(1.0 - label_smoothing)); rows.len()];
    let nll = g.dot_const(picked, &true_w);
    if label_smoothing == 0.0 {
        return nll;
    }
    let row_sums = g.sum_rows(picked_rows);
    let smooth_w = vec![T::from_f64(-label_smoothing / vocab as f64); rows.len()];
    let smooth = g.dot_const(row_sums, &smooth_w);
    g.add(nll, smooth)
}

/// Row-wise bidirectional KL, `(KL(p||q) + KL(q||p)) / 2`, between two
/// `[n, vocab]` log-distributions. Returns `[n]`.
///
/// Uses the identity `KL(p||q) + KL(q||p) = sum (p - q)(log p - log q)`,
/// which needs no division and is symmetric by construction.
pub fn bikl<T: Real>(g: &mut Graph<T>, logp: Var, logq: Var) -> Var {
    let diff = g.sub(logp, logq);
    let p = g.exp(logp);
    let q = g.exp(logq);
    let dp = g.sub(p, q);
    let prod = g.mul(dp, diff);
    let s = g.sum_rows(prod);
    g.scale(s, T::from_f64(0.5))
}

/// Mean over sentences of the mean bikl over `positions[b]`, comparing rows
/// of `a` and `b`. Sentences with no positions count as zero.
fn mean_bikl<T: Real>(g: &mut Graph<T>, a: Var, b: Var, positions: &[Vec<usize>], target_len: usize) -> Var {
    let batch = positions.len();
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for (s, ps) in positions.iter().enumerate() {
        for &p in ps {
            rows.push(s * target_len + p);
            weights.push(T::from_f64(1.0 / (ps.len() * batch) as f64));
        }
    }
    if rows.is_empty() {
        return zero(g);
    }
    let ra = g.gather_rows(a, &rows);
    let rb = g.gather_rows(b, &rows);
    let per_row = bikl(g, ra, rb);
    g.dot_const(per_row, &weights)
}

/// Online-vs-average consistency on each view's masked positions.
pub fn model_consistency<T: Real>(
    g: &mut Graph<T>,
    online_v1: Var,
    online_v2: Var,
    avg_v1: Var,
    avg_v2: Var,
    batch: &DualViewBatch,
    target_len: usize,
) -> (Var, Var) {
    let avg_v1 = g.detach(avg_v1);
    let avg_v2 = g.detach(avg_v2);
    let ms1: Vec<Vec<usize>> = batch.view1.iter().map(|v| v.masked_positions.clone()).collect();
    let ms2: Vec<Vec<usize>> = batch.view2.iter().map(|v| v.masked_positions.clone()).collect();
    let mkl1 = mean_bikl(g, online_v1, avg_v1, &ms1, target_len);
    let mkl2 = mean_bikl(g, online_v2, avg_v2, &ms2, target_len);
    (mkl1, mkl2)
}

/// Consistency between the two views on positions masked in both, for the
/// online/online, online/average and average/online pairings.
pub fn shared_mask_consistency<T: Real>(
    g: &mut Graph<T>,
    online_v1: Var,
    online_v2: Var,
    avg_v1: Var,
    avg_v2: Var,
    batch: &DualViewBatch,
    target_len: usize,
) -> (Var, Var, Var) {
    let avg_v1 = g.detach(avg_v1);
    let avg_v2 = g.detach(avg_v2);
    let shared = &batch.shared_positions;
    let skl1 = mean_bikl(g, online_v1, online_v2, shared, target_len);
    let skl2 = mean_bikl(g, online_v1, avg_v2, shared, target_len);
    let skl3 = mean_bikl(g, avg_v1, online_v2, shared, target_len);
    (skl1, skl2, skl3)
}

/// Cross-entropy of the length classifier summed over the batch. Lengths
/// are 1-based; column `L - 1` scores length `L`.
pub fn length_loss<T: Real>(g: &mut Graph<T>, length_logits: Var, true_lengths: &[usize]) -> Var {
    let classes = g.value(length_logits).cols();
    for &l in true_lengths {
        assert!(l >= 1 && l <= classes, "target length {l} outside 1..={classes}");
    }
    let logp = g.log_softmax(length_logits, g.shape(length_logits).len() - 1);
    let cols: Vec<usize> = true_lengths.iter().map(|&l| l - 1).collect();
    let picked = g.pick(logp, &cols);
    let s = g.sum(picked);
    g.scale(s, -T::one())
}

/// Tape handles of the eight objective terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub nll1: Var,
    pub nll2: Var,
    pub mkl1: Var,
    pub mkl2: Var,
    pub skl1: Var,
    pub skl2: Var,
    pub skl3: Var,
    pub len: Var,
}

impl LossTerms {
    fn all(&self) -> [Var; 8] {
        [self.nll1, self.nll2, self.mkl1, self.mkl2, self.skl1, self.skl2, self.skl3, self.len]
    }

    /// Reads the term values and combines them in f64.
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, lambda: f64) -> LossBreakdown {
        let v = self.all().map(|t| g.value(t).item().as_f64());
        LossBreakdown::combine(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], lambda)
    }
}

/// The weighted objective on the tape.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &LossTerms, config: &LossConfig) -> Var {
    let nll = g.add(terms.nll1, terms.nll2);
    let nll = g.scale(nll, T::from_f64(0.5));
    let mut kl = g.add(terms.mkl1, terms.mkl2);
    for t in [terms.skl1, terms.skl2, terms.skl3] {
        kl = g.add(kl, t);
    }
    let kl = g.scale(kl, T::from_f64(config.lambda / 5.0));
    let s = g.add(nll, kl);
    g.add(s, terms.len)
}
