//! The training loop: dual masking, four forward passes, the combined
//! objective, an Adam step on the online weights, then the EMA update.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mvsr_tensor::{Graph, Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_file_name, prune_checkpoints, Checkpoint, CheckpointHeader};
use crate::data::{make_batches, Batch, PaddedBatch, SentencePair, Vocab};
use crate::ema::{ema_step, init_average};
use crate::error::{Error, Result};
use crate::losses::{
    length_loss, masked_nll, model_consistency, shared_mask_consistency, total_loss, LossBreakdown, LossConfig,
    LossTerms,
};
use crate::masking::{make_dual_batch, DualViewBatch};
use crate::model::{init_params, Cmlm, ModelConfig};
use crate::optim::{clip_global_norm, lr_at, Adam, AdamConfig};
use crate::params::{BoundParams, ParamStore};

pub const METRICS_FILE: &str = "metrics.log";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Budget on padded target tokens per batch.
    pub tokens_per_batch: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub adam: AdamConfig,
    pub lambda: f64,
    pub label_smoothing: f64,
    pub ema_alpha: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub keep_last_k: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tokens_per_batch: 2048,
            max_steps: 10_000,
            warmup_steps: 4000,
            peak_lr: 5e-4,
            adam: AdamConfig::default(),
            lambda: 0.3,
            label_smoothing: 0.1,
            ema_alpha: 0.996,
            seed: 1,
            checkpoint_interval: 1000,
            keep_last_k: 10,
            clip_norm: 1.0,
            log_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, label_smoothing: self.label_smoothing }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.warmup_steps < 1 {
            return fail("warmup_steps must be at least 1");
        }
        if self.tokens_per_batch < 1 {
            return fail("tokens_per_batch must be positive");
        }
        if self.checkpoint_interval < 1 || self.log_interval < 1 || self.keep_last_k < 1 {
            return fail("checkpoint_interval, log_interval and keep_last_k must be positive");
        }
        if !(self.peak_lr > 0.0) {
            return fail("peak_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return fail("ema_alpha outside [0, 1]");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        self.loss().validate()
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Completed optimizer steps.
    pub step: u64,
    pub online: ParamStore<T>,
    pub average: ParamStore<T>,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    /// Fresh weights drawn from `seed`; the average store starts as a copy.
    pub fn new(model: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = init_params(model, &mut rng);
        let average = init_average(&online);
        let adam = Adam::new(&online);
        TrainState { step: 0, online, average, adam, rng }
    }

    pub fn to_checkpoint(&self, model: &ModelConfig, train: &TrainConfig, vocab: &Vocab) -> Checkpoint<T> {
        Checkpoint {
            header: CheckpointHeader {
                version: crate::checkpoint::VERSION,
                dtype: T::DTYPE.name().to_owned(),
                model: model.clone(),
                train: Some(train.clone()),
                step: self.step,
                rng: Some(self.rng.clone()),
                vocab: vocab.corpus_tokens().map(str::to_owned).collect(),
            },
            online: self.online.clone(),
            average: self.average.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>, path: &Path) -> Result<Self> {
        let missing = |what: &str| Error::Checkpoint { path: path.to_path_buf(), message: format!("no {what} stored; cannot resume") };
        let rng = ck.header.rng.ok_or_else(|| missing("rng state"))?;
        let adam = ck.adam.ok_or_else(|| missing("optimizer state"))?;
        Ok(TrainState { step: ck.header.step, online: ck.online, average: ck.average, adam, rng })
    }
}

/// Tape handles of the full objective for one dual-view batch.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub terms: LossTerms,
    pub total: Var,
    pub forward_passes: usize,
}

fn view_inputs(views: &[crate::masking::MaskedView]) -> PaddedBatch {
    let seqs: Vec<&[u32]> = views.iter().map(|v| v.input_ids.as_slice()).collect();
    PaddedBatch::new(&seqs)
}

/// Builds every loss term on `g`. NLL and length terms are averaged over the
/// sentences of the batch, as are the per-sentence consistency means. The
/// length loss reads the online model's first-view pass.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &ModelConfig,
    online: &BoundParams,
    average: &BoundParams,
    batch: &DualViewBatch,
    loss: &LossConfig,
    rng: &mut R,
) -> Objective {
    assert!(!batch.is_empty(), "empty batch");
    let src = PaddedBatch::new(&batch.sources);
    let in1 = view_inputs(&batch.view1);
    let in2 = view_inputs(&batch.view2);
    let lt = in1.len;

    let on = Cmlm::new(model, online);
    let av = Cmlm::new(model, average);
    let o1 = on.forward(g, &src, &in1, model.dropout_online, rng);
    let o2 = on.forward(g, &src, &in2, model.dropout_online, rng);
    let a1 = av.forward(g, &src, &in1, model.dropout_average, rng);
    let a2 = av.forward(g, &src, &in2, model.dropout_average, rng);

    let lp_o1 = g.log_softmax(o1.token_logits, 2);
    let lp_o2 = g.log_softmax(o2.token_logits, 2);
    let lp_a1 = g.log_softmax(a1.token_logits, 2);
    let lp_a2 = g.log_softmax(a2.token_logits, 2);

    let per_sentence = T::from_f64(1.0 / batch.len() as f64);
    let nll1 = masked_nll(g, lp_o1, &batch.view1, lt, loss.label_smoothing);
    let nll1 = g.scale(nll1, per_sentence);
    let nll2 = masked_nll(g, lp_o2, &batch.view2, lt, loss.label_smoothing);
    let nll2 = g.scale(nll2, per_sentence);
    let (mkl1, mkl2) = model_consistency(g, lp_o1, lp_o2, lp_a1, lp_a2, batch, lt);
    let (skl1, skl2, skl3) = shared_mask_consistency(g, lp_o1, lp_o2, lp_a1, lp_a2, batch, lt);
    let lengths: Vec<usize> = batch.view1.iter().map(|v| v.len()).collect();
    let len = length_loss(g, o1.length_logits, &lengths);
    let len = g.scale(len, per_sentence);

    let terms = LossTerms { nll1, nll2, mkl1, mkl2, skl1, skl2, skl3, len };
    let total = total_loss(g, &terms, loss);
    Objective { terms, total, forward_passes: 4 }
}

/// Called inside [`train_step`] after the optimizer update and before the
/// EMA update.
pub trait StepObserver<T> {
    fn before_ema(&mut self, _state: &TrainState<T>) {}
}

impl<T> StepObserver<T> for () {}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub forward_passes: usize,
}

fn diagnostic(step: u64, batch: &DualViewBatch, breakdown: &LossBreakdown, grad_norm: Option<f64>) -> String {
    let mut s = format!("step {step}\n{}\n", breakdown.record(step));
    if let Some(n) = grad_norm {
        let _ = writeln!(s, "grad_norm={n:?}");
    }
    for i in 0..batch.len() {
        let _ = writeln!(
            s,
            "sentence {i}: source={:?} target={:?} mask1={:?} mask2={:?} shared={:?}",
            batch.sources[i],
            batch.view1[i].original_ids,
            batch.view1[i].masked_positions,
            batch.view2[i].masked_positions,
            batch.shared_positions[i]
        );
    }
    s
}

/// One optimizer step on `batch`. A non-finite loss or gradient aborts
/// before any weights change.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batch: &DualViewBatch,
    observer: &mut dyn StepObserver<T>,
) -> Result<StepOutcome> {
    let loss_cfg = cfg.loss();
    let mut g = Graph::new();
    let online = state.online.bind(&mut g, true);
    let average = state.average.bind(&mut g, false);
    let obj = objective(&mut g, model, &online, &average, batch, &loss_cfg, &mut state.rng);
    let breakdown = obj.terms.breakdown(&g, loss_cfg.lambda);
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step + 1, diagnostic: diagnostic(state.step + 1, batch, &breakdown, None) });
    }
    g.backward(obj.total);
    let mut grads = state.online.gradients(&g, &online);
    drop(g);
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            diagnostic: diagnostic(state.step + 1, batch, &breakdown, Some(grad_norm)),
        });
    }
    let t = state.step + 1;
    let lr = lr_at(t, cfg.warmup_steps, cfg.peak_lr);
    state.adam.step(&mut state.online, &grads, lr, t, &cfg.adam)?;
    observer.before_ema(state);
    ema_step(&mut state.average, &state.online, cfg.ema_alpha)?;
    state.step = t;
    Ok(StepOutcome { breakdown, grad_norm, lr, forward_passes: obj.forward_passes })
}

/// Deterministic batch order: epoch `e` is [`make_batches`] under a seed
/// derived from `(seed, e)`, so the batch for any step can be recomputed
/// after a restart.
pub struct BatchSchedule<'a> {
    pairs: &'a [SentencePair],
    tokens_per_batch: usize,
    seed: u64,
    epoch: Option<u64>,
    batches: Vec<Batch>,
}

impl<'a> BatchSchedule<'a> {
    pub fn new(pairs: &'a [SentencePair], tokens_per_batch: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Invalid("no training pairs".into()));
        }
        let mut s = BatchSchedule { pairs, tokens_per_batch, seed, epoch: None, batches: Vec::new() };
        s.load_epoch(0)?;
        Ok(s)
    }

    fn load_epoch(&mut self, epoch: u64) -> Result<()> {
        if self.epoch != Some(epoch) {
            let seed = self.seed ^ (epoch + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            self.batches = make_batches(self.pairs, self.tokens_per_batch, seed)?;
            self.epoch = Some(epoch);
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches.len()
    }

    /// Pairs of the batch used at 0-based `step`.
    pub fn batch(&mut self, step: u64) -> Result<Vec<&'a SentencePair>> {
        let per_epoch = self.batches.len() as u64;
        self.load_epoch(step / per_epoch)?;
        let pairs = self.pairs;
        Ok(self.batches[(step % per_epoch) as usize].iter().map(|&i| &pairs[i]).collect())
    }
}

/// Keeps the metrics lines up to and including `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines() {
        match LossBreakdown::parse_record(line) {
            Ok((s, _)) if s <= step => {
                kept.push_str(line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub struct TrainOutput<T> {
    pub state: TrainState<T>,
    pub last: Option<LossBreakdown>,
    pub metrics_path: PathBuf,
}

/// Runs steps until `cfg.max_steps`, writing the metrics log and
/// checkpoints into `out_dir`. With `resume`, continues from that checkpoint
/// and drops any metrics recorded after it.
pub fn train<T: Real>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    pairs: &[SentencePair],
    vocab: &Vocab,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutput<T>> {
    model.validate()?;
    cfg.validate()?;
    if let Some(longest) = pairs.iter().map(SentencePair::target_len).max() {
        if longest > model.n_max {
            return Err(Error::Config(format!("n_max {} is below the longest target ({longest})", model.n_max)));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if &ck.header.model != model {
                return Err(Error::Checkpoint { path: path.to_path_buf(), message: "model config differs".into() });
            }
            let state = TrainState::from_checkpoint(ck, path)?;
            truncate_metrics(&metrics_path, state.step)?;
            info!("resuming from step {}", state.step);
            state
        }
        None => {
            if metrics_path.exists() {
                fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            }
            TrainState::new(model, cfg.seed)
        }
    };

    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut schedule = BatchSchedule::new(pairs, cfg.tokens_per_batch, cfg.seed)?;
    let mut last = None;
    while state.step < cfg.max_steps {
        let members = schedule.batch(state.step)?;
        let batch = make_dual_batch(&members, &mut state.rng);
        let outcome = match train_step(&mut state, model, cfg, &batch, &mut ()) {
            Ok(o) => o,
            Err(Error::NonFiniteLoss { step, diagnostic }) => {
                let dump = out_dir.join(format!("nonfinite-step{step}.txt"));
                if let Err(e) = fs::write(&dump, &diagnostic) {
                    warn!("could not write {}: {e}", dump.display());
                }
                return Err(Error::NonFiniteLoss { step, diagnostic });
            }
            Err(e) => return Err(e),
        };
        let step = state.step;
        if step % cfg.log_interval == 0 || step == cfg.max_steps {
            writeln!(metrics, "{}", outcome.breakdown.record(step)).map_err(|e| Error::io(&metrics_path, e))?;
            info!("step {step} lr {:.3e} {}", outcome.lr, outcome.breakdown);
        }
        if step % cfg.checkpoint_interval == 0 || step == cfg.max_steps {
            let path = out_dir.join(checkpoint_file_name(step));
            state.to_checkpoint(model, cfg, vocab).save(&path)?;
            prune_checkpoints(out_dir, cfg.keep_last_k)?;
        }
        last = Some(outcome.breakdown);
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainOutput { state, last, metrics_path })
}
