#![allow(dead_code)]

use mvsr::data::{SentencePair, RESERVED};
use mvsr::masking::{make_dual_batch, DualViewBatch};
use mvsr::model::{init_params, Activation, ModelConfig};
use mvsr::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two encoder and two decoder layers, narrow enough for finite differences.
pub fn tiny_model(vocab_size: usize, n_max: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_inner: 16,
        n_layers_enc: 2,
        n_layers_dec: 2,
        n_heads: 2,
        vocab_size,
        n_max,
        dropout_online: 0.0,
        dropout_average: 0.0,
        activation: Activation::Gelu,
    }
}

pub fn random_pairs(rng: &mut ChaCha8Rng, n: usize, vocab_size: usize, max_len: usize) -> Vec<SentencePair> {
    let lo = RESERVED.len() as u32;
    (0..n)
        .map(|_| {
            let sl = rng.gen_range(1..=max_len);
            let tl = rng.gen_range(1..=max_len);
            let src: Vec<u32> = (0..sl).map(|_| rng.gen_range(lo..vocab_size as u32)).collect();
            let tgt: Vec<u32> = (0..tl).map(|_| rng.gen_range(lo..vocab_size as u32)).collect();
            SentencePair::new(&src, tgt)
        })
        .collect()
}

pub fn random_batch(seed: u64, n: usize, vocab_size: usize, max_len: usize) -> DualViewBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = random_pairs(&mut rng, n, vocab_size, max_len);
    let refs: Vec<&SentencePair> = pairs.iter().collect();
    make_dual_batch(&refs, &mut rng)
}

/// Online weights plus a perturbed copy standing in for the average model.
pub fn online_and_average(cfg: &ModelConfig, seed: u64, spread: f64) -> (ParamStore<f64>, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let online: ParamStore<f64> = init_params(cfg, &mut rng);
    let mut average = online.clone();
    if spread == 0.0 {
        return (online, average);
    }
    for (_, t) in average.iter_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-spread..spread);
        }
    }
    (online, average)
}

pub fn log_softmax_f64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// `(KL(p||q) + KL(q||p)) / 2` by direct summation over probabilities.
pub fn bikl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
    };
    0.5 * (kl(p, q) + kl(q, p))
}

pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    log_softmax_f64(&logits).into_iter().map(f64::exp).collect()
}

/// Plain training loop over `pairs` for `steps` steps; returns the online
/// weights.
pub fn train_briefly(model: &ModelConfig, pairs: &[SentencePair], steps: u64, seed: u64) -> ParamStore<f32> {
    use mvsr::trainer::{train_step, BatchSchedule, TrainConfig, TrainState};
    let cfg = TrainConfig { tokens_per_batch: 256, warmup_steps: 50, peak_lr: 2e-3, seed, ..TrainConfig::default() };
    let mut state = TrainState::<f32>::new(model, seed);
    let mut schedule = BatchSchedule::new(pairs, cfg.tokens_per_batch, seed).expect("batches");
    while state.step < steps {
        let members = schedule.batch(state.step).expect("batch");
        let batch = make_dual_batch(&members, &mut state.rng);
        train_step(&mut state, model, &cfg, &batch, &mut ()).expect("finite loss");
    }
    state.online
}

pub fn small_model(vocab_size: usize, n_max: usize) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        d_inner: 64,
        n_heads: 4,
        dropout_online: 0.0,
        dropout_average: 0.0,
        ..tiny_model(vocab_size, n_max)
    }
}
