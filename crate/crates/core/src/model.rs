//! Conditional masked language model: a transformer encoder over the source
//! (with a leading [LEN] token) and a decoder attending bidirectionally over
//! a partially masked target.

use std::fmt;
use std::str::FromStr;

use mvsr_tensor::{AttnDims, Graph, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Largest target length; the length classifier has this many classes.
    pub n_max: usize,
    pub dropout_online: f64,
    pub dropout_average: f64,
    pub activation: Activation,
}

impl ModelConfig {
    /// Desk-scale default: width 64, two encoder and two decoder layers.
    pub fn desk(vocab_size: usize, n_max: usize) -> Self {
        ModelConfig {
            d_model: 64,
            d_inner: 256,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            vocab_size,
            n_max,
            dropout_online: 0.3,
            dropout_average: 0.3,
            activation: Activation::Relu,
        }
    }

    /// The small IWSLT-sized configuration (width 256, five layers each).
    pub fn small_preset(vocab_size: usize, n_max: usize) -> Self {
        ModelConfig { d_model: 256, d_inner: 1024, n_layers_enc: 5, n_layers_dec: 5, ..Self::desk(vocab_size, n_max) }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_inner == 0 || self.vocab_size == 0 || self.n_max == 0 {
            return fail("d_inner, vocab_size and n_max must be positive".into());
        }
        for (name, p) in [("dropout_online", self.dropout_online), ("dropout_average", self.dropout_average)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect())
}

fn add_linear<T: Real, R: Rng + ?Sized>(p: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    p.insert(format!("{name}.w"), uniform(&[fan_in, fan_out], limit, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn add_norm<T: Real>(p: &mut ParamStore<T>, name: &str, d: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[d], T::one()));
    p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

fn add_attention<T: Real, R: Rng + ?Sized>(p: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) {
    for proj in ["q", "k", "v", "o"] {
        add_linear(p, &format!("{name}.{proj}"), d, d, rng);
    }
}

fn add_ffn<T: Real, R: Rng + ?Sized>(p: &mut ParamStore<T>, name: &str, d: usize, inner: usize, rng: &mut R) {
    add_linear(p, &format!("{name}.fc1"), d, inner, rng);
    add_linear(p, &format!("{name}.fc2"), inner, d, rng);
}

/// Fresh weights: Xavier-uniform projections, embeddings with variance
/// `1/d_model`, unit layer-norm gains, zero biases.
pub fn init_params<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ParamStore<T> {
    let d = cfg.d_model;
    let emb_limit = (3.0 / d as f64).sqrt();
    let mut p = ParamStore::new();
    p.insert("enc.embed", uniform(&[cfg.vocab_size, d], emb_limit, rng));
    for l in 0..cfg.n_layers_enc {
        add_norm(&mut p, &format!("enc.{l}.ln_attn"), d);
        add_attention(&mut p, &format!("enc.{l}.attn"), d, rng);
        add_norm(&mut p, &format!("enc.{l}.ln_ffn"), d);
        add_ffn(&mut p, &format!("enc.{l}.ffn"), d, cfg.d_inner, rng);
    }
    add_norm(&mut p, "enc.ln", d);
    p.insert("dec.embed", uniform(&[cfg.vocab_size, d], emb_limit, rng));
    for l in 0..cfg.n_layers_dec {
        add_norm(&mut p, &format!("dec.{l}.ln_self"), d);
        add_attention(&mut p, &format!("dec.{l}.self"), d, rng);
        add_norm(&mut p, &format!("dec.{l}.ln_cross"), d);
        add_attention(&mut p, &format!("dec.{l}.cross"), d, rng);
        add_norm(&mut p, &format!("dec.{l}.ln_ffn"), d);
        add_ffn(&mut p, &format!("dec.{l}.ffn"), d, cfg.d_inner, rng);
    }
    add_norm(&mut p, "dec.ln", d);
    add_linear(&mut p, "out", d, cfg.vocab_size, rng);
    add_linear(&mut p, "len", d, cfg.n_max, rng);
    p
}

/// Fixed sinusoidal position encodings for `batch` sequences of `len`.
pub fn sinusoidal<T: Real>(batch: usize, len: usize, d: usize) -> Tensor<T> {
    let mut table = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            table[pos * d + 2 * i] = T::from_f64(angle.sin());
            table[pos * d + 2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        data.extend_from_slice(&table);
    }
    Tensor::new(vec![batch * len, d], data)
}

/// Encoder states for a padded source batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[batch * len, d_model]`
    pub states: Var,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[batch, target_len, vocab_size]`
    pub token_logits: Var,
    /// `[batch, n_max]`; column `j` scores length `j + 1`.
    pub length_logits: Var,
    pub batch: usize,
    pub target_len: usize,
}

/// The CMLM network evaluated with one bound parameter set.
pub struct Cmlm<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a BoundParams,
}

impl<'a> Cmlm<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a BoundParams) -> Self {
        Cmlm { cfg, params }
    }

    fn p(&self, name: &str) -> Var {
        self.params.get(name)
    }

    fn linear<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Var {
        let y = g.matmul(x, self.p(&format!("{name}.w")));
        g.add_row(y, self.p(&format!("{name}.b")))
    }

    fn norm<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Var {
        g.layer_norm(x, self.p(&format!("{name}.g")), self.p(&format!("{name}.b")), LN_EPS)
    }

    fn embed<T: Real>(&self, g: &mut Graph<T>, table: &str, ids: &PaddedBatch) -> Var {
        let d = self.cfg.d_model;
        let idx: Vec<usize> = ids.ids.iter().map(|&i| i as usize).collect();
        let e = g.embed(self.p(table), &idx);
        let e = g.scale(e, T::from_f64((d as f64).sqrt()));
        let pos = g.constant(sinusoidal(ids.batch, ids.len, d));
        g.add(e, pos)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        name: &str,
        x: Var,
        memory: Var,
        dims: AttnDims,
        key_valid: &[bool],
    ) -> Var {
        let q = self.linear(g, x, &format!("{name}.q"));
        let k = self.linear(g, memory, &format!("{name}.k"));
        let v = self.linear(g, memory, &format!("{name}.v"));
        let o = g.attention(q, k, v, dims, key_valid);
        self.linear(g, o, &format!("{name}.o"))
    }

    fn ffn<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Var {
        let h = self.linear(g, x, &format!("{name}.fc1"));
        let h = match self.cfg.activation {
            Activation::Relu => g.relu(h),
            Activation::Gelu => g.gelu(h),
        };
        self.linear(g, h, &format!("{name}.fc2"))
    }

    fn residual<T: Real, R: Rng + ?Sized>(&self, g: &mut Graph<T>, x: Var, branch: Var, dropout: f64, rng: &mut R) -> Var {
        let b = g.dropout(branch, dropout, rng);
        g.add(x, b)
    }

    pub fn encode<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        source: &PaddedBatch,
        dropout: f64,
        rng: &mut R,
    ) -> Encoded {
        let dims = AttnDims { batch: source.batch, q_len: source.len, k_len: source.len, heads: self.cfg.n_heads };
        let x = self.embed(g, "enc.embed", source);
        let mut x = g.dropout(x, dropout, rng);
        for l in 0..self.cfg.n_layers_enc {
            let h = self.norm(g, x, &format!("enc.{l}.ln_attn"));
            let a = self.attention(g, &format!("enc.{l}.attn"), h, h, dims, &source.valid);
            x = self.residual(g, x, a, dropout, rng);
            let h = self.norm(g, x, &format!("enc.{l}.ln_ffn"));
            let f = self.ffn(g, &format!("enc.{l}.ffn"), h);
            x = self.residual(g, x, f, dropout, rng);
        }
        let states = self.norm(g, x, "enc.ln");
        Encoded { states, valid: source.valid.clone(), batch: source.batch, len: source.len }
    }

    /// Length-class logits read from the encoder state at the [LEN] position.
    pub fn length_logits<T: Real>(&self, g: &mut Graph<T>, enc: &Encoded) -> Var {
        let rows: Vec<usize> = (0..enc.batch).map(|b| b * enc.len).collect();
        let h = g.gather_rows(enc.states, &rows);
        self.linear(g, h, "len")
    }

    /// Token logits `[batch * len, vocab]` for a (partially masked) target.
    pub fn decode<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        enc: &Encoded,
        target: &PaddedBatch,
        dropout: f64,
        rng: &mut R,
    ) -> Var {
        assert_eq!(enc.batch, target.batch, "source and target batch sizes differ");
        let heads = self.cfg.n_heads;
        let self_dims = AttnDims { batch: target.batch, q_len: target.len, k_len: target.len, heads };
        let cross_dims = AttnDims { batch: target.batch, q_len: target.len, k_len: enc.len, heads };
        let x = self.embed(g, "dec.embed", target);
        let mut x = g.dropout(x, dropout, rng);
        for l in 0..self.cfg.n_layers_dec {
            let h = self.norm(g, x, &format!("dec.{l}.ln_self"));
            let a = self.attention(g, &format!("dec.{l}.self"), h, h, self_dims, &target.valid);
            x = self.residual(g, x, a, dropout, rng);
            let h = self.norm(g, x, &format!("dec.{l}.ln_cross"));
            let a = self.attention(g, &format!("dec.{l}.cross"), h, enc.states, cross_dims, &enc.valid);
            x = self.residual(g, x, a, dropout, rng);
            let h = self.norm(g, x, &format!("dec.{l}.ln_ffn"));
            let f = self.ffn(g, &format!("dec.{l}.ffn"), h);
            x = self.residual(g, x, f, dropout, rng);
        }
        let h = self.norm(g, x, "dec.ln");
        self.linear(g, h, "out")
    }

    /// Full pass: sources must begin with [LEN]; the target input carries
    /// [MASK] wherever a prediction is wanted.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        source: &PaddedBatch,
        target_input: &PaddedBatch,
        dropout: f64,
        rng: &mut R,
    ) -> ForwardOutput {
        let enc = self.encode(g, source, dropout, rng);
        let length_logits = self.length_logits(g, &enc);
        let logits = self.decode(g, &enc, target_input, dropout, rng);
        let token_logits = g.reshape(logits, &[target_input.batch, target_input.len, self.cfg.vocab_size]);
        ForwardOutput { token_logits, length_logits, batch: target_input.batch, target_len: target_input.len }
    }
}

/// The `k` most probable lengths of one length-logit row with their
/// log-probabilities, most probable first; ties go to the shorter length.
pub fn top_lengths<T: Real>(length_logits: &[T], k: usize) -> Vec<(usize, f64)> {
    assert!(k >= 1, "need at least one length candidate");
    let mx = length_logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + length_logits.iter().map(|x| (x.as_f64() - mx).exp()).sum::<f64>().ln();
    let mut ranked: Vec<(usize, f64)> =
        length_logits.iter().enumerate().map(|(j, x)| (j + 1, x.as_f64() - lse)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// Top-`k` length candidates for every sentence of a forward pass.
pub fn predict_length<T: Real>(g: &Graph<T>, out: &ForwardOutput, k: usize) -> Vec<Vec<(usize, f64)>> {
    let logits = g.value(out.length_logits);
    (0..out.batch).map(|b| top_lengths(logits.row(b), k)).collect()
}
