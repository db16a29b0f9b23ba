//! Flat `key = value` run configuration covering model, training, decoding
//! and (for sweeps) data settings. `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{ToyCorpusSpec, ToyTask};
use crate::decode::{DecodeConfig, Remask};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Where sweep runs get their sentences from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Toy { train: ToyCorpusSpec, eval_pairs: usize, eval_seed: u64 },
    Files { train_src: PathBuf, train_tgt: PathBuf, eval_src: PathBuf, eval_tgt: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `vocab_size` is filled in from the data when training starts.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToyCorpusSpec { key_seed: 7, ..ToyCorpusSpec::new(ToyTask::SubstitutionCipher, 32, 5000, 12, 1) };
        RunConfig {
            model: ModelConfig::desk(0, 64),
            train: TrainConfig::default(),
            decode: DecodeConfig { iterations: 4, ..DecodeConfig::default() },
            data: DataSource::Toy { train: toy, eval_pairs: 500, eval_seed: 1_000_003 },
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn toy_mut(&mut self, key: &str) -> Result<(&mut ToyCorpusSpec, &mut usize, &mut u64)> {
        if !matches!(self.data, DataSource::Toy { .. }) {
            return Err(Error::Config(format!("{key} conflicts with file-based data settings")));
        }
        match &mut self.data {
            DataSource::Toy { train, eval_pairs, eval_seed } => Ok((train, eval_pairs, eval_seed)),
            DataSource::Files { .. } => unreachable!(),
        }
    }

    fn files_mut(&mut self) -> (&mut PathBuf, &mut PathBuf, &mut PathBuf, &mut PathBuf) {
        if !matches!(self.data, DataSource::Files { .. }) {
            self.data = DataSource::Files {
                train_src: PathBuf::new(),
                train_tgt: PathBuf::new(),
                eval_src: PathBuf::new(),
                eval_tgt: PathBuf::new(),
            };
        }
        match &mut self.data {
            DataSource::Files { train_src, train_tgt, eval_src, eval_tgt } => (train_src, train_tgt, eval_src, eval_tgt),
            DataSource::Toy { .. } => unreachable!(),
        }
    }

    /// Overrides one setting by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "d_inner" => m.d_inner = parse(key, value)?,
            "n_layers_enc" => m.n_layers_enc = parse(key, value)?,
            "n_layers_dec" => m.n_layers_dec = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "n_max" => m.n_max = parse(key, value)?,
            "dropout_online" => m.dropout_online = parse(key, value)?,
            "dropout_average" => m.dropout_average = parse(key, value)?,
            "activation" => m.activation = value.parse()?,
            "tokens_per_batch" => t.tokens_per_batch = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "peak_lr" => t.peak_lr = parse(key, value)?,
            "adam_beta1" => t.adam.beta1 = parse(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "ema_alpha" => t.ema_alpha = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse(key, value)?,
            "keep_last_k" => t.keep_last_k = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "log_interval" => t.log_interval = parse(key, value)?,
            "iterations" => self.decode.iterations = parse(key, value)?,
            "length_candidates" => self.decode.length_candidates = parse(key, value)?,
            "remask" => {
                self.decode.remask = match value {
                    "linear" => Remask::Linear,
                    _ => match value.strip_prefix("threshold:") {
                        Some(p) => Remask::Threshold(parse(key, p)?),
                        None => return Err(Error::Config(format!("remask must be linear or threshold:<p>, got {value:?}"))),
                    },
                }
            }
            "toy_task" => self.toy_mut(key)?.0.task = value.parse()?,
            "toy_vocab_size" => self.toy_mut(key)?.0.vocab_size = parse(key, value)?,
            "toy_pairs" => self.toy_mut(key)?.0.n_pairs = parse(key, value)?,
            "toy_max_len" => self.toy_mut(key)?.0.max_len = parse(key, value)?,
            "toy_seed" => self.toy_mut(key)?.0.seed = parse(key, value)?,
            "toy_key_seed" => self.toy_mut(key)?.0.key_seed = parse(key, value)?,
            "toy_noise" => self.toy_mut(key)?.0.noise = parse(key, value)?,
            "eval_pairs" => *self.toy_mut(key)?.1 = parse(key, value)?,
            "eval_seed" => *self.toy_mut(key)?.2 = parse(key, value)?,
            "data_src" => *self.files_mut().0 = value.into(),
            "data_tgt" => *self.files_mut().1 = value.into(),
            "eval_src" => *self.files_mut().2 = value.into(),
            "eval_tgt" => *self.files_mut().3 = value.into(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Checks everything except the vocabulary size.
    pub fn validate(&self) -> Result<()> {
        ModelConfig { vocab_size: self.model.vocab_size.max(1), ..self.model.clone() }.validate()?;
        self.train.validate()?;
        self.decode.validate()
    }

    /// Serializes back to the file format; parsing the output reproduces
    /// `self` apart from `vocab_size`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("d_model", m.d_model.to_string());
        put("d_inner", m.d_inner.to_string());
        put("n_layers_enc", m.n_layers_enc.to_string());
        put("n_layers_dec", m.n_layers_dec.to_string());
        put("n_heads", m.n_heads.to_string());
        put("n_max", m.n_max.to_string());
        put("dropout_online", format!("{:?}", m.dropout_online));
        put("dropout_average", format!("{:?}", m.dropout_average));
        put("activation", m.activation.to_string());
        put("tokens_per_batch", t.tokens_per_batch.to_string());
        put("max_steps", t.max_steps.to_string());
        put("warmup_steps", t.warmup_steps.to_string());
        put("peak_lr", format!("{:?}", t.peak_lr));
        put("adam_beta1", format!("{:?}", t.adam.beta1));
        put("adam_beta2", format!("{:?}", t.adam.beta2));
        put("adam_eps", format!("{:?}", t.adam.eps));
        put("lambda", format!("{:?}", t.lambda));
        put("label_smoothing", format!("{:?}", t.label_smoothing));
        put("ema_alpha", format!("{:?}", t.ema_alpha));
        put("seed", t.seed.to_string());
        put("checkpoint_interval", t.checkpoint_interval.to_string());
        put("keep_last_k", t.keep_last_k.to_string());
        put("clip_norm", format!("{:?}", t.clip_norm));
        put("log_interval", t.log_interval.to_string());
        put("iterations", self.decode.iterations.to_string());
        put("length_candidates", self.decode.length_candidates.to_string());
        put(
            "remask",
            match self.decode.remask {
                Remask::Linear => "linear".into(),
                Remask::Threshold(p) => format!("threshold:{p:?}"),
            },
        );
        match &self.data {
            DataSource::Toy { train, eval_pairs, eval_seed } => {
                put("toy_task", train.task.to_string());
                put("toy_vocab_size", train.vocab_size.to_string());
                put("toy_pairs", train.n_pairs.to_string());
                put("toy_max_len", train.max_len.to_string());
                put("toy_seed", train.seed.to_string());
                put("toy_key_seed", train.key_seed.to_string());
                put("toy_noise", format!("{:?}", train.noise));
                put("eval_pairs", eval_pairs.to_string());
                put("eval_seed", eval_seed.to_string());
            }
            DataSource::Files { train_src, train_tgt, eval_src, eval_tgt } => {
                put("data_src", train_src.display().to_string());
                put("data_tgt", train_tgt.display().to_string());
                put("eval_src", eval_src.display().to_string());
                put("eval_tgt", eval_tgt.display().to_string());
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let cfg = RunConfig::parse("# comment\nlambda = 0.5\n\nd_model=32 # trailing\nremask = threshold:0.9\ntoy_noise = 0.1\n").unwrap();
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.decode.remask, Remask::Threshold(0.9));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn file_data_round_trip() {
        let cfg = RunConfig::parse("data_src = a.txt\ndata_tgt = b.txt\neval_src = c\neval_tgt = d\n").unwrap();
        assert!(matches!(cfg.data, DataSource::Files { .. }));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(RunConfig::parse("data_src = a\ntoy_pairs = 3\n").is_err());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("lambda").is_err());
        assert!(RunConfig::parse("max_steps = -3").is_err());
    }
}
