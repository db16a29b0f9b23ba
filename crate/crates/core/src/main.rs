use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use mvsr::ablation::{run_ablation, Grid};
use mvsr::bleu::corpus_bleu_lines;
use mvsr::checkpoint::Checkpoint;
use mvsr::config::RunConfig;
use mvsr::data::{gen_toy_corpus, load_parallel, SentencePair, ToyCorpusSpec, ToyTask, Tokenizer, Vocab, WhitespaceTokenizer};
use mvsr::decode::{translate_all, DecodeConfig};
use mvsr::experiment::{load_weights, WeightSource};
use mvsr::model::ModelConfig;
use mvsr::trainer::train;

#[derive(Parser)]
#[command(name = "mvsr", version, about = "Non-autoregressive translation with multi-view subset regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a parallel corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_src: PathBuf,
        #[arg(long)]
        data_tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate one sentence per line with mask-predict.
    Translate {
        /// Checkpoint file, or a training directory whose newest checkpoints
        /// are averaged.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 5)]
        length_candidates: usize,
        /// Decode with the EMA weights instead of the online weights.
        #[arg(long, conflicts_with = "online")]
        use_average_model: bool,
        /// With a directory, use the newest online weights instead of averaging.
        #[arg(long)]
        online: bool,
        /// Number of checkpoints averaged when --ckpt is a directory.
        #[arg(long, default_value_t = 10)]
        average_last: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Sweep lambda, dropout_average or iterations one at a time.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic parallel corpus.
    GenToy {
        #[arg(long, default_value = "substitution-cipher")]
        task: ToyTask,
        #[arg(long, default_value_t = 32)]
        vocab_size: usize,
        #[arg(long, default_value_t = 5000)]
        pairs: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Cipher key; defaults to --seed.
        #[arg(long)]
        key_seed: Option<u64>,
        /// Probability of replacing each target token with a random word.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out_src: PathBuf,
        #[arg(long)]
        out_tgt: PathBuf,
    },
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn cmd_train(config: &Path, src: &Path, tgt: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    let tok = WhitespaceTokenizer;
    let vocab = match resume {
        Some(ck) => Vocab::from_tokens(Checkpoint::<f32>::load(ck)?.header.vocab)?,
        None => {
            let lines = read_lines(src)?.into_iter().chain(read_lines(tgt)?).collect::<Vec<_>>();
            Vocab::build(lines.iter().map(String::as_str), &tok)
        }
    };
    let report = load_parallel(src, tgt, &vocab, &tok, cfg.model.n_max)?;
    if report.rejected_too_long > 0 {
        warn!("skipped {} pairs with targets longer than n_max = {}", report.rejected_too_long, cfg.model.n_max);
    }
    if report.rejected_empty > 0 {
        warn!("skipped {} pairs with an empty side", report.rejected_empty);
    }
    let model = ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    vocab.save(&out.join("vocab.txt"))?;
    fs::write(out.join("config.txt"), cfg.to_text()).context("writing resolved config")?;
    info!("{} pairs, vocabulary {}", report.pairs.len(), vocab.len());
    let result = train::<f32>(&model, &cfg.train, &report.pairs, &vocab, out, resume)?;
    if let Some(last) = result.last {
        println!("step {} {}", result.state.step, last);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_translate(
    ckpt: &Path,
    input: &Path,
    iterations: usize,
    length_candidates: usize,
    use_average: bool,
    online: bool,
    average_last: usize,
    output: Option<&Path>,
) -> Result<()> {
    let source = if use_average {
        WeightSource::Average
    } else if online || !ckpt.is_dir() {
        WeightSource::Online
    } else {
        WeightSource::CheckpointAverage(average_last)
    };
    let (header, weights) = load_weights::<f32>(ckpt, source)?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    let tok = WhitespaceTokenizer;
    let lines = read_lines(input)?;
    let sources: Vec<Vec<u32>> = lines
        .iter()
        .map(|l| SentencePair::new(&vocab.encode(&tok.tokenize(l)), Vec::new()).source_ids)
        .collect();
    let cfg = DecodeConfig::new(iterations, length_candidates);
    let start = Instant::now();
    let hyps = translate_all(&header.model, &weights, &sources, &cfg, 64)?;
    let secs = start.elapsed().as_secs_f64();
    let mut sink: Box<dyn Write> = match output {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = BufWriter::new(&mut sink);
    for h in &hyps {
        writeln!(w, "{}", tok.detokenize(&vocab.decode(&h.tokens)))?;
    }
    w.flush()?;
    eprintln!("{} sentences in {:.2}s ({:.1} sentences/s)", hyps.len(), secs, hyps.len() as f64 / secs.max(1e-9));
    Ok(())
}

fn cmd_eval(hyp: &Path, reference: &Path) -> Result<()> {
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    println!("{}", corpus_bleu_lines(&h, &r)?);
    Ok(())
}

fn cmd_ablate(grid: &Path, config: &Path, out: &Path) -> Result<()> {
    let grid = Grid::load(grid)?;
    let base = RunConfig::load(config)?;
    let tables = run_ablation(&grid, &base, out)?;
    for t in &tables {
        println!("{}", t.to_csv());
    }
    let failed = tables.iter().flat_map(|t| &t.rows).filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        bail!("{failed} grid point(s) failed; see the status column");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, data_src, data_tgt, out, resume } => {
            cmd_train(&config, &data_src, &data_tgt, &out, resume.as_deref())
        }
        Command::Translate { ckpt, input, iterations, length_candidates, use_average_model, online, average_last, output } => {
            cmd_translate(&ckpt, &input, iterations, length_candidates, use_average_model, online, average_last, output.as_deref())
        }
        Command::Eval { hyp, reference } => cmd_eval(&hyp, &reference),
        Command::Ablate { grid, config, out } => cmd_ablate(&grid, &config, &out),
        Command::GenToy { task, vocab_size, pairs, max_len, seed, key_seed, noise, out_src, out_tgt } => {
            let spec = ToyCorpusSpec {
                key_seed: key_seed.unwrap_or(seed),
                noise,
                ..ToyCorpusSpec::new(task, vocab_size, pairs, max_len, seed)
            };
            gen_toy_corpus(&spec)?.write(&out_src, &out_tgt)?;
            Ok(())
        }
    }
}
