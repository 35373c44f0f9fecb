//! Command-line front end. `run` takes the argument list and an output sink
//! so tests can drive it in-process.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use super::{beam_search, greedy_generate, load_checkpoint, quantized_infer, save_checkpoint, SearchConfig};
use crate::attention::{dense_attention_counted, field_attention_counted, make_attention_field, WorkCounter};
use crate::config::Config;
use crate::ctx::Ctx;
use crate::efficient::{kernelized_attention_counted, FeatureMap};
use crate::embedding::{Vocab, CLS};
use crate::error::{Error, Result};
use crate::model::{field_text, parse_field, Architecture, Model, ModelConfig, Pooling};
use crate::oracles::{run_family, run_oracle_suite, OracleReport, Tolerances, FAMILIES};
use crate::tensor::{Rng, Tape, Tensor};
use crate::train::{corpus_sequences, make_batches, TrainConfig, Trainer};

/// The training text used when `train` gets no `--corpus`.
pub const BUNDLED_CORPUS: &str = include_str!("../../data/moby_dick.txt");

#[derive(Parser, Debug)]
#[command(name = "xformer", version, about = "Train, run and check small Transformer models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolArg {
    Mean,
    Cls,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a character-level decoder-only model and save a checkpoint.
    Train {
        /// Plain-text corpus; the bundled one when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// `key: value` file with model.* and train.* keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV of step, lr, loss, tokens/s.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Overrides train.max_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Continue a prompt with greedy or beam search.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        /// Source text for encoder-decoder checkpoints.
        #[arg(long)]
        source: Option<String>,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Greedy decoding with b-bit integer matmuls.
        #[arg(long)]
        quant_bits: Option<u32>,
    },
    /// Print the pooled sentence vector of a text.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value_t = PoolArg::Mean)]
        pooling: PoolArg,
    },
    /// Log-likelihood of a text under a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        source: Option<String>,
    },
    /// Multiply-adds and wall time of attention variants as n grows.
    Bench {
        /// Comma list of dense, linear, or field patterns such as window:16.
        #[arg(long, default_value = "dense,linear,window:16")]
        variants: String,
        #[arg(long, default_value = "128,256,512,1024")]
        lengths: String,
        #[arg(long, default_value_t = 32)]
        d: usize,
    },
    /// Print a checkpoint's configuration and parameter counts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the reference checks and print a CSV report.
    Oracle {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Run one family only.
        #[arg(long)]
        family: Option<String>,
        /// List the family names and exit.
        #[arg(long)]
        list: bool,
    },
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// results to `out`. Returns an error for bad arguments as well.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    match cli.cmd {
        Cmd::Train {
            corpus,
            config,
            out: path,
            metrics,
            steps,
        } => train(corpus, config, path, metrics, steps, out),
        Cmd::Generate {
            checkpoint,
            prompt,
            source,
            max_len,
            beam,
            alpha,
            quant_bits,
        } => {
            let (model, vocab) = load_checkpoint(&checkpoint)?;
            let src = source.map(|s| vocab.encode_chars(&s));
            let prompt_ids = vocab.encode_chars(&prompt);
            let cfg = SearchConfig {
                beam,
                max_len,
                alpha,
                ..SearchConfig::default()
            };
            let ids = match (quant_bits, beam) {
                (Some(b), _) => quantized_infer(&model, src.as_deref(), &prompt_ids, b, &cfg)?,
                (None, 1) => greedy_generate(&model, src.as_deref(), &prompt_ids, &cfg)?,
                (None, _) => beam_search(&model, src.as_deref(), &prompt_ids, &cfg)?
                    .into_iter()
                    .next()
                    .map(|h| h.tokens)
                    .unwrap_or_default(),
            };
            writeln!(out, "{prompt}{}", vocab.decode(&ids))?;
            Ok(())
        }
        Cmd::Encode { checkpoint, text, pooling } => {
            let (model, vocab) = load_checkpoint(&checkpoint)?;
            let mut ids = vocab.encode_chars(&text);
            let mode = match pooling {
                PoolArg::Mean => Pooling::Mean,
                PoolArg::Cls => {
                    ids.insert(0, CLS);
                    Pooling::Cls
                }
            };
            let tape = Tape::inference();
            let v = model.embed_text(&Ctx::new(&tape, &model.store), &ids, mode)?;
            let cells: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(out, "{}", cells.join(","))?;
            Ok(())
        }
        Cmd::Score { checkpoint, text, source } => {
            let (model, vocab) = load_checkpoint(&checkpoint)?;
            let src = source.map(|s| vocab.encode_chars(&s));
            let y = vocab.encode_chars(&text);
            let tape = Tape::inference();
            let lp = model.sequence_logprob(&Ctx::new(&tape, &model.store), src.as_deref(), &y)?;
            writeln!(out, "logprob {lp:.6}  tokens {}  per-token {:.6}", y.len(), lp / y.len().max(1) as f64)?;
            Ok(())
        }
        Cmd::Bench { variants, lengths, d } => bench(&variants, &lengths, d, out),
        Cmd::Inspect { checkpoint } => {
            let (model, vocab) = load_checkpoint(&checkpoint)?;
            write!(out, "{}", model.cfg.to_config().to_text())?;
            let total: usize = model.store.ids().map(|id| model.store.get(id).len()).sum();
            writeln!(out, "# vocabulary {} tokens, {} tensors, {total} parameters", vocab.len(), model.store.len())?;
            for id in model.store.ids() {
                let t = model.store.get(id);
                writeln!(out, "# {} {}x{}", model.store.name(id), t.rows(), t.cols())?;
            }
            Ok(())
        }
        Cmd::Oracle { seed, family, list } => {
            if list {
                for (name, _) in FAMILIES {
                    writeln!(out, "{name}")?;
                }
                return Ok(());
            }
            let tol = Tolerances::default();
            let reports = match family {
                Some(f) => vec![run_family(&f, seed, &tol)?],
                None => run_oracle_suite(seed, &tol)?,
            };
            writeln!(out, "{}", OracleReport::CSV_HEADER)?;
            for r in &reports {
                writeln!(out, "{}", r.csv_row())?;
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} of {} oracle families failed", reports.len())));
            }
            Ok(())
        }
    }
}

fn train(corpus: Option<PathBuf>, config: Option<PathBuf>, path: PathBuf, metrics: Option<PathBuf>, steps: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let text = match corpus {
        Some(p) => std::fs::read_to_string(p)?,
        None => BUNDLED_CORPUS.to_string(),
    };
    let vocab = Vocab::from_chars(&text);
    let mut c = match config {
        Some(p) => Config::from_file(&p)?,
        None => Config::default(),
    };
    c.set("model.vocab", vocab.len());
    let mcfg = ModelConfig::from_config(&c)?;
    if mcfg.arch != Architecture::DecoderOnly {
        return Err(Error::Config("the train command builds character language models; set model.arch: decoder-only".into()));
    }
    let mut tcfg = TrainConfig::from_config(&c)?;
    if let Some(s) = steps {
        tcfg.max_steps = s;
    }
    tcfg.metrics = metrics;
    let mut model = Model::<f32>::new(mcfg, tcfg.seed)?;
    let seqs = corpus_sequences(&vocab.encode_chars(&text), tcfg.seq_len);
    let mut batches = make_batches(&seqs, tcfg.batch_size, tcfg.sort_window, Rng::new(tcfg.seed))?;
    let mut trainer = Trainer::new(tcfg)?;
    let report = trainer.run(&mut model, &mut batches, Some(&vocab))?;
    save_checkpoint(&model, &vocab, &path)?;
    writeln!(
        out,
        "trained {} steps in {:.1}s; last-50 mean loss {:.4}; saved {}",
        report.losses.len(),
        report.seconds,
        report.tail_loss(50),
        path.display()
    )?;
    Ok(())
}

fn bench(variants: &str, lengths: &str, d: usize, out: &mut dyn Write) -> Result<()> {
    let lengths: Vec<usize> = lengths
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad length '{s}'"))))
        .collect::<Result<_>>()?;
    writeln!(out, "variant,n,madds,seconds")?;
    let mut rng = Rng::new(17);
    for v in variants.split(',').map(str::trim) {
        let field = match v {
            "dense" | "linear" => None,
            f => Some(parse_field(f)?),
        };
        for &n in &lengths {
            let q = Tensor::<f64>::gaussian(n, d, 1.0, &mut rng);
            let k = Tensor::<f64>::gaussian(n, d, 1.0, &mut rng);
            let val = Tensor::<f64>::gaussian(n, d, 1.0, &mut rng);
            let mut counter = WorkCounter::default();
            let t0 = Instant::now();
            match &field {
                None if v == "dense" => drop(dense_attention_counted(&q, &k, &val, &mut counter)?),
                None => drop(kernelized_attention_counted(&q, &k, &val, FeatureMap::EluPlusOne, &mut counter)?),
                Some(f) => {
                    let af = make_attention_field(f, n, true)?;
                    drop(field_attention_counted(&q, &k, &val, &af, &mut counter)?)
                }
            }
            let name = field.as_ref().map_or(v.to_string(), field_text);
            writeln!(out, "{name},{n},{},{:.6}", counter.madds, t0.elapsed().as_secs_f64())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_ok(args: &[&str]) -> String {
        let mut buf = Vec::new();
        run(args.iter().copied(), &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn bench_csv_shape() {
        let s = run_ok(&["xformer", "bench", "--variants", "dense,linear,window:4", "--lengths", "8,16", "--d", "4"]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "variant,n,madds,seconds");
        assert_eq!(lines.len(), 7);
        // dense: n² score dots plus n² value rows, d each.
        assert!(lines[1].starts_with(&format!("dense,8,{}", 2 * 64 * 4)));
    }

    #[test]
    fn bad_arguments_are_errors() {
        let mut buf = Vec::new();
        assert!(run(["xformer", "frobnicate"], &mut buf).is_err());
        assert!(run(["xformer", "bench", "--lengths", "x"], &mut buf).is_err());
    }

    #[test]
    fn help_is_not_an_error() {
        assert!(run_ok(&["xformer", "train", "--help"]).contains("--corpus"));
    }

    #[test]
    fn lists_oracles() {
        let s = run_ok(&["xformer", "oracle", "--list"]);
        assert_eq!(s.lines().count(), FAMILIES.len());
    }
}
