use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use desklm::analysis::{attention_dims, ctxwin_stats, run_recipe, CostMode, RecipeSettings};
use desklm::data::{Corpus, TokenMode, Vocab};
use desklm::inference::{
    eval_cached, eval_nonoverlapping, eval_sliding, generate, EvalReport, GenerateOptions,
};
use desklm::kv::KeyValues;
use desklm::model::{checkpoint, ModelConfig, PRESET_VOCAB};
use desklm::training::{append_metrics, load_state, save_state, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "desklm", version, about = "Train, evaluate and analyse small transformer language models")]
#[command(after_help = "Evaluation threads are read from the DESKLM_THREADS environment variable.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value run configuration.
    Train {
        config: PathBuf,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a token stream with a checkpoint.
    Eval {
        checkpoint: PathBuf,
        mode: EvalKind,
        #[arg(long)]
        stride: Option<usize>,
        /// Text to score.
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file; defaults to vocab.txt next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "char")]
        tokenize: TokenMode,
    },
    /// Greedy generation, optionally teacher-forced on a reference text.
    Generate {
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        /// Feed the reference continuation back instead of the predictions.
        #[arg(long)]
        teacher_forced: bool,
        #[arg(long)]
        prompt: Option<String>,
        /// Reference text: its first --prompt-len tokens are the prompt, the
        /// rest is the continuation for teacher forcing.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
        /// Re-encode the context at every step instead of caching.
        #[arg(long)]
        recompute: bool,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "char")]
        tokenize: TokenMode,
    },
    /// Fraction of window positions with at least (or more than) K preceding tokens.
    Ctxwin {
        #[arg(long = "len")]
        len: u64,
        #[arg(long)]
        k: u64,
        /// Count positions with K or more preceding tokens instead of more than K.
        #[arg(long)]
        inclusive: bool,
    },
    /// Attention dimensions and costs of a configuration file or preset.
    Dims {
        /// Config file or one of: desk, long-context, short-cached.
        config: String,
        /// nonoverlapping, cached or generation[:history[:offset]].
        mode: CostMode,
    },
    /// Run a desk-scale sweep and write one CSV row per cell.
    Recipe {
        name: String,
        #[arg(long)]
        corpus: PathBuf,
        /// key=value overrides of the recipe settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Nonoverlapping,
    Sliding,
    Cached,
}

fn read_kv(path: &Path) -> Result<KeyValues> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(KeyValues::parse(&text)?)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let kv = read_kv(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let mode: TokenMode = kv.get_or("tokenize", TokenMode::Char)?;
    let corpus = match kv.raw("corpus") {
        Some(p) => Corpus::from_single_text(
            &read_text(&resolve(base, p))?,
            mode,
            kv.get_or("dev_frac", 0.05)?,
            kv.get_or("test_frac", 0.0)?,
        )?,
        None => {
            let split = |key: &str| -> Result<String> {
                match kv.raw(key) {
                    Some(p) => read_text(&resolve(base, p)),
                    None => Ok(String::new()),
                }
            };
            if kv.raw("train").is_none() {
                bail!("config needs corpus=<file> or train=<file>");
            }
            Corpus::from_splits(&split("train")?, &split("dev")?, &split("test")?, mode, kv.get::<usize>("max_vocab")?)?
        }
    };
    let cfg = TrainConfig::from_key_values(&kv, corpus.vocab.len())?;
    let out = resolve(base, kv.raw("out").unwrap_or("run"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let metrics = kv.raw("metrics").map(|p| resolve(base, p)).unwrap_or_else(|| out.join("metrics.csv"));
    corpus.vocab.save(out.join("vocab.txt"))?;
    fs::write(out.join("config.txt"), cfg.to_key_values().render())?;

    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &corpus, load_state(p)?)?,
        None => Trainer::new(cfg, &corpus)?,
    };
    log::info!(
        "training {} parameters on {} tokens, curriculum {}",
        trainer.model().parameter_count(),
        corpus.train.len(),
        trainer.config().curriculum.render()
    );
    while let Some(m) = trainer.run_epoch(&mut ())? {
        append_metrics(&metrics, std::slice::from_ref(&m))?;
        save_state(out.join("state.bin"), trainer.state())?;
        checkpoint::save(out.join("model.ckpt"), trainer.model())?;
        println!("{}", m.csv_row());
    }
    Ok(())
}

fn vocab_for(checkpoint: &Path, vocab: Option<PathBuf>, mode: TokenMode) -> Result<Vocab> {
    let path = vocab.unwrap_or_else(|| checkpoint.with_file_name("vocab.txt"));
    Vocab::load(&path, mode).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn print_report(r: &EvalReport) {
    println!("{}", EvalReport::csv_header());
    println!("{}", r.csv_row());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Eval {
            checkpoint: ckpt,
            mode,
            stride,
            data,
            vocab,
            tokenize,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let vocab = vocab_for(&ckpt, vocab, tokenize)?;
            let ids = vocab.encode(&read_text(&data)?);
            let report = match mode {
                EvalKind::Nonoverlapping => eval_nonoverlapping(&model, &ids)?,
                EvalKind::Sliding => {
                    let s = stride.context("sliding evaluation needs --stride")?;
                    eval_sliding(&model, &ids, s)?
                }
                EvalKind::Cached => eval_cached(&model, &ids)?,
            };
            print_report(&report);
            Ok(())
        }
        Command::Generate {
            checkpoint: ckpt,
            n,
            teacher_forced,
            prompt,
            data,
            prompt_len,
            recompute,
            vocab,
            tokenize,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let vocab = vocab_for(&ckpt, vocab, tokenize)?;
            let (prompt_ids, reference) = match (&prompt, &data) {
                (Some(p), None) => (vocab.encode(p), Vec::new()),
                (None, Some(d)) => {
                    let ids = vocab.encode(&read_text(d)?);
                    if ids.len() <= prompt_len {
                        bail!("reference text has {} tokens, need more than --prompt-len {prompt_len}", ids.len());
                    }
                    (ids[..prompt_len].to_vec(), ids[prompt_len..].to_vec())
                }
                _ => bail!("give exactly one of --prompt or --data"),
            };
            if teacher_forced && reference.is_empty() {
                bail!("--teacher-forced needs a reference continuation from --data");
            }
            let opts = GenerateOptions {
                cached: !recompute && model.config().use_cache,
                teacher: teacher_forced.then_some(reference.as_slice()),
            };
            let g = generate(&model, &prompt_ids, n, &opts)?;
            println!("{}", vocab.decode(&g.predicted));
            eprintln!(
                "generated {n} tokens, {} attention dot products{}",
                g.dot_products,
                g.teacher_loss
                    .map(|l| format!(", teacher-forced ppl {:.4}", (l / n as f64).exp()))
                    .unwrap_or_default()
            );
            Ok(())
        }
        Command::Ctxwin { len, k, inclusive } => {
            let f = ctxwin_stats(len, k, inclusive)?;
            println!("{f} {:.6}", f.value());
            Ok(())
        }
        Command::Dims { config, mode } => {
            let cfg = match ModelConfig::preset(&config, PRESET_VOCAB) {
                Some(c) => c,
                None => {
                    let kv = read_kv(Path::new(&config))?;
                    let preset: String = kv.get_or("preset", "desk".to_string())?;
                    let base = ModelConfig::preset(&preset, PRESET_VOCAB)
                        .with_context(|| format!("unknown preset {preset:?}"))?;
                    ModelConfig::from_key_values(&kv, &base)?
                }
            };
            let r = attention_dims(&cfg, mode)?;
            println!("mode,dims,attention_dot_products,score_floats_per_layer,parameters");
            println!("{mode},{},{},{},{}", r.dims(), r.dot_products, r.score_floats, r.parameters);
            Ok(())
        }
        Command::Recipe {
            name,
            corpus,
            config,
            out,
        } => {
            let settings = match config {
                Some(p) => RecipeSettings::from_key_values(&read_kv(&p)?)?,
                None => RecipeSettings::default(),
            };
            let table = run_recipe(&name, &read_text(&corpus)?, &settings)?;
            match out {
                Some(p) => fs::write(&p, table.to_csv()).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", table.to_csv()),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
