use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use hashparse::chart::{marginals, TreeFormat};
use hashparse::encoder::{encode, zero_order_scores};
use hashparse::eval::{baselines, decode, evaluate};
use hashparse::selfcheck::{self, SelfCheckConfig};
use hashparse::trainer::{summarize_runs, train};
use hashparse::treebank::{ingest_text, IngestConfig, IngestReport};
use hashparse::{Checkpoint, Corpus, Order, TrainConfig, Vocab};

/// Unsupervised constituency parsing with contrastive bit-level hashing.
#[derive(Parser, Debug)]
#[command(name = "hashparse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a bracketed treebank (gold trees are used for dev F1 only).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overridden by PARSER_SEED when set.
        #[arg(long)]
        seed: Option<u64>,
        /// Independent runs with consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Print one tree per input line (whitespace-tokenized).
    Parse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Brackets)]
        format: Format,
    },
    /// Score a checkpoint against a bracketed test set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Config the checkpoint must have been trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Expected number of code bits.
        #[arg(long)]
        bits: Option<usize>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Show checkpoint metadata, or the chart of one sentence.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sentence: Option<String>,
    },
    /// Run the randomized chart and gradient oracle suites.
    Selfcheck {
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Brackets,
    Codes,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn set_jobs(jobs: usize) {
    // the global pool can only be built once; later calls keep the first size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_split(path: &Path, vocab: Option<&Vocab>) -> Result<(Corpus, usize)> {
    let (sentences, discarded) =
        ingest_text(&read(path)?, &IngestConfig::default()).with_context(|| format!("parsing {}", path.display()))?;
    let vocab = vocab.cloned().unwrap_or_else(|| Vocab::build(&sentences));
    Ok((Corpus::new(sentences, vocab), discarded))
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Train {
            config,
            train: train_path,
            dev,
            out,
            seed,
            seeds,
            jobs,
        } => {
            set_jobs(jobs);
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Ok(v) = std::env::var("PARSER_SEED") {
                cfg.seed = v
                    .parse()
                    .with_context(|| format!("PARSER_SEED `{v}` is not an integer"))?;
            }
            let (corpus, discarded) = load_split(&train_path, None)?;
            let mut report = IngestReport {
                splits: vec![("train".into(), corpus.len())],
                discarded,
                vocab_size: corpus.vocab.len(),
            };
            let dev = match dev {
                Some(p) => {
                    let (d, discarded) = load_split(&p, Some(&corpus.vocab))?;
                    report.splits.push(("dev".into(), d.len()));
                    report.discarded += discarded;
                    Some(d)
                }
                None => None,
            };
            for line in report.to_string().lines() {
                log::info!("{line}");
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let score_on = dev.as_ref().unwrap_or(&corpus);
            let results: Vec<Result<(u64, f64)>> = (0..seeds.max(1))
                .into_par_iter()
                .map(|i| {
                    let mut run_cfg = cfg.clone();
                    run_cfg.seed = cfg.seed + i;
                    let dir = if seeds > 1 {
                        out.join(format!("seed_{}", run_cfg.seed))
                    } else {
                        out.clone()
                    };
                    fs::create_dir_all(&dir)?;
                    let mut metrics = Vec::new();
                    let outcome = train(&corpus, dev.as_ref(), &run_cfg, &mut metrics)?;
                    fs::write(dir.join("metrics.tsv"), metrics)?;
                    outcome.best.save(&dir.join("checkpoint.bin"))?;
                    let f1 = outcome
                        .best_dev_f1
                        .unwrap_or_else(|| evaluate(&outcome.best.params, score_on).mean());
                    log::info!("seed {}: F1 {:.2}", run_cfg.seed, f1 * 100.0);
                    Ok((run_cfg.seed, f1))
                })
                .collect();
            let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
            let summary = summarize_runs(&runs);
            fs::write(out.join("summary.txt"), &summary)?;
            print!("{summary}");
            Ok(true)
        }
        Command::Parse { ckpt, input, format } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let file = fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let format = match format {
                Format::Brackets => TreeFormat::Brackets,
                Format::Codes => TreeFormat::Codes,
            };
            let stdout = io::stdout();
            let mut out = stdout.lock();
            for line in BufReader::new(file).lines() {
                let line = line?;
                let words: Vec<&str> = line.split_whitespace().collect();
                if words.is_empty() {
                    writeln!(out)?;
                    continue;
                }
                let ids: Vec<u32> = words.iter().map(|w| ckpt.vocab.id(w)).collect();
                let tree = decode(&ckpt.params, &ids);
                writeln!(out, "{}", tree.render(&words, format))?;
            }
            Ok(true)
        }
        Command::Eval {
            ckpt,
            test,
            config,
            bits,
            report,
            jobs,
        } => {
            set_jobs(jobs);
            let ckpt = Checkpoint::load(&ckpt)?;
            if config.is_some() || bits.is_some() {
                let mut requested = match config {
                    Some(p) => TrainConfig::load(&p)?,
                    None => ckpt.config.clone(),
                };
                if let Some(b) = bits {
                    requested.bits = b;
                }
                ckpt.check_config(&requested)?;
            }
            let (corpus, discarded) = load_split(&test, Some(&ckpt.vocab))?;
            if corpus.is_empty() {
                bail!("{} holds no usable sentences", test.display());
            }
            let f1 = evaluate(&ckpt.params, &corpus);
            let base = baselines(&corpus);
            let text = f1.to_tsv(Some(&base));
            match report {
                Some(p) => fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            log::info!(
                "{} sentences ({discarded} discarded): F1 {:.2}, right-branching {:.2}",
                corpus.len(),
                f1.mean() * 100.0,
                base.right.mean() * 100.0
            );
            Ok(true)
        }
        Command::Inspect { ckpt, sentence } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            match sentence {
                None => {
                    println!("step\t{}", ckpt.step);
                    println!("config_hash\t{:016x}", ckpt.config_hash);
                    println!("vocab\t{}", ckpt.vocab.len());
                    for (name, t) in ckpt.params.tensors() {
                        println!("param\t{name}\t{}x{}", t.rows(), t.cols());
                    }
                    print!("{}", ckpt.config.to_text());
                }
                Some(s) => {
                    let words: Vec<&str> = s.split_whitespace().collect();
                    if words.is_empty() {
                        bail!("empty sentence");
                    }
                    let ids: Vec<u32> = words.iter().map(|w| ckpt.vocab.id(w)).collect();
                    let mut params = ckpt.params.clone();
                    params.dropout = 0.0;
                    let h = encode(&ids, &params, 0)?;
                    let chart = marginals(&zero_order_scores(&h.h, &params), Order::First);
                    print!("{}", chart.dump(&words));
                    println!("tree: {}", decode(&params, &ids).render(&words, TreeFormat::Codes));
                }
            }
            Ok(true)
        }
        Command::Selfcheck { n, k, trials, seed } => {
            let results = selfcheck::run(&SelfCheckConfig {
                max_n: n,
                max_bits: k,
                trials,
                seed,
            });
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passed();
            }
            Ok(ok)
        }
    }
}
