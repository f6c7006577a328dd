use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use reat::config::RunConfig;
use reat::pipeline::{self, Pipeline, Split};

#[derive(Parser)]
#[command(name = "reat", version, about = "Retrieval-enhanced adversarial training for dialogue")]
struct Cli {
    /// Directory holding every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// `paper` or `desk`; defaults to the config file's value, then `desk`.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize, filter and split a corpus; build the vocabulary.
    Prepare { corpus: PathBuf },
    /// Build the retrieval index over the training split.
    BuildIndex,
    /// Retrieve candidates for one split, or all of them.
    Candidates {
        #[arg(long)]
        split: Option<Split>,
    },
    /// Maximum-likelihood pretraining of the generator.
    PretrainGen,
    /// Pretrain a discriminator against generator samples.
    PretrainDisc {
        /// Train the variant that ignores the candidates.
        #[arg(long)]
        no_candidates: bool,
    },
    /// Alternate policy-gradient generator and discriminator updates.
    AdvTrain,
    /// Beam-decode responses for a split.
    Generate {
        /// Generator checkpoint; defaults to the pretrained one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output name: generations-<tag>.jsonl.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Diversity and novelty metrics of generation files.
    Evaluate {
        /// Generation tags to compare.
        #[arg(default_values_t = ["mle".to_string(), "adv".to_string()])]
        tags: Vec<String>,
    },
    /// Accuracy of discriminator checkpoints on the frozen probe.
    DiscAccuracy {
        #[arg(default_values_t = [pipeline::DISC_NO_CANDIDATES.to_string(), pipeline::DISC.to_string()])]
        checkpoints: Vec<String>,
    },
    /// Interactive loop: type a message, get a response and its candidates.
    Chat {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), cli.profile.as_deref(), &cli.overrides)?;
    let p = Pipeline::new(&cli.out, config)?;
    let resolve = |c: Option<PathBuf>, default: &str| c.unwrap_or_else(|| p.path(default));
    match cli.command {
        Command::Prepare { corpus } => {
            let r = p.prepare(&corpus)?;
            println!(
                "kept {} of {} pairs; vocabulary {}; train/valid/test {}/{}/{}",
                r.pairs_kept, r.pairs_read, r.vocab_size, r.train, r.valid, r.test
            );
        }
        Command::BuildIndex => {
            let index = p.build_index()?;
            println!("indexed {} documents", index.doc_count());
        }
        Command::Candidates { split } => {
            let splits = split.map_or(Split::ALL.to_vec(), |s| vec![s]);
            for s in splits {
                let recs = p.candidates(s)?;
                let fallbacks = recs.iter().filter(|r| r.fallback).count();
                println!("{s}: {} messages, {fallbacks} fallbacks", recs.len());
            }
        }
        Command::PretrainGen => {
            let r = p.pretrain_gen()?;
            println!(
                "{} epochs; best epoch {}; final train perplexity {:.3}",
                r.epochs_run,
                r.best_epoch,
                r.train_perplexity.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::PretrainDisc { no_candidates } => {
            let (losses, acc) = p.pretrain_disc(!no_candidates)?;
            println!(
                "final loss {:.4}; probe accuracy {:.2}%",
                losses.last().copied().unwrap_or(f64::NAN),
                100.0 * acc
            );
        }
        Command::AdvTrain => {
            let r = p.adv_train()?;
            for e in &r.epochs {
                println!(
                    "epoch {}: reward {:.4}, disc loss {:.4}, probe accuracy {}",
                    e.epoch,
                    e.reward_mean,
                    e.disc_loss,
                    e.probe_accuracy.map_or("-".into(), |a| format!("{:.2}%", 100.0 * a))
                );
            }
        }
        Command::Generate { checkpoint, split, tag } => {
            let path = resolve(checkpoint, pipeline::GEN);
            let tag = tag.unwrap_or_else(|| {
                match path.file_stem().and_then(|s| s.to_str()) {
                    Some("gen") => "mle".to_string(),
                    Some(stem) => stem.to_string(),
                    None => "out".to_string(),
                }
            });
            let gens = p.generate(&path, split, &tag)?;
            println!("wrote {} responses to {}", gens.len(), p.generations_path(&tag).display());
        }
        Command::Evaluate { tags } => {
            p.evaluate(&tags)?;
            print!("{}", std::fs::read_to_string(p.path(pipeline::METRICS_TXT))?);
        }
        Command::DiscAccuracy { checkpoints } => {
            let paths: Vec<PathBuf> = checkpoints.iter().map(|c| p.path(c)).collect();
            p.disc_accuracy(&paths)?;
            print!("{}", std::fs::read_to_string(p.path("disc-accuracy.txt"))?);
        }
        Command::Chat { checkpoint } => {
            let path = resolve(checkpoint, pipeline::GEN);
            p.chat(&path, BufReader::new(io::stdin().lock()), io::stdout().lock())
                .context("chat")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<reat::Error>().map_or(1, reat::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
