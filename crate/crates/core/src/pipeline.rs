//! File-based end-to-end workflow. Every stage reads its inputs from and
//! writes its outputs to one output directory, so stages can run as separate
//! processes.
//!
//! Layout of the output directory:
//!
//! | file | written by |
//! |------|-----------|
//! | `run-config.toml` | every stage |
//! | `vocab.txt`, `splits/{train,valid,test}.jsonl` | [`Pipeline::prepare`] |
//! | `index.bin` | [`Pipeline::build_index`] |
//! | `candidates-{split}.jsonl` | [`Pipeline::candidates`] |
//! | `gen.bin`, `logs/pretrain-gen.jsonl` | [`Pipeline::pretrain_gen`] |
//! | `disc.bin` or `disc-nocand.bin`, `probe.jsonl` | [`Pipeline::pretrain_disc`] |
//! | `ckpt-epoch<k>.bin`, `adv.bin`, `logs/adv-train.jsonl` | [`Pipeline::adv_train`] |
//! | `generations-<tag>.jsonl` | [`Pipeline::generate`] |
//! | `metrics.json`, `metrics.txt` | [`Pipeline::evaluate`] |
//! | `disc-accuracy.json`, `disc-accuracy.txt` | [`Pipeline::disc_accuracy`] |

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{
    filter_short, pairs_to_records, read_corpus, records_to_pairs, split_by_message, tokenize,
    write_corpus, Encoder, Pair, TextPair, TrainingExample, Utterance, Vocabulary,
};
use crate::discriminator::{DiscExample, Discriminator};
use crate::error::{Error, Result};
use crate::evaluation::{disc_accuracy, training_responses, MetricsReport, ProbeSet};
use crate::generator::Generator;
use crate::retrieval::{read_candidates, write_candidates, CandidateRecord, Index};
use crate::training::{
    adversarial_train, pretrain_discriminator, pretrain_generator, AdversarialReport,
    GeneratorNegatives, PretrainReport, TrainLog,
};

pub const VOCAB: &str = "vocab.txt";
pub const INDEX: &str = "index.bin";
pub const GEN: &str = "gen.bin";
pub const DISC: &str = "disc.bin";
pub const DISC_NO_CANDIDATES: &str = "disc-nocand.bin";
pub const ADV: &str = "adv.bin";
pub const PROBE: &str = "probe.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}; expected train, valid or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrepareReport {
    pub pairs_read: usize,
    pub pairs_kept: usize,
    pub vocab_size: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// One line of a generation dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub message: String,
    pub candidates: Vec<String>,
    pub response: String,
    /// Summed log-probability of the beam hypothesis.
    pub logprob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub checkpoint: String,
    pub use_candidates: bool,
    pub accuracy: f64,
}

/// Reply produced for one chat turn.
#[derive(Clone, Debug, PartialEq)]
pub struct ChatReply {
    pub response: String,
    pub candidates: Vec<String>,
    pub fallback: bool,
}

/// The workflow bound to one output directory and configuration.
pub struct Pipeline {
    pub out: PathBuf,
    pub config: RunConfig,
}

fn words(text: &str) -> Vec<String> {
    tokenize(text, false)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path.display(), format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path)?;
    Checkpoint::load(path)
}

impl Pipeline {
    pub fn new(out: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        let out = out.into();
        fs::create_dir_all(&out)?;
        let p = Pipeline { out, config };
        fs::write(p.path("run-config.toml"), p.config.to_toml()?)?;
        Ok(p)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn split_path(&self, split: Split) -> PathBuf {
        self.out.join("splits").join(format!("{split}.jsonl"))
    }

    pub fn candidates_path(&self, split: Split) -> PathBuf {
        self.path(&format!("candidates-{split}.jsonl"))
    }

    pub fn generations_path(&self, tag: &str) -> PathBuf {
        self.path(&format!("generations-{tag}.jsonl"))
    }

    fn log(&self, name: &str) -> Result<TrainLog> {
        let dir = self.path("logs");
        fs::create_dir_all(&dir)?;
        let file = File::create(dir.join(format!("{name}.jsonl")))?;
        Ok(TrainLog::to_writer(Box::new(BufWriter::new(file))))
    }

    /// Tokenizes and filters the corpus, splits it by message, and builds the
    /// vocabulary from the training split.
    pub fn prepare(&self, corpus: &Path) -> Result<PrepareReport> {
        let c = &self.config.corpus;
        let records = read_corpus(corpus)?;
        let pairs = records_to_pairs(&records, c.lowercase);
        let kept = filter_short(&pairs, c.min_response_len);
        if kept.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let seed = c.split_seed.unwrap_or(self.config.seed);
        let splits = split_by_message(&kept, |p: &TextPair| p.message.clone(), seed, c.n_valid, c.n_test)?;
        let vocab = Vocabulary::build(&splits.train, c.vocab_size)?;
        vocab.save(&self.path(VOCAB))?;
        fs::create_dir_all(self.out.join("splits"))?;
        for (split, items) in [
            (Split::Train, &splits.train),
            (Split::Valid, &splits.valid),
            (Split::Test, &splits.test),
        ] {
            write_corpus(&self.split_path(split), &pairs_to_records(items))?;
        }
        let report = PrepareReport {
            pairs_read: pairs.len(),
            pairs_kept: kept.len(),
            vocab_size: vocab.len(),
            train: splits.train.len(),
            valid: splits.valid.len(),
            test: splits.test.len(),
        };
        info!("prepare: {report:?}");
        Ok(report)
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.path(VOCAB))
    }

    /// Encoded pairs of one split, in file order.
    pub fn pairs(&self, split: Split, vocab: &Vocabulary) -> Result<Vec<Pair>> {
        let records = read_corpus(&self.split_path(split))?;
        let mut enc = Encoder::new(vocab, self.config.corpus.max_len);
        records_to_pairs(&records, false)
            .iter()
            .map(|p| enc.encode_pair(p))
            .collect()
    }

    pub fn build_index(&self) -> Result<Index> {
        let vocab = self.vocab()?;
        let pairs = self.pairs(Split::Train, &vocab)?;
        let index = Index::from_pairs(&pairs, vocab.len())?;
        index.save(&self.path(INDEX))?;
        info!("index: {} documents", index.doc_count());
        Ok(index)
    }

    pub fn index(&self) -> Result<Index> {
        Index::load(&self.path(INDEX))
    }

    /// Retrieves candidates for every distinct message of `split`. Only the
    /// training split excludes the message's own document.
    pub fn candidates(&self, split: Split) -> Result<Vec<CandidateRecord>> {
        let vocab = self.vocab()?;
        let index = self.index()?;
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for pair in self.pairs(split, &vocab)? {
            if seen.insert(pair.message.clone(), ()).is_some() {
                continue;
            }
            let set = index.top_n_candidates(&pair.message, &self.config.retrieval, split == Split::Train);
            out.push(CandidateRecord::from_set(&set, &vocab));
        }
        write_candidates(&self.candidates_path(split), &out)?;
        Ok(out)
    }

    /// Pairs of `split` joined with their retrieved candidates.
    pub fn examples(&self, split: Split, vocab: &Vocabulary) -> Result<Vec<TrainingExample>> {
        let enc = |text: &str| Utterance::new(words(text).iter().map(|w| vocab.id(w)).collect());
        let mut by_message: HashMap<Utterance, Vec<Utterance>> = HashMap::new();
        for rec in read_candidates(&self.candidates_path(split))? {
            let cands = rec.candidates.iter().map(|c| enc(c)).collect::<Result<Vec<_>>>()?;
            by_message.insert(enc(&rec.message)?, cands);
        }
        self.pairs(split, vocab)?
            .into_iter()
            .map(|p| {
                let candidates = by_message.get(&p.message).cloned().ok_or_else(|| {
                    Error::format(
                        self.candidates_path(split).display(),
                        format!("no candidates for message {:?}", vocab.decode_text(p.message.ids())),
                    )
                })?;
                Ok(TrainingExample {
                    message: p.message,
                    response: p.response,
                    candidates,
                })
            })
            .collect()
    }

    pub fn new_generator(&self, vocab: &Vocabulary) -> Result<Generator> {
        Generator::seeded(self.config.generator_config(vocab.len()), self.config.seed)
    }

    /// Generator restored from `path`; shapes must match the configuration.
    pub fn load_generator(&self, vocab: &Vocabulary, path: &Path) -> Result<Generator> {
        let ck = load_checkpoint(path)?;
        let mut g = self.new_generator(vocab)?;
        g.restore(&ck)?;
        Ok(g)
    }

    /// Discriminator restored from `path`; the variant is read from the
    /// checkpoint.
    pub fn load_discriminator(&self, vocab: &Vocabulary, path: &Path) -> Result<Discriminator> {
        let ck = load_checkpoint(path)?;
        let mut cfg = self.config.discriminator_config(vocab.len(), true);
        cfg.infer_variant(&ck)?;
        let mut d = Discriminator::seeded(cfg, self.config.seed.wrapping_add(1))?;
        d.restore(&ck)?;
        Ok(d)
    }

    pub fn pretrain_gen(&self) -> Result<PretrainReport> {
        let vocab = self.vocab()?;
        let train = self.examples(Split::Train, &vocab)?;
        let valid = self.examples(Split::Valid, &vocab)?;
        let mut gen = self.new_generator(&vocab)?;
        let mut log = self.log("pretrain-gen")?;
        let report = pretrain_generator(&mut gen, &train, &valid, &self.config.train_config(), &mut log)?;
        gen.checkpoint().save(&self.path(GEN))?;
        write_json(&self.path("pretrain-gen.json"), &report)?;
        Ok(report)
    }

    /// Validation pairs with one generator sample each, built once and
    /// reused so every discriminator is scored on the same negatives.
    pub fn probe(&self, vocab: &Vocabulary, gen: &Generator) -> Result<ProbeSet> {
        let path = self.path(PROBE);
        if path.exists() {
            return ProbeSet::load(&path);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(4);
        let mut probe = ProbeSet::default();
        for ex in self.examples(Split::Valid, vocab)? {
            let human = DiscExample {
                message: ex.message.clone(),
                candidates: ex.candidates.clone(),
                response: ex.response.ids().to_vec(),
            };
            let sample = gen.sample(&ex.message, &ex.candidates, &mut rng)?;
            let machine = DiscExample {
                response: sample.tokens,
                ..human.clone()
            };
            probe.push(human, true);
            if !machine.response.is_empty() {
                probe.push(machine, false);
            }
        }
        if probe.is_empty() {
            return Err(Error::InvalidArgument("validation split is empty; cannot build a probe".into()));
        }
        probe.save(&path)?;
        Ok(probe)
    }

    /// Pretrains a discriminator against samples of the MLE generator and
    /// returns its per-epoch loss and probe accuracy.
    pub fn pretrain_disc(&self, use_candidates: bool) -> Result<(Vec<f64>, f64)> {
        let vocab = self.vocab()?;
        let train = self.examples(Split::Train, &vocab)?;
        let gen = self.load_generator(&vocab, &self.path(GEN))?;
        let probe = self.probe(&vocab, &gen)?;
        let cfg = self.config.discriminator_config(vocab.len(), use_candidates);
        let mut disc = Discriminator::seeded(cfg, self.config.seed.wrapping_add(1))?;
        let name = if use_candidates { DISC } else { DISC_NO_CANDIDATES };
        let mut log = self.log(name.trim_end_matches(".bin"))?;
        let mut source = GeneratorNegatives::new(&gen);
        let losses = pretrain_discriminator(&mut disc, &train, &mut source, &self.config.train_config(), &mut log)?;
        disc.checkpoint().save(&self.path(name))?;
        let acc = disc_accuracy(&disc, &probe)?;
        Ok((losses, acc))
    }

    pub fn adv_train(&self) -> Result<AdversarialReport> {
        let vocab = self.vocab()?;
        let train = self.examples(Split::Train, &vocab)?;
        let mut gen = self.load_generator(&vocab, &self.path(GEN))?;
        let mut disc = self.load_discriminator(&vocab, &self.path(DISC))?;
        let probe = self.probe(&vocab, &gen)?;
        let mut log = self.log("adv-train")?;
        let report = adversarial_train(
            &mut gen,
            &mut disc,
            &train,
            Some(&probe),
            &self.config.train_config(),
            Some(&self.out),
            &mut log,
        )?;
        crate::training::joint_checkpoint(&gen, &disc).save(&self.path(ADV))?;
        write_json(&self.path("adv-train.json"), &report.epochs)?;
        Ok(report)
    }

    /// Beam-decodes one response per distinct message of `split` with the
    /// generator in `checkpoint`, writing `generations-<tag>.jsonl`.
    pub fn generate(&self, checkpoint: &Path, split: Split, tag: &str) -> Result<Vec<GenerationRecord>> {
        let vocab = self.vocab()?;
        let gen = self.load_generator(&vocab, checkpoint)?;
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for ex in self.examples(split, &vocab)? {
            if seen.insert(ex.message.clone(), ()).is_some() {
                continue;
            }
            let hyp = gen.beam_search(&ex.message, &ex.candidates, self.config.model.beam)?;
            out.push(GenerationRecord {
                message: vocab.decode_text(ex.message.ids()),
                candidates: ex.candidates.iter().map(|c| vocab.decode_text(c.ids())).collect(),
                response: vocab.decode_text(&hyp.tokens),
                logprob: hyp.score,
            });
        }
        write_jsonl(&self.generations_path(tag), &out)?;
        Ok(out)
    }

    /// Metrics of each generation file, keyed by tag, against the training
    /// responses.
    pub fn evaluate(&self, tags: &[String]) -> Result<BTreeMap<String, MetricsReport>> {
        let vocab = self.vocab()?;
        let train = self.pairs(Split::Train, &vocab)?;
        let training = training_responses(
            &train
                .into_iter()
                .map(|p| TrainingExample {
                    message: p.message,
                    response: p.response,
                    candidates: Vec::new(),
                })
                .collect::<Vec<_>>(),
        );
        let mut reports = BTreeMap::new();
        for tag in tags {
            let responses: Vec<Vec<usize>> = read_generations(&self.generations_path(tag))?
                .iter()
                .map(|g| words(&g.response).iter().map(|w| vocab.id(w)).collect())
                .collect();
            reports.insert(tag.clone(), MetricsReport::compute(&responses, &training)?);
        }
        write_json(&self.path(METRICS_JSON), &reports)?;
        let rows: Vec<(&str, &MetricsReport)> = tags
            .iter()
            .map(|t| (t.as_str(), &reports[t]))
            .collect();
        fs::write(self.path(METRICS_TXT), MetricsReport::table(&rows))?;
        Ok(reports)
    }

    /// Scores discriminator checkpoints on the frozen probe.
    pub fn disc_accuracy(&self, checkpoints: &[PathBuf]) -> Result<Vec<AccuracyRow>> {
        let vocab = self.vocab()?;
        let probe = ProbeSet::load(&self.path(PROBE))?;
        let mut rows = Vec::new();
        for path in checkpoints {
            let disc = self.load_discriminator(&vocab, path)?;
            rows.push(AccuracyRow {
                checkpoint: path
                    .file_name()
                    .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
                use_candidates: disc.config().use_candidates,
                accuracy: disc_accuracy(&disc, &probe)?,
            });
        }
        write_json(&self.path("disc-accuracy.json"), &rows)?;
        let mut text = String::new();
        for r in &rows {
            let kind = if r.use_candidates { "with candidates" } else { "without candidates" };
            text.push_str(&format!("{:<24} {:<20} {:.2}%\n", r.checkpoint, kind, 100.0 * r.accuracy));
        }
        fs::write(self.path("disc-accuracy.txt"), text)?;
        Ok(rows)
    }

    /// State for answering free-form messages.
    pub fn chat_session(&self, checkpoint: &Path) -> Result<ChatSession> {
        let vocab = self.vocab()?;
        let gen = self.load_generator(&vocab, checkpoint)?;
        Ok(ChatSession {
            index: self.index()?,
            vocab,
            gen,
            config: self.config.clone(),
        })
    }

    /// Reads messages line by line until EOF or `:q`, writing the response
    /// and the retrieved candidates for each.
    pub fn chat<R: BufRead, W: Write>(&self, checkpoint: &Path, input: R, mut output: W) -> Result<()> {
        let session = self.chat_session(checkpoint)?;
        write!(output, "> ")?;
        output.flush()?;
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line == ":q" {
                break;
            }
            if !line.is_empty() {
                let reply = session.reply(line)?;
                writeln!(output, "{}", reply.response)?;
                for (i, c) in reply.candidates.iter().enumerate() {
                    writeln!(output, "  candidate {}: {c}", i + 1)?;
                }
                if reply.fallback {
                    writeln!(output, "  (no retrieval hit; placeholder candidates)")?;
                }
            }
            write!(output, "> ")?;
            output.flush()?;
        }
        writeln!(output)?;
        Ok(())
    }
}

pub struct ChatSession {
    pub index: Index,
    pub vocab: Vocabulary,
    pub gen: Generator,
    pub config: RunConfig,
}

impl ChatSession {
    pub fn reply(&self, message: &str) -> Result<ChatReply> {
        let mut enc = Encoder::new(&self.vocab, self.config.corpus.max_len);
        let msg = enc.encode_text(message, self.config.corpus.lowercase)?;
        let set = self.index.top_n_candidates(&msg, &self.config.retrieval, false);
        let hyp = self.gen.beam_search(&msg, &set.candidates, self.config.model.beam)?;
        Ok(ChatReply {
            response: self.vocab.decode_text(&hyp.tokens),
            candidates: set.candidates.iter().map(|c| self.vocab.decode_text(c.ids())).collect(),
            fallback: set.fallback,
        })
    }
}
