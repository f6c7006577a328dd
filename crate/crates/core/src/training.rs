//! Training loops: maximum-likelihood pretraining of the generator,
//! discriminator pretraining on human versus machine responses, and the
//! alternating adversarial phase with policy-gradient generator updates.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Array, Checkpoint, Gradients, ParameterSet, Tape};
use crate::corpus::{TrainingExample, Utterance};
use crate::discriminator::{DiscExample, Discriminator};
use crate::error::{Error, Result};
use crate::evaluation::{disc_accuracy, ProbeSet};
use crate::generator::Generator;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the adversarial phase; `lr` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv_lr: Option<f64>,
    /// Generator batches per adversarial round.
    pub g_steps: usize,
    /// Discriminator batches per adversarial round.
    pub d_steps: usize,
    /// Adversarial epochs.
    pub epochs: usize,
    /// Maximum generator MLE epochs.
    pub pretrain_epochs: usize,
    pub disc_pretrain_epochs: usize,
    /// Early-stopping patience on validation loss, in epochs.
    pub patience: usize,
    /// Stop MLE pretraining once the epoch's training perplexity drops below
    /// this value.
    pub target_perplexity: Option<f64>,
    pub clip_norm: f64,
    /// Moving-average reward baseline. Off by default.
    pub baseline: bool,
    pub baseline_decay: f64,
    /// Filled from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-4,
            adv_lr: None,
            g_steps: 10,
            d_steps: 20,
            epochs: 5,
            pretrain_epochs: 30,
            disc_pretrain_epochs: 3,
            patience: 3,
            target_perplexity: None,
            clip_norm: 5.0,
            baseline: false,
            baseline_decay: 0.9,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("g_steps", self.g_steps),
            ("d_steps", self.d_steps),
            ("patience", self.patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        for (name, lr) in [("lr", Some(self.lr)), ("adv_lr", self.adv_lr)] {
            if let Some(lr) = lr.filter(|lr| !(*lr > 0.0 && lr.is_finite())) {
                return Err(Error::Config(format!("train.{name} must be positive, got {lr}")));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("train.baseline_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        self.adam_with(self.lr)
    }

    pub fn adversarial_adam(&self) -> Adam {
        self.adam_with(self.adv_lr.unwrap_or(self.lr))
    }

    fn adam_with(&self, lr: f64) -> Adam {
        Adam {
            clip_norm: Some(self.clip_norm),
            ..Adam::with_lr(lr)
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// One JSONL line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: String,
    pub step: u64,
    pub loss: f64,
    pub reward_mean: Option<f64>,
}

/// Collects log entries and optionally streams them as JSONL.
#[derive(Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    sink: Option<Box<dyn Write>>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_writer(sink: Box<dyn Write>) -> Self {
        TrainLog {
            entries: Vec::new(),
            sink: Some(sink),
        }
    }

    pub fn record(&mut self, phase: &str, step: u64, loss: f64, reward_mean: Option<f64>) -> Result<()> {
        let entry = LogEntry {
            phase: phase.to_string(),
            step,
            loss,
            reward_mean,
        };
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

fn ensure_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} loss is {v}")))
    }
}

/// Sum of negative log-likelihood and number of predicted tokens.
pub fn corpus_nll(gen: &Generator, data: &[TrainingExample]) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for ex in data {
        let n = ex.response.len() + 1;
        nll += gen.mle_loss(ex)? * n as f64;
        tokens += n;
    }
    Ok((nll, tokens))
}

/// Per-token perplexity of `data` under `gen`.
pub fn perplexity(gen: &Generator, data: &[TrainingExample]) -> Result<f64> {
    let (nll, tokens) = corpus_nll(gen, data)?;
    Ok((nll / tokens.max(1) as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    /// Per-token perplexity of each epoch's training batches, measured before
    /// each update.
    pub train_perplexity: Vec<f64>,
    pub valid_loss: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

fn snapshot(ps: &ParameterSet) -> Vec<Array> {
    ps.iter().map(|p| p.value.clone()).collect()
}

fn restore_snapshot(ps: &mut ParameterSet, values: &[Array]) {
    for (p, v) in ps.iter_mut().zip(values) {
        p.value = v.clone();
    }
}

/// Adam on the mean per-token MLE loss. With a validation set, stops after
/// `patience` epochs without improvement and keeps the best parameters.
pub fn pretrain_generator(
    gen: &mut Generator,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate()?;
    let adam = cfg.adam();
    let mut rng = cfg.rng(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = PretrainReport {
        epochs_run: 0,
        train_perplexity: Vec::new(),
        valid_loss: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, Vec<Array>)> = None;
    let mut stale = 0;
    let mut step = 0u64;
    for epoch in 1..=cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut tokens) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut total = Gradients::empty(gen.params().len());
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train[i];
                let (loss, grads) = gen.mle_gradients(ex)?;
                let n = ex.response.len() + 1;
                nll += loss * n as f64;
                tokens += n;
                batch_loss += loss;
                total.add_scaled(&grads, 1.0 / batch.len() as f64);
            }
            let batch_loss = ensure_finite("mle", batch_loss / batch.len() as f64)?;
            gen.params_mut().accumulate(&total, 1.0);
            adam.step(gen.params_mut())?;
            step += 1;
            log.record("mle", step, batch_loss, None)?;
        }
        let ppl = (nll / tokens as f64).exp();
        report.train_perplexity.push(ppl);
        report.epochs_run = epoch;

        if !valid.is_empty() {
            let (vn, vt) = corpus_nll(gen, valid)?;
            let vloss = vn / vt as f64;
            report.valid_loss.push(vloss);
            info!("mle epoch {epoch}: train ppl {ppl:.4}, valid loss {vloss:.4}");
            if best.as_ref().map_or(true, |(b, _)| vloss < *b) {
                best = Some((vloss, snapshot(gen.params())));
                report.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    info!("early stop after epoch {epoch}");
                    break;
                }
            }
        } else {
            info!("mle epoch {epoch}: train ppl {ppl:.4}");
            report.best_epoch = epoch;
        }
        if cfg.target_perplexity.is_some_and(|t| ppl < t) {
            break;
        }
    }
    if let Some((_, values)) = best {
        restore_snapshot(gen.params_mut(), &values);
    }
    log.flush()?;
    Ok(report)
}

/// Supplies one machine-written response per human example.
pub trait NegativeSource {
    /// `None` means no usable negative for this example.
    fn negative(&mut self, ex: &TrainingExample, rng: &mut ChaCha8Rng) -> Result<Option<Vec<usize>>>;
}

impl<F> NegativeSource for F
where
    F: FnMut(&TrainingExample, &mut ChaCha8Rng) -> Result<Option<Vec<usize>>>,
{
    fn negative(&mut self, ex: &TrainingExample, rng: &mut ChaCha8Rng) -> Result<Option<Vec<usize>>> {
        self(ex, rng)
    }
}

/// Negatives sampled (not beam-decoded) from a generator. An empty sample is
/// redrawn once before the example is skipped.
pub struct GeneratorNegatives<'g> {
    pub gen: &'g Generator,
    /// Number of negatives drawn so far.
    pub drawn: u64,
}

impl<'g> GeneratorNegatives<'g> {
    pub fn new(gen: &'g Generator) -> Self {
        GeneratorNegatives { gen, drawn: 0 }
    }
}

impl NegativeSource for GeneratorNegatives<'_> {
    fn negative(&mut self, ex: &TrainingExample, rng: &mut ChaCha8Rng) -> Result<Option<Vec<usize>>> {
        for _ in 0..2 {
            let s = self.gen.sample(&ex.message, &ex.candidates, rng)?;
            self.drawn += 1;
            if !s.tokens.is_empty() {
                return Ok(Some(s.tokens));
            }
        }
        warn!("generator produced two empty samples; skipping negative");
        Ok(None)
    }
}

/// Scores a sampled response; the value is used as a constant reward.
pub trait RewardModel {
    fn reward(&self, message: &Utterance, candidates: &[Utterance], response: &[usize]) -> Result<f64>;
}

impl RewardModel for Discriminator {
    fn reward(&self, message: &Utterance, candidates: &[Utterance], response: &[usize]) -> Result<f64> {
        self.classify(&DiscExample {
            message: message.clone(),
            candidates: candidates.to_vec(),
            response: response.to_vec(),
        })
    }
}

/// Frozen reward that only checks whether a keyword occurs.
#[derive(Clone, Copy, Debug)]
pub struct KeywordReward {
    pub keyword: usize,
    pub hit: f64,
    pub miss: f64,
}

impl RewardModel for KeywordReward {
    fn reward(&self, _: &Utterance, _: &[Utterance], response: &[usize]) -> Result<f64> {
        Ok(if response.contains(&self.keyword) {
            self.hit
        } else {
            self.miss
        })
    }
}

/// A constant reward for every response.
#[derive(Clone, Copy, Debug)]
pub struct ConstantReward(pub f64);

impl RewardModel for ConstantReward {
    fn reward(&self, _: &Utterance, _: &[Utterance], _: &[usize]) -> Result<f64> {
        Ok(self.0)
    }
}

/// A sampled response with its reward and log-probability.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardSample {
    pub response: Vec<usize>,
    pub reward: f64,
    pub logprob: f64,
    /// Whether the sample ended with EOS.
    pub terminated: bool,
}

/// Samples one response and returns the gradient of
/// `-(r - baseline) * ln G(y)`. `None` when both draws were empty.
pub fn policy_gradient<R: RewardModel + ?Sized>(
    gen: &Generator,
    ex: &TrainingExample,
    reward: &R,
    baseline: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(RewardSample, Gradients)>> {
    let mut tape = Tape::new(gen.params());
    let enc = gen.encode(&mut tape, &ex.message, &ex.candidates)?;
    for _ in 0..2 {
        let path = gen.sample_on(&mut tape, &enc, rng)?;
        if path.sample.tokens.is_empty() {
            continue;
        }
        let r = reward.reward(&ex.message, &ex.candidates, &path.sample.tokens)?;
        let loss = tape.scale(path.logprob, -(r - baseline));
        let grads = tape.backward(loss)?;
        return Ok(Some((
            RewardSample {
                response: path.sample.tokens,
                reward: r,
                logprob: path.sample.logprob,
                terminated: path.sample.terminated,
            },
            grads,
        )));
    }
    warn!("generator produced two empty samples; skipping example");
    Ok(None)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RlStats {
    /// Mean of `-r * ln G(y)` over used examples.
    pub loss: f64,
    pub reward_mean: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Moving-average reward baseline.
#[derive(Clone, Copy, Debug)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
}

/// One policy-gradient update of the generator over `batch`.
pub fn generator_rl_step<R: RewardModel + ?Sized>(
    gen: &mut Generator,
    batch: &[TrainingExample],
    reward: &R,
    adam: &Adam,
    mut baseline: Option<&mut Baseline>,
    rng: &mut ChaCha8Rng,
) -> Result<RlStats> {
    let b = baseline.as_ref().map_or(0.0, |b| b.value);
    let mut total = Gradients::empty(gen.params().len());
    let (mut loss, mut rewards, mut used, mut skipped) = (0.0, 0.0, 0, 0);
    for ex in batch {
        match policy_gradient(gen, ex, reward, b, rng)? {
            Some((s, g)) => {
                total.add_scaled(&g, 1.0);
                loss += -s.reward * s.logprob;
                rewards += s.reward;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Ok(RlStats {
            loss: 0.0,
            reward_mean: 0.0,
            used,
            skipped,
        });
    }
    let reward_mean = rewards / used as f64;
    if let Some(b) = baseline.as_deref_mut() {
        b.value = b.decay * b.value + (1.0 - b.decay) * reward_mean;
    }
    let loss = ensure_finite("generator", loss / used as f64)?;
    gen.params_mut().accumulate(&total, 1.0 / used as f64);
    adam.step(gen.params_mut())?;
    Ok(RlStats {
        loss,
        reward_mean,
        used,
        skipped,
    })
}

/// Pairs each example with a fresh negative; examples without a negative are
/// dropped so the batch stays balanced.
pub fn balanced_batch(
    batch: &[TrainingExample],
    source: &mut dyn NegativeSource,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DiscExample>, Vec<DiscExample>)> {
    let mut pos = Vec::with_capacity(batch.len());
    let mut neg = Vec::with_capacity(batch.len());
    for ex in batch {
        if let Some(response) = source.negative(ex, rng)? {
            pos.push(DiscExample {
                message: ex.message.clone(),
                candidates: ex.candidates.clone(),
                response: ex.response.ids().to_vec(),
            });
            neg.push(DiscExample {
                message: ex.message.clone(),
                candidates: ex.candidates.clone(),
                response,
            });
        }
    }
    Ok((pos, neg))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscStats {
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// One Adam step on the discriminator with freshly drawn negatives.
pub fn discriminator_step(
    disc: &mut Discriminator,
    batch: &[TrainingExample],
    source: &mut dyn NegativeSource,
    adam: &Adam,
    rng: &mut ChaCha8Rng,
) -> Result<DiscStats> {
    let (pos, neg) = balanced_batch(batch, source, rng)?;
    if pos.is_empty() {
        return Ok(DiscStats {
            loss: 0.0,
            positives: 0,
            negatives: 0,
        });
    }
    let (loss, grads) = disc.loss_gradients(&pos, &neg)?;
    let loss = ensure_finite("discriminator", loss)?;
    disc.params_mut().accumulate(&grads, 1.0);
    adam.step(disc.params_mut())?;
    Ok(DiscStats {
        loss,
        positives: pos.len(),
        negatives: neg.len(),
    })
}

/// Mean discriminator loss of each pretraining epoch.
pub fn pretrain_discriminator(
    disc: &mut Discriminator,
    train: &[TrainingExample],
    source: &mut dyn NegativeSource,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate()?;
    let adam = cfg.adam();
    let mut rng = cfg.rng(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.disc_pretrain_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let stats = discriminator_step(disc, &batch, source, &adam, &mut rng)?;
            step += 1;
            log.record("d-pre", step, stats.loss, None)?;
            sum += stats.loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        info!("discriminator pretrain epoch {epoch}: loss {mean:.4}");
        epochs.push(mean);
    }
    log.flush()?;
    Ok(epochs)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub g_batches: usize,
    pub d_batches: usize,
    pub reward_mean: f64,
    pub disc_loss: f64,
    pub probe_accuracy: Option<f64>,
    pub negatives_drawn: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AdversarialReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
}

/// File name of the checkpoint written after adversarial epoch `k`.
pub fn checkpoint_name(k: usize) -> String {
    format!("ckpt-epoch{k}.bin")
}

/// Generator and discriminator parameters in one checkpoint.
pub fn joint_checkpoint(gen: &Generator, disc: &Discriminator) -> Checkpoint {
    let mut ck = gen.checkpoint();
    ck.add(disc.params());
    ck
}

/// Cycles through a shuffled order, reshuffling at every wrap.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cursor { order, pos: 0 }
    }

    fn batch(&mut self, data: &[TrainingExample], size: usize, rng: &mut ChaCha8Rng) -> Vec<TrainingExample> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size.min(data.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(data[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }
}

/// Alternates `g_steps` generator batches with `d_steps` discriminator
/// batches. An epoch runs `ceil(n / (batch_size * g_steps))` rounds, so the
/// generator sees roughly one pass over the data. A checkpoint is written to
/// `out_dir` after every epoch.
pub fn adversarial_train(
    gen: &mut Generator,
    disc: &mut Discriminator,
    train: &[TrainingExample],
    probe: Option<&ProbeSet>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    log: &mut TrainLog,
) -> Result<AdversarialReport> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate()?;
    let g_adam = cfg.adversarial_adam();
    let d_adam = cfg.adversarial_adam();
    let mut rng = cfg.rng(3);
    let mut g_cursor = Cursor::new(train.len(), &mut rng);
    let mut d_cursor = Cursor::new(train.len(), &mut rng);
    let mut baseline = cfg.baseline.then_some(Baseline {
        value: 0.0,
        decay: cfg.baseline_decay,
    });
    let per_round = cfg.batch_size * cfg.g_steps;
    let rounds = train.len().div_ceil(per_round);
    let mut report = AdversarialReport::default();
    let (mut g_step, mut d_step) = (0u64, 0u64);

    for epoch in 1..=cfg.epochs {
        let mut stats = EpochStats {
            epoch,
            g_batches: 0,
            d_batches: 0,
            reward_mean: 0.0,
            disc_loss: 0.0,
            probe_accuracy: None,
            negatives_drawn: 0,
        };
        for _ in 0..rounds {
            for _ in 0..cfg.g_steps {
                let batch = g_cursor.batch(train, cfg.batch_size, &mut rng);
                let s = generator_rl_step(gen, &batch, disc, &g_adam, baseline.as_mut(), &mut rng)?;
                g_step += 1;
                stats.g_batches += 1;
                stats.reward_mean += s.reward_mean;
                log.record("g", g_step, s.loss, Some(s.reward_mean))?;
            }
            let mut source = GeneratorNegatives::new(gen);
            for _ in 0..cfg.d_steps {
                let batch = d_cursor.batch(train, cfg.batch_size, &mut rng);
                let s = discriminator_step(disc, &batch, &mut source, &d_adam, &mut rng)?;
                d_step += 1;
                stats.d_batches += 1;
                stats.disc_loss += s.loss;
                log.record("d", d_step, s.loss, None)?;
            }
            stats.negatives_drawn += source.drawn;
        }
        stats.reward_mean /= stats.g_batches as f64;
        stats.disc_loss /= stats.d_batches as f64;
        if let Some(p) = probe {
            stats.probe_accuracy = Some(disc_accuracy(disc, p)?);
        }
        info!(
            "adversarial epoch {epoch}: reward {:.4}, disc loss {:.4}, probe accuracy {:?}",
            stats.reward_mean, stats.disc_loss, stats.probe_accuracy
        );
        if let Some(dir) = out_dir {
            let path = dir.join(checkpoint_name(epoch));
            joint_checkpoint(gen, disc).save(&path)?;
            report.checkpoints.push(path);
        }
        report.epochs.push(stats);
        log.flush()?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use crate::discriminator::DiscriminatorConfig;
    use crate::generator::GeneratorConfig;

    fn u(ids: &[usize]) -> Utterance {
        Utterance::new(ids.to_vec()).unwrap()
    }

    fn gen_cfg(v: usize) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size: v,
            embedding_dim: 4,
            hidden: 6,
            attention_dim: 6,
            n_candidates: 2,
            beam: 3,
            max_decode_len: 6,
        }
    }

    fn disc_cfg(v: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            vocab_size: v,
            embedding_dim: 4,
            hidden: 6,
            mlp_hidden: 6,
            n_candidates: 2,
            use_candidates: true,
        }
    }

    fn toy(n: usize) -> Vec<TrainingExample> {
        (0..n)
            .map(|i| TrainingExample {
                message: u(&[4 + i % 5, 9]),
                response: u(&[5 + i % 3, 10, 11]),
                candidates: vec![u(&[5 + i % 3, 10]), u(&[11, 4])],
            })
            .collect()
    }

    #[test]
    fn zero_reward_leaves_parameters_unchanged() {
        let mut g = Generator::seeded(gen_cfg(12), 1).unwrap();
        let before = snapshot(g.params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adam = Adam::with_lr(0.1);
        generator_rl_step(&mut g, &toy(4), &ConstantReward(0.0), &adam, None, &mut rng).unwrap();
        assert_eq!(snapshot(g.params()), before);
    }

    #[test]
    fn policy_gradient_is_scaled_teacher_forcing_gradient() {
        let g = Generator::seeded(gen_cfg(12), 2).unwrap();
        let ex = &toy(1)[0];
        let r = 0.37;
        let (s, pg) = policy_gradient(&g, ex, &ConstantReward(r), 0.0, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap()
            .unwrap();
        let mut tape = Tape::new(g.params());
        let mut t = s.response.clone();
        if s.terminated {
            t.push(EOS);
        }
        let lp = g.sequence_logprob_on(&mut tape, &ex.message, &ex.candidates, &t).unwrap();
        assert!((tape.value(lp).item() - s.logprob).abs() < 1e-10);
        let mut tf = tape.backward(lp).unwrap();
        tf.scale(-r);
        let mut diff = pg.clone();
        diff.add_scaled(&tf, -1.0);
        assert!(diff.norm() < 1e-10 * (1.0 + tf.norm()));
    }

    #[test]
    fn reward_is_detached_from_discriminator() {
        let g = Generator::seeded(gen_cfg(12), 3).unwrap();
        let d = Discriminator::seeded(disc_cfg(12), 4).unwrap();
        let mut d2 = d.clone();
        for p in d2.params_mut().iter_mut() {
            p.value.scale(3.0);
        }
        let ex = &toy(1)[0];
        let run = |rm: &dyn RewardModel| {
            policy_gradient(&g, ex, rm, 0.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().unwrap()
        };
        let (s1, g1) = run(&d);
        let (s2, _) = run(&d2);
        assert_ne!(s1.reward, s2.reward);
        let (_, fixed) = run(&ConstantReward(s1.reward));
        assert_eq!(g1, fixed);
    }

    #[test]
    fn disc_step_draws_fresh_negatives() {
        let g = Generator::seeded(gen_cfg(12), 5).unwrap();
        let mut d = Discriminator::seeded(disc_cfg(12), 6).unwrap();
        let mut source = GeneratorNegatives::new(&g);
        let adam = Adam::with_lr(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = toy(4);
        let s1 = discriminator_step(&mut d, &data, &mut source, &adam, &mut rng).unwrap();
        let after_one = source.drawn;
        let s2 = discriminator_step(&mut d, &data, &mut source, &adam, &mut rng).unwrap();
        assert_eq!(s1.positives, s1.negatives);
        assert!(after_one >= 4 && source.drawn >= after_one + s2.negatives as u64);
    }

    #[test]
    fn marker_negatives_are_learned() {
        let mut d = Discriminator::seeded(disc_cfg(14), 7).unwrap();
        let data = toy(30);
        let mut marker = |ex: &TrainingExample, _: &mut ChaCha8Rng| {
            let mut r = ex.response.ids().to_vec();
            r.insert(1, 13);
            Ok(Some(r))
        };
        let adam = Adam::with_lr(0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut losses = Vec::new();
        for _ in 0..20 {
            losses.push(discriminator_step(&mut d, &data[..10], &mut marker, &adam, &mut rng).unwrap().loss);
        }
        assert!(losses.last().unwrap() < &losses[0]);
        assert!(losses.last().unwrap() < &(2.0 * 2f64.ln()));
        let mut probe = ProbeSet::default();
        let (pos, neg) = balanced_batch(&data[10..], &mut marker, &mut rng).unwrap();
        for p in pos {
            probe.push(p, true);
        }
        for n in neg {
            probe.push(n, false);
        }
        assert!(disc_accuracy(&d, &probe).unwrap() > 0.95);
    }

    #[test]
    fn schedule_and_checkpoints() {
        let mut g = Generator::seeded(gen_cfg(12), 8).unwrap();
        let mut d = Discriminator::seeded(disc_cfg(12), 9).unwrap();
        let data = toy(64);
        let cfg = TrainConfig {
            batch_size: 2,
            g_steps: 10,
            d_steps: 20,
            epochs: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut log = TrainLog::new();
        let report = adversarial_train(&mut g, &mut d, &data, None, &cfg, Some(dir.path()), &mut log).unwrap();
        let e = &report.epochs[0];
        // 64 / (2 * 10) rounded up
        assert_eq!(e.g_batches, 40);
        assert_eq!(e.d_batches * cfg.g_steps, e.g_batches * cfg.d_steps);
        assert_eq!(report.checkpoints.len(), 1);
        assert!(dir.path().join("ckpt-epoch1.bin").exists());
        assert_eq!(log.entries.iter().filter(|l| l.phase == "g").count(), 40);
        assert_eq!(log.entries.iter().filter(|l| l.phase == "d").count(), 80);
        assert!(e.negatives_drawn >= 160);
    }

    #[test]
    fn pretraining_restores_best_validation_epoch() {
        let mut g = Generator::seeded(gen_cfg(12), 10).unwrap();
        let data = toy(12);
        let cfg = TrainConfig {
            batch_size: 4,
            lr: 0.01,
            pretrain_epochs: 8,
            ..TrainConfig::default()
        };
        let report = pretrain_generator(&mut g, &data[..8], &data[8..], &cfg, &mut TrainLog::new()).unwrap();
        let best = report.valid_loss[report.best_epoch - 1];
        assert!(report.valid_loss[..report.best_epoch].iter().all(|&v| v >= best));
        let (n, t) = corpus_nll(&g, &data[8..]).unwrap();
        assert!((n / t as f64 - best).abs() < 1e-12);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let run = || {
            let mut g = Generator::seeded(gen_cfg(12), 11).unwrap();
            let cfg = TrainConfig {
                batch_size: 3,
                lr: 0.01,
                pretrain_epochs: 2,
                ..TrainConfig::default()
            };
            pretrain_generator(&mut g, &toy(7), &[], &cfg, &mut TrainLog::new()).unwrap();
            snapshot(g.params())
        };
        assert_eq!(run(), run());
    }
}
