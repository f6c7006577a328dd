//! Multi-source encoder-decoder conditioned on a message and N retrieved
//! response candidates.
//!
//! Candidates share one bidirectional encoder; the message has its own. At
//! every decoding step a word-level attention summarizes each candidate, a
//! sentence-level attention mixes the summaries, and a separate attention
//! reads the message. The decoder LSTM consumes
//! `[embedding(y_prev); candidate context; message context]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    attend_projected, attention, bilstm, cross_entropy, lstm_step, Attended, Checkpoint, Gradients,
    LstmParams, LstmState, ParamId, ParameterSet, ScorerParams, Tape, Var,
};
use crate::corpus::{TrainingExample, Utterance, BOS, EOS, NUM_RESERVED, PAD};
use crate::decode::{self, sample_categorical, Hypothesis, Sample, StepModel};
use crate::error::{Error, Result};

/// Parameter-name namespace of the generator.
pub const NAMESPACE: &str = "gen";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    /// Width of the attention scorers' tanh layer.
    pub attention_dim: usize,
    pub n_candidates: usize,
    pub beam: usize,
    pub max_decode_len: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("embedding_dim", self.embedding_dim),
            ("hidden", self.hidden),
            ("attention_dim", self.attention_dim),
            ("n_candidates", self.n_candidates),
            ("beam", self.beam),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("generator {name} must be positive")));
            }
        }
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "generator vocab_size {} leaves no room beyond reserved tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    emb: ParamId,
    cand_fwd: LstmParams,
    cand_bwd: LstmParams,
    msg_fwd: LstmParams,
    msg_bwd: LstmParams,
    word_q: ScorerParams,
    sent_q: ScorerParams,
    msg_q: ScorerParams,
    dec: LstmParams,
    out_w: ParamId,
    out_b: ParamId,
}

/// Bidirectional encodings of one message and its candidates.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    /// One `T_k x 2d` array per candidate.
    pub candidates: Vec<Var>,
    /// `T_x x 2d`
    pub message: Var,
    cand_proj: Vec<Var>,
    msg_proj: Var,
}

/// Two-level attention over the candidates for one decoding step.
#[derive(Clone, Debug)]
pub struct CandidateContext {
    /// `1 x 2d`
    pub context: Var,
    /// Word-level weights, one `1 x T_k` row per candidate.
    pub word_weights: Vec<Var>,
    /// `1 x N`
    pub sentence_weights: Var,
    /// Per-candidate summaries stacked as `N x 2d`.
    pub summaries: Var,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: LstmState,
    /// `1 x V`
    pub probs: Var,
    pub candidates: CandidateContext,
    pub message: Attended,
}

/// Numeric record of a teacher-forced run, one entry per decoding step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeTrace {
    pub tokens: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    /// `[step][candidate][position]`
    pub word_weights: Vec<Vec<Vec<f64>>>,
    /// `[step][candidate]`
    pub sentence_weights: Vec<Vec<f64>>,
    pub candidate_contexts: Vec<Vec<f64>>,
    pub message_weights: Vec<Vec<f64>>,
    pub message_contexts: Vec<Vec<f64>>,
    pub distributions: Vec<Vec<f64>>,
}

/// A sampled response whose log-probability stays differentiable.
#[derive(Clone, Debug)]
pub struct SampledPath {
    pub sample: Sample,
    /// `1 x 1` sum of log-probabilities of the sampled tokens.
    pub logprob: Var,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParameterSet,
    layout: Layout,
}

/// Teacher-forcing targets: the response followed by EOS.
pub fn targets(response: &Utterance) -> Vec<usize> {
    let mut t = response.ids().to_vec();
    t.push(EOS);
    t
}

fn values(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

impl Generator {
    pub fn new<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, e, d, a) = (
            config.vocab_size,
            config.embedding_dim,
            config.hidden,
            config.attention_dim,
        );
        let mut ps = ParameterSet::new();
        let emb = ps.uniform("gen.emb", v, e, rng)?;
        let cand_fwd = LstmParams::register(&mut ps, "gen.cand_fwd", e, d, rng)?;
        let cand_bwd = LstmParams::register(&mut ps, "gen.cand_bwd", e, d, rng)?;
        let msg_fwd = LstmParams::register(&mut ps, "gen.msg_fwd", e, d, rng)?;
        let msg_bwd = LstmParams::register(&mut ps, "gen.msg_bwd", e, d, rng)?;
        let word_q = ScorerParams::register(&mut ps, "gen.word_attn", d, 2 * d, a, rng)?;
        let sent_q = ScorerParams::register(&mut ps, "gen.sent_attn", d, 2 * d, a, rng)?;
        let msg_q = ScorerParams::register(&mut ps, "gen.msg_attn", d, 2 * d, a, rng)?;
        let dec = LstmParams::register(&mut ps, "gen.dec", e + 4 * d, d, rng)?;
        let out_w = ps.uniform("gen.out.w", d, v, rng)?;
        let out_b = ps.uniform("gen.out.b", 1, v, rng)?;
        Ok(Generator {
            config,
            params: ps,
            layout: Layout {
                emb,
                cand_fwd,
                cand_bwd,
                msg_fwd,
                msg_bwd,
                word_q,
                sent_q,
                msg_q,
                dec,
                out_w,
                out_b,
            },
        })
    }

    pub fn seeded(config: GeneratorConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
    }

    /// Loads weights and optimizer moments; names and shapes must match.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore(&mut self.params)
    }

    fn check_candidates(&self, candidates: &[Utterance]) -> Result<()> {
        if candidates.len() != self.config.n_candidates {
            return Err(Error::InvalidArgument(format!(
                "expected {} candidates, found {}",
                self.config.n_candidates,
                candidates.len()
            )));
        }
        Ok(())
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        message: &Utterance,
        candidates: &[Utterance],
    ) -> Result<EncoderOutputs> {
        self.check_candidates(candidates)?;
        let l = self.layout;
        let emb = tape.param(l.emb);
        let mut cand_states = Vec::with_capacity(candidates.len());
        for c in candidates {
            let xs = tape.gather(emb, c.ids())?;
            cand_states.push(bilstm(tape, &l.cand_fwd, &l.cand_bwd, xs)?);
        }
        let xs = tape.gather(emb, message.ids())?;
        let msg = bilstm(tape, &l.msg_fwd, &l.msg_bwd, xs)?;
        self.attach(tape, cand_states, msg)
    }

    /// Wraps precomputed encoder states, projecting them for attention.
    pub fn attach(&self, tape: &mut Tape, candidates: Vec<Var>, message: Var) -> Result<EncoderOutputs> {
        let cand_proj = candidates
            .iter()
            .map(|&c| self.layout.word_q.project_keys(tape, c))
            .collect::<Result<Vec<_>>>()?;
        let msg_proj = self.layout.msg_q.project_keys(tape, message)?;
        Ok(EncoderOutputs {
            candidates,
            message,
            cand_proj,
            msg_proj,
        })
    }

    pub fn candidate_context(
        &self,
        tape: &mut Tape,
        s_prev: Var,
        enc: &EncoderOutputs,
    ) -> Result<CandidateContext> {
        let mut word_weights = Vec::with_capacity(enc.candidates.len());
        let mut summaries = Vec::with_capacity(enc.candidates.len());
        for (&keys, &proj) in enc.candidates.iter().zip(&enc.cand_proj) {
            let att = attend_projected(tape, &self.layout.word_q, s_prev, keys, proj, None)?;
            word_weights.push(att.weights);
            summaries.push(att.context);
        }
        let summaries = tape.stack_rows(&summaries);
        let sent = attention(tape, &self.layout.sent_q, s_prev, summaries, None)?;
        Ok(CandidateContext {
            context: sent.context,
            word_weights,
            sentence_weights: sent.weights,
            summaries,
        })
    }

    pub fn message_context(&self, tape: &mut Tape, s_prev: Var, enc: &EncoderOutputs) -> Result<Attended> {
        attend_projected(tape, &self.layout.msg_q, s_prev, enc.message, enc.msg_proj, None)
    }

    /// Advances the decoder by one token and returns the new state and the
    /// next-token distribution.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        y_prev: usize,
        prev: LstmState,
        a_c: Var,
        a_x: Var,
    ) -> Result<(LstmState, Var)> {
        let l = self.layout;
        let emb = tape.param(l.emb);
        let e = tape.gather(emb, &[y_prev])?;
        let x = tape.concat_cols(&[e, a_c, a_x]);
        let state = lstm_step(tape, &l.dec, x, prev)?;
        let w = tape.param(l.out_w);
        let b = tape.param(l.out_b);
        let logits = tape.matmul(state.h, w);
        let logits = tape.add(logits, b);
        let probs = tape.softmax(logits, None)?;
        Ok((state, probs))
    }

    pub fn initial_state(&self, tape: &mut Tape) -> LstmState {
        LstmState::zeros(tape, self.config.hidden)
    }

    /// Attention from the previous state followed by [`Self::decode_step`].
    pub fn step(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutputs,
        prev: LstmState,
        y_prev: usize,
    ) -> Result<StepOutput> {
        let candidates = self.candidate_context(tape, prev.h, enc)?;
        let message = self.message_context(tape, prev.h, enc)?;
        let (state, probs) = self.decode_step(tape, y_prev, prev, candidates.context, message.context)?;
        Ok(StepOutput {
            state,
            probs,
            candidates,
            message,
        })
    }

    /// Feeds `BOS, targets[..n-1]` and returns one output per target.
    pub fn teacher_force(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutputs,
        targets: &[usize],
    ) -> Result<Vec<StepOutput>> {
        if targets.is_empty() {
            return Err(Error::EmptyUtterance("teacher-forcing targets"));
        }
        let mut prev = self.initial_state(tape);
        let mut y = BOS;
        let mut outs = Vec::with_capacity(targets.len());
        for &t in targets {
            let out = self.step(tape, enc, prev, y)?;
            prev = out.state;
            y = t;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Mean per-token negative log-likelihood of the response plus EOS.
    pub fn mle_loss_on(&self, tape: &mut Tape, ex: &TrainingExample) -> Result<Var> {
        let enc = self.encode(tape, &ex.message, &ex.candidates)?;
        let targets = targets(&ex.response);
        let outs = self.teacher_force(tape, &enc, &targets)?;
        let rows: Vec<Var> = outs.iter().map(|o| o.probs).collect();
        let probs = tape.stack_rows(&rows);
        cross_entropy(tape, probs, &targets)
    }

    /// `sum_j ln p(targets[j])` under teacher forcing, as a `1 x 1` node.
    pub fn sequence_logprob_on(
        &self,
        tape: &mut Tape,
        message: &Utterance,
        candidates: &[Utterance],
        targets: &[usize],
    ) -> Result<Var> {
        let enc = self.encode(tape, message, candidates)?;
        let outs = self.teacher_force(tape, &enc, targets)?;
        let rows: Vec<Var> = outs.iter().map(|o| o.probs).collect();
        let probs = tape.stack_rows(&rows);
        let picked = tape.pick(probs, targets)?;
        let logs = tape.log(picked);
        Ok(tape.sum(logs))
    }

    pub fn mle_loss(&self, ex: &TrainingExample) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let loss = self.mle_loss_on(&mut tape, ex)?;
        Ok(tape.value(loss).item())
    }

    /// Loss and gradients under an arbitrary parameter set with this
    /// generator's layout.
    pub fn mle_gradients_with(&self, ps: &ParameterSet, ex: &TrainingExample) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(ps);
        let loss = self.mle_loss_on(&mut tape, ex)?;
        Ok((tape.value(loss).item(), tape.backward(loss)?))
    }

    pub fn mle_gradients(&self, ex: &TrainingExample) -> Result<(f64, Gradients)> {
        self.mle_gradients_with(&self.params, ex)
    }

    /// Samples a response on `tape`, keeping its log-probability
    /// differentiable. Consumes the random stream exactly like
    /// [`Self::sample`].
    pub fn sample_on<R: Rng>(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutputs,
        rng: &mut R,
    ) -> Result<SampledPath> {
        let mut prev = self.initial_state(tape);
        let mut y = BOS;
        let mut tokens = Vec::new();
        let mut terms = Vec::new();
        let mut terminated = false;
        for _ in 0..self.config.max_decode_len {
            let out = self.step(tape, enc, prev, y)?;
            let tok = sample_categorical(tape.value(out.probs).data(), rng)?;
            let p = tape.pick(out.probs, &[tok])?;
            terms.push(tape.log(p));
            if tok == EOS {
                terminated = true;
                break;
            }
            tokens.push(tok);
            prev = out.state;
            y = tok;
        }
        let stacked = tape.stack_rows(&terms);
        let logprob = tape.sum(stacked);
        Ok(SampledPath {
            sample: Sample {
                tokens,
                logprob: tape.value(logprob).item(),
                terminated,
            },
            logprob,
        })
    }

    pub fn decoder<'g>(&'g self, message: &Utterance, candidates: &[Utterance]) -> Result<GeneratorDecoder<'g>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, message, candidates)?;
        Ok(GeneratorDecoder {
            gen: self,
            tape,
            enc,
        })
    }

    pub fn beam_search(&self, message: &Utterance, candidates: &[Utterance], beam: usize) -> Result<Hypothesis> {
        let mut dec = self.decoder(message, candidates)?;
        decode::beam_search(&mut dec, beam, self.config.max_decode_len)
    }

    pub fn greedy(&self, message: &Utterance, candidates: &[Utterance]) -> Result<Hypothesis> {
        let mut dec = self.decoder(message, candidates)?;
        decode::greedy(&mut dec, self.config.max_decode_len)
    }

    pub fn sample<R: Rng>(&self, message: &Utterance, candidates: &[Utterance], rng: &mut R) -> Result<Sample> {
        let mut dec = self.decoder(message, candidates)?;
        decode::sample(&mut dec, rng, self.config.max_decode_len)
    }

    pub fn sample_seeded(&self, message: &Utterance, candidates: &[Utterance], seed: u64) -> Result<Sample> {
        self.sample(message, candidates, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Teacher-forced run over `tokens` recording every attention weight,
    /// state and distribution.
    pub fn trace(&self, message: &Utterance, candidates: &[Utterance], tokens: &[usize]) -> Result<DecodeTrace> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, message, candidates)?;
        let outs = self.teacher_force(&mut tape, &enc, tokens)?;
        let t = &tape;
        Ok(DecodeTrace {
            tokens: tokens.to_vec(),
            states: outs.iter().map(|o| values(t, o.state.h)).collect(),
            word_weights: outs
                .iter()
                .map(|o| o.candidates.word_weights.iter().map(|&w| values(t, w)).collect())
                .collect(),
            sentence_weights: outs.iter().map(|o| values(t, o.candidates.sentence_weights)).collect(),
            candidate_contexts: outs.iter().map(|o| values(t, o.candidates.context)).collect(),
            message_weights: outs.iter().map(|o| values(t, o.message.weights)).collect(),
            message_contexts: outs.iter().map(|o| values(t, o.message.context)).collect(),
            distributions: outs.iter().map(|o| values(t, o.probs)).collect(),
        })
    }
}

/// Incremental decoder over one encoded message, usable with the generic
/// search routines in [`crate::decode`].
pub struct GeneratorDecoder<'g> {
    gen: &'g Generator,
    tape: Tape<'g>,
    enc: EncoderOutputs,
}

impl StepModel for GeneratorDecoder<'_> {
    type State = LstmState;

    fn vocab_size(&self) -> usize {
        self.gen.config.vocab_size
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn allowed(&self, token: usize) -> bool {
        token != PAD && token != BOS
    }

    fn start(&mut self) -> Result<(LstmState, Vec<f64>)> {
        let init = self.gen.initial_state(&mut self.tape);
        self.advance(&init, BOS)
    }

    fn advance(&mut self, state: &LstmState, token: usize) -> Result<(LstmState, Vec<f64>)> {
        let out = self.gen.step(&mut self.tape, &self.enc, *state, token)?;
        let lp = self.tape.value(out.probs).data().iter().map(|p| p.ln()).collect();
        Ok((out.state, lp))
    }
}
