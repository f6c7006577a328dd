//! Model-agnostic decoding: beam search, greedy decoding and ancestral
//! sampling over anything that yields next-token log-probabilities.

use std::cmp::Ordering;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};

/// An autoregressive model queried one token at a time.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn eos(&self) -> usize;

    /// Whether `token` may be emitted by search-based decoding. Sampling
    /// ignores this and draws from the full distribution.
    fn allowed(&self, _token: usize) -> bool {
        true
    }

    /// Initial state and log-probabilities of the first token.
    fn start(&mut self) -> Result<(Self::State, Vec<f64>)>;

    /// Consumes `token` and returns the next state and next-token
    /// log-probabilities.
    fn advance(&mut self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

/// A finished decoding result. `tokens` never contains EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities, including EOS when it was emitted.
    pub score: f64,
    /// Whether decoding ended with EOS rather than at the length cap.
    pub terminated: bool,
    /// Decoding step at which the hypothesis completed.
    pub completed_at: usize,
}

fn rank_finished(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.completed_at.cmp(&b.completed_at))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn searchable<M: StepModel>(model: &M, token: usize, step: usize) -> bool {
    model.allowed(token) && !(step == 1 && token == model.eos())
}

struct Live<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    next: Vec<f64>,
}

/// Length-wise beam search over summed log-probabilities, without length
/// normalization. EOS is not allowed as the first token. Hypotheses reaching
/// `max_len` tokens complete without EOS.
pub fn beam_search<M: StepModel>(model: &mut M, beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::InvalidArgument(
            "beam size and max length must be positive".into(),
        ));
    }
    let eos = model.eos();
    let (state, next) = model.start()?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 1..=max_len {
        // (parent, token, score)
        let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
        for (pi, hyp) in live.iter().enumerate() {
            for (tok, &lp) in hyp.next.iter().enumerate() {
                if searchable(model, tok, step) {
                    expansions.push((pi, tok, hyp.score + lp));
                }
            }
        }
        expansions.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                live[a.0]
                    .tokens
                    .iter()
                    .chain(std::iter::once(&a.1))
                    .cmp(live[b.0].tokens.iter().chain(std::iter::once(&b.1)))
            })
        });
        expansions.truncate(beam);

        let mut next_live = Vec::new();
        for (pi, tok, score) in expansions {
            let parent = &live[pi];
            if tok == eos {
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    score,
                    terminated: true,
                    completed_at: step,
                });
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if step == max_len {
                finished.push(Hypothesis {
                    tokens,
                    score,
                    terminated: false,
                    completed_at: step,
                });
                continue;
            }
            let (state, next) = model.advance(&parent.state, tok)?;
            next_live.push(Live {
                tokens,
                score,
                state,
                next,
            });
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        // log-probs are non-positive, so no live hypothesis can overtake a
        // finished one that already scores at least as well
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if best_done >= best_live {
            break;
        }
    }
    finished.sort_by(rank_finished);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument("no decodable token".into()))
}

/// Picks the highest-probability allowed token at every step; ties go to the
/// lowest token id.
pub fn greedy<M: StepModel>(model: &mut M, max_len: usize) -> Result<Hypothesis> {
    let eos = model.eos();
    let (mut state, mut next) = model.start()?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for step in 1..=max_len {
        let (tok, lp) = next
            .iter()
            .enumerate()
            .filter(|(t, _)| searchable(model, *t, step))
            .fold(None, |best: Option<(usize, f64)>, (t, &lp)| match best {
                Some((_, b)) if b >= lp => best,
                _ => Some((t, lp)),
            })
            .ok_or_else(|| Error::InvalidArgument("no decodable token".into()))?;
        score += lp;
        if tok == eos {
            return Ok(Hypothesis {
                tokens,
                score,
                terminated: true,
                completed_at: step,
            });
        }
        tokens.push(tok);
        if step < max_len {
            (state, next) = model.advance(&state, tok)?;
        }
    }
    Ok(Hypothesis {
        tokens,
        score,
        terminated: false,
        completed_at: max_len,
    })
}

/// Result of ancestral sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Sampled tokens without the trailing EOS.
    pub tokens: Vec<usize>,
    /// Total log-probability of the sampled sequence (including EOS when
    /// sampled).
    pub logprob: f64,
    pub terminated: bool,
}

impl Sample {
    /// Target sequence for teacher forcing: tokens plus EOS when sampled.
    pub fn targets(&self, eos: usize) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if self.terminated {
            t.push(eos);
        }
        t
    }
}

/// Draws an index from a probability vector.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(probs)
        .map_err(|e| Error::NonFinite(format!("sampling distribution: {e}")))?;
    Ok(dist.sample(rng))
}

/// Ancestral sampling at temperature 1 until EOS or `max_len` tokens.
pub fn sample<M: StepModel, R: Rng>(model: &mut M, rng: &mut R, max_len: usize) -> Result<Sample> {
    let eos = model.eos();
    let (mut state, mut next) = model.start()?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    for step in 1..=max_len {
        let probs: Vec<f64> = next.iter().map(|lp| lp.exp()).collect();
        let tok = sample_categorical(&probs, rng)?;
        logprob += next[tok];
        if tok == eos {
            return Ok(Sample {
                tokens,
                logprob,
                terminated: true,
            });
        }
        tokens.push(tok);
        if step < max_len {
            (state, next) = model.advance(&state, tok)?;
        }
    }
    Ok(Sample {
        tokens,
        logprob,
        terminated: false,
    })
}
