//! Small synthetic dialogue corpora for examples and tests.
//!
//! The bundled corpus pairs 40 messages (10 topics, four phrasings each) with
//! five responses: one generic reply shared by every message and four
//! topic-specific replies. Neighbouring phrasings share half of their reply
//! templates, so retrieval with self-exclusion still surfaces on-topic
//! candidates. A few short replies exist only to be filtered out.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{tokenize, CorpusRecord, TextPair, TrainingExample, Utterance, Vocabulary};
use crate::discriminator::DiscExample;
use crate::error::Result;
use crate::evaluation::ProbeSet;

pub const TOPICS: [&str; 10] = [
    "pizza", "coffee", "football", "guitar", "movies", "cats", "tennis", "jazz", "hiking", "soup",
];

pub const GENERIC: &str = "i do not know what you mean";

const PHRASINGS: [&str; 5] = [
    "do you like {} at all",
    "what do you think about {} these days",
    "tell me one thing about {} please",
    "have you ever tried {} with friends",
    "how often do you talk about {}",
];

const REPLIES: [&str; 8] = [
    "i really love {} so much",
    "{} is the best thing in the world",
    "my brother talks about {} every day",
    "there is a new place for {} near my house",
    "i have never tried {} before today",
    "people say {} is quite overrated now",
    "we should go find some {} together soon",
    "{} always makes me happy when i am tired",
];

const SHORT: [&str; 2] = ["ok sure", "lol"];

fn fill(template: &str, topic: &str) -> String {
    template.replace("{}", topic)
}

/// The bundled 200-pair corpus (`data/toy_corpus.jsonl`).
pub fn corpus() -> Vec<CorpusRecord> {
    let mut out = Vec::new();
    for (t, topic) in TOPICS.iter().enumerate() {
        for phrasing in 0..4 {
            let mut responses = vec![GENERIC.to_string()];
            for k in 0..4 {
                responses.push(fill(REPLIES[(2 * phrasing + k) % REPLIES.len()], topic));
            }
            // every fifth message swaps its last reply for a short one
            if (4 * t + phrasing) % 5 == 4 {
                responses[4] = SHORT[t % SHORT.len()].to_string();
            }
            out.push(CorpusRecord {
                message: fill(PHRASINGS[phrasing], topic),
                responses,
            });
        }
    }
    out
}

/// 50 pairs with distinct messages and one deterministic reply each.
pub fn overfit_pairs() -> Vec<TextPair> {
    let mut out = Vec::new();
    for phrasing in 0..PHRASINGS.len() {
        for (t, topic) in TOPICS.iter().enumerate() {
            out.push(TextPair {
                message: tokenize(&fill(PHRASINGS[phrasing], topic), true),
                response: tokenize(&fill(REPLIES[(t + phrasing) % REPLIES.len()], topic), true),
            });
        }
    }
    out
}

/// A task where only the candidates reveal which topic the reply must
/// mention: every message is the same prompt, the candidates mention the
/// topic, and negatives are replies whose topic was swapped for another.
pub struct ReferenceTask {
    pub vocab: Vocabulary,
    pub train: Vec<TrainingExample>,
    pub probe: ProbeSet,
    /// Vocabulary ids of the topics.
    pub topics: Vec<usize>,
}

const PROMPT: &str = "say something nice";

fn reference_example<R: Rng>(vocab: &Vocabulary, topics: &[usize], rng: &mut R) -> Result<TrainingExample> {
    let enc = |s: &str| Utterance::new(tokenize(s, true).iter().map(|w| vocab.id(w)).collect());
    let topic = TOPICS[rng.gen_range(0..topics.len())];
    let mut templates: Vec<usize> = (0..REPLIES.len()).collect();
    templates.shuffle(rng);
    Ok(TrainingExample {
        message: enc(PROMPT)?,
        response: enc(&fill(REPLIES[templates[0]], topic))?,
        candidates: vec![
            enc(&fill(REPLIES[templates[1]], topic))?,
            enc(&fill(REPLIES[templates[2]], topic))?,
        ],
    })
}

/// Replaces every topic id in the response with a different random topic.
pub fn swap_topic<R: Rng>(response: &[usize], topics: &[usize], rng: &mut R) -> Vec<usize> {
    response
        .iter()
        .map(|&id| {
            if topics.contains(&id) {
                loop {
                    let other = topics[rng.gen_range(0..topics.len())];
                    if other != id {
                        break other;
                    }
                }
            } else {
                id
            }
        })
        .collect()
}

impl ReferenceTask {
    pub fn new(n_train: usize, n_probe: usize, seed: u64) -> Result<Self> {
        let mut texts: Vec<TextPair> = Vec::new();
        for topic in TOPICS {
            for r in REPLIES {
                texts.push(TextPair {
                    message: tokenize(PROMPT, true),
                    response: tokenize(&fill(r, topic), true),
                });
            }
        }
        let vocab = Vocabulary::build(&texts, usize::MAX)?;
        let topics: Vec<usize> = TOPICS.iter().map(|t| vocab.id(t)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = (0..n_train)
            .map(|_| reference_example(&vocab, &topics, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut probe = ProbeSet::default();
        for _ in 0..n_probe {
            let ex = reference_example(&vocab, &topics, &mut rng)?;
            let corrupted = swap_topic(ex.response.ids(), &topics, &mut rng);
            let human = DiscExample {
                message: ex.message.clone(),
                candidates: ex.candidates.clone(),
                response: ex.response.ids().to_vec(),
            };
            let machine = DiscExample {
                response: corrupted,
                ..human.clone()
            };
            probe.push(human, true);
            probe.push(machine, false);
        }
        Ok(ReferenceTask {
            vocab,
            train,
            probe,
            topics,
        })
    }
}
