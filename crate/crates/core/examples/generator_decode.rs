//! Pretrains a small generator on the 50-pair overfit set, then decodes one
//! message greedily, with beam search and by sampling, and prints the
//! attention it paid to each candidate.
//!
//! cargo run --release --example generator_decode

use reat::corpus::{Encoder, TrainingExample, Utterance, Vocabulary};
use reat::generator::{Generator, GeneratorConfig};
use reat::toy;
use reat::training::{perplexity, pretrain_generator, TrainConfig, TrainLog};

fn main() -> reat::Result<()> {
    let pairs = toy::overfit_pairs();
    let vocab = Vocabulary::build(&pairs, usize::MAX)?;
    let mut enc = Encoder::new(&vocab, 50);
    let mut data = Vec::new();
    for p in &pairs {
        let p = enc.encode_pair(p)?;
        data.push(TrainingExample {
            message: p.message,
            candidates: vec![p.response.clone(), Utterance::unk()],
            response: p.response,
        });
    }
    let mut g = Generator::seeded(
        GeneratorConfig {
            vocab_size: vocab.len(),
            embedding_dim: 16,
            hidden: 24,
            attention_dim: 24,
            n_candidates: 2,
            beam: 5,
            max_decode_len: 12,
        },
        1,
    )?;
    let cfg = TrainConfig {
        batch_size: 8,
        lr: 0.01,
        pretrain_epochs: 80,
        ..TrainConfig::default()
    };
    let report = pretrain_generator(&mut g, &data, &[], &cfg, &mut TrainLog::new())?;
    println!("{} epochs, perplexity {:.3}\n", report.epochs_run, perplexity(&g, &data)?);

    let ex = &data[7];
    let show = |ids: &[usize]| vocab.decode_text(ids);
    println!("message    {}", show(ex.message.ids()));
    for (i, c) in ex.candidates.iter().enumerate() {
        println!("candidate  {} {}", i + 1, show(c.ids()));
    }
    let greedy = g.greedy(&ex.message, &ex.candidates)?;
    println!("\ngreedy     {}  ({:.3})", show(&greedy.tokens), greedy.score);
    let beam = g.beam_search(&ex.message, &ex.candidates, 5)?;
    println!("beam 5     {}  ({:.3})", show(&beam.tokens), beam.score);
    for seed in 0..3 {
        let s = g.sample_seeded(&ex.message, &ex.candidates, seed)?;
        println!("sample {seed}   {}", show(&s.tokens));
    }

    let targets = reat::generator::targets(&ex.response);
    let trace = g.trace(&ex.message, &ex.candidates, &targets)?;
    println!("\nsentence-level attention while reading the reference:");
    for (tok, w) in targets.iter().zip(&trace.sentence_weights) {
        println!("  {:<10} {:.2} {:.2}", vocab.word(*tok), w[0], w[1]);
    }
    Ok(())
}
