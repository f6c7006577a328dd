//! Trains the two discriminator variants on a task where only the candidates
//! reveal which topic a reply must mention, and scores both on a probe whose
//! negatives have their topic swapped.
//!
//! cargo run --release --example discriminator_probe -- [seed]

use rand_chacha::ChaCha8Rng;
use reat::corpus::TrainingExample;
use reat::discriminator::{Discriminator, DiscriminatorConfig};
use reat::evaluation::disc_accuracy;
use reat::toy::{swap_topic, ReferenceTask};
use reat::training::{pretrain_discriminator, TrainConfig, TrainLog};

fn main() -> reat::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let task = ReferenceTask::new(200, 100, seed)?;
    let (probe, _) = &task.probe.items[0];
    println!("probe example: {}", task.vocab.decode_text(probe.message.ids()));
    for c in &probe.candidates {
        println!("  candidate  {}", task.vocab.decode_text(c.ids()));
    }
    println!("  human      {}", task.vocab.decode_text(&probe.response));
    println!("  corrupted  {}\n", task.vocab.decode_text(&task.probe.items[1].0.response));

    for use_candidates in [false, true] {
        let mut d = Discriminator::seeded(
            DiscriminatorConfig {
                vocab_size: task.vocab.len(),
                embedding_dim: 16,
                hidden: 16,
                mlp_hidden: 16,
                n_candidates: 2,
                use_candidates,
            },
            seed,
        )?;
        let topics = task.topics.clone();
        let mut negatives =
            move |ex: &TrainingExample, rng: &mut ChaCha8Rng| Ok(Some(swap_topic(ex.response.ids(), &topics, rng)));
        let cfg = TrainConfig {
            batch_size: 16,
            lr: 0.01,
            disc_pretrain_epochs: 40,
            seed,
            ..TrainConfig::default()
        };
        let losses = pretrain_discriminator(&mut d, &task.train, &mut negatives, &cfg, &mut TrainLog::new())?;
        println!(
            "{:<20} final loss {:.3}, probe accuracy {:.1}%",
            if use_candidates { "with candidates" } else { "without candidates" },
            losses.last().copied().unwrap_or(f64::NAN),
            100.0 * disc_accuracy(&d, &task.probe)?
        );
    }
    Ok(())
}
