//! Policy-gradient updates against a fixed reward that pays 1 whenever the
//! response contains "love". The mean reward should climb towards 1.
//!
//! cargo run --release --example reward_climb

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reat::corpus::{Encoder, TrainingExample, Utterance, Vocabulary};
use reat::generator::{Generator, GeneratorConfig};
use reat::training::{
    generator_rl_step, pretrain_generator, Baseline, KeywordReward, RewardModel, TrainConfig, TrainLog,
};

fn main() -> reat::Result<()> {
    let pairs = reat::toy::overfit_pairs();
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
            beam: 1,
            max_decode_len: 12,
        },
        1,
    )?;
    let cfg = TrainConfig {
        batch_size: 8,
        lr: 0.01,
        pretrain_epochs: 10,
        ..TrainConfig::default()
    };
    pretrain_generator(&mut g, &data, &[], &cfg, &mut TrainLog::new())?;

    let reward = KeywordReward {
        keyword: vocab.id("love"),
        hit: 1.0,
        miss: 0.0,
    };
    let estimate = |g: &Generator| -> reat::Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        let mut total = 0.0;
        for i in 0..100 {
            let ex = &data[i % data.len()];
            let s = g.sample(&ex.message, &ex.candidates, &mut rng)?;
            total += reward.reward(&ex.message, &ex.candidates, &s.tokens)?;
        }
        Ok(total / 100.0)
    };

    let adam = TrainConfig { lr: 0.001, ..cfg }.adam();
    let mut baseline = Baseline { value: 0.0, decay: 0.9 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    println!("step   0: reward {:.2}", estimate(&g)?);
    for step in 1..=200 {
        let batch: Vec<TrainingExample> = data.choose_multiple(&mut rng, 8).cloned().collect();
        generator_rl_step(&mut g, &batch, &reward, &adam, Some(&mut baseline), &mut rng)?;
        if step % 40 == 0 {
            println!("step {step:>3}: reward {:.2}", estimate(&g)?);
        }
    }
    let ex = &data[0];
    let out = g.greedy(&ex.message, &ex.candidates)?;
    println!("\n{} -> {}", vocab.decode_text(ex.message.ids()), vocab.decode_text(&out.tokens));
    Ok(())
}
