//! Runs the whole workflow on the bundled toy corpus, then compares the
//! pretrained generator, the adversarially trained one, and a control that
//! gets the same number of policy-gradient steps with a constant reward and
//! no baseline.
//!
//! cargo run --release --example adversarial_toy -- [seed] [out-dir]

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reat::config::RunConfig;
use reat::evaluation::{training_responses, MetricsReport};
use reat::generator::Generator;
use reat::pipeline::{Pipeline, Split, ADV, GEN};
use reat::corpus::TrainingExample;
use reat::training::{generator_rl_step, ConstantReward};

fn beam_outputs(g: &Generator, test: &[TrainingExample], beam: usize) -> reat::Result<Vec<Vec<usize>>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for ex in test {
        if seen.insert(ex.message.clone()) {
            out.push(g.beam_search(&ex.message, &ex.candidates, beam)?.tokens);
        }
    }
    Ok(out)
}

fn main() -> reat::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join(format!("reat-toy-{seed}")), PathBuf::from);
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let config = RunConfig::load(Some(&manifest.join("configs/toy.conf")), None, &[format!("seed={seed}")])?;
    let p = Pipeline::new(&out, config)?;

    let r = p.prepare(&manifest.join("data/toy_corpus.jsonl"))?;
    println!("train/valid/test pairs: {}/{}/{}", r.train, r.valid, r.test);
    p.build_index()?;
    for split in Split::ALL {
        p.candidates(split)?;
    }
    let pre = p.pretrain_gen()?;
    println!("pretrained {} epochs (kept epoch {})", pre.epochs_run, pre.best_epoch);
    let (_, acc) = p.pretrain_disc(true)?;
    println!("discriminator probe accuracy after pretraining {:.1}%", 100.0 * acc);
    p.generate(&p.path(GEN), Split::Test, "mle")?;
    let adv = p.adv_train()?;
    for e in &adv.epochs {
        println!("epoch {:>2}: reward {:.3}, discriminator loss {:.3}", e.epoch, e.reward_mean, e.disc_loss);
    }
    p.generate(&p.path(ADV), Split::Test, "adv")?;
    let metrics = p.evaluate(&["mle".into(), "adv".into()])?;

    let vocab = p.vocab()?;
    let train = p.examples(Split::Train, &vocab)?;
    let test = p.examples(Split::Test, &vocab)?;
    let mut control = p.load_generator(&vocab, &p.path(GEN))?;
    let tc = p.config.train_config();
    let adam = tc.adversarial_adam();
    let mut rng = ChaCha8Rng::seed_from_u64(p.config.seed);
    let g_batches: usize = adv.epochs.iter().map(|e| e.g_batches).sum();
    for _ in 0..g_batches {
        let batch: Vec<TrainingExample> = train.choose_multiple(&mut rng, tc.batch_size).cloned().collect();
        generator_rl_step(&mut control, &batch, &ConstantReward(0.5), &adam, None, &mut rng)?;
    }
    let control_metrics = MetricsReport::compute(
        &beam_outputs(&control, &test, p.config.model.beam)?,
        &training_responses(&train),
    )?;

    println!();
    print!(
        "{}",
        MetricsReport::table(&[
            ("MLE", &metrics["mle"]),
            ("adversarial", &metrics["adv"]),
            ("constant reward", &control_metrics),
        ])
    );
    println!("\nartifacts in {}", out.display());
    Ok(())
}
