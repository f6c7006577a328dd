//! Central-difference gradient checks for both models.
//!
//! cargo run --release --example gradient_check

use reat::autodiff::gradcheck::check_gradients;
use reat::corpus::{TrainingExample, Utterance};
use reat::discriminator::{DiscExample, Discriminator, DiscriminatorConfig};
use reat::generator::{Generator, GeneratorConfig};

fn u(ids: &[usize]) -> Utterance {
    Utterance::new(ids.to_vec()).unwrap()
}

fn main() -> reat::Result<()> {
    let mut g = Generator::seeded(
        GeneratorConfig {
            vocab_size: 10,
            embedding_dim: 3,
            hidden: 4,
            attention_dim: 3,
            n_candidates: 2,
            beam: 2,
            max_decode_len: 6,
        },
        3,
    )?;
    // larger weights keep the gradients well above the comparison floor
    for p in g.params_mut().iter_mut() {
        p.value.scale(10.0);
    }
    let ex = TrainingExample {
        message: u(&[4, 5, 6]),
        response: u(&[7, 8]),
        candidates: vec![u(&[7, 9]), u(&[5])],
    };
    let r = check_gradients(g.params(), |ps| g.mle_gradients_with(ps, &ex))?;
    println!(
        "generator MLE: {} scalars, max relative error {:.2e} at {:?}",
        r.checked, r.max_rel_error, r.worst
    );

    for use_candidates in [true, false] {
        let mut d = Discriminator::seeded(
            DiscriminatorConfig {
                vocab_size: 10,
                embedding_dim: 3,
                hidden: 3,
                mlp_hidden: 3,
                n_candidates: 2,
                use_candidates,
            },
            4,
        )?;
        for p in d.params_mut().iter_mut() {
            p.value.scale(10.0);
        }
        let pos = DiscExample {
            message: ex.message.clone(),
            candidates: ex.candidates.clone(),
            response: vec![7, 8],
        };
        let neg = DiscExample {
            response: vec![9, 9, 4],
            ..pos.clone()
        };
        let r = check_gradients(d.params(), |ps| d.loss_gradients_with(ps, &[pos.clone()], &[neg.clone()]))?;
        println!(
            "discriminator (candidates: {use_candidates}): {} scalars, max relative error {:.2e}",
            r.checked, r.max_rel_error
        );
    }
    Ok(())
}
