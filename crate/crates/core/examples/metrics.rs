//! Diversity and novelty of a handful of responses.
//!
//! cargo run --example metrics

use reat::corpus::tokenize;
use reat::evaluation::{dist_k, originality, MetricsReport};

fn main() -> reat::Result<()> {
    let training = ["i really love pizza so much", "i do not know what you mean"];
    let generic = ["i do not know what you mean"; 4];
    let varied = [
        "i really love pizza so much",
        "coffee is the best thing in the world",
        "my brother talks about jazz every day",
        "i do not know what you mean",
    ];

    let ids = |texts: &[&str]| -> Vec<Vec<usize>> {
        // ids by first appearance, as the metrics work on ids
        let mut words: Vec<String> = Vec::new();
        texts
            .iter()
            .map(|t| {
                tokenize(t, true)
                    .into_iter()
                    .map(|w| match words.iter().position(|x| *x == w) {
                        Some(i) => i,
                        None => {
                            words.push(w);
                            words.len() - 1
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let all: Vec<&str> = training.iter().chain(&generic).chain(&varied).copied().collect();
    let encoded = ids(&all);
    let (train, rest) = encoded.split_at(training.len());
    let (generic_ids, varied_ids) = rest.split_at(generic.len());
    let train_set = train.iter().cloned().collect();

    let g = MetricsReport::compute(generic_ids, &train_set)?;
    let v = MetricsReport::compute(varied_ids, &train_set)?;
    print!("{}", MetricsReport::table(&[("generic", &g), ("varied", &v)]));

    let words: Vec<Vec<String>> = varied.iter().map(|t| tokenize(t, true)).collect();
    let d2 = dist_k(&words, 2)?;
    println!(
        "\nvaried: {} distinct bigrams over {} words = {:.3}",
        d2.distinct, d2.total_words, d2.ratio
    );
    println!("originality of varied: {:.2}", originality(varied_ids, &train_set));
    println!("6837 distinct bigrams over 60504 words: {:.3}", 6837.0 / 60504.0);
    Ok(())
}
