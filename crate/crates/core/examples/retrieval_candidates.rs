//! Builds the TF-IDF index over the toy corpus and shows the two best
//! candidates for a few messages, with and without excluding the message's
//! own document.
//!
//! cargo run --example retrieval_candidates -- [message ...]

use reat::corpus::{filter_short, records_to_pairs, Encoder, Vocabulary, DEFAULT_MIN_RESPONSE_LEN};
use reat::retrieval::{Index, RetrievalConfig};
use reat::toy;

fn main() -> reat::Result<()> {
    let pairs = filter_short(&records_to_pairs(&toy::corpus(), true), DEFAULT_MIN_RESPONSE_LEN);
    let vocab = Vocabulary::build(&pairs, usize::MAX)?;
    let mut enc = Encoder::new(&vocab, 50);
    let encoded = pairs.iter().map(|p| enc.encode_pair(p)).collect::<reat::Result<Vec<_>>>()?;
    let index = Index::from_pairs(&encoded, vocab.len())?;
    println!("{} documents, {} word types\n", index.doc_count(), vocab.len());

    let mut queries: Vec<String> = std::env::args().skip(1).collect();
    if queries.is_empty() {
        queries = vec![
            "do you like pizza at all".into(),
            "what do you think about jazz these days".into(),
            "any plans for the weekend".into(),
        ];
    }
    let cfg = RetrievalConfig::default();
    for q in &queries {
        let msg = enc.encode_text(q, true)?;
        println!("{q}");
        for exclude in [false, true] {
            let set = index.top_n_candidates(&msg, &cfg, exclude);
            let label = if exclude { "excluding own" } else { "plain" };
            for (c, s) in set.candidates.iter().zip(&set.scores) {
                println!("  [{label:>13}] {s:.3}  {}", vocab.decode_text(c.ids()));
            }
            if set.fallback {
                println!("  [{label:>13}] no match; placeholder candidates");
            }
        }
        println!();
    }
    Ok(())
}
