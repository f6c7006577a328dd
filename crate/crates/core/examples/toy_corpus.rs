//! Writes the bundled toy corpus and prints its statistics.
//!
//! cargo run --example toy_corpus -- [path]

use std::path::PathBuf;

use reat::corpus::{filter_short, records_to_pairs, write_corpus, DEFAULT_MIN_RESPONSE_LEN};
use reat::toy;

fn main() -> reat::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("toy_corpus.jsonl"), PathBuf::from);
    let records = toy::corpus();
    write_corpus(&path, &records)?;
    let pairs = records_to_pairs(&records, true);
    let kept = filter_short(&pairs, DEFAULT_MIN_RESPONSE_LEN);
    println!("{} messages, {} pairs, {} after length filter", records.len(), pairs.len(), kept.len());
    for rec in records.iter().take(2) {
        println!("\n{}", rec.message);
        for r in &rec.responses {
            println!("  - {r}");
        }
    }
    println!("\nwritten to {}", path.display());
    Ok(())
}
