//! Resolves a run configuration the way the command line does: profile
//! defaults, then a TOML file, then `key=value` overrides.
//!
//! cargo run --example config_profiles -- [section.key=value ...]

use reat::config::RunConfig;

fn main() -> reat::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();

    for profile in ["paper", "desk"] {
        let cfg = RunConfig::parse("", Some(profile), &[])?;
        println!(
            "{profile:>5}: embedding {}, hidden {}, batch {}, lr {}, beam {}, K={} N={}",
            cfg.model.embedding_dim,
            cfg.model.hidden,
            cfg.train.batch_size,
            cfg.train.lr,
            cfg.model.beam,
            cfg.retrieval.k,
            cfg.retrieval.n
        );
    }

    let file = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.conf"))?;
    let cfg = RunConfig::parse(&file, None, &overrides)?;
    println!("\nconfigs/toy.conf with {overrides:?}:\n");
    print!("{}", cfg.to_toml()?);

    match RunConfig::parse(&file, None, &["model.colour=3".into()]) {
        Ok(_) => println!("\nunexpected: unknown key accepted"),
        Err(e) => println!("\nrejected as expected: {e} (exit code {})", e.exit_code()),
    }
    Ok(())
}
