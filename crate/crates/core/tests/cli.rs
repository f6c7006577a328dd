use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Instant;

use reat::corpus::{read_corpus, tokenize};
use reat::pipeline::read_generations;
use reat::retrieval::read_candidates;

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn reat(out: &Path, args: &[&str]) -> Output {
    let config = manifest("configs/toy.conf");
    Command::new(env!("CARGO_BIN_EXE_reat"))
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(&config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = reat(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(out: &Path, args: &[&str]) -> i32 {
    reat(out, args).status.code().unwrap()
}

fn chat(out: &Path, input: &str) -> String {
    let mut child = Command::new(env!("CARGO_BIN_EXE_reat"))
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(manifest("configs/toy.conf"))
        .arg("chat")
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    String::from_utf8(o.stdout).unwrap()
}

fn snapshot(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect()
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let corpus = manifest("data/toy_corpus.jsonl");
    let corpus = corpus.to_str().unwrap();
    let start = Instant::now();

    let prepared = ok(out, &["prepare", corpus]);
    assert!(prepared.contains("kept 192 of 200 pairs"), "{prepared}");
    ok(out, &["build-index"]);
    ok(out, &["candidates"]);
    ok(out, &["pretrain-gen"]);
    ok(out, &["pretrain-disc", "--no-candidates"]);
    ok(out, &["pretrain-disc"]);
    ok(out, &["generate", "--tag", "mle"]);
    ok(out, &["adv-train"]);
    ok(out, &["generate", "--checkpoint", out.join("adv.bin").to_str().unwrap()]);
    let table = ok(out, &["evaluate", "mle", "adv"]);
    let accuracy = ok(out, &["disc-accuracy"]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "toy pipeline took {secs:.0}s");

    assert!(table.lines().next().unwrap().contains("Dist-2"));
    assert!(table.lines().any(|l| l.starts_with("mle")));
    assert!(table.lines().any(|l| l.starts_with("adv")));
    assert_eq!(accuracy.lines().count(), 2, "{accuracy}");
    assert!(accuracy.contains("without candidates") && accuracy.contains("with candidates"));
    for k in 1..=10 {
        assert!(out.join(format!("ckpt-epoch{k}.bin")).exists());
    }
    assert!(!read_generations(&out.join("generations-adv.jsonl")).unwrap().is_empty());

    // every training message keeps its own responses out of the candidates
    let records = read_corpus(&manifest("data/toy_corpus.jsonl")).unwrap();
    let normalize = |s: &str| tokenize(s, true).join(" ");
    for rec in read_candidates(&out.join("candidates-train.jsonl")).unwrap() {
        let source = records.iter().find(|r| normalize(&r.message) == rec.message).unwrap();
        for c in &rec.candidates {
            assert!(
                !source.responses.iter().any(|r| normalize(r) == *c),
                "{:?} retrieved for its own message",
                c
            );
        }
    }

    // rerunning cheap commands reproduces their outputs byte for byte
    let files = [
        "vocab.txt",
        "splits/train.jsonl",
        "index.bin",
        "candidates-train.jsonl",
        "candidates-test.jsonl",
        "generations-mle.jsonl",
        "metrics.json",
        "disc-accuracy.json",
    ];
    let before = snapshot(out, &files);
    ok(out, &["prepare", corpus]);
    ok(out, &["build-index"]);
    ok(out, &["candidates"]);
    ok(out, &["generate", "--tag", "mle"]);
    ok(out, &["evaluate", "mle", "adv"]);
    ok(out, &["disc-accuracy"]);
    assert!(before == snapshot(out, &files));

    let seen = chat(out, "do you like pizza at all\n:q\n");
    assert!(seen.starts_with("> "));
    assert!(seen.contains("candidate 1:") && seen.contains("candidate 2:"));
    assert!(!seen.contains("no retrieval hit"));

    let unseen = chat(out, "zebras quantum marmalade\n");
    assert!(unseen.contains("candidate 1: <unk>"), "{unseen}");
    assert!(unseen.contains("no retrieval hit"));
    let response = unseen.trim_start_matches("> ").lines().next().unwrap();
    assert!(!response.trim().is_empty());

    // a generator shaped differently from the checkpoint is a config error
    assert_eq!(code(out, &["--set", "model.hidden=7", "generate", "--tag", "x"]), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let missing = out.join("nope.jsonl");
    assert_eq!(code(out, &["prepare", missing.to_str().unwrap()]), 3);
    assert_eq!(code(out, &["build-index"]), 3);
    assert_eq!(code(out, &["--profile", "laptop", "build-index"]), 2);
    assert_eq!(code(out, &["--set", "model.colour=3", "build-index"]), 2);
    assert_eq!(code(out, &["--set", "train.lr=-1", "build-index"]), 2);

    let corpus = manifest("data/toy_corpus.jsonl");
    ok(out, &["prepare", corpus.to_str().unwrap()]);
    ok(out, &["build-index"]);
    ok(out, &["candidates"]);
    assert_eq!(code(out, &["generate"]), 3);
    assert_eq!(
        code(
            out,
            &["--set", "train.lr=1e200", "--set", "train.pretrain_epochs=3", "pretrain-gen"]
        ),
        4
    );
}
