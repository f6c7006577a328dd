//! Diversity and novelty metrics for generated responses, and classification
//! accuracy of a discriminator on a frozen probe set.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingExample, Utterance};
use crate::discriminator::{DiscExample, Discriminator};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinctCount {
    pub distinct: usize,
    pub total_words: usize,
    /// `distinct / total_words`; zero when there are no words.
    pub ratio: f64,
}

/// Distinct k-grams pooled over all responses, normalized by the total number
/// of words (not k-grams). k-grams never span two responses.
pub fn dist_k<S, W>(responses: &[S], k: usize) -> Result<DistinctCount>
where
    S: AsRef<[W]>,
    W: Hash + Eq,
{
    if responses.is_empty() {
        return Err(Error::InvalidArgument("dist-k of an empty response set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("dist-k needs k >= 1".into()));
    }
    let mut seen: HashSet<&[W]> = HashSet::new();
    let mut total_words = 0;
    for r in responses {
        let r = r.as_ref();
        total_words += r.len();
        seen.extend(r.windows(k));
    }
    let ratio = if total_words == 0 {
        0.0
    } else {
        seen.len() as f64 / total_words as f64
    };
    Ok(DistinctCount {
        distinct: seen.len(),
        total_words,
        ratio,
    })
}

/// Fraction of responses whose exact id sequence does not occur among the
/// training responses. Zero for an empty response set.
pub fn originality<S: AsRef<[usize]>>(responses: &[S], training: &HashSet<Vec<usize>>) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let novel = responses
        .iter()
        .filter(|r| !training.contains(r.as_ref()))
        .count();
    novel as f64 / responses.len() as f64
}

/// Set of training responses for [`originality`].
pub fn training_responses(examples: &[TrainingExample]) -> HashSet<Vec<usize>> {
    examples.iter().map(|e| e.response.ids().to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub unigrams: usize,
    pub bigrams: usize,
    pub total_words: usize,
    pub dist1: f64,
    pub dist2: f64,
    pub originality: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn compute<S: AsRef<[usize]>>(responses: &[S], training: &HashSet<Vec<usize>>) -> Result<Self> {
        let d1 = dist_k(responses, 1)?;
        let d2 = dist_k(responses, 2)?;
        Ok(MetricsReport {
            unigrams: d1.distinct,
            bigrams: d2.distinct,
            total_words: d1.total_words,
            dist1: d1.ratio,
            dist2: d2.ratio,
            originality: originality(responses, training),
            accuracy: None,
        })
    }

    /// Plain-text table with one row per named report.
    pub fn table(rows: &[(&str, &MetricsReport)]) -> String {
        let header = ["Model", "# of UNI", "Dist-1", "# of BI", "Dist-2", "Origin"];
        let body: Vec<[String; 6]> = rows
            .iter()
            .map(|(name, r)| {
                [
                    name.to_string(),
                    r.unigrams.to_string(),
                    format!("{:.3}", r.dist1),
                    r.bigrams.to_string(),
                    format!("{:.3}", r.dist2),
                    format!("{:.3}", r.originality),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let mut s = format!("{:<w$}", cells[0], w = widths[0]);
            for (cell, w) in cells[1..].iter().zip(&widths[1..]) {
                let _ = write!(s, "  {cell:>w$}");
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&header.map(String::from));
        for row in &body {
            line(row);
        }
        out
    }
}

/// Frozen labelled examples for scoring discriminators. `true` marks a
/// human-written response.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeSet {
    pub items: Vec<(DiscExample, bool)>,
}

#[derive(Serialize, Deserialize)]
struct ProbeRecord {
    human: bool,
    message: Utterance,
    candidates: Vec<Utterance>,
    response: Vec<usize>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, example: DiscExample, human: bool) {
        self.items.push((example, human));
    }

    pub fn negative_fraction(&self) -> f64 {
        let neg = self.items.iter().filter(|(_, h)| !h).count();
        neg as f64 / self.items.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (ex, human) in &self.items {
            let rec = ProbeRecord {
                human: *human,
                message: ex.message.clone(),
                candidates: ex.candidates.clone(),
                response: ex.response.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut probe = ProbeSet::default();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ProbeRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(path.display(), format!("line {}: {e}", i + 1)))?;
            probe.push(
                DiscExample {
                    message: rec.message,
                    candidates: rec.candidates,
                    response: rec.response,
                },
                rec.human,
            );
        }
        Ok(probe)
    }
}

/// Accuracy of an arbitrary probability function; `p > 0.5` predicts human.
pub fn accuracy_with<F>(probe: &ProbeSet, mut prob: F) -> Result<f64>
where
    F: FnMut(&DiscExample) -> Result<f64>,
{
    if probe.is_empty() {
        return Err(Error::InvalidArgument("empty probe set".into()));
    }
    let mut correct = 0;
    for (ex, human) in &probe.items {
        if (prob(ex)? > 0.5) == *human {
            correct += 1;
        }
    }
    Ok(correct as f64 / probe.len() as f64)
}

pub fn disc_accuracy(disc: &Discriminator, probe: &ProbeSet) -> Result<f64> {
    accuracy_with(probe, |ex| disc.classify(ex))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_counts() {
        let r = [words("a b"), words("b c")];
        let d = dist_k(&r, 1).unwrap();
        assert_eq!((d.distinct, d.total_words, d.ratio), (3, 4, 0.75));
        let d = dist_k(&[words("a a a")], 2).unwrap();
        assert_eq!((d.distinct, d.total_words), (1, 3));
        assert!((d.ratio - 1.0 / 3.0).abs() < 1e-15);
        assert!(dist_k::<Vec<&str>, &str>(&[], 1).is_err());
    }

    #[test]
    fn published_ratio_is_consistent() {
        let ratio = 6837.0 / 60504.0;
        assert_eq!(format!("{ratio:.3}"), "0.113");
    }

    #[test]
    fn originality_cases() {
        let train: HashSet<Vec<usize>> = [vec![4, 5], vec![6]].into_iter().collect();
        assert_eq!(originality(&[vec![4, 5], vec![6]], &train), 0.0);
        assert_eq!(originality(&[vec![4], vec![5, 4]], &train), 1.0);
        assert_eq!(originality(&[vec![6], vec![7], vec![4, 5, 6], vec![5]], &train), 0.75);
    }

    #[test]
    fn table_has_all_columns() {
        let r = MetricsReport::compute(&[vec![4, 5, 6], vec![4, 5]], &HashSet::new()).unwrap();
        let t = MetricsReport::table(&[("MLE", &r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("# of UNI") && lines[0].contains("Origin"));
        assert!(lines[1].starts_with("MLE"));
        assert!(lines[1].contains("0.600"));
    }

    fn probe(labels: &[bool]) -> ProbeSet {
        let u = |v: &[usize]| Utterance::new(v.to_vec()).unwrap();
        let mut p = ProbeSet::default();
        for (i, &h) in labels.iter().enumerate() {
            p.push(
                DiscExample {
                    message: u(&[4 + i]),
                    candidates: vec![u(&[5])],
                    response: vec![6, i],
                },
                h,
            );
        }
        p
    }

    #[test]
    fn accuracy_rules() {
        let p = probe(&[true, false, false, true, false]);
        let perfect = accuracy_with(&p, |ex| Ok(if ex.response[1] % 3 == 0 { 0.9 } else { 0.1 })).unwrap();
        assert_eq!(perfect, 1.0);
        let constant = accuracy_with(&p, |_| Ok(0.5)).unwrap();
        assert_eq!(constant, p.negative_fraction());
        assert!(accuracy_with(&ProbeSet::default(), |_| Ok(0.5)).is_err());
    }

    #[test]
    fn probe_round_trip() {
        let p = probe(&[true, false, true]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.jsonl");
        p.save(&path).unwrap();
        assert_eq!(ProbeSet::load(&path).unwrap(), p);
    }

    fn brute_force(responses: &[Vec<usize>], k: usize) -> (usize, usize) {
        let mut grams: Vec<Vec<usize>> = Vec::new();
        let mut total = 0;
        for r in responses {
            total += r.len();
            let mut i = 0;
            while i + k <= r.len() {
                let g = r[i..i + k].to_vec();
                if !grams.contains(&g) {
                    grams.push(g);
                }
                i += 1;
            }
        }
        (grams.len(), total)
    }

    proptest! {
        #[test]
        fn dist_matches_brute_force(
            responses in prop::collection::vec(prop::collection::vec(0usize..6, 0..7), 1..30),
            k in 1usize..3,
        ) {
            let d = dist_k(&responses, k).unwrap();
            let (distinct, total) = brute_force(&responses, k);
            prop_assert_eq!(d.distinct, distinct);
            prop_assert_eq!(d.total_words, total);
            prop_assert!(d.ratio <= 1.0);
            let mut dup = responses.clone();
            dup.push(responses[0].clone());
            prop_assert!(dist_k(&dup, k).unwrap().ratio <= d.ratio + 1e-15);
        }

        #[test]
        fn accuracy_ignores_order(labels in prop::collection::vec(any::<bool>(), 1..12), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let p = probe(&labels);
            let mut shuffled = p.clone();
            shuffled.items.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let f = |ex: &DiscExample| Ok(((ex.message.ids()[0] * 7) % 10) as f64 / 10.0);
            prop_assert_eq!(accuracy_with(&p, f).unwrap(), accuracy_with(&shuffled, f).unwrap());
        }
    }
}
