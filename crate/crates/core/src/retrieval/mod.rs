//! Retrieval of N-best response candidates.
//!
//! Pairs sharing a message are merged into one [`Document`]; an inverted index
//! over document *messages* finds the top-K documents for a query message by
//! TF-IDF cosine, and their responses are re-ranked by a [`ResponseRanker`].

mod persist;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Pair, Utterance, Vocabulary, NUM_RESERVED};
use crate::error::{Error, Result};

pub use persist::INDEX_MAGIC;

/// A message with every distinct response it received.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: usize,
    pub message: Utterance,
    pub responses: Vec<Utterance>,
}

/// Groups pairs by identical message. Documents appear in first-occurrence
/// order; responses are deduplicated keeping insertion order.
pub fn merge_documents(pairs: &[Pair]) -> Vec<Document> {
    let mut docs: Vec<Document> = Vec::new();
    let mut slot: HashMap<&Utterance, usize> = HashMap::new();
    for p in pairs {
        let i = *slot.entry(&p.message).or_insert_with(|| {
            docs.push(Document {
                doc_id: docs.len(),
                message: p.message.clone(),
                responses: Vec::new(),
            });
            docs.len() - 1
        });
        if !docs[i].responses.contains(&p.response) {
            docs[i].responses.push(p.response.clone());
        }
    }
    docs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub doc_id: usize,
    pub tf: usize,
}

/// `ln((N + 1) / (df + 1)) + 1`; strictly positive for any `df <= N`.
pub fn idf(doc_count: usize, df: usize) -> f64 {
    ((doc_count as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
}

fn is_term(id: usize) -> bool {
    id >= NUM_RESERVED
}

/// Raw term frequencies, reserved ids excluded.
pub fn term_counts(ids: &[usize]) -> BTreeMap<usize, usize> {
    let mut tf = BTreeMap::new();
    for &id in ids.iter().filter(|&&i| is_term(i)) {
        *tf.entry(id).or_insert(0) += 1;
    }
    tf
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchHit {
    pub doc_id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedResponse {
    pub doc_id: usize,
    pub position: usize,
    pub response: Utterance,
    pub score: f64,
}

/// Retrieval parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Documents fetched per query.
    pub k: usize,
    /// Candidates returned per message.
    pub n: usize,
    /// Weight of response similarity in the lexical ranker.
    pub lambda: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 10,
            n: 2,
            lambda: 0.5,
        }
    }
}

/// Scores a response for a query. The lexical implementation can be swapped
/// for a learned matcher without touching the candidate pipeline.
pub trait ResponseRanker {
    fn score(&self, index: &Index, query: &Utterance, response: &Utterance, source: &Utterance)
        -> f64;
}

/// `lambda * cos(query, response) + (1 - lambda) * cos(query, source message)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LexicalRanker {
    pub lambda: f64,
}

impl ResponseRanker for LexicalRanker {
    fn score(&self, index: &Index, query: &Utterance, response: &Utterance, source: &Utterance) -> f64 {
        self.lambda * index.cosine(query.ids(), response.ids())
            + (1.0 - self.lambda) * index.cosine(query.ids(), source.ids())
    }
}

/// The N-best candidates for one message.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub message: Utterance,
    pub candidates: Vec<Utterance>,
    pub scores: Vec<f64>,
    /// Set when nothing matched and the candidates are `UNK` placeholders.
    pub fallback: bool,
}

/// Inverted index over document messages.
#[derive(Clone, Debug)]
pub struct Index {
    vocab_size: usize,
    docs: Vec<Document>,
    postings: BTreeMap<usize, Vec<Posting>>,
    doc_norms: Vec<f64>,
    msg_lens: Vec<usize>,
    by_message: HashMap<Utterance, usize>,
}

impl PartialEq for Index {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.docs == other.docs
            && self.postings == other.postings
    }
}

impl Index {
    pub fn build(docs: Vec<Document>, vocab_size: usize) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut postings: BTreeMap<usize, Vec<Posting>> = BTreeMap::new();
        for (i, doc) in docs.iter().enumerate() {
            if doc.doc_id != i {
                return Err(Error::InvalidArgument(format!(
                    "document {i} carries doc_id {}",
                    doc.doc_id
                )));
            }
            if doc.responses.is_empty() {
                return Err(Error::InvalidArgument(format!("document {i} has no responses")));
            }
            for (term, tf) in term_counts(doc.message.ids()) {
                postings.entry(term).or_default().push(Posting { doc_id: i, tf });
            }
        }
        let mut index = Index {
            vocab_size,
            msg_lens: docs.iter().map(|d| d.message.len()).collect(),
            by_message: docs
                .iter()
                .map(|d| (d.message.clone(), d.doc_id))
                .collect(),
            doc_norms: Vec::new(),
            docs,
            postings,
        };
        index.doc_norms = index
            .docs
            .iter()
            .map(|d| norm(&index.weights(d.message.ids())))
            .collect();
        Ok(index)
    }

    pub fn from_pairs(pairs: &[Pair], vocab_size: usize) -> Result<Self> {
        Self::build(merge_documents(pairs), vocab_size)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, id: usize) -> &Document {
        &self.docs[id]
    }

    pub fn postings(&self, term: usize) -> Option<&[Posting]> {
        self.postings.get(&term).map(Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, &[Posting])> {
        self.postings.iter().map(|(t, p)| (*t, p.as_slice()))
    }

    pub fn message_len(&self, doc_id: usize) -> usize {
        self.msg_lens[doc_id]
    }

    pub fn document_frequency(&self, term: usize) -> usize {
        self.postings.get(&term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: usize) -> f64 {
        idf(self.docs.len(), self.document_frequency(term))
    }

    /// TF-IDF weights of a token sequence.
    pub fn weights(&self, ids: &[usize]) -> BTreeMap<usize, f64> {
        term_counts(ids)
            .into_iter()
            .map(|(t, tf)| (t, tf as f64 * self.idf(t)))
            .collect()
    }

    /// TF-IDF cosine similarity; zero when either side has no terms.
    pub fn cosine(&self, a: &[usize], b: &[usize]) -> f64 {
        let (wa, wb) = (self.weights(a), self.weights(b));
        let (na, nb) = (norm(&wa), norm(&wb));
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = wa
            .iter()
            .filter_map(|(t, x)| wb.get(t).map(|y| x * y))
            .sum();
        dot / (na * nb)
    }

    /// Documents whose message shares at least one indexed term with `query`,
    /// by descending cosine then ascending doc id; at most `k`.
    pub fn search(&self, query: &Utterance, k: usize) -> Vec<SearchHit> {
        let mut matched: HashSet<usize> = HashSet::new();
        for term in term_counts(query.ids()).keys() {
            if let Some(list) = self.postings.get(term) {
                matched.extend(list.iter().map(|p| p.doc_id));
            }
        }
        let mut hits: Vec<SearchHit> = matched
            .into_iter()
            .map(|doc_id| SearchHit {
                doc_id,
                score: self.cosine(query.ids(), self.docs[doc_id].message.ids()),
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
        hits.truncate(k);
        hits
    }

    /// Scores every response of the given documents, sorted by descending
    /// score with ties broken by `(doc_id, position)`.
    pub fn rank_responses(
        &self,
        query: &Utterance,
        doc_ids: &[usize],
        ranker: &dyn ResponseRanker,
    ) -> Vec<RankedResponse> {
        let mut out = Vec::new();
        for &d in doc_ids {
            let doc = &self.docs[d];
            for (position, resp) in doc.responses.iter().enumerate() {
                out.push(RankedResponse {
                    doc_id: d,
                    position,
                    response: resp.clone(),
                    score: ranker.score(self, query, resp, &doc.message),
                });
            }
        }
        out.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.doc_id.cmp(&b.doc_id))
                .then(a.position.cmp(&b.position))
        });
        out
    }

    /// Id of the document whose message is exactly `message`.
    pub fn find_message(&self, message: &Utterance) -> Option<usize> {
        self.by_message.get(message).copied()
    }

    /// Full candidate pipeline with the default lexical ranker.
    pub fn top_n_candidates(
        &self,
        message: &Utterance,
        cfg: &RetrievalConfig,
        exclude_self: bool,
    ) -> CandidateSet {
        self.top_n_with(message, cfg, exclude_self, &LexicalRanker { lambda: cfg.lambda })
    }

    /// search(K) -> drop the message's own document (when `exclude_self`) ->
    /// re-rank -> take N distinct responses. With exclusion active, responses
    /// equal to any response of the excluded document are also dropped, so
    /// the ground truth can never come back through another document.
    pub fn top_n_with(
        &self,
        message: &Utterance,
        cfg: &RetrievalConfig,
        exclude_self: bool,
        ranker: &dyn ResponseRanker,
    ) -> CandidateSet {
        let own = if exclude_self {
            self.find_message(message)
        } else {
            None
        };
        let banned: HashSet<&Utterance> = own
            .map(|d| self.docs[d].responses.iter().collect())
            .unwrap_or_default();
        let doc_ids: Vec<usize> = self
            .search(message, cfg.k)
            .into_iter()
            .map(|h| h.doc_id)
            .filter(|&d| Some(d) != own)
            .collect();
        let mut seen: HashSet<Utterance> = HashSet::new();
        let mut candidates = Vec::new();
        let mut scores = Vec::new();
        for r in self.rank_responses(message, &doc_ids, ranker) {
            if candidates.len() == cfg.n {
                break;
            }
            if banned.contains(&r.response) || !seen.insert(r.response.clone()) {
                continue;
            }
            candidates.push(r.response);
            scores.push(r.score);
        }
        if candidates.is_empty() {
            return CandidateSet {
                message: message.clone(),
                candidates: vec![Utterance::unk(); cfg.n],
                scores: vec![0.0; cfg.n],
                fallback: true,
            };
        }
        while candidates.len() < cfg.n {
            candidates.push(candidates[0].clone());
            scores.push(scores[0]);
        }
        CandidateSet {
            message: message.clone(),
            candidates,
            scores,
            fallback: false,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        persist::write_index(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        persist::read_index(&mut r, &path.display().to_string())
    }
}

fn norm(w: &BTreeMap<usize, f64>) -> f64 {
    w.values().map(|x| x * x).sum::<f64>().sqrt()
}

/// One line of a candidate dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub message: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub fallback: bool,
}

impl CandidateRecord {
    pub fn from_set(set: &CandidateSet, vocab: &Vocabulary) -> Self {
        CandidateRecord {
            message: vocab.decode_text(set.message.ids()),
            candidates: set
                .candidates
                .iter()
                .map(|c| vocab.decode_text(c.ids()))
                .collect(),
            scores: set.scores.clone(),
            fallback: set.fallback,
        }
    }
}

pub fn write_candidates(path: &Path, records: &[CandidateRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path.display(), format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn u(ids: &[usize]) -> Utterance {
        Utterance::new(ids.to_vec()).unwrap()
    }

    fn p(m: &[usize], r: &[usize]) -> Pair {
        Pair {
            message: u(m),
            response: u(r),
        }
    }

    #[test]
    fn merge_groups_and_dedups() {
        let docs = merge_documents(&[p(&[4], &[10]), p(&[4], &[11]), p(&[5], &[12])]);
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].responses, vec![u(&[10]), u(&[11])]);
        assert_eq!(docs[1].responses, vec![u(&[12])]);
        let docs = merge_documents(&[p(&[4], &[10]), p(&[4], &[10])]);
        assert_eq!(docs[0].responses, vec![u(&[10])]);
        assert!(merge_documents(&[]).is_empty());
    }

    #[test]
    fn build_index_postings() {
        let idx = Index::from_pairs(&[p(&[4, 5], &[9])], 20).unwrap();
        assert_eq!(idx.postings(4), Some(&[Posting { doc_id: 0, tf: 1 }][..]));
        assert_eq!(idx.postings(5), Some(&[Posting { doc_id: 0, tf: 1 }][..]));
        assert_eq!(idx.postings(6), None);
        let idx = Index::from_pairs(&[p(&[4], &[9]), p(&[5], &[9]), p(&[6], &[9])], 20).unwrap();
        assert_eq!(idx.doc_count(), 3);
        assert!(matches!(Index::build(vec![], 10), Err(Error::EmptyIndex)));
    }

    #[test]
    fn rare_term_hand_tfidf() {
        // doc A: "4 5", doc B: "4 6". Query "5 7": shares only the rare term 5.
        // idf(4) = ln(3/3)+1 = 1, idf(5) = idf(6) = ln(3/2)+1, idf(7) = ln 3 + 1.
        let idx = Index::from_pairs(&[p(&[4, 5], &[9]), p(&[4, 6], &[9])], 20).unwrap();
        let hits = idx.search(&u(&[5, 7]), 10);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, 0);
        let i5 = 1.5f64.ln() + 1.0;
        let i7 = 3f64.ln() + 1.0;
        let expected = i5 * i5 / ((i5 * i5 + i7 * i7).sqrt() * (1.0 + i5 * i5).sqrt());
        assert!((hits[0].score - expected).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_and_underfull() {
        let idx = Index::from_pairs(
            &[p(&[4, 5], &[9]), p(&[4, 6], &[9]), p(&[4, 7], &[9]), p(&[8], &[9])],
            20,
        )
        .unwrap();
        let hits = idx.search(&u(&[4, 6]), 10);
        assert_eq!(hits[0].doc_id, 1);
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert_eq!(hits.len(), 3);
        assert!(idx.search(&u(&[1, 15]), 10).is_empty());
    }

    #[test]
    fn identical_response_ranks_first() {
        let idx = Index::from_pairs(&[p(&[4, 5], &[6, 7]), p(&[4, 8], &[4, 5])], 20).unwrap();
        let ranked = idx.rank_responses(&u(&[4, 5]), &[0, 1], &LexicalRanker { lambda: 1.0 });
        assert_eq!(ranked[0].response, u(&[4, 5]));
        assert!((ranked[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_orders_by_source_message() {
        let idx = Index::from_pairs(
            &[p(&[4, 5], &[4, 5]), p(&[4, 5, 6], &[7]), p(&[4], &[5])],
            20,
        )
        .unwrap();
        let q = u(&[4, 5]);
        let ranked = idx.rank_responses(&q, &[0, 1, 2], &LexicalRanker { lambda: 0.0 });
        let by_doc: Vec<usize> = ranked.iter().map(|r| r.doc_id).collect();
        let mut expect: Vec<usize> = vec![0, 1, 2];
        expect.sort_by(|&a, &b| {
            let sa = idx.cosine(q.ids(), idx.doc(a).message.ids());
            let sb = idx.cosine(q.ids(), idx.doc(b).message.ids());
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        assert_eq!(by_doc, expect);
    }

    #[test]
    fn exclusion_and_fill() {
        // message 4 5 has its own doc; only one other doc shares a term.
        let idx = Index::from_pairs(&[p(&[4, 5], &[10, 11]), p(&[4, 6], &[12, 13])], 20).unwrap();
        let cfg = RetrievalConfig::default();
        let set = idx.top_n_candidates(&u(&[4, 5]), &cfg, true);
        assert!(!set.fallback);
        assert_eq!(set.candidates, vec![u(&[12, 13]), u(&[12, 13])]);
        let set = idx.top_n_candidates(&u(&[4, 5]), &cfg, false);
        assert_eq!(set.candidates[0], u(&[10, 11]));

        let set = idx.top_n_candidates(&u(&[17]), &cfg, true);
        assert!(set.fallback);
        assert_eq!(set.candidates, vec![Utterance::unk(), Utterance::unk()]);
    }

    #[test]
    fn ground_truth_blocked_across_documents() {
        // the response 10 11 also answers a different message
        let idx = Index::from_pairs(&[p(&[4, 5], &[10, 11]), p(&[4, 6], &[10, 11]), p(&[4, 7], &[12])], 20)
            .unwrap();
        let set = idx.top_n_candidates(&u(&[4, 5]), &RetrievalConfig::default(), true);
        assert!(set.candidates.iter().all(|c| c != &u(&[10, 11])));
    }

    fn brute_force(docs: &[Vec<usize>], q: &[usize]) -> Vec<(usize, f64)> {
        // independent TF-IDF cosine over all documents
        let n = docs.len();
        let df = |t: usize| docs.iter().filter(|d| d.contains(&t)).count();
        let w = |s: &[usize]| {
            let mut m: BTreeMap<usize, f64> = BTreeMap::new();
            for &t in s.iter().filter(|&&t| t >= 4) {
                *m.entry(t).or_insert(0.0) += 1.0;
            }
            for (t, v) in m.iter_mut() {
                *v *= ((n as f64 + 1.0) / (df(*t) as f64 + 1.0)).ln() + 1.0;
            }
            m
        };
        let qw = w(q);
        let qn: f64 = qw.values().map(|x| x * x).sum::<f64>().sqrt();
        let mut out = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            let dw = w(d);
            let dot: f64 = qw.iter().map(|(t, x)| x * dw.get(t).copied().unwrap_or(0.0)).sum();
            if dot > 0.0 {
                let dn: f64 = dw.values().map(|x| x * x).sum::<f64>().sqrt();
                out.push((i, dot / (qn * dn)));
            }
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    proptest! {
        #[test]
        fn search_matches_brute_force(
            msgs in proptest::collection::vec(proptest::collection::vec(4usize..14, 1..6), 1..40),
            q in proptest::collection::vec(1usize..16, 1..6),
        ) {
            let mut seen = HashSet::new();
            let msgs: Vec<Vec<usize>> = msgs.into_iter().filter(|m| seen.insert(m.clone())).collect();
            let pairs: Vec<Pair> = msgs.iter().map(|m| p(m, &[20])).collect();
            let idx = Index::from_pairs(&pairs, 30).unwrap();
            let hits = idx.search(&u(&q), 100);
            let oracle = brute_force(&msgs, &q);
            prop_assert_eq!(hits.len(), oracle.len());
            for (h, (d, s)) in hits.iter().zip(&oracle) {
                prop_assert!((h.score - s).abs() < 1e-9);
                // ordering may only differ among numerically tied scores
                if h.doc_id != *d {
                    prop_assert!((idx.cosine(&q, idx.doc(*d).message.ids()) - h.score).abs() < 1e-9);
                }
            }
            let top = idx.search(&u(&q), 3);
            prop_assert_eq!(&top[..], &hits[..hits.len().min(3)]);
        }

        #[test]
        fn candidate_scores_non_increasing(
            msgs in proptest::collection::vec(proptest::collection::vec(4usize..10, 1..4), 2..20),
            resp in proptest::collection::vec(proptest::collection::vec(4usize..12, 1..4), 20),
        ) {
            let pairs: Vec<Pair> = msgs.iter().zip(&resp).map(|(m, r)| p(m, r)).collect();
            let idx = Index::from_pairs(&pairs, 20).unwrap();
            for pair in &pairs {
                let set = idx.top_n_candidates(&pair.message, &RetrievalConfig::default(), true);
                prop_assert_eq!(set.candidates.len(), 2);
                prop_assert!(set.scores.windows(2).all(|w| w[0] >= w[1]));
                let own = idx.find_message(&pair.message).unwrap();
                for c in &set.candidates {
                    prop_assert!(!idx.doc(own).responses.contains(c));
                }
            }
        }
    }
}
