//! Hybrid lexical + semantic retrieval over trace content.
//!
//! Lexical scoring is BM25 (k1 = 1.2, b = 0.75); semantic scoring is
//! cosine over unit-norm embeddings. Hybrid results fuse the two rank
//! lists with reciprocal rank fusion, 1/(60 + rank). The default embedder
//! hashes terms into a fixed number of buckets, so the whole index is
//! deterministic and network-free; deployments wanting a real embedding
//! model plug one in through the same trait.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::store::CorpusState;

pub const DEFAULT_TOP_K: usize = 20;
pub const RRF_K: f64 = 60.0;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const DEFAULT_EMBED_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("top_k must be positive")]
    BadTopK,
    #[error("corpus must not be empty")]
    EmptyCorpus,
    #[error("embedding failed for trace '{short_id}': {message}")]
    EmbedFailed { short_id: String, message: String },
    #[error("unknown document '{0}'")]
    UnknownDocument(String),
}

/// Text embedding hook. Must return vectors of a fixed dimension.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, String>;
}

/// Feature-hashing embedder: terms hashed into `dim` buckets with a
/// hash-derived sign, then L2-normalized. Identical texts always get
/// identical embeddings.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

// FNV-1a; stable across platforms and releases, unlike std's DefaultHasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, String> {
        let mut vec = vec![0f32; self.dim];
        for term in tokenize(text) {
            let h = fnv1a(term.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            vec[bucket] += sign;
        }
        let norm: f64 = vec.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut vec {
                *v = (*v as f64 / norm) as f32;
            }
        } else {
            // all-empty text: deterministic unit vector
            vec[0] = 1.0;
        }
        Ok(vec)
    }
}

/// Lowercase, split on non-alphanumerics, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone)]
pub struct IndexedDocument {
    pub short_id: String,
    pub term_frequencies: HashMap<String, u32>,
    /// Document length in terms.
    pub length: usize,
    pub embedding: Vec<f32>,
    text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Hybrid,
    Lexical,
    Semantic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchHit {
    pub short_id: String,
    pub fused_score: f64,
    pub lexical_rank: Option<usize>,
    pub semantic_rank: Option<usize>,
    pub snippet: String,
}

#[derive(Debug)]
pub struct SearchIndex {
    docs: Vec<IndexedDocument>,
    by_short: BTreeMap<String, usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
    embed_dim: usize,
}

/// Build the in-memory index over every trace's rendered content.
pub fn build_index(
    corpus: &CorpusState,
    embedder: &dyn Embedder,
) -> Result<SearchIndex, SearchError> {
    if corpus.is_empty() {
        return Err(SearchError::EmptyCorpus);
    }
    let mut docs = Vec::with_capacity(corpus.len());
    for trace in &corpus.traces {
        let text = trace.full_text();
        let terms = tokenize(&text);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in &terms {
            *tf.entry(t.clone()).or_insert(0) += 1;
        }
        let embedding = embedder
            .embed(&text)
            .map_err(|message| SearchError::EmbedFailed {
                short_id: trace.short_id.clone(),
                message,
            })?;
        docs.push(IndexedDocument {
            short_id: trace.short_id.clone(),
            length: terms.len().max(1),
            term_frequencies: tf,
            embedding,
            text,
        });
    }
    let mut doc_freq: HashMap<String, usize> = HashMap::new();
    for doc in &docs {
        for term in doc.term_frequencies.keys() {
            *doc_freq.entry(term.clone()).or_insert(0) += 1;
        }
    }
    let avg_len = docs.iter().map(|d| d.length as f64).sum::<f64>() / docs.len() as f64;
    let by_short = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (d.short_id.clone(), i))
        .collect();
    Ok(SearchIndex {
        docs,
        by_short,
        doc_freq,
        avg_len,
        embed_dim: embedder.dim(),
    })
}

impl SearchIndex {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn document(&self, short_id: &str) -> Option<&IndexedDocument> {
        self.by_short.get(short_id).map(|&i| &self.docs[i])
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = *self.doc_freq.get(term).unwrap_or(&0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn bm25(&self, doc: &IndexedDocument, query_terms: &[String]) -> f64 {
        let mut score = 0.0;
        for term in query_terms {
            let tf = *doc.term_frequencies.get(term).unwrap_or(&0) as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = self.idf(term);
            let denom =
                tf + BM25_K1 * (1.0 - BM25_B + BM25_B * doc.length as f64 / self.avg_len);
            score += idf * tf * (BM25_K1 + 1.0) / denom;
        }
        score
    }

    /// BM25 score of one document for a query; 0 when nothing matches.
    pub fn lexical_score(&self, query: &str, short_id: &str) -> Result<f64, SearchError> {
        let doc = self
            .document(short_id)
            .ok_or_else(|| SearchError::UnknownDocument(short_id.to_string()))?;
        Ok(self.bm25(doc, &tokenize(query)))
    }

    fn score_all(&self, query_terms: &[String], query_emb: &[f32]) -> Vec<(f64, f64)> {
        #[cfg(feature = "parallel")]
        {
            if self.docs.len() >= 256 {
                return self
                    .docs
                    .par_iter()
                    .map(|d| (self.bm25(d, query_terms), cosine(&d.embedding, query_emb)))
                    .collect();
            }
        }
        self.score_all_seq(query_terms, query_emb)
    }

    /// Sequential scoring twin, kept callable for the bench suite.
    #[doc(hidden)]
    pub fn score_all_seq(&self, query_terms: &[String], query_emb: &[f32]) -> Vec<(f64, f64)> {
        self.docs
            .iter()
            .map(|d| (self.bm25(d, query_terms), cosine(&d.embedding, query_emb)))
            .collect()
    }

    /// Parallel scoring twin, kept callable for the bench suite.
    #[cfg(feature = "parallel")]
    #[doc(hidden)]
    pub fn score_all_par(&self, query_terms: &[String], query_emb: &[f32]) -> Vec<(f64, f64)> {
        self.docs
            .par_iter()
            .map(|d| (self.bm25(d, query_terms), cosine(&d.embedding, query_emb)))
            .collect()
    }

    /// Ranked retrieval. Hybrid mode fuses the lexical and semantic rank
    /// lists with RRF; hits sort by fused score descending, ties broken by
    /// short id ascending.
    pub fn search(
        &self,
        query: &str,
        top_k: usize,
        mode: SearchMode,
        embedder: &dyn Embedder,
    ) -> Result<Vec<SearchHit>, SearchError> {
        if query.trim().is_empty() {
            return Err(SearchError::EmptyQuery);
        }
        if top_k == 0 {
            return Err(SearchError::BadTopK);
        }
        let query_terms = tokenize(query);
        let query_emb = embedder
            .embed(query)
            .map_err(|message| SearchError::EmbedFailed {
                short_id: "<query>".to_string(),
                message,
            })?;
        let scores = self.score_all(&query_terms, &query_emb);

        // rank lists: index -> rank (1-based); lexical list only includes
        // docs with a positive score
        let lexical_ranks = rank_by(
            scores
                .iter()
                .enumerate()
                .filter(|(_, s)| s.0 > 0.0)
                .map(|(i, s)| (i, s.0)),
            &self.docs,
        );
        let semantic_ranks = rank_by(
            scores.iter().enumerate().map(|(i, s)| (i, s.1)),
            &self.docs,
        );

        let mut hits: Vec<SearchHit> = Vec::new();
        for (i, doc) in self.docs.iter().enumerate() {
            let lex = if matches!(mode, SearchMode::Hybrid | SearchMode::Lexical) {
                lexical_ranks.get(&i).copied()
            } else {
                None
            };
            let sem = if matches!(mode, SearchMode::Hybrid | SearchMode::Semantic) {
                semantic_ranks.get(&i).copied()
            } else {
                None
            };
            if lex.is_none() && sem.is_none() {
                continue;
            }
            let fused = lex.map_or(0.0, |r| 1.0 / (RRF_K + r as f64))
                + sem.map_or(0.0, |r| 1.0 / (RRF_K + r as f64));
            hits.push(SearchHit {
                short_id: doc.short_id.clone(),
                fused_score: fused,
                lexical_rank: lex,
                semantic_rank: sem,
                snippet: snippet(&doc.text, &query_terms),
            });
        }
        hits.sort_by(|a, b| {
            b.fused_score
                .partial_cmp(&a.fused_score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.short_id.cmp(&b.short_id))
        });
        hits.truncate(top_k);
        Ok(hits)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>()
}

/// Dense 1-based ranks, score descending, ties broken by short id.
fn rank_by<I>(scored: I, docs: &[IndexedDocument]) -> HashMap<usize, usize>
where
    I: Iterator<Item = (usize, f64)>,
{
    let mut entries: Vec<(usize, f64)> = scored.collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| docs[a.0].short_id.cmp(&docs[b.0].short_id))
    });
    entries
        .into_iter()
        .enumerate()
        .map(|(rank, (i, _))| (i, rank + 1))
        .collect()
}

/// Text window around the first occurrence of any query term; falls back
/// to the document head when nothing matches lexically.
fn snippet(text: &str, query_terms: &[String]) -> String {
    let lower = text.to_lowercase();
    let hit = query_terms
        .iter()
        .filter_map(|t| lower.find(t.as_str()))
        .min();
    let window = 160;
    match hit {
        Some(pos) => {
            let start = pos.saturating_sub(60);
            let start = ceil_char_boundary(text, start);
            let end = floor_char_boundary(text, (pos + window).min(text.len()));
            let mut s = String::new();
            if start > 0 {
                s.push('…');
            }
            s.push_str(text[start..end].trim());
            if end < text.len() {
                s.push('…');
            }
            s
        }
        None => {
            let end = floor_char_boundary(text, window.min(text.len()));
            let mut s = text[..end].trim().to_string();
            if end < text.len() {
                s.push('…');
            }
            s
        }
    }
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    while i > 0 && !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn ceil_char_boundary(s: &str, mut i: usize) -> usize {
    while i < s.len() && !s.is_char_boundary(i) {
        i += 1;
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{RawTrace, TraceStore, DEFAULT_CHUNK_THRESHOLD_TOKENS};

    fn corpus(contents: &[&str]) -> TraceStore {
        let raws: Vec<RawTrace> = contents
            .iter()
            .enumerate()
            .map(|(i, c)| RawTrace {
                id: format!("run-{i}"),
                events: None,
                content: Some((*c).to_string()),
                metadata: None,
            })
            .collect();
        TraceStore::ingest(raws, DEFAULT_CHUNK_THRESHOLD_TOKENS).unwrap()
    }

    #[test]
    fn tokenizer_splits_on_non_alphanumerics() {
        assert_eq!(tokenize("SilentFailure-42"), vec!["silentfailure", "42"]);
        assert_eq!(tokenize("  a,,b  "), vec!["a", "b"]);
        assert!(tokenize("--- ---").is_empty());
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let e = HashingEmbedder::default();
        let v1 = e.embed("the quick brown fox").unwrap();
        let v2 = e.embed("the quick brown fox").unwrap();
        assert_eq!(v1, v2);
        let norm: f64 = v1.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
    }

    #[test]
    fn index_has_one_doc_per_trace() {
        let store = corpus(&["a b", "c d", "e f"]);
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        assert_eq!(idx.len(), 3);
        for doc in ["t1", "t2", "t3"] {
            let d = idx.document(doc).unwrap();
            let norm: f64 = d
                .embedding
                .iter()
                .map(|&x| (x as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bm25_hand_derived_score() {
        // docs ["a b", "a a b b"], query "a":
        //   idf = ln(1 + (2 - 2 + 0.5) / (2 + 0.5)) = ln(1.2)
        //   doc1: tf=1, len=2, avgdl=3 -> idf * 2.2 / (1 + 1.2*(0.25 + 0.75*2/3))
        let store = corpus(&["a b", "a a b b"]);
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        let s1 = idx.lexical_score("a", "t1").unwrap();
        let s2 = idx.lexical_score("a", "t2").unwrap();
        assert!((s1 - 0.21110917102457905).abs() < 1e-12, "{s1}");
        assert!((s2 - 0.2292042428266858).abs() < 1e-12, "{s2}");
    }

    #[test]
    fn absent_term_scores_zero() {
        let store = corpus(&["alpha beta", "gamma delta"]);
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        assert_eq!(idx.lexical_score("zeta", "t1").unwrap(), 0.0);
    }

    #[test]
    fn unique_term_ranks_first_lexically() {
        let mut docs: Vec<String> = (0..10).map(|i| format!("common words here {i}")).collect();
        docs[6] = "common words here plus the zyzzyva marker".to_string();
        let store = corpus(&docs.iter().map(String::as_str).collect::<Vec<_>>());
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        let hits = idx
            .search("zyzzyva", 5, SearchMode::Lexical, &HashingEmbedder::default())
            .unwrap();
        assert_eq!(hits[0].short_id, "t07");
        assert_eq!(hits.len(), 1); // only one doc has a lexical rank
    }

    #[test]
    fn rrf_dual_rank_one_is_two_over_sixty_one() {
        let store = corpus(&["needle in haystack", "plain filler text", "more filler here"]);
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        let hits = idx
            .search("needle haystack", 3, SearchMode::Hybrid, &HashingEmbedder::default())
            .unwrap();
        assert_eq!(hits[0].short_id, "t1");
        assert_eq!(hits[0].lexical_rank, Some(1));
        assert_eq!(hits[0].semantic_rank, Some(1));
        assert!((hits[0].fused_score - 2.0 / 61.0).abs() < 1e-12);
    }

    #[test]
    fn lexical_only_rank_one_is_one_over_sixty_one() {
        let store = corpus(&["needle alpha", "beta gamma", "delta epsilon"]);
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        let hits = idx
            .search("needle", 3, SearchMode::Lexical, &HashingEmbedder::default())
            .unwrap();
        assert_eq!(hits[0].lexical_rank, Some(1));
        assert_eq!(hits[0].semantic_rank, None);
        assert!((hits[0].fused_score - 1.0 / 61.0).abs() < 1e-12);
    }

    #[test]
    fn determinism_and_topk_contract() {
        let docs: Vec<String> = (0..30).map(|i| format!("doc {} filler {}", i, i % 3)).collect();
        let store = corpus(&docs.iter().map(String::as_str).collect::<Vec<_>>());
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        let e = HashingEmbedder::default();
        let h1 = idx.search("filler 1", 7, SearchMode::Hybrid, &e).unwrap();
        let h2 = idx.search("filler 1", 7, SearchMode::Hybrid, &e).unwrap();
        let ids1: Vec<&str> = h1.iter().map(|h| h.short_id.as_str()).collect();
        let ids2: Vec<&str> = h2.iter().map(|h| h.short_id.as_str()).collect();
        assert_eq!(ids1, ids2);
        assert_eq!(h1.len(), 7); // hybrid: every doc has a semantic rank
    }

    #[test]
    fn errors_on_empty_query_and_bad_topk() {
        let store = corpus(&["a"]);
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        let e = HashingEmbedder::default();
        assert!(matches!(
            idx.search("  ", 5, SearchMode::Hybrid, &e),
            Err(SearchError::EmptyQuery)
        ));
        assert!(matches!(
            idx.search("a", 0, SearchMode::Hybrid, &e),
            Err(SearchError::BadTopK)
        ));
    }

    #[test]
    fn snippet_windows_around_match() {
        let long = format!("{} SilentFailure here {}", "x".repeat(200), "y".repeat(200));
        let store = corpus(&[long.as_str()]);
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        let hits = idx
            .search("silentfailure", 1, SearchMode::Lexical, &HashingEmbedder::default())
            .unwrap();
        assert!(hits[0].snippet.contains("SilentFailure"));
        assert!(hits[0].snippet.len() < 400);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_scoring_matches_sequential() {
        let docs: Vec<String> = (0..300)
            .map(|i| format!("word{} alpha beta gamma {}", i % 17, i))
            .collect();
        let store = corpus(&docs.iter().map(String::as_str).collect::<Vec<_>>());
        let idx = build_index(&store.snapshot(), &HashingEmbedder::default()).unwrap();
        let terms = tokenize("alpha word3");
        let emb = HashingEmbedder::default().embed("alpha word3").unwrap();
        let seq = idx.score_all_seq(&terms, &emb);
        let par = idx.score_all_par(&terms, &emb);
        assert_eq!(seq.len(), par.len());
        for (s, p) in seq.iter().zip(&par) {
            assert_eq!(s.0.to_bits(), p.0.to_bits());
            assert_eq!(s.1.to_bits(), p.1.to_bits());
        }
    }
}
