//! Few-shot example retrieval by TF-IDF cosine similarity, plus greedy
//! max-min diversity selection over the same vectors.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::normalize_text;

/// Few-shot examples per prompt unless configured otherwise.
pub const DEFAULT_FEW_SHOT_K: usize = 5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("bad index file: {0}")]
    Format(#[from] serde_json::Error),
}

/// Lowercase unigrams and bigrams of the normalized text, with repeats.
pub fn terms(text: &str) -> Vec<String> {
    let norm = normalize_text(text).to_lowercase();
    let words: Vec<&str> = norm.split(' ').filter(|w| !w.is_empty()).collect();
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    out.extend(words.windows(2).map(|p| format!("{} {}", p[0], p[1])));
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TextVector {
    pub weights: BTreeMap<String, f64>,
    pub norm: f64,
}

impl TextVector {
    pub fn from_weights(weights: BTreeMap<String, f64>) -> Self {
        let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
        Self { weights, norm }
    }

    pub fn is_zero(&self) -> bool {
        self.norm == 0.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_weights(self.weights.iter().map(|(t, w)| (t.clone(), w * c)).collect())
    }
}

/// Document frequencies over the texts an index was built from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_docs: usize,
    pub doc_freq: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut vocab = Self::default();
        for t in texts {
            vocab.n_docs += 1;
            let distinct: BTreeSet<String> = terms(t).into_iter().collect();
            for term in distinct {
                *vocab.doc_freq.entry(term).or_default() += 1;
            }
        }
        vocab
    }

    /// `ln((1 + N) / (1 + df)) + 1`, or `None` for unknown terms.
    pub fn idf(&self, term: &str) -> Option<f64> {
        let df = *self.doc_freq.get(term)? as f64;
        Some(((1.0 + self.n_docs as f64) / (1.0 + df)).ln() + 1.0)
    }
}

/// Raw term counts times idf; out-of-vocabulary terms are dropped.
pub fn vectorize(text: &str, vocab: &Vocabulary) -> TextVector {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for t in terms(text) {
        *counts.entry(t).or_default() += 1.0;
    }
    let weights = counts
        .into_iter()
        .filter_map(|(t, tf)| vocab.idf(&t).map(|idf| (t, tf * idf)))
        .collect();
    TextVector::from_weights(weights)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &TextVector, b: &TextVector) -> f64 {
    if a.is_zero() || b.is_zero() {
        return 0.0;
    }
    let (small, large) = if a.weights.len() <= b.weights.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .weights
        .iter()
        .filter_map(|(t, w)| large.weights.get(t).map(|v| w * v))
        .sum();
    (dot / (a.norm * b.norm)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Document,
    Block,
}

/// Input to [`ExampleIndex::build`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSource {
    pub example_id: String,
    pub kind: ExampleKind,
    pub text: String,
    /// Opaque handle to the labeled payload, e.g. a document id.
    pub payload_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleEntry {
    pub example_id: String,
    pub kind: ExampleKind,
    pub text: String,
    pub payload_ref: String,
    #[serde(skip)]
    pub vector: TextVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub example_id: String,
    pub score: f64,
}

/// Immutable after build. Persisted without vectors, which are recomputed
/// from the stored vocabulary on load.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "IndexRepr")]
pub struct ExampleIndex {
    vocabulary: Vocabulary,
    entries: Vec<ExampleEntry>,
}

#[derive(Deserialize)]
struct IndexRepr {
    vocabulary: Vocabulary,
    entries: Vec<ExampleSource>,
}

impl From<IndexRepr> for ExampleIndex {
    fn from(r: IndexRepr) -> Self {
        Self::with_vocabulary(r.vocabulary, r.entries)
    }
}

fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.example_id.cmp(&b.example_id))
}

impl ExampleIndex {
    pub fn build(sources: Vec<ExampleSource>) -> Result<Self, RetrievalError> {
        let mut ids = BTreeSet::new();
        for s in &sources {
            if !ids.insert(s.example_id.as_str()) {
                return Err(RetrievalError::DuplicateId(s.example_id.clone()));
            }
        }
        let vocabulary = Vocabulary::build(sources.iter().map(|s| s.text.as_str()));
        Ok(Self::with_vocabulary(vocabulary, sources))
    }

    fn with_vocabulary(vocabulary: Vocabulary, sources: Vec<ExampleSource>) -> Self {
        let entries = sources
            .into_iter()
            .map(|s| ExampleEntry {
                vector: vectorize(&s.text, &vocabulary),
                example_id: s.example_id,
                kind: s.kind,
                text: s.text,
                payload_ref: s.payload_ref,
            })
            .collect();
        Self { vocabulary, entries }
    }

    pub fn from_json_str(s: &str) -> Result<Self, RetrievalError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn entries(&self) -> &[ExampleEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, example_id: &str) -> Option<&ExampleEntry> {
        self.entries.iter().find(|e| e.example_id == example_id)
    }

    pub fn vectorize(&self, text: &str) -> TextVector {
        vectorize(text, &self.vocabulary)
    }

    /// The `k` most similar entries of `kind` (any kind if `None`), best
    /// first, ties by ascending example id.
    pub fn top_k(&self, query_text: &str, k: usize, kind: Option<ExampleKind>) -> Vec<Neighbor> {
        self.top_k_vector(&self.vectorize(query_text), k, kind)
    }

    pub fn top_k_vector(&self, query: &TextVector, k: usize, kind: Option<ExampleKind>) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = self
            .entries
            .iter()
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .map(|e| Neighbor {
                example_id: e.example_id.clone(),
                score: cosine(query, &e.vector),
            })
            .collect();
        all.sort_by(rank);
        all.truncate(k);
        all
    }

    /// Greedy max-min selection of `k` entries: each step takes the entry
    /// farthest (1 - cosine) from the references and everything already
    /// chosen, ties by ascending example id. With no references the first
    /// pick is the smallest id and the rest proceed farthest-first.
    pub fn select_diverse(&self, reference_texts: &[String], k: usize) -> Vec<String> {
        let refs: Vec<TextVector> = reference_texts.iter().map(|t| self.vectorize(t)).collect();
        // Nearest distance from each entry to the current reference set.
        let mut nearest: Vec<f64> = self
            .entries
            .iter()
            .map(|e| refs.iter().map(|r| 1.0 - cosine(&e.vector, r)).fold(f64::INFINITY, f64::min))
            .collect();
        let mut taken = vec![false; self.entries.len()];
        let mut order = Vec::new();
        for _ in 0..k.min(self.entries.len()) {
            let best = (0..self.entries.len())
                .filter(|&i| !taken[i])
                .min_by(|&a, &b| {
                    nearest[b]
                        .total_cmp(&nearest[a])
                        .then_with(|| self.entries[a].example_id.cmp(&self.entries[b].example_id))
                })
                .expect("candidates remain");
            taken[best] = true;
            order.push(self.entries[best].example_id.clone());
            let chosen = &self.entries[best].vector;
            for (i, e) in self.entries.iter().enumerate() {
                nearest[i] = nearest[i].min(1.0 - cosine(&e.vector, chosen));
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn src(id: &str, text: &str) -> ExampleSource {
        ExampleSource {
            example_id: id.into(),
            kind: ExampleKind::Block,
            text: text.into(),
            payload_ref: id.into(),
        }
    }

    fn vec_of(pairs: &[(&str, f64)]) -> TextVector {
        TextVector::from_weights(pairs.iter().map(|(t, w)| (t.to_string(), *w)).collect())
    }

    #[test]
    fn terms_are_lowercase_unigrams_and_bigrams() {
        assert_eq!(terms("  SUB\tTOTAL 28.000 "), ["sub", "total", "28.000", "sub total", "total 28.000"]);
        assert!(terms("").is_empty());
    }

    #[test]
    fn tf_idf_by_hand() {
        let vocab = Vocabulary::build(["total"]);
        // idf = ln(2 / 2) + 1 = 1; tf = 2; the bigram is out of vocabulary.
        let v = vectorize("total total", &vocab);
        assert_eq!(v.weights, BTreeMap::from([("total".to_string(), 2.0)]));
        assert_eq!(v.norm, 2.0);
        assert!(vectorize("", &vocab).is_zero());
        assert_eq!(vectorize("TOTAL", &vocab), vectorize("total", &vocab));

        let vocab = Vocabulary::build(["a b", "a"]);
        // df(a) = 2, df(b) = 1, N = 2
        assert!((vocab.idf("a").unwrap() - 1.0).abs() < 1e-15);
        assert!((vocab.idf("b").unwrap() - ((3.0f64 / 2.0).ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn cosine_by_hand() {
        assert_eq!(cosine(&vec_of(&[("x", 1.0)]), &vec_of(&[("y", 1.0)])), 0.0);
        let c = cosine(&vec_of(&[("x", 1.0)]), &vec_of(&[("x", 1.0), ("y", 1.0)]));
        assert!((c - 0.707_106_781_186_547_5).abs() < 1e-12);
        let v = vec_of(&[("x", 3.0), ("y", 4.0)]);
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v, &TextVector::default()), 0.0);
    }

    #[test]
    fn top_k_ranks_self_match_first_and_saturates() {
        let idx = ExampleIndex::build(vec![
            src("b", "SUB TOTAL 28.000"),
            src("a", "TOTAL SALE 28.000"),
            src("c", "COCONUT JELLY"),
        ])
        .unwrap();
        let hits = idx.top_k("TOTAL SALE 28.000", 1, None);
        assert_eq!(hits[0].example_id, "a");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        let all = idx.top_k("TOTAL", 10, None);
        assert_eq!(all.len(), 3);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(idx.top_k("x", 5, Some(ExampleKind::Document)).is_empty());
        assert!(ExampleIndex::default().top_k("x", 5, None).is_empty());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let idx = ExampleIndex::build(vec![src("z", "same"), src("m", "same"), src("q", "other")]).unwrap();
        let ids: Vec<String> = idx.top_k("same", 3, None).into_iter().map(|n| n.example_id).collect();
        assert_eq!(ids, ["m", "z", "q"]);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        assert!(matches!(
            ExampleIndex::build(vec![src("a", "x"), src("a", "y")]),
            Err(RetrievalError::DuplicateId(_))
        ));
    }

    #[test]
    fn json_sidecar_round_trip_rebuilds_vectors() {
        let idx = ExampleIndex::build(vec![src("a", "SUB TOTAL 28.000"), src("b", "TOTAL 28.000")]).unwrap();
        let back = ExampleIndex::from_json_str(&idx.to_json_string()).unwrap();
        assert_eq!(back, idx);
    }

    fn min_dist(idx: &ExampleIndex, i: usize, others: &[TextVector]) -> f64 {
        others
            .iter()
            .map(|o| 1.0 - cosine(&idx.entries()[i].vector, o))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn diverse_picks_one_per_cluster() {
        let idx = ExampleIndex::build(vec![
            src("a1", "apple banana cherry"),
            src("a2", "apple banana cherry"),
            src("a3", "apple banana cherry"),
            src("b1", "delta echo foxtrot"),
            src("b2", "delta echo foxtrot"),
        ])
        .unwrap();
        let picked = idx.select_diverse(&[], 2);
        // Brute force over all 2-subsets for the best pairwise distance.
        let n = idx.len();
        let best = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| 1.0 - cosine(&idx.entries()[i].vector, &idx.entries()[j].vector))
            .fold(f64::NEG_INFINITY, f64::max);
        let (p, q) = (idx.get(&picked[0]).unwrap(), idx.get(&picked[1]).unwrap());
        assert_eq!(1.0 - cosine(&p.vector, &q.vector), best);
        assert_ne!(picked[0].chars().next(), picked[1].chars().next());
        assert_eq!(picked, ["a1", "b1"]);
        assert_eq!(idx.select_diverse(&[], 5).len(), 5);
    }

    #[test]
    fn single_diverse_pick_is_farthest_from_references() {
        let idx = ExampleIndex::build(vec![
            src("a", "total 28.000"),
            src("b", "cash change"),
            src("c", "total cash"),
        ])
        .unwrap();
        let refs = vec!["total 28.000".to_string()];
        let rv: Vec<TextVector> = refs.iter().map(|r| idx.vectorize(r)).collect();
        let scan = (0..idx.len())
            .max_by(|&a, &b| {
                min_dist(&idx, a, &rv)
                    .total_cmp(&min_dist(&idx, b, &rv))
                    .then_with(|| idx.entries()[b].example_id.cmp(&idx.entries()[a].example_id))
            })
            .unwrap();
        assert_eq!(idx.select_diverse(&refs, 1), [idx.entries()[scan].example_id.clone()]);
        assert_eq!(idx.select_diverse(&refs, 1), ["b"]);
    }

    const WORDS: &[&str] = &["total", "sub", "cash", "tax", "jelly", "tea", "28.000", "4.000", "menu", "change"];

    fn text_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(WORDS), 0..6).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in text_strategy(), b in text_strategy(), c in text_strategy()) {
            let vocab = Vocabulary::build([a.as_str(), b.as_str(), c.as_str()]);
            let (va, vb) = (vectorize(&a, &vocab), vectorize(&b, &vocab));
            prop_assert!((cosine(&va, &vb) - cosine(&vb, &va)).abs() <= 1e-12);
            let s = cosine(&va, &vb);
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn top_k_matches_full_sort_and_ignores_query_scale(
            texts in prop::collection::vec(text_strategy(), 1..40),
            query in text_strategy(),
            k in 1usize..8,
            c in 0.01f64..100.0,
        ) {
            let sources = texts.iter().enumerate().map(|(i, t)| src(&format!("e{i:03}"), t)).collect();
            let idx = ExampleIndex::build(sources).unwrap();
            let q = idx.vectorize(&query);
            let mut brute: Vec<(f64, String)> =
                idx.entries().iter().map(|e| (cosine(&q, &e.vector), e.example_id.clone())).collect();
            brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let got: Vec<String> = idx.top_k(&query, k, None).into_iter().map(|n| n.example_id).collect();
            let want: Vec<String> = brute.into_iter().take(k).map(|p| p.1).collect();
            prop_assert_eq!(&got, &want);
            let scaled: Vec<String> = idx.top_k_vector(&q.scaled(c), k, None).into_iter().map(|n| n.example_id).collect();
            // Scaling can move a cosine by an ulp; compare only distinct-score ranks.
            let scores: Vec<f64> = idx.top_k_vector(&q, k, None).iter().map(|n| n.score).collect();
            let distinct = scores.windows(2).all(|w| w[0] - w[1] > 1e-9);
            if distinct {
                prop_assert_eq!(scaled, got);
            }
        }

        #[test]
        fn rebuilding_is_bitwise_deterministic(texts in prop::collection::vec(text_strategy(), 1..20)) {
            let mk = || ExampleIndex::build(texts.iter().enumerate().map(|(i, t)| src(&i.to_string(), t)).collect()).unwrap();
            let (a, b) = (mk(), mk());
            for (x, y) in a.entries().iter().zip(b.entries()) {
                prop_assert_eq!(x.vector.norm.to_bits(), y.vector.norm.to_bits());
                prop_assert_eq!(&x.vector.weights, &y.vector.weights);
            }
        }
    }
}
