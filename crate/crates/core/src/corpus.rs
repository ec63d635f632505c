//! Text ingestion: tokenization, vocabulary, context windows and minibatches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// English stopword list shipped with the crate, one token per line.
pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("vocabulary size must be at least 1")]
    EmptyVocabulary,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("vocabulary line {line}: {reason}")]
    BadVocabLine { line: usize, reason: String },
}

pub type Stopwords = BTreeSet<String>;

/// Parses a one-token-per-line stopword list. Blank lines and `#` comments
/// are skipped; entries are lowercased.
pub fn parse_stopwords(text: &str) -> Stopwords {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn default_stopwords() -> Stopwords {
    parse_stopwords(DEFAULT_STOPWORDS)
}

/// Lowercases, splits on every non-alphanumeric character and drops stopwords.
pub fn tokenize(document: &str, stopwords: &Stopwords) -> Vec<String> {
    document
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !stopwords.contains(*t))
        .map(str::to_string)
        .collect()
}

/// Token/id bijection over the most frequent non-stopword types.
///
/// Ids are dense in `0..len()` and assigned by descending corpus frequency,
/// ties broken by lexicographic token order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    frequency: Vec<u64>,
    stopwords: Stopwords,
}

impl Vocabulary {
    pub fn build<D, T>(documents: D, max_size: usize, stopwords: &Stopwords) -> Result<Self, CorpusError>
    where
        D: IntoIterator,
        D::Item: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        if max_size == 0 {
            return Err(CorpusError::EmptyVocabulary);
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for doc in documents {
            for tok in doc {
                let tok = tok.as_ref();
                if stopwords.contains(tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        Ok(Self::from_ranked(ranked, stopwords.clone()))
    }

    fn from_ranked(ranked: Vec<(String, u64)>, stopwords: Stopwords) -> Self {
        let mut token_to_id = HashMap::with_capacity(ranked.len());
        let mut id_to_token = Vec::with_capacity(ranked.len());
        let mut frequency = Vec::with_capacity(ranked.len());
        for (id, (tok, freq)) in ranked.into_iter().enumerate() {
            token_to_id.insert(tok.clone(), id);
            id_to_token.push(tok);
            frequency.push(freq);
        }
        Self {
            token_to_id,
            id_to_token,
            frequency,
            stopwords,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.frequency[id]
    }

    pub fn stopwords(&self) -> &Stopwords {
        &self.stopwords
    }

    /// Maps tokens to ids, dropping out-of-vocabulary tokens.
    pub fn encode<T: AsRef<str>>(&self, tokens: &[T]) -> Vec<usize> {
        tokens.iter().filter_map(|t| self.id(t.as_ref())).collect()
    }

    /// Tokenizes raw text with this vocabulary's stopword list and maps it to ids.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(&tokenize(text, &self.stopwords))
    }

    /// `token<TAB>id<TAB>frequency` lines sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            let _ = writeln!(out, "{tok}\t{id}\t{}", self.frequency[id]);
        }
        out
    }

    pub fn from_tsv(text: &str, stopwords: Stopwords) -> Result<Self, CorpusError> {
        let mut ranked = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| CorpusError::BadVocabLine {
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut fields = line.split('\t');
            let (Some(tok), Some(id), Some(freq), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected three tab-separated fields"));
            };
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            let freq: u64 = freq.parse().map_err(|_| bad("frequency is not an integer"))?;
            if id != ranked.len() {
                return Err(bad("ids must be dense and sorted"));
            }
            if stopwords.contains(tok) {
                return Err(bad("token is a stopword"));
            }
            ranked.push((tok.to_string(), freq));
        }
        let vocab = Self::from_ranked(ranked, stopwords);
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(CorpusError::BadVocabLine {
                line: 0,
                reason: "duplicate token".into(),
            });
        }
        Ok(vocab)
    }

    /// SHA-256 of the TSV serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

/// A pivot word and the bag of words around it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrainingInstance {
    pub pivot: usize,
    /// `(word id, count)` pairs sorted by id, counts non-zero.
    pub context: Vec<(usize, u32)>,
}

impl TrainingInstance {
    pub fn new(pivot: usize, context_ids: impl IntoIterator<Item = usize>) -> Self {
        let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
        for id in context_ids {
            *counts.entry(id).or_default() += 1;
        }
        Self {
            pivot,
            context: counts.into_iter().collect(),
        }
    }

    /// Number of context tokens `C`.
    pub fn context_len(&self) -> u32 {
        self.context.iter().map(|&(_, c)| c).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub n_documents: usize,
    pub n_tokens: usize,
    pub n_instances: usize,
}

/// One instance per position: up to `window_size / 2` ids on each side,
/// truncated at the document edges. The pivot position itself is excluded.
pub fn extract_windows(doc: &[usize], window_size: usize) -> Vec<TrainingInstance> {
    let half = window_size / 2;
    (0..doc.len())
        .map(|n| {
            let lo = n.saturating_sub(half);
            let hi = (n + 1 + half).min(doc.len());
            let ctx = doc[lo..n].iter().chain(&doc[n + 1..hi]).copied();
            TrainingInstance::new(doc[n], ctx)
        })
        .collect()
}

/// Windows every document in order and reports corpus statistics.
pub fn build_instances(docs: &[Vec<usize>], window_size: usize) -> (Vec<TrainingInstance>, CorpusStats) {
    let mut instances = Vec::new();
    let mut n_tokens = 0;
    for doc in docs {
        n_tokens += doc.len();
        instances.extend(extract_windows(doc, window_size));
    }
    let stats = CorpusStats {
        n_documents: docs.len(),
        n_tokens,
        n_instances: instances.len(),
    };
    (instances, stats)
}

/// Partitions a seeded permutation of `0..n` into batches of `batch_size`,
/// the last one possibly short.
pub fn shuffled_batches<R: rand::Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::ZeroBatchSize);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One shuffled epoch over `items`.
pub fn minibatch_iter<T>(
    items: &[T],
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<&T>> + '_, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = shuffled_batches(items.len(), batch_size, &mut rng)?;
    Ok(batches
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &items[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stop(words: &[&str]) -> Stopwords {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_strips_case_punctuation_and_stopwords() {
        let sw = stop(&["the", "was"]);
        assert_eq!(tokenize("The food was GREAT!", &sw), vec!["food", "great"]);
        assert!(tokenize("", &sw).is_empty());
    }

    #[test]
    fn tokenize_fixture_matches_hand_tokenization() {
        let text = "Dr. Smith's clinic opened at 9am. The nurses were patient, kind \
                    and quick! Parking (sadly) costs $5-per-hour.";
        let sw = default_stopwords();
        // Done by hand: split on non-alphanumerics, lowercase, drop listed stopwords
        // ("s", "at", "the", "were", "and" are in the bundled list).
        let expected = [
            "dr", "smith", "clinic", "opened", "9am", "nurses", "patient", "kind", "quick",
            "parking", "sadly", "costs", "5", "hour",
        ];
        assert_eq!(tokenize(text, &sw), expected);
    }

    #[test]
    fn bundled_stopwords_exclude_content_words() {
        let sw = default_stopwords();
        assert!(sw.contains("the") && sw.contains("was"));
        assert!(!sw.contains("patient") && !sw.contains("food"));
    }

    #[test]
    fn vocabulary_orders_by_frequency() {
        let docs = vec![vec!["a", "b", "a"], vec!["c", "b", "a"]];
        let v = Vocabulary::build(&docs, 2, &Stopwords::new()).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.id("a"), Some(0));
        assert_eq!(v.id("b"), Some(1));
        assert_eq!(v.id("c"), None);

        let all = Vocabulary::build(&docs, 100, &Stopwords::new()).unwrap();
        assert_eq!(all.tokens(), &["a", "b", "c"]);
    }

    #[test]
    fn vocabulary_rejects_zero_size_and_skips_stopwords() {
        let docs = vec![vec!["the", "x"]];
        assert_eq!(
            Vocabulary::build(&docs, 0, &Stopwords::new()),
            Err(CorpusError::EmptyVocabulary)
        );
        let v = Vocabulary::build(&docs, 10, &stop(&["the"])).unwrap();
        assert_eq!(v.tokens(), &["x"]);
    }

    #[test]
    fn vocabulary_matches_sort_oracle_on_fixture() {
        // Deterministic pseudo-text with a skewed distribution over 80 types.
        let mut state = 12345u64;
        let docs: Vec<Vec<String>> = (0..40)
            .map(|_| {
                (0..60)
                    .map(|_| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        let r = (state >> 33) % 80;
                        format!("w{}", (r * r) / 80)
                    })
                    .collect()
            })
            .collect();
        let v = Vocabulary::build(&docs, 50, &Stopwords::new()).unwrap();

        let mut oracle: Vec<(String, u64)> = Vec::new();
        for doc in &docs {
            for t in doc {
                match oracle.iter_mut().find(|(w, _)| w == t) {
                    Some((_, c)) => *c += 1,
                    None => oracle.push((t.clone(), 1)),
                }
            }
        }
        // Selection by repeated max: highest count, then smallest token.
        let mut expected = Vec::new();
        while expected.len() < 50 && !oracle.is_empty() {
            let mut best = 0;
            for i in 1..oracle.len() {
                let (ref w, c) = oracle[i];
                let (ref bw, bc) = oracle[best];
                if c > bc || (c == bc && w < bw) {
                    best = i;
                }
            }
            expected.push(oracle.remove(best));
        }
        assert_eq!(v.len(), expected.len());
        for (id, (tok, freq)) in expected.iter().enumerate() {
            assert_eq!(v.token(id), tok);
            assert_eq!(v.frequency(id), *freq);
        }
    }

    #[test]
    fn vocabulary_tsv_round_trips() {
        let docs = vec![vec!["x", "y", "y", "z"]];
        let v = Vocabulary::build(&docs, 10, &Stopwords::new()).unwrap();
        assert_eq!(v.to_tsv(), "y\t0\t2\nx\t1\t1\nz\t2\t1\n");
        let back = Vocabulary::from_tsv(&v.to_tsv(), Stopwords::new()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        assert!(Vocabulary::from_tsv("a\t1\t3\n", Stopwords::new()).is_err());
        assert!(Vocabulary::from_tsv("a\t0\n", Stopwords::new()).is_err());
    }

    #[test]
    fn windows_truncate_at_document_edges() {
        let (a, b, c) = (0, 1, 2);
        let w = extract_windows(&[a, b, c], 2);
        assert_eq!(w[0], TrainingInstance::new(a, [b]));
        assert_eq!(w[1], TrainingInstance::new(b, [a, c]));
        assert_eq!(w[2], TrainingInstance::new(c, [b]));

        let single = extract_windows(&[a], 10);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].context_len(), 0);
    }

    #[test]
    fn windows_match_index_scan_oracle() {
        let doc: Vec<usize> = (0..100).map(|i| (i * 7 + i / 3) % 23).collect();
        let got = extract_windows(&doc, 10);
        assert_eq!(got.len(), 100);
        for n in 0..100usize {
            let mut counts = vec![0u32; 23];
            for m in 0..100usize {
                if m != n && m.abs_diff(n) <= 5 {
                    counts[doc[m]] += 1;
                }
            }
            let expected: Vec<(usize, u32)> = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(i, &c)| (i, c))
                .collect();
            assert_eq!(got[n].pivot, doc[n]);
            assert_eq!(got[n].context, expected, "position {n}");
            if (5..95).contains(&n) {
                assert_eq!(got[n].context_len(), 10);
            }
        }
    }

    #[test]
    fn batches_partition_and_are_seeded() {
        let items: Vec<u32> = (0..5).collect();
        let sizes: Vec<usize> = minibatch_iter(&items, 2, 9).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);

        let once: Vec<Vec<&u32>> = minibatch_iter(&items, 2, 9).unwrap().collect();
        let twice: Vec<Vec<&u32>> = minibatch_iter(&items, 2, 9).unwrap().collect();
        assert_eq!(once, twice);

        let mut seen: Vec<u32> = once.into_iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, items);

        let empty: Vec<u32> = Vec::new();
        assert_eq!(minibatch_iter(&empty, 3, 0).unwrap().count(), 0);
        assert!(minibatch_iter(&items, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn window_counts_are_bounded(
            doc in proptest::collection::vec(0usize..12, 0..60),
            half in 0usize..6,
        ) {
            let window = 2 * half;
            let (inst, stats) = build_instances(std::slice::from_ref(&doc), window);
            prop_assert_eq!(stats.n_instances, inst.len());
            prop_assert_eq!(inst.len(), doc.len());
            let mut mass = 0usize;
            for (n, i) in inst.iter().enumerate() {
                let c = i.context_len() as usize;
                prop_assert!(c <= window);
                if n >= half && n + half < doc.len() {
                    prop_assert_eq!(c, window);
                }
                prop_assert!(i.context.iter().all(|&(id, k)| id < 12 && k > 0));
                mass += 1 + c;
            }
            prop_assert!(mass <= doc.len() * (1 + window));
        }
    }
}
