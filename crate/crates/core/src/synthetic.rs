//! Planted-topic corpora for end-to-end checks.
//!
//! Each document draws one topic uniformly and then draws every token
//! uniformly from that topic's private vocabulary. One extra word is planted
//! in the documents of two topics at the same rate, making it ambiguous.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub docs: usize,
    pub doc_len: usize,
    /// The two topics sharing the ambiguous word.
    pub ambiguous_topics: (usize, usize),
    /// Per-token probability of emitting the ambiguous word in those topics.
    pub ambiguous_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            topics: 3,
            words_per_topic: 30,
            docs: 5000,
            doc_len: 40,
            ambiguous_topics: (0, 1),
            ambiguous_rate: 0.05,
            seed: 0,
        }
    }
}

pub const AMBIGUOUS_WORD: &str = "bank";

pub fn topic_word(topic: usize, index: usize) -> String {
    format!("t{topic}w{index:02}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub docs: Vec<Vec<String>>,
    pub doc_topics: Vec<usize>,
    /// True topic of every non-ambiguous word.
    pub word_topic: BTreeMap<String, usize>,
    pub config: SyntheticConfig,
}

impl SyntheticCorpus {
    pub fn generate(config: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (a, b) = config.ambiguous_topics;
        let mut docs = Vec::with_capacity(config.docs);
        let mut doc_topics = Vec::with_capacity(config.docs);
        for _ in 0..config.docs {
            let t = rng.random_range(0..config.topics);
            let doc = (0..config.doc_len)
                .map(|_| {
                    if (t == a || t == b) && rng.random_bool(config.ambiguous_rate) {
                        AMBIGUOUS_WORD.to_string()
                    } else {
                        topic_word(t, rng.random_range(0..config.words_per_topic))
                    }
                })
                .collect();
            docs.push(doc);
            doc_topics.push(t);
        }
        let word_topic = (0..config.topics)
            .flat_map(|t| (0..config.words_per_topic).map(move |j| (topic_word(t, j), t)))
            .collect();
        Self {
            docs,
            doc_topics,
            word_topic,
            config: config.clone(),
        }
    }

    /// One line of space-separated tokens per document.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for d in &self.docs {
            out.push_str(&d.join(" "));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_stopwords, tokenize};

    #[test]
    fn documents_stay_inside_their_topic() {
        let cfg = SyntheticConfig { docs: 300, ..SyntheticConfig::default() };
        let c = SyntheticCorpus::generate(&cfg);
        assert_eq!(c.docs.len(), 300);
        let mut planted = [0usize; 3];
        for (doc, &t) in c.docs.iter().zip(&c.doc_topics) {
            assert_eq!(doc.len(), 40);
            for w in doc {
                if w == AMBIGUOUS_WORD {
                    planted[t] += 1;
                } else {
                    assert_eq!(c.word_topic[w], t);
                }
            }
        }
        assert_eq!(planted[2], 0);
        assert!(planted[0] > 100 && planted[1] > 100);
        assert_eq!(c.word_topic.len(), 90);
    }

    #[test]
    fn generation_is_seeded_and_survives_tokenization() {
        let cfg = SyntheticConfig { docs: 20, ..SyntheticConfig::default() };
        let c = SyntheticCorpus::generate(&cfg);
        assert_eq!(c, SyntheticCorpus::generate(&cfg));
        let stop = default_stopwords();
        for (line, doc) in c.to_text().lines().zip(&c.docs) {
            assert_eq!(&tokenize(line, &stop), doc);
        }
    }
}
