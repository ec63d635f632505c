//! NPMI topic coherence over boolean sliding windows.
//!
//! Each window of `W` consecutive tokens counts as one pseudo-document
//! (documents shorter than `W` form a single window). For every top word a
//! vector of NPMI values against all of the topic's top words is built,
//! and the topic score is the mean cosine over all pairs of those vectors.

use std::collections::{BTreeMap, BTreeSet};

use super::EvalError;

pub const COHERENCE_WINDOW: usize = 110;

/// Window occurrence counts for a fixed set of tracked words.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowCounts {
    pub windows: u64,
    pub single: BTreeMap<usize, u64>,
    /// Keyed by `(min, max)` word id.
    pub joint: BTreeMap<(usize, usize), u64>,
}

impl WindowCounts {
    /// Counts windows containing each tracked word and each tracked pair
    /// from the same group.
    pub fn count(docs: &[Vec<usize>], groups: &[Vec<usize>], window: usize) -> Self {
        let window = window.max(1);
        let tracked: BTreeSet<usize> = groups.iter().flatten().copied().collect();
        // Pairs are only needed within a group.
        let mut partners: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for g in groups {
            for &a in g {
                partners.entry(a).or_default().extend(g.iter().copied().filter(|&b| b > a));
            }
        }
        let mut counts = WindowCounts::default();
        let mut inside: BTreeMap<usize, usize> = BTreeMap::new();
        for doc in docs {
            if doc.is_empty() {
                continue;
            }
            let n_windows = doc.len().saturating_sub(window) + 1;
            inside.clear();
            for &w in doc.iter().take(window) {
                if tracked.contains(&w) {
                    *inside.entry(w).or_default() += 1;
                }
            }
            for start in 0..n_windows {
                if start > 0 {
                    let (out, inn) = (doc[start - 1], doc[start + window - 1]);
                    if let Some(c) = inside.get_mut(&out) {
                        *c -= 1;
                        if *c == 0 {
                            inside.remove(&out);
                        }
                    }
                    if tracked.contains(&inn) {
                        *inside.entry(inn).or_default() += 1;
                    }
                }
                counts.windows += 1;
                for &a in inside.keys() {
                    *counts.single.entry(a).or_default() += 1;
                    if let Some(ps) = partners.get(&a) {
                        for &b in ps.range(a + 1..) {
                            if inside.contains_key(&b) {
                                *counts.joint.entry((a, b)).or_default() += 1;
                            }
                        }
                    }
                }
            }
        }
        counts
    }

    pub fn single(&self, w: usize) -> u64 {
        self.single.get(&w).copied().unwrap_or(0)
    }

    pub fn joint(&self, a: usize, b: usize) -> u64 {
        if a == b {
            return self.single(a);
        }
        self.joint.get(&(a.min(b), a.max(b))).copied().unwrap_or(0)
    }
}

/// `log(p(a,b) / p(a)p(b)) / −log p(a,b)`.
///
/// Edge values: 0 if either word never occurs, −1 if they never co-occur,
/// 1 if every window holding one holds the other.
pub fn npmi(counts: &WindowCounts, a: usize, b: usize) -> f64 {
    let (ca, cb, cab) = (counts.single(a), counts.single(b), counts.joint(a, b));
    if ca == 0 || cb == 0 {
        return 0.0;
    }
    if cab == 0 {
        return -1.0;
    }
    if cab == ca && cab == cb {
        return 1.0;
    }
    let n = counts.windows as f64;
    let (pa, pb, pab) = (ca as f64 / n, cb as f64 / n, cab as f64 / n);
    ((pab / (pa * pb)).ln() / -pab.ln()).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicCoherence {
    pub per_topic: Vec<f64>,
    pub mean: f64,
    /// Top words absent from the reference corpus.
    pub missing: Vec<usize>,
}

fn cosine_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Coherence of each topic (a list of top word ids) against `docs`.
pub fn npmi_coherence(topics: &[Vec<usize>], docs: &[Vec<usize>], window: usize) -> Result<TopicCoherence, EvalError> {
    let counts = WindowCounts::count(docs, topics, window);
    let mut per_topic = Vec::with_capacity(topics.len());
    for words in topics {
        if words.len() < 2 {
            return Err(EvalError::TooShort(words.len()));
        }
        let vectors: Vec<Vec<f64>> = words
            .iter()
            .map(|&a| words.iter().map(|&b| npmi(&counts, a, b)).collect())
            .collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..vectors.len() {
            for j in i + 1..vectors.len() {
                total += cosine_or_zero(&vectors[i], &vectors[j]);
                pairs += 1;
            }
        }
        per_topic.push(total / pairs as f64);
    }
    let missing: BTreeSet<usize> = topics.iter().flatten().copied().filter(|&w| counts.single(w) == 0).collect();
    let mean = per_topic.iter().sum::<f64>() / per_topic.len().max(1) as f64;
    Ok(TopicCoherence {
        per_topic,
        mean,
        missing: missing.into_iter().collect(),
    })
}
