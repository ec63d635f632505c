//! Predictions from a trained model.
//!
//! Topic distributions are computed from the posterior mean, never from a
//! sample, so every function here is deterministic.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::{extract_windows, TrainingInstance, Vocabulary};
use crate::diffcore::softmax_in_place;
use crate::model::{EncoderInput, GaussianPosterior, JtwModel, ModelError, TopicDistribution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("word id {0} is outside the vocabulary")]
    OutOfVocabulary(usize),
    #[error("word id {0} never occurs as a pivot")]
    Unseen(usize),
    #[error("sentence has no in-vocabulary tokens")]
    EmptySentence,
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextualEmbedding {
    pub word: usize,
    pub posterior: GaussianPosterior,
    pub topics: TopicDistribution,
}

impl ContextualEmbedding {
    pub fn vector(&self) -> &[f64] {
        &self.posterior.mu
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniversalEmbedding {
    pub word: usize,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Encodes one occurrence; ζ comes from `μ`.
pub fn contextual_embed(model: &JtwModel, pivot: usize, context: &[usize]) -> Result<ContextualEmbedding, InferenceError> {
    let vocab = model.config().vocab_size;
    if let Some(&bad) = std::iter::once(&pivot).chain(context).find(|&&w| w >= vocab) {
        return Err(InferenceError::OutOfVocabulary(bad));
    }
    Ok(embed_instance(model, &TrainingInstance::new(pivot, context.iter().copied()))?)
}

pub fn embed_instance(model: &JtwModel, instance: &TrainingInstance) -> Result<ContextualEmbedding, ModelError> {
    let posterior = model.encode(instance)?;
    Ok(finish(model, instance.pivot, posterior))
}

/// Embeds an occurrence given a raw encoder input (dense mode).
pub fn embed_input(model: &JtwModel, word: usize, input: &EncoderInput) -> ContextualEmbedding {
    finish(model, word, model.encode_input(input))
}

fn finish(model: &JtwModel, word: usize, posterior: GaussianPosterior) -> ContextualEmbedding {
    let topics = model.topic_transform(&posterior.mu);
    ContextualEmbedding { word, posterior, topics }
}

/// Running per-word sums of posterior means and topic distributions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OccurrenceAggregate {
    sums: BTreeMap<usize, (Vec<f64>, Vec<f64>, usize)>,
}

impl OccurrenceAggregate {
    pub fn add(&mut self, e: &ContextualEmbedding) {
        let entry = self
            .sums
            .entry(e.word)
            .or_insert_with(|| (vec![0.0; e.posterior.mu.len()], vec![0.0; e.topics.0.len()], 0));
        entry.0.iter_mut().zip(&e.posterior.mu).for_each(|(s, v)| *s += v);
        entry.1.iter_mut().zip(&e.topics.0).for_each(|(s, v)| *s += v);
        entry.2 += 1;
    }

    pub fn words(&self) -> impl Iterator<Item = usize> + '_ {
        self.sums.keys().copied()
    }

    pub fn count(&self, word: usize) -> usize {
        self.sums.get(&word).map_or(0, |e| e.2)
    }

    pub fn universal(&self) -> BTreeMap<usize, UniversalEmbedding> {
        self.sums
            .iter()
            .map(|(&word, (mu, _, n))| {
                let mean = mu.iter().map(|v| v / *n as f64).collect();
                (word, UniversalEmbedding { word, mean, count: *n })
            })
            .collect()
    }

    /// Mean of per-occurrence ζ, renormalized.
    pub fn topic_distribution(&self, word: usize) -> Result<TopicDistribution, InferenceError> {
        let (_, zeta, _) = self.sums.get(&word).ok_or(InferenceError::Unseen(word))?;
        let total: f64 = zeta.iter().sum();
        Ok(TopicDistribution(zeta.iter().map(|v| v / total).collect()))
    }
}

/// Embeds every occurrence of every word in `docs` (token id sequences).
pub fn aggregate_corpus(model: &JtwModel, docs: &[Vec<usize>], window: usize) -> Result<OccurrenceAggregate, ModelError> {
    let mut agg = OccurrenceAggregate::default();
    for doc in docs {
        for inst in extract_windows(doc, window) {
            agg.add(&embed_instance(model, &inst)?);
        }
    }
    Ok(agg)
}

pub fn universal_embed(
    model: &JtwModel,
    docs: &[Vec<usize>],
    window: usize,
) -> Result<BTreeMap<usize, UniversalEmbedding>, ModelError> {
    Ok(aggregate_corpus(model, docs, window)?.universal())
}

pub fn word_topic_distribution(
    model: &JtwModel,
    word: usize,
    docs: &[Vec<usize>],
    window: usize,
) -> Result<TopicDistribution, InferenceError> {
    aggregate_corpus(model, docs, window)?.topic_distribution(word)
}

/// Averages ζ over the sentence, each token taken as pivot with the rest of
/// the sentence as its context.
pub fn sentence_topic_distribution(model: &JtwModel, sentence: &[usize]) -> Result<TopicDistribution, InferenceError> {
    if sentence.is_empty() {
        return Err(InferenceError::EmptySentence);
    }
    let t = model.config().topics;
    let mut sum = vec![0.0; t];
    for i in 0..sentence.len() {
        let context: Vec<usize> = sentence
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &w)| w)
            .collect();
        let e = contextual_embed(model, sentence[i], &context)?;
        sum.iter_mut().zip(&e.topics.0).for_each(|(s, v)| *s += v);
    }
    let total: f64 = sum.iter().sum();
    Ok(TopicDistribution(sum.into_iter().map(|v| v / total).collect()))
}

/// Per topic, the `k` most probable words under `softmax(β_t)`, ties broken
/// by ascending word id.
pub fn topic_top_words(model: &JtwModel, k: usize) -> Vec<Vec<(usize, f64)>> {
    let v = model.config().vocab_size;
    let beta = model.params().get(model.ids().beta).data();
    (0..model.config().topics)
        .map(|t| {
            let mut p = beta[t * v..(t + 1) * v].to_vec();
            softmax_in_place(&mut p);
            let mut ranked: Vec<(usize, f64)> = p.into_iter().enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k.min(v));
            ranked
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, InferenceError> {
    if a.len() != b.len() {
        return Err(InferenceError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(InferenceError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `KL(p ‖ q)` between diagonal Gaussians.
pub fn gaussian_kl(p: &GaussianPosterior, q: &GaussianPosterior) -> f64 {
    p.mu
        .iter()
        .zip(&p.sigma)
        .zip(q.mu.iter().zip(&q.sigma))
        .map(|((mp, sp), (mq, sq))| (sq / sp).ln() + (sp * sp + (mp - mq) * (mp - mq)) / (2.0 * sq * sq) - 0.5)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityMode {
    /// Cosine of the posterior means.
    Cosine,
    /// Negated symmetric KL divergence.
    SymmetricKl,
}

pub fn similarity(a: &GaussianPosterior, b: &GaussianPosterior, mode: SimilarityMode) -> Result<f64, InferenceError> {
    if a.mu.len() != b.mu.len() {
        return Err(InferenceError::DimensionMismatch(a.mu.len(), b.mu.len()));
    }
    match mode {
        SimilarityMode::Cosine => cosine(&a.mu, &b.mu),
        SimilarityMode::SymmetricKl => Ok(-0.5 * (gaussian_kl(a, b) + gaussian_kl(b, a))),
    }
}

/// `topic_id<TAB>rank<TAB>word<TAB>prob` rows.
pub fn topics_tsv(tables: &[Vec<(usize, f64)>], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (t, words) in tables.iter().enumerate() {
        for (rank, &(w, p)) in words.iter().enumerate() {
            out.push_str(&format!("{t}\t{rank}\t{}\t{p}\n", vocab.token(w)));
        }
    }
    out
}

/// `label,topic_0,...,topic_{T-1}` followed by one row per distribution.
pub fn distributions_csv(rows: &[(String, TopicDistribution)]) -> String {
    let t = rows.first().map_or(0, |r| r.1 .0.len());
    let mut out = String::from("label");
    for k in 0..t {
        out.push_str(&format!(",topic_{k}"));
    }
    out.push('\n');
    for (label, dist) in rows {
        out.push_str(label);
        for p in &dist.0 {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    out
}
