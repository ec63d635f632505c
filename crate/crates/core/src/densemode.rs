//! Training on pre-computed dense word vectors.
//!
//! The encoder reads `[pivot vector ; mean context vector]`. The pivot head
//! reconstructs the pivot vector directly; the context head maps the
//! context word distribution `softmax(βᵀζ + b_w)` to a vector through an
//! affine `V → E` projection. Every (reconstruction, target) pair scores
//! `cos(θ/2) = sqrt((1 + cos θ) / 2)`, whose log replaces the categorical
//! log-likelihood. The KL term is unchanged.
//!
//! Vector files use word2vec text format. A key `token@doc:pos` gives the
//! vector of one occurrence (`pos` counts in-vocabulary tokens of document
//! `doc`) and overrides the plain `token` key.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::diffcore::{softmax_in_place, DiffError, Graph, ParamSet, SparseRows, Tensor};
use crate::inference::{embed_input, norm, ContextualEmbedding, OccurrenceAggregate};
use crate::model::{
    affine, kl_to_prior, reparameterize, BatchInput, EncoderInput, InputMode, JtwModel, LossTerms, NoiseSample,
};
use crate::trainer::Objective;
use crate::word2vec::{Word2VecError, WordVectors};

/// Lower bound on the log of each cosine-half-angle factor.
pub const LOG_FLOOR: f64 = -30.0;

/// Added to squared norms of reconstructions on the tape.
const NORM_EPS: f64 = 1e-24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenseError {
    #[error("dense configuration error: {0}")]
    Config(String),
    #[error("zero vector for `{0}`")]
    ZeroVector(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Format(#[from] Word2VecError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `cos(½ arccos(cos(u, v)))`, computed as `sqrt((1 + c) / 2)`.
pub fn cos_half_angle(u: &[f64], v: &[f64]) -> Result<f64, DenseError> {
    if u.len() != v.len() {
        return Err(DenseError::DimensionMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(DenseError::ZeroVector("argument".into()));
    }
    let c = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(((1.0 + c) / 2.0).sqrt())
}

/// `max(log cos_half_angle, LOG_FLOOR)` for one pair.
pub fn log_factor(target: &[f64], recon: &[f64]) -> Result<f64, DenseError> {
    let h = cos_half_angle(target, recon)?;
    Ok((0.5 * (h * h).ln()).max(LOG_FLOOR))
}

/// Sum of floored log factors over paired targets and reconstructions.
pub fn dense_log_likelihood(targets: &[&[f64]], recons: &[&[f64]]) -> Result<f64, DenseError> {
    if targets.len() != recons.len() {
        return Err(DenseError::Config(format!(
            "{} targets but {} reconstructions",
            targets.len(),
            recons.len()
        )));
    }
    targets.iter().zip(recons).map(|(t, r)| log_factor(t, r)).sum()
}

/// Unit-normalized vectors keyed by word type and by occurrence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseVectors {
    pub dim: usize,
    pub by_type: BTreeMap<String, Vec<f64>>,
    pub by_occurrence: BTreeMap<(String, usize, usize), Vec<f64>>,
}

fn parse_occurrence_key(key: &str) -> Option<(String, usize, usize)> {
    let (token, loc) = key.rsplit_once('@')?;
    let (doc, pos) = loc.split_once(':')?;
    Some((token.to_string(), doc.parse().ok()?, pos.parse().ok()?))
}

impl DenseVectors {
    pub fn from_word_vectors(wv: WordVectors) -> Result<Self, DenseError> {
        let mut out = DenseVectors {
            dim: wv.dim,
            ..Default::default()
        };
        for (key, mut v) in wv.entries {
            let n = norm(&v);
            if n == 0.0 || !n.is_finite() {
                return Err(DenseError::ZeroVector(key));
            }
            v.iter_mut().for_each(|x| *x /= n);
            match parse_occurrence_key(&key) {
                Some(k) => out.by_occurrence.insert(k, v),
                None => out.by_type.insert(key, v),
            };
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self, DenseError> {
        Self::from_word_vectors(WordVectors::parse(text)?)
    }

    pub fn lookup(&self, token: &str, doc: usize, pos: usize) -> Option<&[f64]> {
        self.by_occurrence
            .get(&(token.to_string(), doc, pos))
            .or_else(|| self.by_type.get(token))
            .map(Vec::as_slice)
    }
}

/// One occurrence: word id plus row indices into the corpus vector table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseInstance {
    pub word: usize,
    pub pivot: usize,
    pub context: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseCorpus {
    pub dim: usize,
    /// `[N, E]`, one row per token occurrence that has a vector.
    pub table: Tensor,
    pub instances: Vec<DenseInstance>,
    /// In-vocabulary tokens without any vector.
    pub missing: usize,
}

impl DenseCorpus {
    /// `docs` holds in-vocabulary id sequences; windows span `window / 2`
    /// vector-bearing tokens on each side.
    pub fn build(docs: &[Vec<usize>], vocab: &Vocabulary, vectors: &DenseVectors, window: usize) -> Result<Self, DenseError> {
        let half = window / 2;
        let mut table = Vec::new();
        let mut rows = 0usize;
        let mut instances = Vec::new();
        let mut missing = 0;
        for (d, doc) in docs.iter().enumerate() {
            let mut seq = Vec::with_capacity(doc.len());
            for (p, &id) in doc.iter().enumerate() {
                match vectors.lookup(vocab.token(id), d, p) {
                    Some(v) => {
                        table.extend_from_slice(v);
                        seq.push((id, rows));
                        rows += 1;
                    }
                    None => missing += 1,
                }
            }
            for i in 0..seq.len() {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(seq.len());
                instances.push(DenseInstance {
                    word: seq[i].0,
                    pivot: seq[i].1,
                    context: (lo..hi).filter(|&j| j != i).map(|j| seq[j].1).collect(),
                });
            }
        }
        Ok(Self {
            dim: vectors.dim,
            table: Tensor::from_vec(&[rows, vectors.dim], table)?,
            instances,
            missing,
        })
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        self.table.row(row)
    }

    /// `[pivot ; mean context]`, zeros for an empty context.
    pub fn encoder_input(&self, inst: &DenseInstance) -> Vec<f64> {
        let e = self.dim;
        let mut x = vec![0.0; 2 * e];
        x[..e].copy_from_slice(self.vector(inst.pivot));
        if !inst.context.is_empty() {
            let c = inst.context.len() as f64;
            for &r in &inst.context {
                for (o, v) in x[e..].iter_mut().zip(self.vector(r)) {
                    *o += v / c;
                }
            }
        }
        x
    }
}

/// Dense pivot and context reconstructions for latent `z`.
pub fn reconstruct(model: &JtwModel, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>), DenseError> {
    let (w, b) = model
        .ids()
        .proj
        .ok_or_else(|| DenseError::Config("model has no dense projection".into()))?;
    let pivot = model.pivot_logits(z);
    let mut words = affine(&model.topic_transform(z).0, model.params().get(model.ids().beta).data(), model.params().get(model.ids().context_b).data());
    softmax_in_place(&mut words);
    let ctx = affine(&words, model.params().get(w).data(), model.params().get(b).data());
    Ok((pivot, ctx))
}

/// Monte-Carlo ELBO of one occurrence.
pub fn dense_elbo(model: &JtwModel, corpus: &DenseCorpus, inst: &DenseInstance, eps: &[NoiseSample]) -> Result<f64, DenseError> {
    let post = model.encode_input(&EncoderInput::Dense(corpus.encoder_input(inst)));
    let mut recon = 0.0;
    for e in eps {
        let (rp, rc) = reconstruct(model, &reparameterize(&post, e))?;
        recon += log_factor(corpus.vector(inst.pivot), &rp)?;
        for &r in &inst.context {
            recon += log_factor(corpus.vector(r), &rc)?;
        }
    }
    Ok(recon / eps.len() as f64 - kl_to_prior(&post))
}

pub fn dense_contextual_embed(model: &JtwModel, corpus: &DenseCorpus, inst: &DenseInstance) -> ContextualEmbedding {
    embed_input(model, inst.word, &EncoderInput::Dense(corpus.encoder_input(inst)))
}

pub fn dense_aggregate(model: &JtwModel, corpus: &DenseCorpus) -> OccurrenceAggregate {
    let mut agg = OccurrenceAggregate::default();
    for inst in &corpus.instances {
        agg.add(&dense_contextual_embed(model, corpus, inst));
    }
    agg
}

/// Row-wise floored log cosine-half-angle between `recon` and constant unit
/// `targets`, `[P, 1]`.
fn log_factor_graph(g: &mut Graph<'_>, recon: crate::diffcore::Var, targets: Tensor) -> Result<crate::diffcore::Var, DiffError> {
    let t = g.constant(targets);
    let prod = g.mul(recon, t)?;
    let dot = g.sum_rows(prod)?;
    let sq = g.mul(recon, recon)?;
    let sq = g.sum_rows(sq)?;
    let sq = g.add_scalar(sq, NORM_EPS)?;
    let nrm = g.sqrt(sq)?;
    let c = g.div(dot, nrm)?;
    let half = g.add_scalar(c, 1.0)?;
    let half = g.scale(half, 0.5)?;
    let half = g.clamp_min(half, (2.0 * LOG_FLOOR).exp())?;
    let lg = g.log(half)?;
    g.scale(lg, 0.5)
}

/// A dense-mode model bound to its training corpus.
pub struct DenseObjective<'c> {
    pub model: JtwModel,
    pub corpus: &'c DenseCorpus,
}

impl<'c> DenseObjective<'c> {
    pub fn new(model: JtwModel, corpus: &'c DenseCorpus) -> Result<Self, DenseError> {
        match model.config().input {
            InputMode::Dense { dim } if dim == corpus.dim => Ok(Self { model, corpus }),
            InputMode::Dense { dim } => Err(DenseError::DimensionMismatch(dim, corpus.dim)),
            InputMode::Bow => Err(DenseError::Config("model was configured for bag-of-words input".into())),
        }
    }
}

impl Objective for DenseObjective<'_> {
    type Instance = DenseInstance;

    fn latent_dim(&self) -> usize {
        self.model.config().latent_dim
    }

    fn samples(&self) -> usize {
        self.model.config().samples
    }

    fn params(&self) -> &ParamSet {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.model.params_mut()
    }

    fn batch_loss(&self, g: &mut Graph<'_>, batch: &[&DenseInstance], noise: &[Tensor]) -> Result<LossTerms, DiffError> {
        let (m, corpus, e) = (&self.model, self.corpus, self.corpus.dim);
        let inputs: Vec<Vec<f64>> = batch.iter().map(|inst| corpus.encoder_input(inst)).collect();
        let pivots: Vec<Vec<f64>> = batch.iter().map(|inst| corpus.vector(inst.pivot).to_vec()).collect();
        let pivots = Tensor::from_rows(&pivots)?;
        let mut pair_rows = Vec::new();
        let mut pair_targets = Vec::new();
        let mut assign = SparseRows::new(batch.iter().map(|i| i.context.len()).sum());
        for (b, inst) in batch.iter().enumerate() {
            let start = pair_rows.len();
            for &r in &inst.context {
                pair_rows.push(b);
                pair_targets.extend_from_slice(corpus.vector(r));
            }
            assign.push_row((start..pair_rows.len()).map(|p| (p, 1.0)))?;
        }
        let pair_targets = Tensor::from_vec(&[pair_rows.len(), e], pair_targets)?;
        let assign = g.sparse(assign);

        let (mu, log_sigma) = m.encoder_graph(g, BatchInput::Dense(Tensor::from_rows(&inputs)?))?;
        let kl_rows = m.kl_graph(g, mu, log_sigma)?;
        let (pw, pb) = m.ids().proj.expect("dense model has a projection");
        let mut per_sample = Vec::with_capacity(noise.len());
        for eps in noise {
            let z = m.sample_graph(g, mu, log_sigma, eps)?;
            let pivot_recon = m.pivot_head_graph(g, z)?;
            let mut ll = log_factor_graph(g, pivot_recon, pivots.clone())?;
            if !pair_rows.is_empty() {
                let zeta = m.topic_graph(g, z)?;
                let logits = m.context_logits_graph(g, zeta)?;
                let words = g.softmax(logits)?;
                let (w, b) = (g.param(pw), g.param(pb));
                let ctx_recon = g.affine(words, w, Some(b))?;
                let per_pair = g.gather_rows(ctx_recon, pair_rows.clone())?;
                let factors = log_factor_graph(g, per_pair, pair_targets.clone())?;
                let ctx_ll = g.sparse_affine(assign, factors, None)?;
                ll = g.add(ll, ctx_ll)?;
            }
            per_sample.push(ll);
        }
        m.combine_graph(g, &per_sample, kl_rows)
    }
}
