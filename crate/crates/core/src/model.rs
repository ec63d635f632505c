//! The joint topic / word-embedding VAE.
//!
//! Encoder: `π = tanh(W_in · [one-hot(pivot) ; context / C] + b_in)`,
//! `μ = W_μ π + b_μ`, `log σ = W_σ π + b_σ`.
//!
//! Decoder, given a latent sample `z`:
//! - pivot word: `softmax(M_x z + b_x)`
//! - topic mixture: `ζ = softmax(W_t z + b_t)`
//! - context words: `softmax(βᵀ ζ + b_w)`, each context token drawn
//!   independently (topic indicators marginalised).
//!
//! Weight matrices are stored input-major (`[in, out]`), i.e. transposed
//! relative to the usual `M · z` notation.
//!
//! The per-occurrence objective is
//! `(1/S) Σ_s log p(x, w | μ + σ ⊙ ε_s) − KL(N(μ, σ²) ‖ N(0, I))`.
//! Two implementations exist: plain per-instance functions used for
//! inference, and a batched tape used for training. They are tested against
//! each other.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TrainingInstance;
use crate::diffcore::{
    log_softmax_in_place, softmax_in_place, DiffError, Graph, ParamId, ParamSet, SparseRows, Tensor, Var,
};

/// Variance of the normal distribution used to initialise every parameter.
pub const INIT_VARIANCE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter `{name}` missing or mis-shaped (expected {expected:?})")]
    Param { name: String, expected: Vec<usize> },
    #[error("word id {id} outside vocabulary of size {vocab}")]
    WordOutOfRange { id: usize, vocab: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// What the encoder consumes and what the decoder reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputMode {
    /// One-hot pivot plus normalized context bag of words.
    Bow,
    /// Pre-trained dense vectors of dimension `dim`.
    Dense { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub topics: usize,
    pub hidden: usize,
    pub samples: usize,
    pub input: InputMode,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            latent_dim: 100,
            topics: 50,
            hidden: 256,
            samples: 1,
            input: InputMode::Bow,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("latent_dim", self.latent_dim),
            ("topics", self.topics),
            ("hidden", self.hidden),
            ("samples", self.samples),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if let InputMode::Dense { dim: 0 } = self.input {
            return Err(ModelError::Config("dense dimension must be at least 1".into()));
        }
        Ok(())
    }

    pub fn encoder_input_dim(&self) -> usize {
        match self.input {
            InputMode::Bow => 2 * self.vocab_size,
            InputMode::Dense { dim } => 2 * dim,
        }
    }

    pub fn pivot_output_dim(&self) -> usize {
        match self.input {
            InputMode::Bow => self.vocab_size,
            InputMode::Dense { dim } => dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub mu_w: ParamId,
    pub mu_b: ParamId,
    pub logsigma_w: ParamId,
    pub logsigma_b: ParamId,
    pub pivot_w: ParamId,
    pub pivot_b: ParamId,
    pub topic_w: ParamId,
    pub topic_b: ParamId,
    pub beta: ParamId,
    pub context_b: ParamId,
    /// Dense mode only: maps the context word distribution to a vector.
    pub proj: Option<(ParamId, ParamId)>,
}

/// Parameter names and shapes in canonical order.
fn layout(config: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (v, d, t, h) = (config.vocab_size, config.latent_dim, config.topics, config.hidden);
    let mut out = vec![
        ("encoder.hidden.weight", vec![config.encoder_input_dim(), h]),
        ("encoder.hidden.bias", vec![h]),
        ("encoder.mu.weight", vec![h, d]),
        ("encoder.mu.bias", vec![d]),
        ("encoder.logsigma.weight", vec![h, d]),
        ("encoder.logsigma.bias", vec![d]),
        ("decoder.pivot.weight", vec![d, config.pivot_output_dim()]),
        ("decoder.pivot.bias", vec![config.pivot_output_dim()]),
        ("decoder.topic.weight", vec![d, t]),
        ("decoder.topic.bias", vec![t]),
        ("decoder.beta", vec![t, v]),
        ("decoder.context.bias", vec![v]),
    ];
    if let InputMode::Dense { dim } = config.input {
        out.push(("decoder.projection.weight", vec![v, dim]));
        out.push(("decoder.projection.bias", vec![dim]));
    }
    out
}

/// Diagonal Gaussian posterior of one occurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Standard-normal noise for one reparameterised sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample(pub Vec<f64>);

impl NoiseSample {
    pub fn draw<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self((0..dim).map(|_| StandardNormal.sample(rng)).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

/// A point on the topic simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicDistribution(pub Vec<f64>);

impl TopicDistribution {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Sums to one within `tol` and every entry is strictly positive.
    pub fn is_on_simplex(&self, tol: f64) -> bool {
        is_distribution(&self.0, tol)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn is_distribution(p: &[f64], tol: f64) -> bool {
    (p.iter().sum::<f64>() - 1.0).abs() <= tol && p.iter().all(|&x| x > 0.0)
}

/// Encoder input of one occurrence.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderInput {
    Sparse(Vec<(usize, f64)>),
    Dense(Vec<f64>),
}

/// `[one-hot(pivot) ; context counts / C]` as sparse entries over `2V` columns.
pub fn bow_input(instance: &TrainingInstance, vocab_size: usize) -> Vec<(usize, f64)> {
    let c = instance.context_len();
    let mut entries = Vec::with_capacity(instance.context.len() + 1);
    entries.push((instance.pivot, 1.0));
    for &(id, n) in &instance.context {
        entries.push((vocab_size + id, f64::from(n) / f64::from(c)));
    }
    entries
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(post: &GaussianPosterior, eps: &NoiseSample) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.sigma)
        .zip(&eps.0)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − log σ²)`.
pub fn kl_to_prior(post: &GaussianPosterior) -> f64 {
    0.5 * post
        .mu
        .iter()
        .zip(&post.sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
        .sum::<f64>()
}

/// Symbolic handles for the three loss pieces of one batch, all scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// Mean negative ELBO.
    pub loss: Var,
    /// Mean negative reconstruction log-likelihood.
    pub recon: Var,
    /// Mean KL to the prior.
    pub kl: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JtwModel {
    config: ModelConfig,
    params: ParamSet,
    ids: ParamIds,
}

impl JtwModel {
    /// Parameters drawn i.i.d. from `N(0, 0.1)`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let normal = Normal::new(0.0, INIT_VARIANCE.sqrt()).expect("valid std");
        Self::build(config, |len| (0..len).map(|_| normal.sample(rng)).collect())
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        Self::build(config, |len| vec![0.0; len])
    }

    fn build(config: ModelConfig, mut fill: impl FnMut(usize) -> Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in layout(&config) {
            let len = shape.iter().product();
            params.add(name, Tensor::from_vec(&shape, fill(len))?);
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set after checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config);
        if params.len() != expected.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        let mut found = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            match params.find(name) {
                Some(id) if params.get(id).shape() == shape.as_slice() => found.push(id),
                _ => {
                    return Err(ModelError::Param {
                        name: name.to_string(),
                        expected: shape.clone(),
                    })
                }
            }
        }
        let ids = ParamIds {
            enc_w: found[0],
            enc_b: found[1],
            mu_w: found[2],
            mu_b: found[3],
            logsigma_w: found[4],
            logsigma_b: found[5],
            pivot_w: found[6],
            pivot_b: found[7],
            topic_w: found[8],
            topic_b: found[9],
            beta: found[10],
            context_b: found[11],
            proj: found.get(12).map(|&w| (w, found[13])),
        };
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    fn p(&self, id: ParamId) -> &[f64] {
        self.params.get(id).data()
    }

    fn check_word(&self, id: usize) -> Result<(), ModelError> {
        if id >= self.config.vocab_size {
            return Err(ModelError::WordOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    // ---- per-instance forward pass ----

    pub fn encode_input(&self, input: &EncoderInput) -> GaussianPosterior {
        let h = self.config.hidden;
        let (w, b) = (self.p(self.ids.enc_w), self.p(self.ids.enc_b));
        let mut hidden = b.to_vec();
        let mut add_row = |row: usize, x: f64| {
            for (o, wv) in hidden.iter_mut().zip(&w[row * h..(row + 1) * h]) {
                *o += x * wv;
            }
        };
        match input {
            EncoderInput::Sparse(entries) => entries.iter().for_each(|&(c, x)| add_row(c, x)),
            EncoderInput::Dense(x) => x.iter().enumerate().for_each(|(c, &x)| add_row(c, x)),
        }
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mu = affine(&hidden, self.p(self.ids.mu_w), self.p(self.ids.mu_b));
        let sigma = affine(&hidden, self.p(self.ids.logsigma_w), self.p(self.ids.logsigma_b))
            .into_iter()
            .map(f64::exp)
            .collect();
        GaussianPosterior { mu, sigma }
    }

    pub fn encode(&self, instance: &TrainingInstance) -> Result<GaussianPosterior, ModelError> {
        self.check_word(instance.pivot)?;
        for &(id, _) in &instance.context {
            self.check_word(id)?;
        }
        let input = EncoderInput::Sparse(bow_input(instance, self.config.vocab_size));
        Ok(self.encode_input(&input))
    }

    /// Pre-softmax pivot head `M_x z + b_x`.
    pub fn pivot_logits(&self, z: &[f64]) -> Vec<f64> {
        affine(z, self.p(self.ids.pivot_w), self.p(self.ids.pivot_b))
    }

    /// `p(x | z)` over the vocabulary.
    pub fn decode_pivot(&self, z: &[f64]) -> Vec<f64> {
        let mut p = self.pivot_logits(z);
        softmax_in_place(&mut p);
        p
    }

    /// `ζ = softmax(W_t z + b_t)`.
    pub fn topic_transform(&self, z: &[f64]) -> TopicDistribution {
        let mut t = affine(z, self.p(self.ids.topic_w), self.p(self.ids.topic_b));
        softmax_in_place(&mut t);
        TopicDistribution(t)
    }

    /// `p(w | ζ) = softmax(βᵀ ζ + b_w)`.
    pub fn decode_context(&self, zeta: &TopicDistribution) -> Vec<f64> {
        let mut p = affine(&zeta.0, self.p(self.ids.beta), self.p(self.ids.context_b));
        softmax_in_place(&mut p);
        p
    }

    /// `log p(x | z) + Σ_v w[v] log p(v | ζ(z))`.
    pub fn log_likelihood(&self, instance: &TrainingInstance, z: &[f64]) -> f64 {
        let mut pivot = self.pivot_logits(z);
        log_softmax_in_place(&mut pivot);
        let zeta = self.topic_transform(z);
        let mut ctx = affine(&zeta.0, self.p(self.ids.beta), self.p(self.ids.context_b));
        log_softmax_in_place(&mut ctx);
        pivot[instance.pivot]
            + instance
                .context
                .iter()
                .map(|&(v, n)| f64::from(n) * ctx[v])
                .sum::<f64>()
    }

    /// Monte-Carlo ELBO of one instance with the given noise samples.
    pub fn elbo(&self, instance: &TrainingInstance, eps: &[NoiseSample]) -> Result<f64, ModelError> {
        if eps.is_empty() {
            return Err(ModelError::Config("at least one noise sample is required".into()));
        }
        let post = self.encode(instance)?;
        let recon = eps
            .iter()
            .map(|e| self.log_likelihood(instance, &reparameterize(&post, e)))
            .sum::<f64>()
            / eps.len() as f64;
        Ok(recon - kl_to_prior(&post))
    }

    // ---- batched tape ----

    /// Encoder on the tape; returns `(μ, log σ)`, each `[B, D]`.
    pub(crate) fn encoder_graph(&self, g: &mut Graph<'_>, input: BatchInput) -> Result<(Var, Var), DiffError> {
        let w = g.param(self.ids.enc_w);
        let b = g.param(self.ids.enc_b);
        let pre = match input {
            BatchInput::Sparse(rows) => {
                let sid = g.sparse(rows);
                g.sparse_affine(sid, w, Some(b))?
            }
            BatchInput::Dense(x) => {
                let x = g.constant(x);
                g.affine(x, w, Some(b))?
            }
        };
        let hidden = g.tanh(pre)?;
        let (mw, mb) = (g.param(self.ids.mu_w), g.param(self.ids.mu_b));
        let mu = g.affine(hidden, mw, Some(mb))?;
        let (sw, sb) = (g.param(self.ids.logsigma_w), g.param(self.ids.logsigma_b));
        let log_sigma = g.affine(hidden, sw, Some(sb))?;
        Ok((mu, log_sigma))
    }

    /// Per-row `KL`, `[B, 1]`.
    pub(crate) fn kl_graph(&self, g: &mut Graph<'_>, mu: Var, log_sigma: Var) -> Result<Var, DiffError> {
        let mu2 = g.mul(mu, mu)?;
        let two_ls = g.scale(log_sigma, 2.0)?;
        let var = g.exp(two_ls)?;
        let a = g.add(mu2, var)?;
        let b = g.sub(a, two_ls)?;
        let c = g.add_scalar(b, -1.0)?;
        let rows = g.sum_rows(c)?;
        g.scale(rows, 0.5)
    }

    /// `z = μ + exp(log σ) ⊙ ε` for one noise tensor `[B, D]`.
    pub(crate) fn sample_graph(&self, g: &mut Graph<'_>, mu: Var, log_sigma: Var, noise: &Tensor) -> Result<Var, DiffError> {
        let sigma = g.exp(log_sigma)?;
        let eps = g.constant(noise.clone());
        let scaled = g.mul(sigma, eps)?;
        g.add(mu, scaled)
    }

    pub(crate) fn pivot_head_graph(&self, g: &mut Graph<'_>, z: Var) -> Result<Var, DiffError> {
        let (w, b) = (g.param(self.ids.pivot_w), g.param(self.ids.pivot_b));
        g.affine(z, w, Some(b))
    }

    pub(crate) fn topic_graph(&self, g: &mut Graph<'_>, z: Var) -> Result<Var, DiffError> {
        let (w, b) = (g.param(self.ids.topic_w), g.param(self.ids.topic_b));
        let logits = g.affine(z, w, Some(b))?;
        g.softmax(logits)
    }

    /// `βᵀ ζ + b_w`, `[B, V]`.
    pub(crate) fn context_logits_graph(&self, g: &mut Graph<'_>, zeta: Var) -> Result<Var, DiffError> {
        let (beta, b) = (g.param(self.ids.beta), g.param(self.ids.context_b));
        g.affine(zeta, beta, Some(b))
    }

    /// Averages per-sample log-likelihood rows and combines them with the KL
    /// rows into batch means.
    pub(crate) fn combine_graph(
        &self,
        g: &mut Graph<'_>,
        loglik_per_sample: &[Var],
        kl_rows: Var,
    ) -> Result<LossTerms, DiffError> {
        let mut total = loglik_per_sample[0];
        for &ll in &loglik_per_sample[1..] {
            total = g.add(total, ll)?;
        }
        let loglik = g.scale(total, 1.0 / loglik_per_sample.len() as f64)?;
        let mean_ll = g.mean(loglik)?;
        let recon = g.scale(mean_ll, -1.0)?;
        let kl = g.mean(kl_rows)?;
        let loss = g.add(recon, kl)?;
        Ok(LossTerms { loss, recon, kl })
    }

    /// Mean negative ELBO of a bag-of-words batch. `noise` holds one `[B, D]`
    /// tensor per Monte-Carlo sample.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&TrainingInstance],
        noise: &[Tensor],
    ) -> Result<LossTerms, DiffError> {
        let v = self.config.vocab_size;
        let mut enc_rows = SparseRows::new(2 * v);
        let mut pivots = SparseRows::new(v);
        let mut contexts = SparseRows::new(v);
        for inst in batch {
            enc_rows.push_row(bow_input(inst, v))?;
            pivots.push_row([(inst.pivot, 1.0)])?;
            contexts.push_row(inst.context.iter().map(|&(id, n)| (id, f64::from(n))))?;
        }
        let (pivots, contexts) = (g.sparse(pivots), g.sparse(contexts));
        let (mu, log_sigma) = self.encoder_graph(g, BatchInput::Sparse(enc_rows))?;
        let kl_rows = self.kl_graph(g, mu, log_sigma)?;
        let mut per_sample = Vec::with_capacity(noise.len());
        for eps in noise {
            let z = self.sample_graph(g, mu, log_sigma, eps)?;
            let pivot_logits = self.pivot_head_graph(g, z)?;
            let pivot_lp = g.log_softmax(pivot_logits)?;
            let pivot_ll = g.row_weighted_sum(pivot_lp, pivots)?;
            let zeta = self.topic_graph(g, z)?;
            let ctx_logits = self.context_logits_graph(g, zeta)?;
            let ctx_lp = g.log_softmax(ctx_logits)?;
            let ctx_ll = g.row_weighted_sum(ctx_lp, contexts)?;
            per_sample.push(g.add(pivot_ll, ctx_ll)?);
        }
        self.combine_graph(g, &per_sample, kl_rows)
    }
}

pub(crate) enum BatchInput {
    Sparse(SparseRows),
    Dense(Tensor),
}

/// `x · W + b` for a single row, `W` stored `[in, out]`.
pub(crate) fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut out = b.to_vec();
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[k * m..(k + 1) * m]) {
            *o += xv * wv;
        }
    }
    out
}
