//! Minibatch training of the variational objective.
//!
//! Each epoch shuffles the instances, draws `S` noise samples per batch
//! element, takes one optimizer step per batch on the mean batch loss, and
//! then multiplies the learning rate by `lr_decay`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{shuffled_batches, TrainingInstance};
use crate::diffcore::{DiffError, Gradients, Graph, ParamSet, Tensor};
use crate::model::{JtwModel, LossTerms};

/// Width of the moving average used by the convergence test.
pub const CONVERGENCE_WINDOW: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training instances")]
    EmptyCorpus,
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("epoch hook failed after epoch {epoch}: {detail}")]
    Hook { epoch: usize, detail: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta0: f64,
    pub lr_decay: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Relative change of the smoothed epoch loss below which training
    /// stops. Zero disables the test.
    pub convergence_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta0: 0.0005,
            lr_decay: 0.95,
            max_iter: 50,
            batch_size: 2048,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            convergence_tol: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(TrainError::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(TrainError::Config("convergence_tol must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (0-based), produced by
    /// repeating `η ← η × lr_decay`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        (0..epoch).fold(self.eta0, |eta, _| eta * self.lr_decay)
    }
}

/// Anything the trainer can optimise: a parameter set plus a batched loss.
pub trait Objective {
    type Instance;

    fn latent_dim(&self) -> usize;
    fn samples(&self) -> usize;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Builds the mean batch loss on `g`, which was created over
    /// `self.params()` (or a copy with identical layout).
    fn batch_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&Self::Instance],
        noise: &[Tensor],
    ) -> Result<LossTerms, DiffError>;
}

impl Objective for JtwModel {
    type Instance = TrainingInstance;

    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }

    fn samples(&self) -> usize {
        self.config().samples
    }

    fn params(&self) -> &ParamSet {
        JtwModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        JtwModel::params_mut(self)
    }

    fn batch_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&TrainingInstance],
        noise: &[Tensor],
    ) -> Result<LossTerms, DiffError> {
        JtwModel::batch_loss(self, g, batch, noise)
    }
}

/// First-order optimizer with its running state.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Gradients,
        v: Gradients,
        t: i32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                m: Gradients::zeros_like(params),
                v: Gradients::zeros_like(params),
                t: 0,
            },
        }
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (id, g) in grads.iter() {
                    for (p, gv) in params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (id, g) in grads.iter() {
                    let ms = m.get_mut(id).data_mut();
                    let vs = v.get_mut(id).data_mut();
                    let ps = params.get_mut(id).data_mut();
                    for j in 0..g.len() {
                        let gv = g.data()[j];
                        ms[j] = *beta1 * ms[j] + (1.0 - *beta1) * gv;
                        vs[j] = *beta2 * vs[j] + (1.0 - *beta2) * gv * gv;
                        let mhat = ms[j] / c1;
                        let vhat = vs[j] / c2;
                        ps[j] -= lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
    }
}

/// Loss values of one step, taken before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// `samples` standard-normal tensors of shape `[rows, dim]`.
pub fn draw_noise<R: rand::Rng + ?Sized>(rng: &mut R, samples: usize, rows: usize, dim: usize) -> Vec<Tensor> {
    (0..samples)
        .map(|_| {
            let data = (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::from_vec(&[rows, dim], data).expect("shape matches length")
        })
        .collect()
}

/// One optimizer update on the mean loss of `batch`.
pub fn step<O: Objective>(
    objective: &mut O,
    batch: &[&O::Instance],
    noise: &[Tensor],
    optimizer: &mut Optimizer,
    lr: f64,
) -> Result<StepOutcome, DiffError> {
    let (outcome, grads) = {
        let mut g = Graph::new(objective.params());
        let terms = objective.batch_loss(&mut g, batch, noise)?;
        let outcome = StepOutcome {
            loss: g.value(terms.loss).item(),
            recon: g.value(terms.recon).item(),
            kl: g.value(terms.kl).item(),
        };
        (outcome, g.backward(terms.loss)?)
    };
    if grads.iter().any(|(_, t)| !t.is_finite()) {
        return Err(DiffError::NonFinite { op: "gradient" });
    }
    optimizer.apply(objective.params_mut(), &grads, lr);
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub kl: f64,
    pub recon: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub converged: bool,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,kl,recon,lr,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.loss, e.kl, e.recon, e.lr, e.seconds
            ));
        }
        out
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn has_converged(losses: &[f64], tol: f64) -> bool {
    if tol <= 0.0 || losses.len() < CONVERGENCE_WINDOW + 1 {
        return false;
    }
    let ma = moving_average(losses, CONVERGENCE_WINDOW);
    let (prev, cur) = (ma[ma.len() - 2], ma[ma.len() - 1]);
    (cur - prev).abs() / cur.abs() < tol
}

pub fn train<O: Objective>(
    objective: &mut O,
    instances: &[O::Instance],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_with_hook(objective, instances, config, |_, _| Ok(()))
}

/// Like [`train`], calling `hook` after every epoch (used for periodic
/// checkpoints).
pub fn train_with_hook<O, F>(
    objective: &mut O,
    instances: &[O::Instance],
    config: &TrainConfig,
    mut hook: F,
) -> Result<TrainReport, TrainError>
where
    O: Objective,
    F: FnMut(&EpochStats, &O) -> Result<(), String>,
{
    config.validate()?;
    if instances.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, objective.params());
    let mut report = TrainReport::default();
    let mut losses = Vec::new();
    let mut lr = config.eta0;

    for epoch in 0..config.max_iter {
        let start = Instant::now();
        let batches = shuffled_batches(instances.len(), config.batch_size, &mut rng)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let (mut loss, mut kl, mut recon) = (0.0, 0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&O::Instance> = idx.iter().map(|&i| &instances[i]).collect();
            let noise = draw_noise(&mut rng, objective.samples(), batch.len(), objective.latent_dim());
            let out = step(objective, &batch, &noise, &mut optimizer, lr).map_err(|e| TrainError::Diverged {
                epoch,
                batch: b,
                detail: e.to_string(),
            })?;
            if !out.loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("loss is {}", out.loss),
                });
            }
            loss += out.loss;
            kl += out.kl;
            recon += out.recon;
        }
        let n = batches.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: loss / n,
            kl: kl / n,
            recon: recon / n,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.6} (recon {:.6}, kl {:.6}) lr {:.3e}",
            epoch,
            stats.loss,
            stats.recon,
            stats.kl,
            lr
        );
        hook(&stats, objective).map_err(|detail| TrainError::Hook { epoch, detail })?;
        losses.push(stats.loss);
        report.epochs.push(stats);
        if has_converged(&losses, config.convergence_tol) {
            report.converged = true;
            break;
        }
        lr *= config.lr_decay;
    }
    Ok(report)
}
