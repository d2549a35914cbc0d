//! Directed-relationship (DR) mixing, the proximal DR penalty and its loss
//! schedulers, and one client's local training epoch.
//!
//! A client's personalized model is `w_p = Σ_j p_j · w_j` over all core models.
//! Only the client's own core model and its DR vector `p` are trained; peer
//! core models are frozen copies. The local objective is
//!
//! ```text
//! F(w_p) = CE(w_p; batch) + λ(r) · μ/2 · ‖p − p0‖²
//! ```
//!
//! so by the chain rule `∂F/∂w_i = p_i · ∇CE(w_p)` and
//! `∂F/∂p_j = ⟨∇CE(w_p), w_j⟩ + λ(r)·μ·(p_j − p0_j)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{axpy_combination, backward, sgd_step, ModelSpec, ParamVector};

/// Client-private mixing weights over all core models. Entries are
/// unconstrained reals; they may turn negative or stop summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrVector {
    pub owner: usize,
    pub weights: Vec<f64>,
}

impl DrVector {
    pub fn new(owner: usize, weights: Vec<f64>) -> Self {
        DrVector { owner, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn self_weight(&self) -> f64 {
        self.weights[self.owner]
    }

    pub fn distance_to(&self, p0: &ProxCenter) -> f64 {
        self.weights
            .iter()
            .zip(&p0.weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Data-size-proportional DR prox-center, `n_j / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxCenter {
    pub weights: Vec<f64>,
}

pub fn prox_center(train_sizes: &[usize]) -> Result<ProxCenter> {
    if train_sizes.is_empty() || train_sizes.contains(&0) {
        return Err(Error::config(format!(
            "prox-center needs at least one client and non-empty training sets, got {train_sizes:?}"
        )));
    }
    let total: usize = train_sizes.iter().sum();
    Ok(ProxCenter {
        weights: train_sizes
            .iter()
            .map(|&n| n as f64 / total as f64)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Cosine,
    Exponential,
    ConstantZero,
}

/// Round-indexed weight on the DR penalty, zero from `cutoff` onward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSpec {
    pub kind: SchedulerKind,
    /// Round `L` after which the scheduler is always zero.
    pub cutoff: usize,
    /// Exponential base; the value approached just below the cutoff.
    pub epsilon: f64,
    pub mu: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-3;

pub fn scheduler_value(spec: &SchedulerSpec, round: usize) -> f64 {
    scheduler_value_at(spec, round as f64)
}

/// The scheduler on a continuous round axis; integer rounds agree with
/// [`scheduler_value`].
pub fn scheduler_value_at(spec: &SchedulerSpec, round: f64) -> f64 {
    let cutoff = spec.cutoff as f64;
    if round >= cutoff {
        return 0.0;
    }
    let t = round / cutoff;
    match spec.kind {
        SchedulerKind::Cosine => ((t * std::f64::consts::PI).cos() + 1.0) / 2.0,
        SchedulerKind::Exponential => spec.epsilon.powf(t),
        SchedulerKind::ConstantZero => 0.0,
    }
}

/// `base_loss + λ·μ/2·‖p − p0‖²`.
pub fn penalized_loss(base_loss: f64, dr: &DrVector, p0: &ProxCenter, lambda: f64, mu: f64) -> f64 {
    let sq: f64 = dr
        .weights
        .iter()
        .zip(&p0.weights)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    base_loss + lambda * (mu / 2.0) * sq
}

/// Gradient of the penalized objective with respect to every DR entry, given
/// the cross-entropy gradient at the assembled personalized model.
pub fn dr_gradient(
    model_grad: &ParamVector,
    core_models: &[&ParamVector],
    dr: &DrVector,
    p0: &ProxCenter,
    lambda: f64,
    mu: f64,
) -> Vec<f64> {
    core_models
        .iter()
        .zip(dr.weights.iter().zip(&p0.weights))
        .map(|(w, (&p, &c))| model_grad.dot(w) + lambda * mu * (p - c))
        .collect()
}

/// Gradient with respect to the client's own core model: `p_ii · ∇CE(w_p)`.
/// Frozen peers contribute nothing.
pub fn core_gradient(model_grad: &ParamVector, self_weight: f64) -> ParamVector {
    model_grad.scaled(self_weight)
}

/// Assembles the personalized model from the client's own core model and
/// its cached peers. Slot `own` of `peers` is ignored.
pub fn personalized_model(
    own: usize,
    core: &ParamVector,
    peers: &[ParamVector],
    dr: &DrVector,
) -> Result<ParamVector> {
    let models = mixing_inputs(own, core, peers);
    axpy_combination(&dr.weights, &models)
}

fn mixing_inputs<'a>(
    own: usize,
    core: &'a ParamVector,
    peers: &'a [ParamVector],
) -> Vec<&'a ParamVector> {
    peers
        .iter()
        .enumerate()
        .map(|(j, w)| if j == own { core } else { w })
        .collect()
}

/// Shuffles `0..n` and cuts it into consecutive mini-batches.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mutable per-client training state touched by one local epoch.
pub struct LocalState<'a> {
    pub index: usize,
    pub core: &'a mut ParamVector,
    pub velocity: &'a mut ParamVector,
    pub dr: &'a mut DrVector,
    /// Cached copies of all core models; slot `index` is ignored in favour of
    /// `core`.
    pub peers: &'a [ParamVector],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochParams {
    pub lr_net: f64,
    pub lr_dr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub mu: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    /// Sample-weighted mean cross-entropy over the epoch's batches.
    pub base: f64,
    /// Same, plus the DR penalty at the pre-step DR vector of each batch.
    pub penalized: f64,
}

/// One pass over `data`. For every batch the core model and the DR vector are
/// stepped simultaneously from one backward pass at the pre-step personalized
/// model: momentum SGD for the core model, plain gradient descent for the DR.
pub fn apple_local_epoch<R: Rng + ?Sized>(
    spec: &ModelSpec,
    state: LocalState<'_>,
    p0: &ProxCenter,
    data: &Dataset,
    params: &EpochParams,
    rng: &mut R,
) -> Result<EpochLosses> {
    let n = state.peers.len();
    if state.dr.len() != n || p0.weights.len() != n || state.index >= n {
        return Err(Error::config(format!(
            "client {} has {} DR weights, {} cached models, prox-center of {}",
            state.index,
            state.dr.len(),
            n,
            p0.weights.len()
        )));
    }
    let mut base_sum = 0.0;
    let mut pen_sum = 0.0;
    for idx in epoch_batches(data.len(), params.batch_size, rng) {
        let batch = data.batch(&idx)?;
        let (g, dr_grad) = {
            let models = mixing_inputs(state.index, state.core, state.peers);
            let wp = axpy_combination(&state.dr.weights, &models)?;
            let g = backward(spec, &wp, &batch)?;
            let dr_grad = dr_gradient(&g.grad, &models, state.dr, p0, params.lambda, params.mu);
            (g, dr_grad)
        };
        if !g.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "client {}: non-finite training loss",
                state.index
            )));
        }
        let weight = idx.len() as f64;
        base_sum += g.loss * weight;
        pen_sum += penalized_loss(g.loss, state.dr, p0, params.lambda, params.mu) * weight;

        let core_grad = core_gradient(&g.grad, state.dr.self_weight());
        sgd_step(
            state.core,
            &core_grad,
            params.lr_net,
            params.momentum,
            state.velocity,
        );
        for (p, d) in state.dr.weights.iter_mut().zip(&dr_grad) {
            *p -= params.lr_dr * d;
        }
        state.core.ensure_finite("core model")?;
        if state.dr.weights.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!(
                "client {}: non-finite DR vector",
                state.index
            )));
        }
    }
    let total = data.len().max(1) as f64;
    Ok(EpochLosses {
        base: base_sum / total,
        penalized: pen_sum / total,
    })
}
