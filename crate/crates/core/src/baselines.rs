//! Reference algorithms: Separate, FedAvg (and its pre-aggregation
//! FedAvg-local view), FedProx, and post-training fine-tuning.
//!
//! All of them train with [`local_sgd_epoch`], which shares batching, RNG
//! consumption and the gradient code path with the APPLE local epoch.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apple::epoch_batches;
use crate::config::RunConfig;
use crate::data::{Dataset, FederatedSplit};
use crate::error::{Error, Result};
use crate::federation::{ClientRoundStats, RoundReport, BYTES_PER_PARAM};
use crate::metrics::client_accuracy;
use crate::numerics::{
    axpy_combination, backward, forward_loss, init_params, sgd_step, ModelSpec, ParamVector,
};
use crate::seed::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Separate,
    Fedavg,
    FedavgLocal,
    FedavgFt,
    FedproxFt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub mu_prox: f64,
    pub finetune_epochs: usize,
}

/// `μ/2 · ‖w − w0‖²`
pub fn fedprox_penalty(w: &ParamVector, center: &ParamVector, mu: f64) -> f64 {
    let sq: f64 = w
        .as_slice()
        .iter()
        .zip(center.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    mu / 2.0 * sq
}

/// `μ · (w − w0)`
pub fn fedprox_gradient(w: &ParamVector, center: &ParamVector, mu: f64) -> ParamVector {
    ParamVector::from_vec(
        w.as_slice()
            .iter()
            .zip(center.as_slice())
            .map(|(a, b)| mu * (a - b))
            .collect(),
    )
}

/// Hyperparameters of a plain local SGD epoch.
#[derive(Debug, Clone, Copy)]
pub struct SgdParams<'a> {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// FedProx center and coefficient; `None` or a zero coefficient adds
    /// nothing to the gradient.
    pub prox: Option<(&'a ParamVector, f64)>,
}

/// One shuffled pass of momentum SGD; returns the sample-weighted mean loss
/// (cross-entropy plus prox term when enabled).
pub fn local_sgd_epoch<R: Rng + ?Sized>(
    model: &ModelSpec,
    params: &mut ParamVector,
    velocity: &mut ParamVector,
    data: &Dataset,
    sgd: &SgdParams<'_>,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for idx in epoch_batches(data.len(), sgd.batch_size, rng) {
        let batch = data.batch(&idx)?;
        let mut g = backward(model, params, &batch)?;
        let mut loss = g.loss;
        if let Some((center, mu)) = sgd.prox.filter(|&(_, mu)| mu != 0.0) {
            loss += fedprox_penalty(params, center, mu);
            let pg = fedprox_gradient(params, center, mu);
            for (a, b) in g.grad.as_mut_slice().iter_mut().zip(pg.as_slice()) {
                *a += b;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite local training loss".into()));
        }
        total += loss * idx.len() as f64;
        sgd_step(params, &g.grad, sgd.lr, sgd.momentum, velocity);
        params.ensure_finite("local model")?;
    }
    Ok(total / data.len().max(1) as f64)
}

fn evaluate(
    model: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    test: &Dataset,
) -> Result<ClientRoundStats> {
    let train_loss = forward_loss(model, params, &train.full_batch()?)?;
    Ok(ClientRoundStats {
        train_loss,
        penalized_loss: train_loss,
        test_accuracy: client_accuracy(model, params, test)?,
    })
}

fn map_clients<T: Send>(
    n: usize,
    parallel: bool,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// `n_i / n` for every client.
pub fn aggregation_weights(train_sizes: &[usize]) -> Vec<f64> {
    let total: usize = train_sizes.iter().sum();
    train_sizes
        .iter()
        .map(|&s| s as f64 / total as f64)
        .collect()
}

/// Runs `epochs` of local SGD from a copy of `start`, velocity reset.
fn train_from(
    model: &ModelSpec,
    start: &ParamVector,
    data: &Dataset,
    config: &RunConfig,
    epochs: usize,
    prox: Option<(&ParamVector, f64)>,
    rng: &mut impl Rng,
) -> Result<ParamVector> {
    let mut params = start.clone();
    let mut velocity = ParamVector::zeros(params.dim());
    let sgd = SgdParams {
        lr: config.lr_net,
        momentum: config.momentum,
        batch_size: config.batch_size,
        prox,
    };
    for _ in 0..epochs {
        local_sgd_epoch(model, &mut params, &mut velocity, data, &sgd, rng)?;
    }
    Ok(params)
}

/// FedAvg / FedProx state between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAvgState {
    pub global: ParamVector,
    /// Each client's post-local-training copy from the latest round.
    pub locals: Vec<ParamVector>,
    pub round: usize,
}

/// Per-round evaluations of one FedAvg round.
#[derive(Debug, Clone)]
pub struct FedAvgRound {
    /// Aggregated global model on every client.
    pub global: RoundReport,
    /// Pre-aggregation local copies on their own client (FedAvg-local).
    pub local: RoundReport,
}

impl FedAvgState {
    pub fn init(config: &RunConfig, model: &ModelSpec, num_clients: usize) -> Self {
        let global = init_params(
            model,
            &mut stream_rng(config.seed, Stream::Init { index: 0 }),
        );
        FedAvgState {
            locals: vec![global.clone(); num_clients],
            global,
            round: 0,
        }
    }

    /// Broadcast, local training on every client, then `n_i/n` aggregation.
    pub fn run_round(
        &mut self,
        config: &RunConfig,
        model: &ModelSpec,
        split: &FederatedSplit,
        mu_prox: f64,
        round: usize,
        parallel: bool,
    ) -> Result<FedAvgRound> {
        let n = split.num_clients();
        let global = &self.global;
        let locals = map_clients(n, parallel, |i| {
            let mut rng = stream_rng(config.seed, Stream::Shuffle { client: i, round });
            let prox = Some((global, mu_prox));
            train_from(
                model,
                global,
                &split.clients[i].train,
                config,
                config.local_epochs,
                prox,
                &mut rng,
            )
        })?;
        let weights = aggregation_weights(&split.train_sizes());
        let refs: Vec<&ParamVector> = locals.iter().collect();
        self.global = axpy_combination(&weights, &refs)?;
        self.locals = locals;
        self.round = round;

        let bytes = vec![model_bytes(model); n];
        let global_stats = map_clients(n, parallel, |i| {
            let c = &split.clients[i];
            evaluate(model, &self.global, &c.train, &c.test)
        })?;
        let local_stats = map_clients(n, parallel, |i| {
            let c = &split.clients[i];
            evaluate(model, &self.locals[i], &c.train, &c.test)
        })?;
        let report = |clients| RoundReport {
            round,
            clients,
            downloads: vec![Vec::new(); n],
            bytes_up: bytes.clone(),
            bytes_down: bytes.clone(),
            dr: Vec::new(),
        };
        Ok(FedAvgRound {
            global: report(global_stats),
            local: report(local_stats),
        })
    }
}

fn model_bytes(model: &ModelSpec) -> u64 {
    crate::numerics::param_count(model) as u64 * BYTES_PER_PARAM
}

/// Separate (purely local) training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparateState {
    pub models: Vec<ParamVector>,
    pub round: usize,
}

impl SeparateState {
    pub fn init(config: &RunConfig, model: &ModelSpec, num_clients: usize) -> Self {
        SeparateState {
            models: (0..num_clients)
                .map(|i| {
                    init_params(
                        model,
                        &mut stream_rng(config.seed, Stream::Init { index: i }),
                    )
                })
                .collect(),
            round: 0,
        }
    }

    pub fn run_round(
        &mut self,
        config: &RunConfig,
        model: &ModelSpec,
        split: &FederatedSplit,
        round: usize,
        parallel: bool,
    ) -> Result<RoundReport> {
        let n = split.num_clients();
        let models = &self.models;
        self.models = map_clients(n, parallel, |i| {
            let mut rng = stream_rng(config.seed, Stream::Shuffle { client: i, round });
            train_from(
                model,
                &models[i],
                &split.clients[i].train,
                config,
                config.local_epochs,
                None,
                &mut rng,
            )
        })?;
        self.round = round;
        let stats = map_clients(n, parallel, |i| {
            let c = &split.clients[i];
            evaluate(model, &self.models[i], &c.train, &c.test)
        })?;
        Ok(RoundReport {
            round,
            clients: stats,
            downloads: vec![Vec::new(); n],
            bytes_up: vec![0; n],
            bytes_down: vec![0; n],
            dr: Vec::new(),
        })
    }
}

/// Copies `global` and trains it for `epochs` on the client's training set.
pub fn finetune(
    model: &ModelSpec,
    global: &ParamVector,
    train: &Dataset,
    config: &RunConfig,
    client: usize,
    epochs: usize,
) -> Result<ParamVector> {
    let mut rng = stream_rng(config.seed, Stream::Finetune { client });
    train_from(model, global, train, config, epochs, None, &mut rng)
}

/// Fine-tunes `global` on every client and evaluates the results.
pub fn finetune_all(
    config: &RunConfig,
    model: &ModelSpec,
    split: &FederatedSplit,
    global: &ParamVector,
    parallel: bool,
) -> Result<(Vec<ParamVector>, Vec<ClientRoundStats>)> {
    let tuned = map_clients(split.num_clients(), parallel, |i| {
        finetune(
            model,
            global,
            &split.clients[i].train,
            config,
            i,
            config.finetune_epochs,
        )
    })?;
    let stats = map_clients(split.num_clients(), parallel, |i| {
        let c = &split.clients[i];
        evaluate(model, &tuned[i], &c.train, &c.test)
    })?;
    Ok((tuned, stats))
}

/// Outcome of a whole FedAvg/FedProx run.
#[derive(Debug, Clone)]
pub struct FedAvgResult {
    pub global_reports: Vec<RoundReport>,
    pub local_reports: Vec<RoundReport>,
    pub state: FedAvgState,
}

pub fn run_fedprox(
    config: &RunConfig,
    model: &ModelSpec,
    split: &FederatedSplit,
    mu_prox: f64,
    parallel: bool,
) -> Result<FedAvgResult> {
    let mut state = FedAvgState::init(config, model, split.num_clients());
    let mut global_reports = Vec::with_capacity(config.rounds);
    let mut local_reports = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let r = state.run_round(config, model, split, mu_prox, round, parallel)?;
        global_reports.push(r.global);
        local_reports.push(r.local);
    }
    Ok(FedAvgResult {
        global_reports,
        local_reports,
        state,
    })
}

pub fn run_fedavg(
    config: &RunConfig,
    model: &ModelSpec,
    split: &FederatedSplit,
    parallel: bool,
) -> Result<FedAvgResult> {
    run_fedprox(config, model, split, 0.0, parallel)
}

pub fn run_separate(
    config: &RunConfig,
    model: &ModelSpec,
    split: &FederatedSplit,
    parallel: bool,
) -> Result<(Vec<RoundReport>, SeparateState)> {
    let mut state = SeparateState::init(config, model, split.num_clients());
    let mut reports = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        reports.push(state.run_round(config, model, split, round, parallel)?);
    }
    Ok((reports, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_are_size_proportional() {
        let w = aggregation_weights(&[10, 30, 60]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w, vec![10.0 / 100.0, 30.0 / 100.0, 60.0 / 100.0]);
    }

    #[test]
    fn prox_term_values() {
        let w = ParamVector::from_vec(vec![1.0, 2.0]);
        let c = ParamVector::from_vec(vec![0.0, 4.0]);
        assert!((fedprox_penalty(&w, &c, 2.0) - 5.0).abs() < 1e-15);
        assert_eq!(fedprox_gradient(&w, &c, 2.0).as_slice(), &[2.0, -4.0]);
    }
}
