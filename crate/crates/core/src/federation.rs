//! The cross-silo round loop: server state, client caches, transfer
//! accounting and budgeted core-model selection.
//!
//! A round works on a snapshot of the server's core models taken at round
//! start. Every client refreshes some cache slots from that snapshot, trains,
//! and only after all clients finish are the uploads applied. Clients share no
//! mutable state within a round, so running them in parallel gives the same
//! bits as running them in order.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apple::{
    apple_local_epoch, penalized_loss, personalized_model, prox_center, scheduler_value, DrVector,
    EpochParams, LocalState, ProxCenter, SchedulerSpec,
};
use crate::config::RunConfig;
use crate::data::{Dataset, FederatedSplit};
use crate::error::{Error, Result};
use crate::metrics::client_accuracy;
use crate::numerics::{forward_loss, init_params, param_count, ModelSpec, ParamVector};
use crate::seed::{stream_rng, Stream};

pub const BYTES_PER_PARAM: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub core_models: Vec<ParamVector>,
    pub round: usize,
    pub versions: Vec<u64>,
}

/// The only message a client sends to the server: its core model. DR vectors
/// and data never travel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreUpload {
    pub client: usize,
    pub round: usize,
    pub core_model: ParamVector,
}

impl ServerState {
    pub fn receive(&mut self, upload: CoreUpload) -> Result<()> {
        let slot = self.core_models.get_mut(upload.client).ok_or_else(|| {
            Error::config(format!("upload from unknown client {}", upload.client))
        })?;
        if slot.dim() != upload.core_model.dim() {
            return Err(Error::config(format!(
                "client {} uploaded dim {} but server holds dim {}",
                upload.client,
                upload.core_model.dim(),
                slot.dim()
            )));
        }
        *slot = upload.core_model;
        self.versions[upload.client] += 1;
        Ok(())
    }
}

/// Training-time state held by one client. Datasets are kept alongside but
/// are not part of the checkpointed snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub index: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub core_model: ParamVector,
    pub dr: DrVector,
    /// Last-downloaded copies of every core model; slot `index` mirrors
    /// `core_model`.
    pub cache: Vec<ParamVector>,
    pub cache_versions: Vec<u64>,
    pub download_count: Vec<u64>,
}

/// Serializable part of [`ClientState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSnapshot {
    pub index: usize,
    pub core_model: ParamVector,
    pub dr: DrVector,
    pub cache: Vec<ParamVector>,
    pub cache_versions: Vec<u64>,
    pub download_count: Vec<u64>,
}

impl ClientState {
    pub fn snapshot(&self) -> ClientSnapshot {
        ClientSnapshot {
            index: self.index,
            core_model: self.core_model.clone(),
            dr: self.dr.clone(),
            cache: self.cache.clone(),
            cache_versions: self.cache_versions.clone(),
            download_count: self.download_count.clone(),
        }
    }

    pub fn restore(snapshot: ClientSnapshot, train: Dataset, test: Dataset) -> Self {
        ClientState {
            index: snapshot.index,
            train,
            test,
            core_model: snapshot.core_model,
            dr: snapshot.dr,
            cache: snapshot.cache,
            cache_versions: snapshot.cache_versions,
            download_count: snapshot.download_count,
        }
    }

    pub fn personalized(&self) -> Result<ParamVector> {
        personalized_model(self.index, &self.core_model, &self.cache, &self.dr)
    }
}

/// Per-round download limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Budget {
    Unlimited,
    Limited(usize),
}

impl Budget {
    pub fn from_option(m: Option<usize>) -> Self {
        m.map_or(Budget::Unlimited, Budget::Limited)
    }

    /// Downloads per client per round for `n` clients.
    pub fn per_round(self, n: usize) -> usize {
        let peers = n.saturating_sub(1);
        match self {
            Budget::Unlimited => peers,
            Budget::Limited(m) => m.min(peers),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub train_loss: f64,
    pub penalized_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundStats>,
    /// Peer indices fetched by each client this round.
    pub downloads: Vec<Vec<usize>>,
    pub bytes_up: Vec<u64>,
    pub bytes_down: Vec<u64>,
    /// DR vectors after the round (empty for algorithms without DRs).
    pub dr: Vec<Vec<f64>>,
}

/// Server plus clients of one APPLE run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub model: ModelSpec,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub p0: ProxCenter,
    /// Bytes each client received in the one-time setup broadcast.
    pub setup_bytes_down: u64,
}

/// Initializes all core models on the server, sets every DR vector to the
/// prox-center, and broadcasts the initial core models to every client once.
pub fn init_federation(
    config: &RunConfig,
    model: &ModelSpec,
    split: &FederatedSplit,
) -> Result<Federation> {
    let n = split.num_clients();
    if n != config.num_clients() {
        return Err(Error::config(format!(
            "split has {n} clients but config expects {}",
            config.num_clients()
        )));
    }
    for (i, c) in split.clients.iter().enumerate() {
        if c.train.feature_dim() != model.input_dim {
            return Err(Error::config(format!(
                "client {i} data has dim {} but model expects {}",
                c.train.feature_dim(),
                model.input_dim
            )));
        }
    }
    let p0 = prox_center(&split.train_sizes())?;
    let core_models: Vec<ParamVector> = (0..n)
        .map(|i| {
            init_params(
                model,
                &mut stream_rng(config.seed, Stream::Init { index: i }),
            )
        })
        .collect();
    let dim = param_count(model);
    let clients = split
        .clients
        .iter()
        .enumerate()
        .map(|(i, c)| ClientState {
            index: i,
            train: c.train.clone(),
            test: c.test.clone(),
            core_model: core_models[i].clone(),
            dr: DrVector::new(i, p0.weights.clone()),
            cache: core_models.clone(),
            cache_versions: vec![0; n],
            download_count: vec![1; n],
        })
        .collect();
    Ok(Federation {
        model: *model,
        server: ServerState {
            core_models,
            round: 0,
            versions: vec![0; n],
        },
        clients,
        p0,
        setup_bytes_down: n as u64 * dim as u64 * BYTES_PER_PARAM,
    })
}

/// Shared base of the selection weights, `max(1.5, r·M/N)`.
pub fn selection_base(round: usize, m: usize, n: usize) -> f64 {
    (round as f64 * m as f64 / n as f64).max(1.5)
}

/// Picks up to `m` peers of client `own` to download.
///
/// Peers never downloaded before come first (uniformly at random if there are
/// more than `m`). Remaining slots are drawn one at a time without
/// replacement with probability proportional to `b(r)^|p_j|`, renormalized
/// over the peers not yet chosen.
pub fn select_peers<R: Rng + ?Sized>(
    own: usize,
    dr: &[f64],
    download_count: &[u64],
    round: usize,
    m: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = dr.len();
    let peers: Vec<usize> = (0..n).filter(|&j| j != own).collect();
    let m = m.min(peers.len());
    let (never, seen): (Vec<usize>, Vec<usize>) =
        peers.into_iter().partition(|&j| download_count[j] == 0);

    if never.len() >= m {
        if never.len() == m {
            return never;
        }
        return index::sample(rng, never.len(), m)
            .into_iter()
            .map(|k| never[k])
            .collect();
    }

    let mut chosen = never;
    let base = selection_base(round, m, n);
    // Shift exponents by the max so the largest weight is 1 and nothing
    // overflows; the normalized probabilities are unchanged.
    let max_abs = seen.iter().map(|&j| dr[j].abs()).fold(0.0, f64::max);
    let mut candidates: Vec<(usize, f64)> = seen
        .iter()
        .map(|&j| (j, base.powf(dr[j].abs() - max_abs)))
        .collect();
    while chosen.len() < m && !candidates.is_empty() {
        let total: f64 = candidates.iter().map(|c| c.1).sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = candidates.len() - 1;
        for (k, &(_, w)) in candidates.iter().enumerate() {
            acc += w;
            if target < acc {
                pick = k;
                break;
            }
        }
        chosen.push(candidates.remove(pick).0);
    }
    chosen
}

pub fn select_downloads<R: Rng + ?Sized>(
    client: &ClientState,
    round: usize,
    m: usize,
    rng: &mut R,
) -> Vec<usize> {
    select_peers(
        client.index,
        &client.dr.weights,
        &client.download_count,
        round,
        m,
        rng,
    )
}

struct ClientOutcome {
    downloads: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn train_client(
    client: &mut ClientState,
    snapshot: &[ParamVector],
    snapshot_versions: &[u64],
    model: &ModelSpec,
    p0: &ProxCenter,
    config: &RunConfig,
    epoch: &EpochParams,
    round: usize,
) -> Result<ClientOutcome> {
    let n = snapshot.len();
    let i = client.index;
    let downloads = match Budget::from_option(config.budget) {
        Budget::Unlimited => (0..n).filter(|&j| j != i).collect(),
        Budget::Limited(m) => {
            let mut rng = stream_rng(config.seed, Stream::Select { client: i, round });
            select_downloads(client, round, m, &mut rng)
        }
    };
    for &j in &downloads {
        client.cache[j] = snapshot[j].clone();
        client.cache_versions[j] = snapshot_versions[j];
        client.download_count[j] += 1;
    }

    // Momentum lives only for the duration of one round's local training.
    let mut velocity = ParamVector::zeros(client.core_model.dim());
    let mut rng = stream_rng(config.seed, Stream::Shuffle { client: i, round });
    for _ in 0..config.local_epochs {
        let state = LocalState {
            index: i,
            core: &mut client.core_model,
            velocity: &mut velocity,
            dr: &mut client.dr,
            peers: &client.cache,
        };
        apple_local_epoch(model, state, p0, &client.train, epoch, &mut rng)?;
    }
    client.cache[i] = client.core_model.clone();
    Ok(ClientOutcome { downloads })
}

impl Federation {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        param_count(&self.model)
    }

    /// Runs round `round` (1-based). `parallel` only changes scheduling.
    pub fn run_round(
        &mut self,
        config: &RunConfig,
        round: usize,
        parallel: bool,
    ) -> Result<RoundReport> {
        let scheduler = config.scheduler_spec();
        let lambda = scheduler_value(&scheduler, round);
        let epoch = EpochParams {
            lr_net: config.lr_net,
            lr_dr: config.lr_dr,
            momentum: config.momentum,
            lambda,
            mu: scheduler.mu,
            batch_size: config.batch_size,
        };
        let snapshot = self.server.core_models.clone();
        let snapshot_versions = self.server.versions.clone();
        let (model, p0) = (&self.model, &self.p0);
        let work = |c: &mut ClientState| {
            train_client(
                c,
                &snapshot,
                &snapshot_versions,
                model,
                p0,
                config,
                &epoch,
                round,
            )
        };
        let outcomes: Vec<ClientOutcome> = if parallel {
            self.clients
                .par_iter_mut()
                .map(work)
                .collect::<Result<_>>()?
        } else {
            self.clients.iter_mut().map(work).collect::<Result<_>>()?
        };

        for client in &mut self.clients {
            self.server.receive(CoreUpload {
                client: client.index,
                round,
                core_model: client.core_model.clone(),
            })?;
            client.cache_versions[client.index] = self.server.versions[client.index];
        }
        self.server.round = round;

        let dim_bytes = self.dim() as u64 * BYTES_PER_PARAM;
        let stats = self.evaluate(&scheduler, round, parallel)?;
        Ok(RoundReport {
            round,
            clients: stats,
            bytes_up: vec![dim_bytes; self.clients.len()],
            bytes_down: outcomes
                .iter()
                .map(|o| o.downloads.len() as u64 * dim_bytes)
                .collect(),
            downloads: outcomes.into_iter().map(|o| o.downloads).collect(),
            dr: self.clients.iter().map(|c| c.dr.weights.clone()).collect(),
        })
    }

    /// Evaluates every client's personalized model on its own data.
    pub fn evaluate(
        &self,
        scheduler: &SchedulerSpec,
        round: usize,
        parallel: bool,
    ) -> Result<Vec<ClientRoundStats>> {
        let lambda = scheduler_value(scheduler, round);
        let eval = |c: &ClientState| -> Result<ClientRoundStats> {
            let wp = c.personalized()?;
            let train_loss = forward_loss(&self.model, &wp, &c.train.full_batch()?)?;
            Ok(ClientRoundStats {
                train_loss,
                penalized_loss: penalized_loss(train_loss, &c.dr, &self.p0, lambda, scheduler.mu),
                test_accuracy: client_accuracy(&self.model, &wp, &c.test)?,
            })
        };
        if parallel {
            self.clients.par_iter().map(eval).collect()
        } else {
            self.clients.iter().map(eval).collect()
        }
    }

    pub fn personalized_models(&self) -> Result<Vec<ParamVector>> {
        self.clients.iter().map(ClientState::personalized).collect()
    }
}

/// Result of a full APPLE run.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<RoundReport>,
    pub personalized: Vec<ParamVector>,
    pub federation: Federation,
}

/// Initializes and runs all configured rounds. `on_round` sees each report
/// as soon as it is produced.
pub fn run_experiment(
    config: &RunConfig,
    model: &ModelSpec,
    split: &FederatedSplit,
    parallel: bool,
    mut on_round: impl FnMut(&RoundReport) -> Result<()>,
) -> Result<ExperimentResult> {
    let mut fed = init_federation(config, model, split)?;
    let mut reports = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let report = fed.run_round(config, round, parallel)?;
        on_round(&report)?;
        reports.push(report);
    }
    Ok(ExperimentResult {
        reports,
        personalized: fed.personalized_models()?,
        federation: fed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SimRng;
    use rand::SeedableRng;

    #[test]
    fn selection_base_examples() {
        assert_eq!(selection_base(1, 2, 12), 1.5);
        assert_eq!(selection_base(12, 2, 12), 2.0);
        assert_eq!(selection_base(9, 1, 12), 1.5);
    }

    #[test]
    fn full_budget_takes_every_peer() {
        let mut rng = SimRng::seed_from_u64(0);
        let mut got = select_peers(2, &[0.2, 0.5, 0.1, -3.0], &[1; 4], 5, 3, &mut rng);
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 3]);
    }

    #[test]
    fn never_downloaded_peers_come_first() {
        let mut rng = SimRng::seed_from_u64(1);
        let counts = [1, 0, 4, 0, 2];
        for _ in 0..50 {
            let got = select_peers(0, &[1.0, 0.0, 9.0, 0.0, 9.0], &counts, 3, 2, &mut rng);
            let mut sorted = got.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![1, 3]);
        }
    }

    #[test]
    fn selection_is_deterministic_and_distinct() {
        let dr = [0.3, -0.2, 0.9, 0.1, 0.0, 0.5];
        let a = select_peers(1, &dr, &[1; 6], 7, 3, &mut SimRng::seed_from_u64(9));
        let b = select_peers(1, &dr, &[1; 6], 7, 3, &mut SimRng::seed_from_u64(9));
        assert_eq!(a, b);
        let mut u = a.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 3);
        assert!(!a.contains(&1));
    }

    #[test]
    fn upload_serializes_only_the_core_model() {
        let up = CoreUpload {
            client: 3,
            round: 2,
            core_model: ParamVector::from_vec(vec![1.0, 2.0]),
        };
        let v = serde_json::to_value(&up).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, vec!["client", "core_model", "round"]);
    }

    #[test]
    fn receive_bumps_version_and_checks_dim() {
        let mut s = ServerState {
            core_models: vec![ParamVector::zeros(2); 2],
            round: 0,
            versions: vec![0, 0],
        };
        s.receive(CoreUpload {
            client: 1,
            round: 1,
            core_model: ParamVector::from_vec(vec![1.0, 1.0]),
        })
        .unwrap();
        assert_eq!(s.versions, vec![0, 1]);
        assert!(s
            .receive(CoreUpload {
                client: 0,
                round: 1,
                core_model: ParamVector::zeros(3)
            })
            .is_err());
    }
}
