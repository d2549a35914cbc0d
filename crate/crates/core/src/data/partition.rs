//! Non-IID federated splits.
//!
//! * `pathological`: every client holds exactly `classes_per_client` classes.
//!   Clients requesting a class take successive slices of its shuffled pool;
//!   each slice is a `U[0.3, 1.0]` fraction of what remains, and the last
//!   requester takes the rest.
//! * `practical`: every class is cut into `num_clients` shards by
//!   `shard_fractions` (80% / 10% / 10 × 1% by default) and a per-class random
//!   permutation hands one shard to each client.
//! * `iid`: a uniform shuffle split into near-equal chunks.
//!
//! Test sets are cut with the same per-client rule as the training sets.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::SimRng;

const PATHOLOGICAL_MIN_FRACTION: f64 = 0.3;
const PATHOLOGICAL_MAX_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Pathological,
    Practical,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub seed: u64,
    pub classes_per_client: usize,
    pub shard_fractions: Vec<f64>,
}

/// `[0.8, 0.1]` followed by `num_clients - 2` equal shares of the remaining
/// 10% (ten 1% shards for the default twelve clients).
pub fn default_shard_fractions(num_clients: usize) -> Vec<f64> {
    match num_clients {
        0 => Vec::new(),
        1 => vec![1.0],
        2 => vec![0.9, 0.1],
        n => {
            let mut f = vec![0.8, 0.1];
            f.extend(std::iter::repeat_n(0.1 / (n - 2) as f64, n - 2));
            f
        }
    }
}

impl PartitionSpec {
    pub fn pathological(num_clients: usize, classes_per_client: usize, seed: u64) -> Self {
        PartitionSpec {
            scheme: PartitionScheme::Pathological,
            num_clients,
            seed,
            classes_per_client,
            shard_fractions: Vec::new(),
        }
    }

    pub fn practical(num_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            scheme: PartitionScheme::Practical,
            num_clients,
            seed,
            classes_per_client: 2,
            shard_fractions: default_shard_fractions(num_clients),
        }
    }

    pub fn iid(num_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            scheme: PartitionScheme::Iid,
            num_clients,
            seed,
            classes_per_client: 2,
            shard_fractions: Vec::new(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("partition needs at least one client"));
        }
        match self.scheme {
            PartitionScheme::Pathological => {
                if self.classes_per_client == 0 || self.classes_per_client > num_classes {
                    return Err(Error::config(format!(
                        "classes_per_client {} must be in [1, {num_classes}]",
                        self.classes_per_client
                    )));
                }
            }
            PartitionScheme::Practical => {
                if self.shard_fractions.len() != self.num_clients {
                    return Err(Error::config(format!(
                        "{} shard fractions for {} clients",
                        self.shard_fractions.len(),
                        self.num_clients
                    )));
                }
                if self
                    .shard_fractions
                    .iter()
                    .any(|&f| !(f > 0.0 && f.is_finite()))
                {
                    return Err(Error::config("shard fractions must be positive"));
                }
                let sum: f64 = self.shard_fractions.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!(
                        "shard fractions sum to {sum}, not 1"
                    )));
                }
            }
            PartitionScheme::Iid => {}
        }
        Ok(())
    }
}

/// What a client received, per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProvenance {
    pub client: usize,
    /// Classes deliberately assigned to this client (sorted).
    pub classes: Vec<usize>,
    /// Practical scheme only: shard index received for each class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shards: Option<Vec<usize>>,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedSplit {
    pub clients: Vec<ClientSplit>,
    pub provenance: Vec<ClientProvenance>,
}

impl FederatedSplit {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.train.len()).collect()
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            clients: self
                .clients
                .iter()
                .map(|c| ManifestClient {
                    train_indices: c.train_indices.clone(),
                    test_indices: c.test_indices.clone(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClient {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Frozen, index-only form of a split (`partition` subcommand output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub clients: Vec<ManifestClient>,
    pub provenance: Vec<ClientProvenance>,
}

impl SplitManifest {
    /// Re-materializes the split against the source datasets.
    pub fn apply(&self, train: &Dataset, test: &Dataset) -> Result<FederatedSplit> {
        let out_of_range = |idx: &[usize], n: usize| idx.iter().any(|&i| i >= n);
        let mut clients = Vec::with_capacity(self.clients.len());
        for (k, c) in self.clients.iter().enumerate() {
            if out_of_range(&c.train_indices, train.len())
                || out_of_range(&c.test_indices, test.len())
            {
                return Err(Error::data(
                    "split manifest",
                    format!("client {k} references samples outside the dataset"),
                ));
            }
            clients.push(ClientSplit {
                train: train.subset(&c.train_indices),
                test: test.subset(&c.test_indices),
                train_indices: c.train_indices.clone(),
                test_indices: c.test_indices.clone(),
            });
        }
        Ok(FederatedSplit {
            clients,
            provenance: self.provenance.clone(),
        })
    }
}

fn check_compatible(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.num_classes() != test.num_classes() || train.feature_dim() != test.feature_dim() {
        return Err(Error::config(format!(
            "train ({} classes, dim {}) and test ({} classes, dim {}) disagree",
            train.num_classes(),
            train.feature_dim(),
            test.num_classes(),
            test.feature_dim()
        )));
    }
    Ok(())
}

fn build_split(
    train: &Dataset,
    test: &Dataset,
    train_idx: Vec<Vec<usize>>,
    test_idx: Vec<Vec<usize>>,
    classes: Vec<Vec<usize>>,
    shards: Option<Vec<Vec<usize>>>,
) -> FederatedSplit {
    let mut clients = Vec::with_capacity(train_idx.len());
    let mut provenance = Vec::with_capacity(train_idx.len());
    for (k, (tr, te)) in train_idx.into_iter().zip(test_idx).enumerate() {
        let train_ds = train.subset(&tr);
        let test_ds = test.subset(&te);
        provenance.push(ClientProvenance {
            client: k,
            classes: classes[k].clone(),
            shards: shards.as_ref().map(|s| s[k].clone()),
            train_class_counts: train_ds.class_counts(),
            test_class_counts: test_ds.class_counts(),
        });
        clients.push(ClientSplit {
            train: train_ds,
            test: test_ds,
            train_indices: tr,
            test_indices: te,
        });
    }
    FederatedSplit {
        clients,
        provenance,
    }
}

pub fn partition(train: &Dataset, test: &Dataset, spec: &PartitionSpec) -> Result<FederatedSplit> {
    match spec.scheme {
        PartitionScheme::Pathological => partition_pathological(train, test, spec),
        PartitionScheme::Practical => partition_practical(train, test, spec),
        PartitionScheme::Iid => partition_iid(train, test, spec),
    }
}

fn shuffled_pools(data: &Dataset, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut pools = data.class_indices();
    for pool in pools.iter_mut() {
        pool.shuffle(rng);
    }
    pools
}

/// Cuts `pool` into one contiguous slice per fraction; the final requester
/// takes the remainder. Every slice is non-empty, or `None` if the pool is
/// smaller than the number of requesters.
fn slice_by_fractions(pool: &[usize], fractions: &[f64]) -> Option<Vec<Vec<usize>>> {
    let requesters = fractions.len() + 1;
    if pool.len() < requesters {
        return None;
    }
    let mut out = Vec::with_capacity(requesters);
    let mut pos = 0;
    for (k, &f) in fractions.iter().enumerate() {
        let remaining = pool.len() - pos;
        let still_waiting = requesters - k - 1;
        let take = ((f * remaining as f64).round() as usize).clamp(1, remaining - still_waiting);
        out.push(pool[pos..pos + take].to_vec());
        pos += take;
    }
    out.push(pool[pos..].to_vec());
    Some(out)
}

/// Splits every class among the clients that requested it, in client order.
/// Classes nobody requested are left out. Fails if some class has fewer
/// train or test samples than requesters.
pub fn partition_by_assignment<R: Rng + ?Sized>(
    train: &Dataset,
    test: &Dataset,
    assignment: &[Vec<usize>],
    rng: &mut R,
) -> Result<FederatedSplit> {
    check_compatible(train, test)?;
    let num_classes = train.num_classes();
    let mut train_pools = train.class_indices();
    let mut test_pools = test.class_indices();
    for pool in train_pools.iter_mut().chain(test_pools.iter_mut()) {
        pool.shuffle(rng);
    }

    let mut requesters: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (client, classes) in assignment.iter().enumerate() {
        for &c in classes {
            if c >= num_classes {
                return Err(Error::config(format!(
                    "client {client} assigned unknown class {c}"
                )));
            }
            requesters[c].push(client);
        }
    }

    let n = assignment.len();
    let mut train_idx = vec![Vec::new(); n];
    let mut test_idx = vec![Vec::new(); n];
    for (c, clients) in requesters.iter().enumerate() {
        if clients.is_empty() {
            continue;
        }
        let fractions: Vec<f64> = (1..clients.len())
            .map(|_| rng.random_range(PATHOLOGICAL_MIN_FRACTION..=1.0))
            .collect();
        let exhausted = || {
            Error::data(
                "partition",
                format!(
                    "class {c} pool exhausted before all {} requesting clients were served",
                    clients.len()
                ),
            )
        };
        let train_slices = slice_by_fractions(&train_pools[c], &fractions).ok_or_else(exhausted)?;
        let test_slices = slice_by_fractions(&test_pools[c], &fractions).ok_or_else(exhausted)?;
        for ((&client, tr), te) in clients.iter().zip(train_slices).zip(test_slices) {
            train_idx[client].extend(tr);
            test_idx[client].extend(te);
        }
    }
    for idx in train_idx.iter_mut().chain(test_idx.iter_mut()) {
        idx.sort_unstable();
    }
    let classes = assignment
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.sort_unstable();
            c
        })
        .collect();
    Ok(build_split(train, test, train_idx, test_idx, classes, None))
}

pub fn partition_pathological(
    train: &Dataset,
    test: &Dataset,
    spec: &PartitionSpec,
) -> Result<FederatedSplit> {
    if spec.scheme != PartitionScheme::Pathological {
        return Err(Error::config(
            "partition_pathological called with another scheme",
        ));
    }
    check_compatible(train, test)?;
    spec.validate(train.num_classes())?;
    let num_classes = train.num_classes();
    let mut rng = SimRng::seed_from_u64(spec.seed);
    let mut last_err = None;
    for _ in 0..PATHOLOGICAL_MAX_RETRIES {
        let assignment: Vec<Vec<usize>> = (0..spec.num_clients)
            .map(|_| {
                let mut c =
                    index::sample(&mut rng, num_classes, spec.classes_per_client).into_vec();
                c.sort_unstable();
                c
            })
            .collect();
        // A class nobody draws would be dropped; redraw so all data is used.
        let mut covered = vec![false; num_classes];
        assignment.iter().flatten().for_each(|&c| covered[c] = true);
        let all_present = train.class_counts();
        if covered
            .iter()
            .zip(&all_present)
            .any(|(&cov, &n)| !cov && n > 0)
        {
            continue;
        }
        match partition_by_assignment(train, test, &assignment, &mut rng) {
            Ok(split) => return Ok(split),
            Err(e @ Error::Data { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        Error::data(
            "partition",
            format!(
                "no class assignment covering all {num_classes} classes after {PATHOLOGICAL_MAX_RETRIES} draws"
            ),
        )
    }))
}

/// Integer shard sizes for `total` items that sum exactly to `total`:
/// floors of the quotas plus one extra item for the largest remainders
/// (ties to the lower shard index).
pub fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut leftover = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[k] += 1;
        leftover -= 1;
    }
    sizes
}

pub fn partition_practical(
    train: &Dataset,
    test: &Dataset,
    spec: &PartitionSpec,
) -> Result<FederatedSplit> {
    if spec.scheme != PartitionScheme::Practical {
        return Err(Error::config(
            "partition_practical called with another scheme",
        ));
    }
    check_compatible(train, test)?;
    spec.validate(train.num_classes())?;
    let n = spec.num_clients;
    let num_classes = train.num_classes();
    let mut rng = SimRng::seed_from_u64(spec.seed);
    let train_pools = shuffled_pools(train, &mut rng);
    let test_pools = shuffled_pools(test, &mut rng);

    let mut train_idx = vec![Vec::new(); n];
    let mut test_idx = vec![Vec::new(); n];
    let mut shards = vec![vec![0; num_classes]; n];
    for c in 0..num_classes {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for (pools, out, what) in [
            (&train_pools, &mut train_idx, "train"),
            (&test_pools, &mut test_idx, "test"),
        ] {
            let pool = &pools[c];
            let sizes = largest_remainder(pool.len(), &spec.shard_fractions);
            if sizes.contains(&0) && !pool.is_empty() {
                if pool.len() >= 100 {
                    return Err(Error::data(
                        "partition",
                        format!(
                            "{what} class {c} with {} samples yields an empty shard",
                            pool.len()
                        ),
                    ));
                }
                log::warn!(
                    "{what} class {c} has only {} samples; some clients receive none of it",
                    pool.len()
                );
            }
            let mut starts = Vec::with_capacity(n);
            let mut pos = 0;
            for &s in &sizes {
                starts.push(pos);
                pos += s;
            }
            for (client, &shard) in perm.iter().enumerate() {
                out[client].extend_from_slice(&pool[starts[shard]..starts[shard] + sizes[shard]]);
            }
        }
        for (client, &shard) in perm.iter().enumerate() {
            shards[client][c] = shard;
        }
    }
    for idx in train_idx.iter_mut().chain(test_idx.iter_mut()) {
        idx.sort_unstable();
    }
    let classes = vec![(0..num_classes).collect::<Vec<_>>(); n];
    Ok(build_split(
        train,
        test,
        train_idx,
        test_idx,
        classes,
        Some(shards),
    ))
}

pub fn partition_iid(
    train: &Dataset,
    test: &Dataset,
    spec: &PartitionSpec,
) -> Result<FederatedSplit> {
    check_compatible(train, test)?;
    spec.validate(train.num_classes())?;
    let n = spec.num_clients;
    let mut rng = SimRng::seed_from_u64(spec.seed);
    let mut chunk = |len: usize| -> Vec<Vec<usize>> {
        let mut all: Vec<usize> = (0..len).collect();
        all.shuffle(&mut rng);
        let (base, extra) = (len / n, len % n);
        let mut out = Vec::with_capacity(n);
        let mut pos = 0;
        for k in 0..n {
            let size = base + usize::from(k < extra);
            let mut part = all[pos..pos + size].to_vec();
            part.sort_unstable();
            out.push(part);
            pos += size;
        }
        out
    };
    let train_idx = chunk(train.len());
    let test_idx = chunk(test.len());
    let classes = vec![(0..train.num_classes()).collect::<Vec<_>>(); n];
    Ok(build_split(train, test, train_idx, test_idx, classes, None))
}
