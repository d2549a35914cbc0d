//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use apple_fl::config::RunConfig;

/// Synthetic clustered task used by the ordering, budget and determinism
/// experiments: 12 clients, practical partition, softmax regression.
pub fn desk_config(seed: u64, algorithm: &str, budget: Option<usize>) -> RunConfig {
    let budget = budget.map_or("null".to_string(), |m| m.to_string());
    let text = format!(
        r#"{{
            "model": {{"kind": "softmax_regression"}},
            "data": {{"source": "synthetic", "num_classes": 10, "feature_dim": 20,
                      "train_per_class": 300, "test_per_class": 100,
                      "class_center_scale": 1.0, "noise_sigma": 3.0}},
            "partition": {{"scheme": "practical", "num_clients": 12}},
            "algorithm": "{algorithm}",
            "rounds": 40, "local_epochs": 5, "batch_size": 32,
            "lr_net": 0.01, "lr_dr": 0.001, "momentum": 0.9,
            "scheduler": {{"kind": "cosine", "mu": 0.1, "cutoff_fraction": 0.3}},
            "budget": {budget},
            "seed": {seed}
        }}"#
    );
    RunConfig::from_json(&text).expect("desk config is valid")
}

use apple_fl::data::{
    split_per_class, synth_clusters, FederatedSplit, ManifestClient, SplitManifest,
};
use apple_fl::numerics::ModelSpec;
use apple_fl::seed::{stream_rng, Stream};
use rand::seq::SliceRandom;

/// Four clients in two pairs; each pair shares its class support.
pub const PAIRED_ASSIGNMENT: [[usize; 2]; 4] = [[0, 1], [0, 1], [2, 3], [2, 3]];

pub fn paired_config(seed: u64) -> RunConfig {
    let text = format!(
        r#"{{
            "partition": {{"scheme": "iid", "num_clients": 4}},
            "rounds": 40, "local_epochs": 5, "batch_size": 32,
            "lr_net": 0.01, "lr_dr": 0.01, "momentum": 0.9,
            "scheduler": {{"kind": "cosine", "mu": 0.1, "cutoff_fraction": 0.3}},
            "seed": {seed}
        }}"#
    );
    RunConfig::from_json(&text).expect("paired config is valid")
}

/// Split and model for the paired-client experiment. Within a pair every
/// shared class is cut into two equal random halves, so partners hold
/// samples from the same distribution in the same amounts.
pub fn paired_split(seed: u64) -> (ModelSpec, FederatedSplit) {
    let all = synth_clusters(4, 10, 300, 1.0, 1.0, seed).expect("synthetic data");
    let (train, test) = split_per_class(&all, 200);
    let mut rng = stream_rng(seed, Stream::Partition);
    let mut clients = vec![
        ManifestClient {
            train_indices: Vec::new(),
            test_indices: Vec::new()
        };
        4
    ];
    for (source, pick) in [(&train, 0), (&test, 1)] {
        for (class, mut pool) in source.class_indices().into_iter().enumerate() {
            pool.shuffle(&mut rng);
            let members: Vec<usize> = (0..4)
                .filter(|&k| PAIRED_ASSIGNMENT[k].contains(&class))
                .collect();
            let half = pool.len() / 2;
            for (part, &k) in [&pool[..half], &pool[half..]].into_iter().zip(&members) {
                let target = if pick == 0 {
                    &mut clients[k].train_indices
                } else {
                    &mut clients[k].test_indices
                };
                target.extend_from_slice(part);
            }
        }
    }
    for c in &mut clients {
        c.train_indices.sort_unstable();
        c.test_indices.sort_unstable();
    }
    let manifest = SplitManifest {
        clients,
        provenance: Vec::new(),
    };
    let split = manifest.apply(&train, &test).expect("paired split");
    (ModelSpec::softmax(10, 4), split)
}

use apple_fl::apple::{core_gradient, dr_gradient, penalized_loss, DrVector, ProxCenter};
use apple_fl::baselines::{fedprox_gradient, fedprox_penalty};
use apple_fl::numerics::{
    axpy_combination, backward, forward_loss, param_count, Batch, ParamVector,
};
use apple_fl::seed::SimRng;
use rand::{Rng, SeedableRng};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;
/// Pre-activation distance from the ReLU kink required of MLP instances.
pub const KINK_MARGIN: f64 = 1e-3;
pub const GRAD_INSTANCES: u64 = 50;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + FD_STEP;
            let up = f(&probe);
            probe[k] = x[k] - FD_STEP;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn gauss(rng: &mut SimRng, scale: f64) -> f64 {
    use rand_distr::{Distribution, Normal};
    Normal::new(0.0, scale).unwrap().sample(rng)
}

pub fn random_vector(rng: &mut SimRng, dim: usize, scale: f64) -> ParamVector {
    ParamVector::from_vec((0..dim).map(|_| gauss(rng, scale)).collect())
}

pub fn random_batch(rng: &mut SimRng, n: usize, d: usize, c: usize) -> Batch {
    let inputs = (0..n * d).map(|_| gauss(rng, 1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    Batch::new(inputs, labels, d).unwrap()
}

/// Hidden pre-activations of an MLP (`W1[h][d]`, then `b1[h]`).
pub fn hidden_preactivations(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Vec<f64> {
    let apple_fl::numerics::ModelKind::Mlp1Hidden { hidden_dim, .. } = spec.kind else {
        return Vec::new();
    };
    let d = spec.input_dim;
    let p = params.as_slice();
    let mut out = Vec::new();
    for i in 0..batch.len() {
        let x = batch.row(i);
        for h in 0..hidden_dim {
            let mut z = p[hidden_dim * d + h];
            for k in 0..d {
                z += p[h * d + k] * x[k];
            }
            out.push(z);
        }
    }
    out
}

fn away_from_kinks(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> bool {
    hidden_preactivations(spec, params, batch)
        .iter()
        .all(|z| z.abs() > KINK_MARGIN)
}

/// A random model and batch. MLP instances are redrawn until every hidden
/// pre-activation sits clear of the ReLU kink.
pub fn random_instance(rng: &mut SimRng, mlp: bool) -> (ModelSpec, ParamVector, Batch) {
    loop {
        let d = rng.random_range(2..=6);
        let c = rng.random_range(2..=5);
        let spec = if mlp {
            ModelSpec::mlp(d, rng.random_range(2..=6), c)
        } else {
            ModelSpec::softmax(d, c)
        };
        let params = random_vector(rng, param_count(&spec), 0.7);
        let rows = rng.random_range(1..=8);
        let batch = random_batch(rng, rows, d, c);
        if away_from_kinks(&spec, &params, &batch) {
            return (spec, params, batch);
        }
    }
}

/// Maximum relative error of `backward` against finite differences of
/// `forward_loss` over the standard number of instances.
pub fn check_backward(mlp: bool, seed: u64) -> f64 {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_INSTANCES {
        let (spec, params, batch) = random_instance(&mut rng, mlp);
        let analytic = backward(&spec, &params, &batch).unwrap();
        assert_eq!(analytic.loss, forward_loss(&spec, &params, &batch).unwrap());
        let numeric = central_diff(
            |w| forward_loss(&spec, &ParamVector::from_vec(w.to_vec()), &batch).unwrap(),
            params.as_slice(),
        );
        worst = worst.max(max_rel_err(analytic.grad.as_slice(), &numeric));
    }
    worst
}

/// Random mixing instance: core models, DR vector, prox-center, scheduler
/// value and penalty coefficient.
pub struct MixInstance {
    pub spec: ModelSpec,
    pub batch: Batch,
    pub own: usize,
    pub cores: Vec<ParamVector>,
    pub dr: DrVector,
    pub p0: ProxCenter,
    pub lambda: f64,
    pub mu: f64,
}

impl MixInstance {
    pub fn random(rng: &mut SimRng, mlp: bool) -> Self {
        loop {
            let (spec, _, batch) = random_instance(rng, mlp);
            let n = rng.random_range(1..=5);
            let dim = param_count(&spec);
            let cores: Vec<ParamVector> = (0..n).map(|_| random_vector(rng, dim, 0.5)).collect();
            let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..100)).collect();
            let p0 = apple_fl::apple::prox_center(&sizes).unwrap();
            let own = rng.random_range(0..n);
            let dr = DrVector::new(own, (0..n).map(|_| 0.3 + gauss(rng, 0.5)).collect());
            let inst = MixInstance {
                spec,
                batch,
                own,
                cores,
                dr,
                p0,
                lambda: rng.random_range(0.0..1.0),
                mu: rng.random_range(0.0..2.0),
            };
            if away_from_kinks(&inst.spec, &inst.personalized(), &inst.batch) {
                return inst;
            }
        }
    }

    pub fn personalized(&self) -> ParamVector {
        let refs: Vec<&ParamVector> = self.cores.iter().collect();
        axpy_combination(&self.dr.weights, &refs).unwrap()
    }

    /// Penalized objective as a function of the DR weights and own core model.
    pub fn objective(&self, weights: &[f64], own_core: &ParamVector) -> f64 {
        let mut cores = self.cores.clone();
        cores[self.own] = own_core.clone();
        let refs: Vec<&ParamVector> = cores.iter().collect();
        let wp = axpy_combination(weights, &refs).unwrap();
        let base = forward_loss(&self.spec, &wp, &self.batch).unwrap();
        let dr = DrVector::new(self.own, weights.to_vec());
        penalized_loss(base, &dr, &self.p0, self.lambda, self.mu)
    }
}

pub fn check_dr_gradient(mlp: bool, seed: u64) -> f64 {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_INSTANCES {
        let inst = MixInstance::random(&mut rng, mlp);
        let g = backward(&inst.spec, &inst.personalized(), &inst.batch).unwrap();
        let refs: Vec<&ParamVector> = inst.cores.iter().collect();
        let analytic = dr_gradient(&g.grad, &refs, &inst.dr, &inst.p0, inst.lambda, inst.mu);
        let own_core = inst.cores[inst.own].clone();
        let numeric = central_diff(|p| inst.objective(p, &own_core), &inst.dr.weights);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

pub fn check_core_gradient(mlp: bool, seed: u64) -> f64 {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_INSTANCES {
        let inst = MixInstance::random(&mut rng, mlp);
        let g = backward(&inst.spec, &inst.personalized(), &inst.batch).unwrap();
        let analytic = core_gradient(&g.grad, inst.dr.self_weight());
        let numeric = central_diff(
            |w| inst.objective(&inst.dr.weights, &ParamVector::from_vec(w.to_vec())),
            inst.cores[inst.own].as_slice(),
        );
        worst = worst.max(max_rel_err(analytic.as_slice(), &numeric));
    }
    worst
}

pub fn check_prox_gradient(seed: u64) -> f64 {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_INSTANCES {
        let dim = rng.random_range(1..=40);
        let w = random_vector(&mut rng, dim, 1.0);
        let center = random_vector(&mut rng, dim, 1.0);
        let mu = rng.random_range(0.0..5.0);
        let analytic = fedprox_gradient(&w, &center, mu);
        let numeric = central_diff(
            |x| fedprox_penalty(&ParamVector::from_vec(x.to_vec()), &center, mu),
            w.as_slice(),
        );
        worst = worst.max(max_rel_err(analytic.as_slice(), &numeric));
    }
    worst
}
