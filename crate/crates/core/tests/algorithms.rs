//! Hand computations, no-op rounds and degenerate equivalences of the
//! training algorithms.

mod common;

use apple_fl::apple::{apple_local_epoch, prox_center, DrVector, EpochParams, LocalState};
use apple_fl::baselines::{
    finetune, local_sgd_epoch, run_fedavg, run_fedprox, run_separate, FedAvgState, SgdParams,
};
use apple_fl::config::RunConfig;
use apple_fl::data::Dataset;
use apple_fl::experiment::prepare;
use apple_fl::federation::{init_federation, CoreUpload};
use apple_fl::numerics::{backward, forward_loss, ModelSpec, ParamVector};
use apple_fl::seed::SimRng;
use rand::SeedableRng;

fn small_config(extra: &str) -> RunConfig {
    let text = format!(
        r#"{{
            "data": {{"source": "synthetic", "num_classes": 3, "feature_dim": 4,
                      "train_per_class": 40, "test_per_class": 20, "noise_sigma": 1.5}},
            "partition": {{"scheme": "practical", "num_clients": 3}},
            "rounds": 3, "local_epochs": 2, "batch_size": 8,
            "lr_net": 0.05, "lr_dr": 0.05, "seed": 5
            {extra}
        }}"#
    );
    RunConfig::from_json(&text).unwrap()
}

fn softmax_logits(w: &[f64], x: &[f64]) -> [f64; 2] {
    // W[c][d] row-major for 2 classes and 2 features, then b[c].
    [
        w[0] * x[0] + w[1] * x[1] + w[4],
        w[2] * x[0] + w[3] * x[1] + w[5],
    ]
}

/// Mean cross-entropy and its gradient for a 2-feature, 2-class softmax
/// regression, written out scalar by scalar.
fn hand_loss_grad(w: &[f64], xs: &[[f64; 2]], ys: &[usize]) -> (f64, [f64; 6]) {
    let mut loss = 0.0;
    let mut g = [0.0; 6];
    for (x, &y) in xs.iter().zip(ys) {
        let z = softmax_logits(w, x);
        let m = z[0].max(z[1]);
        let e0 = (z[0] - m).exp();
        let e1 = (z[1] - m).exp();
        let probs = [e0 / (e0 + e1), e1 / (e0 + e1)];
        loss += -(probs[y]).ln();
        for c in 0..2 {
            let dz = probs[c] - if c == y { 1.0 } else { 0.0 };
            g[c * 2] += dz * x[0];
            g[c * 2 + 1] += dz * x[1];
            g[4 + c] += dz;
        }
    }
    let n = xs.len() as f64;
    for v in &mut g {
        *v /= n;
    }
    (loss / n, g)
}

#[test]
fn apple_single_batch_step_matches_hand_computation() {
    let spec = ModelSpec::softmax(2, 2);
    let xs = [[0.5, -1.0], [1.5, 0.25]];
    let ys = [1usize, 0];
    let data = Dataset::new(xs.concat(), ys.to_vec(), 2, 2).unwrap();

    let w0 = [0.1, -0.2, 0.3, 0.05, 0.0, 0.1];
    let w1 = [-0.3, 0.2, 0.1, 0.4, 0.2, -0.1];
    let p = [0.7, 0.4];
    let p0 = [0.6, 0.4];
    let (lr_net, lr_dr, lambda, mu) = (0.1, 0.05, 0.5, 2.0);

    // Hand computation.
    let wp: Vec<f64> = (0..6).map(|k| p[0] * w0[k] + p[1] * w1[k]).collect();
    let (loss, g) = hand_loss_grad(&wp, &xs, &ys);
    let expect_core: Vec<f64> = (0..6).map(|k| w0[k] - lr_net * p[0] * g[k]).collect();
    let dot = |w: &[f64; 6]| (0..6).map(|k| g[k] * w[k]).sum::<f64>();
    let expect_dr = [
        p[0] - lr_dr * (dot(&w0) + lambda * mu * (p[0] - p0[0])),
        p[1] - lr_dr * (dot(&w1) + lambda * mu * (p[1] - p0[1])),
    ];
    let expect_pen = loss + lambda * mu / 2.0 * ((p[0] - p0[0]).powi(2) + (p[1] - p0[1]).powi(2));

    // Engine.
    let mut core = ParamVector::from_vec(w0.to_vec());
    let mut velocity = ParamVector::zeros(6);
    let mut dr = DrVector::new(0, p.to_vec());
    let peers = vec![
        ParamVector::from_vec(w0.to_vec()),
        ParamVector::from_vec(w1.to_vec()),
    ];
    let prox = apple_fl::apple::ProxCenter {
        weights: p0.to_vec(),
    };
    let params = EpochParams {
        lr_net,
        lr_dr,
        momentum: 0.9,
        lambda,
        mu,
        batch_size: 2,
    };
    let state = LocalState {
        index: 0,
        core: &mut core,
        velocity: &mut velocity,
        dr: &mut dr,
        peers: &peers,
    };
    let losses = apple_local_epoch(
        &spec,
        state,
        &prox,
        &data,
        &params,
        &mut SimRng::seed_from_u64(1),
    )
    .unwrap();

    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    assert!(close(losses.base, loss), "{} vs {loss}", losses.base);
    assert!(close(losses.penalized, expect_pen));
    for (a, b) in core.as_slice().iter().zip(&expect_core) {
        assert!(close(*a, *b), "core {a} vs {b}");
    }
    for (a, b) in dr.weights.iter().zip(&expect_dr) {
        assert!(close(*a, *b), "dr {a} vs {b}");
    }
    // Zero initial velocity: the first momentum step is the plain gradient.
    for (v, k) in velocity.as_slice().iter().zip(0..6) {
        assert!(close(*v, p[0] * g[k]));
    }
}

#[test]
fn zero_learning_rates_make_the_epoch_a_no_op() {
    let cfg = small_config("");
    let prepared = prepare(&cfg).unwrap();
    let fed = init_federation(&cfg, &prepared.model, &prepared.split).unwrap();
    let client = &fed.clients[1];
    let mut core = client.core_model.clone();
    let mut dr = client.dr.clone();
    let mut velocity = ParamVector::zeros(core.dim());
    let params = EpochParams {
        lr_net: 0.0,
        lr_dr: 0.0,
        momentum: 0.9,
        lambda: 1.0,
        mu: 0.5,
        batch_size: 8,
    };
    let state = LocalState {
        index: 1,
        core: &mut core,
        velocity: &mut velocity,
        dr: &mut dr,
        peers: &client.cache,
    };
    let losses = apple_local_epoch(
        &prepared.model,
        state,
        &fed.p0,
        &client.train,
        &params,
        &mut SimRng::seed_from_u64(3),
    )
    .unwrap();
    assert_eq!(core, client.core_model);
    assert_eq!(dr, client.dr);
    let eval = forward_loss(
        &prepared.model,
        &client.personalized().unwrap(),
        &client.train.full_batch().unwrap(),
    )
    .unwrap();
    assert!((losses.base - eval).abs() <= 1e-12 * eval.abs().max(1.0));
}

#[test]
fn zero_learning_rate_rounds_leave_all_state_fixed() {
    let mut cfg = small_config(r#", "budget": 1"#);
    cfg.lr_net = 0.0;
    cfg.lr_dr = 0.0;
    let prepared = prepare(&cfg).unwrap();
    let mut fed = init_federation(&cfg, &prepared.model, &prepared.split).unwrap();
    let before = fed.clone();
    for r in 1..=3 {
        fed.run_round(&cfg, r, false).unwrap();
    }
    assert_eq!(fed.server.core_models, before.server.core_models);
    assert_eq!(fed.server.versions, vec![3; 3]);
    for (a, b) in fed.clients.iter().zip(&before.clients) {
        assert_eq!(a.core_model, b.core_model);
        assert_eq!(a.dr, b.dr);
        assert_eq!(a.cache, b.cache);
    }
}

#[test]
fn zero_local_epochs_only_bump_versions() {
    let mut cfg = small_config("");
    cfg.local_epochs = 0;
    let prepared = prepare(&cfg).unwrap();
    let mut fed = init_federation(&cfg, &prepared.model, &prepared.split).unwrap();
    let before = fed.server.clone();
    fed.run_round(&cfg, 1, false).unwrap();
    assert_eq!(fed.server.core_models, before.core_models);
    assert_eq!(fed.server.versions, vec![1; 3]);
}

#[test]
fn single_client_apple_without_dr_learning_is_separate_training() {
    let text = r#"{
        "data": {"source": "synthetic", "num_classes": 3, "feature_dim": 4,
                 "train_per_class": 30, "test_per_class": 10},
        "partition": {"scheme": "iid", "num_clients": 1},
        "rounds": 3, "local_epochs": 2, "batch_size": 7,
        "lr_net": 0.05, "lr_dr": 0.0, "scheduler": {"mu": 0.0}, "seed": 9
    }"#;
    let cfg = RunConfig::from_json(text).unwrap();
    let prepared = prepare(&cfg).unwrap();
    let apple =
        apple_fl::federation::run_experiment(&cfg, &prepared.model, &prepared.split, false, |_| {
            Ok(())
        })
        .unwrap();
    let (sep_reports, sep) = run_separate(&cfg, &prepared.model, &prepared.split, false).unwrap();
    assert_eq!(apple.personalized[0].as_slice(), sep.models[0].as_slice());
    for (a, s) in apple.reports.iter().zip(&sep_reports) {
        assert_eq!(
            a.clients[0].train_loss.to_bits(),
            s.clients[0].train_loss.to_bits()
        );
        assert_eq!(
            a.clients[0].test_accuracy.to_bits(),
            s.clients[0].test_accuracy.to_bits()
        );
    }
}

#[test]
fn single_client_fedavg_is_separate_training() {
    let mut cfg = small_config("");
    cfg.partition.num_clients = 1;
    cfg.partition.scheme = apple_fl::data::PartitionScheme::Iid;
    let prepared = prepare(&cfg).unwrap();
    let avg = run_fedavg(&cfg, &prepared.model, &prepared.split, false).unwrap();
    let (_, sep) = run_separate(&cfg, &prepared.model, &prepared.split, false).unwrap();
    assert_eq!(avg.state.global.as_slice(), sep.models[0].as_slice());
}

#[test]
fn fedprox_with_zero_coefficient_is_fedavg() {
    let cfg = small_config("");
    let prepared = prepare(&cfg).unwrap();
    let avg = run_fedavg(&cfg, &prepared.model, &prepared.split, false).unwrap();
    let prox = run_fedprox(&cfg, &prepared.model, &prepared.split, 0.0, false).unwrap();
    assert_eq!(avg.state, prox.state);

    // The epoch itself ignores a zero-coefficient prox term bit for bit.
    let data = &prepared.split.clients[0].train;
    let start = ParamVector::from_vec(vec![0.01; apple_fl::numerics::param_count(&prepared.model)]);
    let run = |prox| {
        let mut w = start.clone();
        let mut v = ParamVector::zeros(w.dim());
        let sgd = SgdParams {
            lr: 0.1,
            momentum: 0.9,
            batch_size: 5,
            prox,
        };
        local_sgd_epoch(
            &prepared.model,
            &mut w,
            &mut v,
            data,
            &sgd,
            &mut SimRng::seed_from_u64(4),
        )
        .unwrap();
        w
    };
    assert_eq!(run(None).as_slice(), run(Some((&start, 0.0))).as_slice());
}

#[test]
fn fedavg_round_averages_hand_updated_client_models() {
    // Two clients with one sample each: one full-batch step per client.
    let spec = ModelSpec::softmax(2, 2);
    let a = Dataset::new(vec![1.0, -0.5], vec![0], 2, 2).unwrap();
    let b = Dataset::new(vec![-0.25, 2.0], vec![1], 2, 2).unwrap();
    let split = apple_fl::data::SplitManifest {
        clients: vec![
            apple_fl::data::ManifestClient {
                train_indices: vec![0],
                test_indices: vec![0],
            },
            apple_fl::data::ManifestClient {
                train_indices: vec![1],
                test_indices: vec![1],
            },
        ],
        provenance: Vec::new(),
    }
    .apply(
        &Dataset::new(vec![1.0, -0.5, -0.25, 2.0], vec![0, 1], 2, 2).unwrap(),
        &Dataset::new(vec![1.0, -0.5, -0.25, 2.0], vec![0, 1], 2, 2).unwrap(),
    )
    .unwrap();
    let mut cfg = small_config("");
    cfg.partition.num_clients = 2;
    cfg.local_epochs = 1;
    cfg.lr_net = 0.3;
    cfg.momentum = 0.0;
    let mut state = FedAvgState::init(&cfg, &spec, 2);
    let w = state.global.clone();
    state.run_round(&cfg, &spec, &split, 0.0, 1, false).unwrap();

    let step = |d: &Dataset| {
        let xs = [[d.row(0)[0], d.row(0)[1]]];
        let (_, g) = hand_loss_grad(w.as_slice(), &xs, d.labels());
        (0..6)
            .map(|k| w.as_slice()[k] - 0.3 * g[k])
            .collect::<Vec<_>>()
    };
    let (ua, ub) = (step(&a), step(&b));
    for k in 0..6 {
        let expect = 0.5 * ua[k] + 0.5 * ub[k];
        assert!((state.global.as_slice()[k] - expect).abs() <= 1e-15, "{k}");
    }
}

#[test]
fn larger_prox_coefficient_keeps_local_models_closer() {
    let cfg = small_config("");
    let prepared = prepare(&cfg).unwrap();
    let data = &prepared.split.clients[0].train;
    let center =
        ParamVector::from_vec(vec![0.02; apple_fl::numerics::param_count(&prepared.model)]);
    let drift = |mu: f64| {
        let mut w = center.clone();
        let mut v = ParamVector::zeros(w.dim());
        let sgd = SgdParams {
            lr: 1e-6,
            momentum: 0.0,
            batch_size: 4,
            prox: Some((&center, mu)),
        };
        for _ in 0..5 {
            local_sgd_epoch(
                &prepared.model,
                &mut w,
                &mut v,
                data,
                &sgd,
                &mut SimRng::seed_from_u64(8),
            )
            .unwrap();
        }
        let diff: Vec<f64> = w
            .as_slice()
            .iter()
            .zip(center.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        ParamVector::from_vec(diff).norm()
    };
    let sweep: Vec<f64> = [0.0, 1e2, 1e4, 1e6].iter().map(|&mu| drift(mu)).collect();
    for pair in sweep.windows(2) {
        assert!(pair[1] < pair[0], "{sweep:?}");
    }
    // Step size 1e-6 per unit gradient: the 1e6 run sits at most one step away.
    assert!(sweep[3] <= 1e-5, "{sweep:?}");
}

#[test]
fn full_batch_finetuning_loss_is_monotone() {
    let mut cfg = small_config("");
    cfg.batch_size = 10_000;
    cfg.momentum = 0.0;
    cfg.lr_net = 0.05;
    let prepared = prepare(&cfg).unwrap();
    let global = apple_fl::numerics::init_params(&prepared.model, &mut SimRng::seed_from_u64(2));
    for c in 0..3 {
        let train = &prepared.split.clients[c].train;
        assert_eq!(
            finetune(&prepared.model, &global, train, &cfg, c, 0).unwrap(),
            global
        );
        let full = train.full_batch().unwrap();
        let mut prev = f64::INFINITY;
        for epochs in 0..20 {
            let tuned = finetune(&prepared.model, &global, train, &cfg, c, epochs).unwrap();
            let loss = forward_loss(&prepared.model, &tuned, &full).unwrap();
            assert!(loss <= prev, "client {c} epoch {epochs}: {loss} > {prev}");
            prev = loss;
        }
    }
}

#[test]
fn finetuning_starts_from_the_aggregate_not_the_local_copy() {
    let mut cfg = small_config("");
    cfg.finetune_epochs = 1;
    let prepared = prepare(&cfg).unwrap();
    let avg = run_fedavg(&cfg, &prepared.model, &prepared.split, false).unwrap();
    let train = &prepared.split.clients[0].train;
    let tuned = finetune(&prepared.model, &avg.state.global, train, &cfg, 0, 1).unwrap();
    assert_ne!(tuned, avg.state.locals[0]);
}

#[test]
fn server_bound_payload_carries_no_dr_fields() {
    let upload = CoreUpload {
        client: 2,
        round: 7,
        core_model: ParamVector::from_vec(vec![0.5, -0.5]),
    };
    let value = serde_json::to_value(&upload).unwrap();
    let keys: Vec<&String> = value.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 3);
    for k in keys {
        assert!(
            ["client", "round", "core_model"].contains(&k.as_str()),
            "{k}"
        );
    }
}

#[test]
fn very_large_dr_penalty_does_not_push_dr_away_from_the_prox_center() {
    let cfg = small_config("");
    let prepared = prepare(&cfg).unwrap();
    let fed = init_federation(&cfg, &prepared.model, &prepared.split).unwrap();
    let client = &fed.clients[0];
    let mut core = client.core_model.clone();
    let mut velocity = ParamVector::zeros(core.dim());
    let mut dr = DrVector::new(0, vec![0.9, 0.3, -0.2]);
    let start = dr.distance_to(&fed.p0);
    let params = EpochParams {
        lr_net: 0.01,
        lr_dr: 1e-6,
        momentum: 0.9,
        lambda: 1.0,
        mu: 1e6,
        batch_size: 8,
    };
    let state = LocalState {
        index: 0,
        core: &mut core,
        velocity: &mut velocity,
        dr: &mut dr,
        peers: &client.cache,
    };
    apple_local_epoch(
        &prepared.model,
        state,
        &fed.p0,
        &client.train,
        &params,
        &mut SimRng::seed_from_u64(6),
    )
    .unwrap();
    assert!(dr.distance_to(&fed.p0) <= start);
}

#[test]
fn parallel_and_sequential_rounds_agree_bit_for_bit() {
    let cfg = small_config(r#", "budget": 1"#);
    let prepared = prepare(&cfg).unwrap();
    let mut seq = init_federation(&cfg, &prepared.model, &prepared.split).unwrap();
    let mut par = seq.clone();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    for r in 1..=3 {
        let a = seq.run_round(&cfg, r, false).unwrap();
        let b = pool.install(|| par.run_round(&cfg, r, true)).unwrap();
        assert_eq!(a.downloads, b.downloads);
        assert_eq!(a.dr, b.dr);
    }
    assert_eq!(seq.server, par.server);
    assert_eq!(seq.clients, par.clients);
}

#[test]
fn prox_center_examples() {
    assert_eq!(
        prox_center(&[10, 30, 60]).unwrap().weights,
        vec![0.1, 0.3, 0.6]
    );
    assert_eq!(prox_center(&[5; 4]).unwrap().weights, vec![0.25; 4]);
    assert_eq!(prox_center(&[1]).unwrap().weights, vec![1.0]);
}

#[test]
fn backward_loss_agrees_with_hand_formula() {
    let w = [0.1, -0.2, 0.3, 0.05, 0.0, 0.1];
    let xs = [[0.5, -1.0], [1.5, 0.25]];
    let ys = [1usize, 0];
    let batch = apple_fl::numerics::Batch::new(xs.concat(), ys.to_vec(), 2).unwrap();
    let g = backward(
        &ModelSpec::softmax(2, 2),
        &ParamVector::from_vec(w.to_vec()),
        &batch,
    )
    .unwrap();
    let (loss, hand) = hand_loss_grad(&w, &xs, &ys);
    assert!((g.loss - loss).abs() <= 1e-15);
    for (a, b) in g.grad.as_slice().iter().zip(hand) {
        assert!((a - b).abs() <= 1e-15);
    }
}
