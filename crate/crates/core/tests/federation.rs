#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use fedlamb::data::{gen_blobs, minibatch_indices, BlobParams, Dataset};
use fedlamb::federation::{
    local_round, ClientState, FederationConfig, LocalContext, Partitioning, ProtocolKind,
    Simulation,
};
use fedlamb::model::{backward, Activation, Batch, ModelSpec, Targets};
use fedlamb::optim::{BlockStep, Hyper, ScalingFn};
use fedlamb::params::block_norms;
use fedlamb::Error;

fn blobs(seed: u64) -> Dataset {
    gen_blobs(
        &BlobParams {
            classes: 3,
            dim: 6,
            per_class: 20,
            separation: 3.0,
            noise: 1.0,
        },
        seed,
    )
    .unwrap()
}

fn mlp() -> ModelSpec {
    ModelSpec::mlp(6, vec![8], 3, Activation::Relu)
}

fn config(protocol: ProtocolKind, clients: usize) -> FederationConfig {
    let mut cfg = FederationConfig::new(protocol, mlp(), clients);
    cfg.batch_size = 8;
    cfg.hyper.lr = 0.01;
    cfg.workers = 1;
    cfg
}

#[test]
fn single_full_batch_lamb_step_moves_each_block_by_lr_phi() {
    let train = blobs(1);
    let cfg = config(ProtocolKind::FedLamb, 1);
    let sim = Simulation::new(cfg.clone(), train.clone(), None).unwrap();
    let global = sim.server().global.clone();
    let vhat = global.filled_like(1e-3);
    let ctx = LocalContext {
        protocol: cfg.protocol,
        model: &cfg.model,
        train: &train,
        global: &global,
        round: 1,
        hyper: Hyper {
            lr: 0.05,
            ..cfg.hyper
        },
        momentum: 0.0,
        scaling: ScalingFn::Identity,
        local_epochs: 1,
        batch_size: train.len(),
        seed: cfg.seed,
        probe: None,
    };
    let (up, _) = local_round(&ctx, &ClientState::new(0), &sim.shards()[0], Some(&vhat)).unwrap();
    assert_eq!(up.steps, 1);
    for (l, norm) in block_norms(&global).into_iter().enumerate() {
        let moved: f64 = global
            .block(l)
            .iter()
            .zip(up.params.block(l))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            assert!(
                (moved - 0.05 * norm).abs() < 1e-12,
                "block {l}: {moved} vs {}",
                0.05 * norm
            );
        }
    }
}

#[test]
fn fed_sgd_is_fixed_at_zero_gradient() {
    let batch = Batch::new(
        vec![0.3; 40],
        4,
        Targets::Real {
            values: vec![0.0; 10],
            width: 1,
        },
    )
    .unwrap();
    let train = Dataset::new(batch, 1, "zeros").unwrap();
    let mut cfg =
        FederationConfig::new(ProtocolKind::FedSgd, ModelSpec::linear_regression(4, 1), 2);
    cfg.workers = 1;
    let mut sim = Simulation::new(cfg.clone(), train.clone(), None).unwrap();
    let zero = sim.server().global.zeros_like();
    let ctx = LocalContext {
        protocol: cfg.protocol,
        model: &cfg.model,
        train: &train,
        global: &zero,
        round: 1,
        hyper: cfg.hyper,
        momentum: 0.9,
        scaling: ScalingFn::Identity,
        local_epochs: 3,
        batch_size: 2,
        seed: 0,
        probe: None,
    };
    let (up, _) = local_round(&ctx, &ClientState::new(0), &sim.shards()[0], None).unwrap();
    assert_eq!(up.params, zero);
    assert!(sim.run_round().is_ok());
}

#[test]
fn adp_fed_matches_line_by_line_transcription() {
    let train = blobs(2);
    let mut cfg = config(ProtocolKind::AdpFed, 3);
    cfg.batch_size = 10; // two local steps per round
    cfg.hyper.lr = 0.05;
    cfg.lr_global = 0.01;
    let mut sim = Simulation::new(cfg.clone(), train.clone(), None).unwrap();
    let shards = sim.shards().to_vec();
    let b = &cfg.hyper;

    let mut theta = sim.server().global.values().to_vec();
    let layout = sim.server().global.layout().clone();
    let d = theta.len();
    let (mut m, mut v) = (vec![0.0; d], vec![b.epsilon; d]);
    for round in 1..=2 {
        let mut delta_sum = vec![0.0; d];
        for shard in &shards {
            let mut local = theta.clone();
            for idx in
                minibatch_indices(shard, cfg.batch_size, (round - 1) as u64, cfg.seed).unwrap()
            {
                let p = fedlamb::LayeredParams::from_layout(layout.clone(), local.clone()).unwrap();
                let g = backward(&cfg.model, &p, &train.samples().select(&idx)).unwrap();
                for i in 0..d {
                    local[i] -= b.lr * g.values()[i];
                }
            }
            for i in 0..d {
                delta_sum[i] += local[i] - theta[i];
            }
        }
        for i in 0..d {
            let mean = delta_sum[i] / shards.len() as f64;
            m[i] = b.beta1 * m[i] + (1.0 - b.beta1) * mean;
            v[i] = b.beta2 * v[i] + (1.0 - b.beta2) * mean * mean;
            theta[i] += cfg.lr_global * m[i] / v[i].max(b.epsilon).sqrt();
        }
        sim.run_round().unwrap();
        for (a, e) in sim.server().global.values().iter().zip(&theta) {
            assert!(
                (a - e).abs() <= 1e-12 * e.abs().max(1.0),
                "round {round}: {a} vs {e}"
            );
        }
    }
}

#[test]
fn first_round_consensus_within_displacement_bound() {
    let train = blobs(3);
    let (lr, phi_max) = (0.05, 0.5);
    let mut cfg = config(ProtocolKind::FedLamb, 4);
    cfg.hyper.lr = lr;
    cfg.scaling = ScalingFn::clipped(0.01, phi_max).unwrap();
    cfg.batch_size = train.len();
    cfg.partitioning = Partitioning::LabelShards { per_client: 1 };
    let h = cfg.model.layout().num_blocks() as f64;
    let mut sim = Simulation::new(cfg, train, None).unwrap();
    let report = sim.run_round().unwrap();
    let bound = 2.0 * lr * phi_max * h.sqrt();
    for (client, err) in report.consensus {
        assert!(
            err > 0.0 && err <= bound,
            "client {client}: {err} > {bound}"
        );
    }
}

#[test]
fn unsampled_clients_are_untouched() {
    let train = blobs(4);
    for protocol in ProtocolKind::ALL {
        let mut cfg = config(protocol, 8);
        cfg.participation = 0.25;
        cfg.momentum = if protocol == ProtocolKind::FedSgd {
            0.9
        } else {
            0.0
        };
        let mut sim = Simulation::new(cfg, train.clone(), None).unwrap();
        for _ in 0..12 {
            let before = sim.clients().to_vec();
            let report = sim.run_round().unwrap();
            for (i, (a, b)) in before.iter().zip(sim.clients()).enumerate() {
                if !report.participants.contains(&i) {
                    assert_eq!(a, b, "{protocol}: client {i} changed while idle");
                }
            }
        }
    }
}

#[test]
fn lazy_sync_reuses_last_received_moment() {
    let train = blobs(5);
    let mut cfg = config(ProtocolKind::FedLamb, 4);
    cfg.lazy_period = Some(3);
    let mut sim = Simulation::new(cfg, train, None).unwrap();
    let mut last = sim.server().vhat.clone();
    for round in 1..=9 {
        let r = sim.run_round().unwrap();
        assert_eq!(r.synced, round % 3 == 0);
        if !r.synced {
            assert_eq!(sim.server().vhat, last, "round {round}");
        }
        for c in sim.clients() {
            if let Some(v) = &c.vhat {
                assert!(round >= 3);
                // broadcast happens at the start of the last open round
                assert!(v.values().iter().all(|x| *x >= 1e-8));
            }
        }
        last = sim.server().vhat.clone();
    }
}

#[test]
fn worker_count_does_not_change_metrics() {
    let train = blobs(6);
    for protocol in ProtocolKind::ALL {
        let run = |workers| {
            let mut cfg = config(protocol, 6);
            cfg.participation = 0.5;
            cfg.workers = workers;
            let mut sim = Simulation::new(cfg, train.clone(), None).unwrap();
            sim.run(5)
                .unwrap()
                .into_iter()
                .map(|mut r| {
                    r.metrics.wall_ms = 0.0;
                    r
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(4), "{protocol}");
    }
}

#[test]
fn mime_pays_for_the_full_gradient() {
    let train = blobs(7);
    let evals = |protocol| {
        let mut sim = Simulation::new(config(protocol, 3), train.clone(), None).unwrap();
        sim.run_round().unwrap().metrics.grad_evals
    };
    assert_eq!(evals(ProtocolKind::FedLamb), train.len() as u64);
    assert_eq!(evals(ProtocolKind::Mime), 2 * train.len() as u64);
    assert_eq!(evals(ProtocolKind::MimeLamb), 2 * train.len() as u64);
}

#[test]
fn overflow_is_tagged_with_round_and_client() {
    let features: Vec<f64> = (0..60 * 6)
        .map(|i| if i % 7 == 0 { 1e308 } else { 1.0 })
        .collect();
    let labels = (0..60).map(|i| i % 3).collect();
    let train = Dataset::new(
        Batch::new(features, 6, Targets::Classes(labels)).unwrap(),
        3,
        "huge",
    )
    .unwrap();
    let mut sim = Simulation::new(config(ProtocolKind::FedLamb, 2), train, None).unwrap();
    let err = sim.run_round().unwrap_err();
    let Error::Round { round: 1, source } = &err else {
        panic!("{err:?}")
    };
    assert!(
        matches!(**source, Error::Client { step, .. } if step >= 1),
        "{source:?}"
    );
    assert!(matches!(err.root(), Error::NumericOverflow { .. }));
}

#[test]
fn resharding_changes_shards_but_keeps_determinism() {
    let train = blobs(8);
    let mut cfg = config(ProtocolKind::FedSgd, 4);
    cfg.reshard_each_round = true;
    let mut a = Simulation::new(cfg.clone(), train.clone(), None).unwrap();
    let mut b = Simulation::new(cfg, train, None).unwrap();
    let initial = a.shards().to_vec();
    a.run(2).unwrap();
    b.run(2).unwrap();
    assert_ne!(a.shards(), initial.as_slice());
    assert_eq!(a.shards(), b.shards());
    assert_eq!(a.server().global, b.server().global);
}

#[test]
fn probe_sees_every_local_step() {
    let train = blobs(9);
    let mut cfg = config(ProtocolKind::MimeLamb, 3);
    cfg.local_epochs = 2;
    let mut sim = Simulation::new(cfg, train.clone(), None).unwrap();
    let count = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let seen = count.clone();
    sim.set_probe(Arc::new(move |e| {
        assert!(e
            .lamb
            .is_some_and(|t| t.iter().all(|s| !matches!(s, BlockStep::Unchanged))));
        seen.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }));
    sim.run_round().unwrap();
    let expected: usize = sim
        .shards()
        .iter()
        .map(|s| 2 * s.indices.len().div_ceil(8))
        .sum();
    assert_eq!(count.load(std::sync::atomic::Ordering::Relaxed), expected);
}
