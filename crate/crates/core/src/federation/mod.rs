//! Round-structured federated optimization.
//!
//! A [`Simulation`] owns the server, every client's private state, and the
//! training/test data. Each call to [`Simulation::run_round`] samples clients,
//! runs their local rounds in parallel, aggregates in ascending client-id
//! order and records metrics. All randomness is keyed by `(seed, round,
//! client)`, so results do not depend on the number of worker threads.

mod client;
pub mod comm;
pub mod server;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;

use crate::data::{partition_iid, partition_label_shards, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, init_params, loss_and_gradient, ModelSpec};
use crate::optim::{milestone_lr, Hyper, ScalingFn};
use crate::params::{FlatStat, LayeredParams};
use crate::rng::{keyed_rng, stream_key, Stream};

pub use client::{local_round, ClientState, LocalContext, LocalUpload, StepEvent, StepProbe};
pub use comm::{comm_account, CommEntry, CommLedger};
pub use server::{aggregate_params, aggregate_vhat_fedlamb, mime_vhat_update, AdaptiveServer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolKind {
    FedSgd,
    AdpFed,
    FedAms,
    FedLamb,
    Mime,
    MimeLamb,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 6] = [
        ProtocolKind::FedSgd,
        ProtocolKind::AdpFed,
        ProtocolKind::FedAms,
        ProtocolKind::FedLamb,
        ProtocolKind::Mime,
        ProtocolKind::MimeLamb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::FedSgd => "fed-sgd",
            ProtocolKind::AdpFed => "adp-fed",
            ProtocolKind::FedAms => "fed-ams",
            ProtocolKind::FedLamb => "fed-lamb",
            ProtocolKind::Mime => "mime",
            ProtocolKind::MimeLamb => "mime-lamb",
        }
    }

    /// Protocols that keep and broadcast a global capped second moment.
    pub fn has_global_moment(self) -> bool {
        !matches!(self, ProtocolKind::FedSgd | ProtocolKind::AdpFed)
    }

    pub fn uses_full_gradient(self) -> bool {
        matches!(self, ProtocolKind::Mime | ProtocolKind::MimeLamb)
    }

    pub fn is_layerwise(self) -> bool {
        matches!(self, ProtocolKind::FedLamb | ProtocolKind::MimeLamb)
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ProtocolKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ProtocolKind::ALL.iter().map(|p| p.name()).collect();
                format!(
                    "unknown protocol `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partitioning {
    Iid,
    LabelShards { per_client: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub protocol: ProtocolKind,
    pub model: ModelSpec,
    pub clients: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// `lr` is the local step size (`eta_l` for adp-fed).
    pub hyper: Hyper,
    /// Server step size for adp-fed.
    pub lr_global: f64,
    /// Heavy-ball momentum for fed-sgd.
    pub momentum: f64,
    pub scaling: ScalingFn,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Sync period of the global moment; `None` takes the ungated path.
    pub lazy_period: Option<usize>,
    pub partitioning: Partitioning,
    pub reshard_each_round: bool,
    pub seed: u64,
    /// Worker threads; 0 picks the machine default.
    pub workers: usize,
}

impl FederationConfig {
    pub fn new(protocol: ProtocolKind, model: ModelSpec, clients: usize) -> Self {
        FederationConfig {
            protocol,
            model,
            clients,
            participation: 1.0,
            local_epochs: 1,
            batch_size: 128,
            hyper: Hyper::default(),
            lr_global: 0.01,
            momentum: 0.0,
            scaling: ScalingFn::Identity,
            milestones: vec![],
            lr_decay: 0.1,
            lazy_period: Some(1),
            partitioning: Partitioning::Iid,
            reshard_each_round: false,
            seed: 0,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        self.model.validate()?;
        self.hyper.validate()?;
        if self.clients == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return bad("clients, local epochs and batch size must be at least 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!(
                "participation {} outside (0, 1]",
                self.participation
            ));
        }
        if self.lazy_period == Some(0) {
            return bad("lazy period must be at least 1".into());
        }
        let positive = |x: f64| x > 0.0; // false for NaN
        if !positive(self.lr_global)
            || !(0.0..1.0).contains(&self.momentum)
            || !positive(self.lr_decay)
        {
            return bad("invalid server step, momentum or decay factor".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        Ok(())
    }
}

/// Uniform subset of `max(1, round(participation * n))` clients, keyed by
/// `(seed, round)` and returned in ascending order.
pub fn sample_clients(n: usize, participation: f64, round: usize, seed: u64) -> Vec<usize> {
    let count = ((participation * n as f64).round() as usize).clamp(1, n);
    let mut rng = keyed_rng(seed, Stream::Sampling, &[round as u64]);
    let mut picked = index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Whether the global moment is recomputed and broadcast in `round`.
pub fn lazy_sync_gate(round: usize, period: usize) -> bool {
    round.is_multiple_of(period)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: LayeredParams,
    /// Global capped second moment.
    pub vhat: Option<FlatStat>,
    /// Server second moment of the mime paths.
    pub v: Option<FlatStat>,
    /// Server Adam state of adp-fed.
    pub adaptive: Option<AdaptiveServer>,
    pub round: usize,
    pub lazy_period: Option<usize>,
}

impl ServerState {
    pub fn new(cfg: &FederationConfig, global: LayeredParams) -> Self {
        let eps = cfg.hyper.epsilon;
        let p = cfg.protocol;
        ServerState {
            vhat: p.has_global_moment().then(|| global.filled_like(eps)),
            v: p.uses_full_gradient().then(|| global.zeros_like()),
            adaptive: (p == ProtocolKind::AdpFed).then(|| AdaptiveServer::new(&global, eps)),
            global,
            round: 0,
            lazy_period: cfg.lazy_period,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Squared norm of the full training gradient at the new global model.
    pub grad_norm_sq: f64,
    pub uplink: u64,
    pub downlink: u64,
    /// Per-sample gradient evaluations spent by clients.
    pub grad_evals: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    pub participants: Vec<usize>,
    /// `(client, ||mean - theta_i||)` against the average of this round's
    /// local models.
    pub consensus: Vec<(usize, f64)>,
    pub comm: CommEntry,
    pub synced: bool,
}

pub struct Simulation {
    cfg: FederationConfig,
    train: Arc<Dataset>,
    test: Arc<Dataset>,
    shards: Vec<ClientShard>,
    server: ServerState,
    clients: Vec<ClientState>,
    ledger: CommLedger,
    pool: rayon::ThreadPool,
    probe: Option<Arc<StepProbe>>,
}

fn partition(cfg: &FederationConfig, train: &Dataset, seed: u64) -> Result<Vec<ClientShard>> {
    match cfg.partitioning {
        Partitioning::Iid => partition_iid(train, cfg.clients, seed),
        Partitioning::LabelShards { per_client } => {
            partition_label_shards(train, cfg.clients, per_client, seed)
        }
    }
}

impl Simulation {
    /// Without a test set, accuracy is measured on the training data.
    pub fn new(cfg: FederationConfig, train: Dataset, test: Option<Dataset>) -> Result<Self> {
        let shards = partition(&cfg, &train, cfg.seed)?;
        Self::with_shards(cfg, train, test, shards)
    }

    /// Uses caller-provided shards, one per client in id order.
    pub fn with_shards(
        cfg: FederationConfig,
        train: Dataset,
        test: Option<Dataset>,
        shards: Vec<ClientShard>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.dim() != cfg.model.input {
            return Err(Error::Validation(format!(
                "data has {} features but the model expects {}",
                train.dim(),
                cfg.model.input
            )));
        }
        if shards.len() != cfg.clients || shards.iter().any(|s| s.indices.is_empty()) {
            return Err(Error::Partition(
                "need one non-empty shard per client".into(),
            ));
        }
        let global = init_params(&cfg.model, cfg.seed);
        let server = ServerState::new(&cfg, global);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Protocol(format!("thread pool: {e}")))?;
        let train = Arc::new(train);
        let test = test.map(Arc::new).unwrap_or_else(|| train.clone());
        Ok(Simulation {
            clients: (0..cfg.clients).map(ClientState::new).collect(),
            cfg,
            train,
            test,
            shards,
            server,
            ledger: CommLedger::default(),
            pool,
            probe: None,
        })
    }

    pub fn set_probe(&mut self, probe: Arc<StepProbe>) {
        self.probe = Some(probe);
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundReport>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.server.round + 1;
        self.round_inner(round).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })
    }

    fn round_inner(&mut self, round: usize) -> Result<RoundReport> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let protocol = cfg.protocol;
        let synced = cfg.lazy_period.is_none_or(|z| lazy_sync_gate(round, z));

        if cfg.reshard_each_round {
            let key = stream_key(cfg.seed, Stream::Partition, &[round as u64]);
            self.shards = partition(cfg, &self.train, key)?;
        }
        let participants = sample_clients(cfg.clients, cfg.participation, round, cfg.seed);

        // broadcast of the global moment
        let initial_vhat = self
            .server
            .vhat
            .as_ref()
            .map(|v| v.filled_like(cfg.hyper.epsilon));
        if protocol.has_global_moment() && cfg.lazy_period.is_some() && synced {
            for &i in &participants {
                self.clients[i].vhat = self.server.vhat.clone();
            }
        }

        let mut hyper = cfg.hyper;
        hyper.lr = milestone_lr(cfg.hyper.lr, round, &cfg.milestones, cfg.lr_decay);
        let ctx = LocalContext {
            protocol,
            model: &cfg.model,
            train: &self.train,
            global: &self.server.global,
            round,
            hyper,
            momentum: cfg.momentum,
            scaling: cfg.scaling,
            local_epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            probe: self.probe.as_deref(),
        };
        let clients = &self.clients;
        let shards = &self.shards;
        let server_vhat = self.server.vhat.as_ref();
        let gated = cfg.lazy_period.is_some();
        let results: Vec<Result<(LocalUpload, ClientState)>> = self.pool.install(|| {
            participants
                .par_iter()
                .map(|&i| {
                    let vhat = if gated {
                        clients[i].vhat.as_ref().or(initial_vhat.as_ref())
                    } else {
                        server_vhat
                    };
                    local_round(&ctx, &clients[i], &shards[i], vhat)
                })
                .collect()
        });
        let mut uploads = Vec::with_capacity(results.len());
        for r in results {
            let (upload, state) = r?;
            let id = upload.client;
            self.clients[id] = state;
            uploads.push(upload);
        }

        let params: Vec<&LayeredParams> = uploads.iter().map(|u| &u.params).collect();
        let prev_global = self.server.global.clone();
        let local_models: Vec<LayeredParams>;
        let local_mean;
        match protocol {
            ProtocolKind::AdpFed => {
                let adaptive = self.server.adaptive.as_mut().expect("adp-fed server state");
                self.server.global = adaptive.step(
                    &prev_global,
                    &params,
                    hyper.beta1,
                    hyper.beta2,
                    cfg.lr_global,
                    hyper.epsilon,
                )?;
                local_models = uploads
                    .iter()
                    .map(|u| {
                        let mut m = prev_global.clone();
                        m.axpy(1.0, &u.params).map(|_| m)
                    })
                    .collect::<Result<_>>()?;
                local_mean = aggregate_params(&local_models.iter().collect::<Vec<_>>())?;
            }
            _ => {
                self.server.global = aggregate_params(&params)?;
                local_models = vec![];
                local_mean = self.server.global.clone();
            }
        }
        if synced {
            match protocol {
                ProtocolKind::FedAms | ProtocolKind::FedLamb => {
                    let vs: Vec<&FlatStat> = uploads
                        .iter()
                        .map(|u| u.moment.as_ref().expect("moment upload"))
                        .collect();
                    let prev = self.server.vhat.as_ref().expect("global moment");
                    self.server.vhat = Some(aggregate_vhat_fedlamb(prev, &vs)?);
                }
                ProtocolKind::Mime | ProtocolKind::MimeLamb => {
                    let gs: Vec<&FlatStat> = uploads
                        .iter()
                        .map(|u| u.full_grad.as_ref().expect("gradient upload"))
                        .collect();
                    let (v, vhat) = mime_vhat_update(
                        self.server.v.as_ref().expect("server moment"),
                        self.server.vhat.as_ref().expect("global moment"),
                        &gs,
                        hyper.beta2,
                    )?;
                    self.server.v = Some(v);
                    self.server.vhat = Some(vhat);
                }
                ProtocolKind::FedSgd | ProtocolKind::AdpFed => {}
            }
        }
        self.server.round = round;

        let models: Vec<&LayeredParams> = if protocol == ProtocolKind::AdpFed {
            local_models.iter().collect()
        } else {
            params
        };
        let consensus = uploads
            .iter()
            .zip(models)
            .map(|(u, m)| {
                let diff: f64 = m
                    .values()
                    .iter()
                    .zip(local_mean.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (u.client, diff.sqrt())
            })
            .collect();

        let comm = comm_account(
            protocol,
            self.server.global.dim(),
            participants.len(),
            round,
            cfg.lazy_period,
        );
        self.ledger.record(comm);

        let (train_loss, grad) =
            loss_and_gradient(&cfg.model, &self.server.global, self.train.samples())?;
        let (test_accuracy, _) = evaluate(&cfg.model, &self.server.global, &self.test)?;
        let metrics = RoundMetrics {
            round,
            train_loss,
            test_accuracy,
            grad_norm_sq: grad.squared_norm(),
            uplink: comm.uplink(),
            downlink: comm.downlink(),
            grad_evals: uploads.iter().map(|u| u.grad_evals).sum(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        Ok(RoundReport {
            metrics,
            participants,
            consensus,
            comm,
            synced,
        })
    }
}
