//! One client's work for one round.

use crate::data::{minibatch_indices, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::model::{backward, ModelSpec};
use crate::optim::{
    amsgrad_step, lamb_step_traced, sgd_step, BlockStep, Hyper, OptState, ScalingFn,
};
use crate::params::{ratio_div, FlatStat, LayeredParams};

use super::ProtocolKind;

/// Per-client memory carried between participations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Adam moments; `None` until the first participation.
    pub opt: Option<OptState>,
    /// Heavy-ball buffer for momentum SGD.
    pub momentum: Option<FlatStat>,
    /// Last global capped moment this client received.
    pub vhat: Option<FlatStat>,
}

impl ClientState {
    pub fn new(id: usize) -> Self {
        ClientState {
            id,
            opt: None,
            momentum: None,
            vhat: None,
        }
    }
}

/// Everything a client reads during a round; shared read-only by all clients.
pub struct LocalContext<'a> {
    pub protocol: ProtocolKind,
    pub model: &'a ModelSpec,
    pub train: &'a Dataset,
    pub global: &'a LayeredParams,
    pub round: usize,
    /// Hyperparameters with `lr` already scheduled for this round.
    pub hyper: Hyper,
    pub momentum: f64,
    pub scaling: ScalingFn,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub probe: Option<&'a StepProbe>,
}

/// One local update, reported to an optional probe.
pub struct StepEvent<'a> {
    pub round: usize,
    pub client: usize,
    pub step: usize,
    pub lr: f64,
    pub before: &'a LayeredParams,
    pub after: &'a LayeredParams,
    /// Per-block outcome for layer-wise protocols.
    pub lamb: Option<&'a [BlockStep]>,
}

pub type StepProbe = dyn Fn(&StepEvent<'_>) + Send + Sync;

/// What a client sends back.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpload {
    pub client: usize,
    /// Final local model, or the model delta for adp-fed.
    pub params: LayeredParams,
    /// Final local second moment (fed-ams, fed-lamb).
    pub moment: Option<FlatStat>,
    /// Full-shard gradient at the received global model (mime paths).
    pub full_grad: Option<FlatStat>,
    pub grad_evals: u64,
    pub steps: usize,
}

/// Runs `local_epochs` passes over the shard starting from the global model.
///
/// `vhat` is the global capped moment as this client last received it; it is
/// required by the adaptive protocols and frozen for the whole round.
pub fn local_round(
    ctx: &LocalContext<'_>,
    client: &ClientState,
    shard: &ClientShard,
    vhat: Option<&FlatStat>,
) -> Result<(LocalUpload, ClientState)> {
    let tag = |step: usize| {
        move |e: Error| Error::Client {
            client: client.id,
            step,
            source: Box::new(e),
        }
    };
    if ctx.local_epochs == 0 {
        return Err(tag(0)(Error::Protocol("at least one local epoch".into())));
    }
    let protocol = ctx.protocol;
    let vhat = if protocol.has_global_moment() {
        let v = vhat.ok_or_else(|| tag(0)(Error::Protocol("missing global moment".into())))?;
        ctx.global.check_congruent(v).map_err(tag(0))?;
        Some(v)
    } else {
        None
    };
    let hyper = ctx.hyper;
    let mut state = client.clone();
    let mut theta = ctx.global.clone();
    let mut grad_evals = 0u64;

    let mut opt = state
        .opt
        .take()
        .unwrap_or_else(|| OptState::zeros(ctx.global, hyper));
    opt.hyper = hyper;
    if let Some(v) = vhat {
        // local second moment restarts from the global capped moment
        opt.v = v.clone();
    }
    let mut capped = vhat.cloned();

    let full_grad = if protocol.uses_full_gradient() {
        let local = ctx.train.samples().select(&shard.indices);
        grad_evals += local.len() as u64;
        Some(backward(ctx.model, ctx.global, &local).map_err(tag(0))?)
    } else {
        None
    };

    let mut step = 0;
    for epoch in 0..ctx.local_epochs {
        let key = ((ctx.round - 1) * ctx.local_epochs + epoch) as u64;
        for idx in minibatch_indices(shard, ctx.batch_size, key, ctx.seed).map_err(tag(step))? {
            step += 1;
            let batch = ctx.train.samples().select(&idx);
            let g = backward(ctx.model, &theta, &batch).map_err(tag(step))?;
            grad_evals += idx.len() as u64;
            let mut lamb_trace = None;
            let next = match protocol {
                ProtocolKind::FedSgd => {
                    let (next, buf) =
                        sgd_step(&theta, &g, hyper.lr, state.momentum.as_ref(), ctx.momentum)
                            .map_err(tag(step))?;
                    if ctx.momentum > 0.0 {
                        state.momentum = Some(buf);
                    }
                    next
                }
                ProtocolKind::AdpFed => {
                    sgd_step(&theta, &g, hyper.lr, None, 0.0)
                        .map_err(tag(step))?
                        .0
                }
                ProtocolKind::FedAms => {
                    opt.update_moments(&g).map_err(tag(step))?;
                    let capped = capped.as_mut().expect("adaptive protocol");
                    capped.max_assign(&opt.v).map_err(tag(step))?;
                    amsgrad_step(&theta, &opt.m, capped, hyper.lr, hyper.epsilon)
                        .map_err(tag(step))?
                }
                ProtocolKind::Mime => {
                    opt.update_first_moment(&g).map_err(tag(step))?;
                    amsgrad_step(&theta, &opt.m, vhat.unwrap(), hyper.lr, hyper.epsilon)
                        .map_err(tag(step))?
                }
                ProtocolKind::FedLamb | ProtocolKind::MimeLamb => {
                    if protocol == ProtocolKind::FedLamb {
                        opt.update_moments(&g).map_err(tag(step))?;
                    } else {
                        opt.update_first_moment(&g).map_err(tag(step))?;
                    }
                    let psi = ratio_div(&opt.m, vhat.unwrap(), hyper.epsilon).map_err(tag(step))?;
                    let (next, trace) =
                        lamb_step_traced(&theta, &psi, hyper.lr, hyper.weight_decay, ctx.scaling)
                            .map_err(tag(step))?;
                    lamb_trace = Some(trace);
                    next
                }
            };
            if let Some(probe) = ctx.probe {
                probe(&StepEvent {
                    round: ctx.round,
                    client: client.id,
                    step,
                    lr: hyper.lr,
                    before: &theta,
                    after: &next,
                    lamb: lamb_trace.as_deref(),
                });
            }
            theta = next;
        }
    }

    let moment =
        matches!(protocol, ProtocolKind::FedAms | ProtocolKind::FedLamb).then(|| opt.v.clone());
    if protocol != ProtocolKind::FedSgd && protocol != ProtocolKind::AdpFed {
        state.opt = Some(opt);
    }
    let params = if protocol == ProtocolKind::AdpFed {
        let mut delta = theta;
        delta.axpy(-1.0, ctx.global).map_err(tag(step))?;
        delta
    } else {
        theta
    };
    Ok((
        LocalUpload {
            client: client.id,
            params,
            moment,
            full_grad,
            grad_evals,
            steps: step,
        },
        state,
    ))
}
