//! Server-side aggregation rules.

use crate::error::{Error, Result};
use crate::params::{ratio_div, FlatStat, LayeredParams};

/// Unweighted mean, summed in the order given.
pub fn aggregate_params(received: &[&LayeredParams]) -> Result<LayeredParams> {
    let (first, rest) = received
        .split_first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    let mut sum = (*first).clone();
    for x in rest {
        sum.axpy(1.0, x)?;
    }
    let n = received.len() as f64;
    sum.values_mut().iter_mut().for_each(|v| *v /= n);
    Ok(sum)
}

/// `max(vhat_prev, mean(received_v))`.
pub fn aggregate_vhat_fedlamb(vhat_prev: &FlatStat, received_v: &[&FlatStat]) -> Result<FlatStat> {
    let mut mean = aggregate_params(received_v)?;
    mean.max_assign(vhat_prev)?;
    Ok(mean)
}

/// Server moment update from full local gradients at the previous global
/// model: average them, fold the square into `v`, cap into `vhat`.
pub fn mime_vhat_update(
    v_prev: &FlatStat,
    vhat_prev: &FlatStat,
    full_grads: &[&FlatStat],
    beta2: f64,
) -> Result<(FlatStat, FlatStat)> {
    let grad = aggregate_params(full_grads)?;
    grad.check_congruent(v_prev)?;
    let mut v = v_prev.clone();
    for (v, g) in v.values_mut().iter_mut().zip(grad.values()) {
        *v = beta2 * *v + (1.0 - beta2) * g * g;
    }
    let mut vhat = v.clone();
    vhat.max_assign(vhat_prev)?;
    Ok((v, vhat))
}

/// Server Adam step on the averaged client delta.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveServer {
    pub m: FlatStat,
    pub v: FlatStat,
}

impl AdaptiveServer {
    /// `m = 0`, `v = eps`.
    pub fn new(like: &LayeredParams, eps: f64) -> Self {
        AdaptiveServer {
            m: like.zeros_like(),
            v: like.filled_like(eps),
        }
    }

    /// Returns the new global model `global + lr_global * m / sqrt(v)`;
    /// `v` is floored at `eps`. The plus sign is right because deltas already
    /// point downhill.
    pub fn step(
        &mut self,
        global: &LayeredParams,
        deltas: &[&FlatStat],
        beta1: f64,
        beta2: f64,
        lr_global: f64,
        eps: f64,
    ) -> Result<LayeredParams> {
        let mean = aggregate_params(deltas)?;
        mean.check_congruent(&self.m)?;
        for ((m, v), d) in self
            .m
            .values_mut()
            .iter_mut()
            .zip(self.v.values_mut().iter_mut())
            .zip(mean.values())
        {
            *m = beta1 * *m + (1.0 - beta1) * d;
            *v = beta2 * *v + (1.0 - beta2) * d * d;
        }
        let mut next = global.clone();
        next.axpy(lr_global, &ratio_div(&self.m, &self.v, eps)?)?;
        Ok(next)
    }
}
