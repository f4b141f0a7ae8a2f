//! Per-client step rules: SGD with optional momentum, the Adam moment
//! recursion, AMSGrad and the layer-wise LAMB step.
//!
//! None of the rules apply bias correction to the moments.

use crate::error::{Error, Result};
use crate::params::{block_norms, ratio_div, FlatStat, LayeredParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            epsilon: 1e-8,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && (0.0..=1.0).contains(&self.weight_decay)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// First and second moments of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: FlatStat,
    pub v: FlatStat,
    pub hyper: Hyper,
}

impl OptState {
    pub fn zeros(like: &LayeredParams, hyper: Hyper) -> Self {
        OptState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            hyper,
        }
    }

    /// In-place form of [`moment_update`].
    pub fn update_moments(&mut self, g: &FlatStat) -> Result<()> {
        self.m.check_congruent(g)?;
        self.v.check_congruent(g)?;
        let (b1, b2) = (self.hyper.beta1, self.hyper.beta2);
        for ((m, v), &g) in self
            .m
            .values_mut()
            .iter_mut()
            .zip(self.v.values_mut().iter_mut())
            .zip(g.values())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        Ok(())
    }

    /// Advances only the first moment.
    pub fn update_first_moment(&mut self, g: &FlatStat) -> Result<()> {
        self.m.check_congruent(g)?;
        let b1 = self.hyper.beta1;
        for (m, &g) in self.m.values_mut().iter_mut().zip(g.values()) {
            *m = b1 * *m + (1.0 - b1) * g;
        }
        Ok(())
    }
}

/// `m' = b1 m + (1 - b1) g`, `v' = b2 v + (1 - b2) g^2`.
pub fn moment_update(state: &OptState, g: &FlatStat) -> Result<OptState> {
    let mut next = state.clone();
    next.update_moments(g)?;
    Ok(next)
}

/// `buf' = mu buf + g`, `params' = params - lr buf'`. A missing buffer is zero.
pub fn sgd_step(
    params: &LayeredParams,
    g: &FlatStat,
    lr: f64,
    momentum_buf: Option<&FlatStat>,
    mu: f64,
) -> Result<(LayeredParams, FlatStat)> {
    params.check_congruent(g)?;
    let mut buf = g.clone();
    if let Some(prev) = momentum_buf {
        buf.axpy(mu, prev)?;
    }
    let mut next = params.clone();
    next.axpy(-lr, &buf)?;
    Ok((next, buf))
}

/// `params - lr * m / sqrt(max(vhat, eps))`.
pub fn amsgrad_step(
    params: &LayeredParams,
    m: &FlatStat,
    vhat: &FlatStat,
    lr: f64,
    eps: f64,
) -> Result<LayeredParams> {
    params.check_congruent(m)?;
    let ratio = ratio_div(m, vhat, eps)?;
    let mut next = params.clone();
    next.axpy(-lr, &ratio)?;
    Ok(next)
}

/// Layer-norm scaling function `phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalingFn {
    Identity,
    Clipped { min: f64, max: f64 },
}

impl ScalingFn {
    pub fn clipped(min: f64, max: f64) -> Result<Self> {
        if min > 0.0 && min <= max {
            Ok(ScalingFn::Clipped { min, max })
        } else {
            Err(Error::Validation(format!(
                "clipped scaling needs 0 < min <= max (got {min}, {max})"
            )))
        }
    }

    pub fn apply(&self, norm: f64) -> f64 {
        match *self {
            ScalingFn::Identity => norm,
            ScalingFn::Clipped { min, max } => norm.clamp(min, max),
        }
    }
}

/// What [`lamb_step_traced`] did to one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockStep {
    /// Moved by exactly `lr * phi` along the normalized direction.
    Scaled { phi: f64 },
    /// Direction vanished; block untouched.
    Unchanged,
    /// `phi` vanished (zero block under identity scaling); trust factor 1.
    UnitTrust,
}

/// Layer-wise step: per block, with `u = psi + lambda * theta`,
/// `theta' = theta - lr * phi(|theta|) * u / |u|`.
pub fn lamb_step(
    params: &LayeredParams,
    psi: &FlatStat,
    lr: f64,
    weight_decay: f64,
    phi: ScalingFn,
) -> Result<LayeredParams> {
    lamb_step_traced(params, psi, lr, weight_decay, phi).map(|(p, _)| p)
}

pub fn lamb_step_traced(
    params: &LayeredParams,
    psi: &FlatStat,
    lr: f64,
    weight_decay: f64,
    phi: ScalingFn,
) -> Result<(LayeredParams, Vec<BlockStep>)> {
    params.check_congruent(psi)?;
    let theta_norms = block_norms(params);
    let mut next = params.clone();
    let mut steps = Vec::with_capacity(params.num_blocks());
    for (l, &theta_norm) in theta_norms.iter().enumerate() {
        let theta = params.block(l);
        let u: Vec<f64> = psi
            .block(l)
            .iter()
            .zip(theta)
            .map(|(p, t)| p + weight_decay * t)
            .collect();
        let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = phi.apply(theta_norm);
        let (factor, step) = if u_norm == 0.0 {
            steps.push(BlockStep::Unchanged);
            continue;
        } else if scale > 0.0 {
            (lr * scale / u_norm, BlockStep::Scaled { phi: scale })
        } else {
            (lr, BlockStep::UnitTrust)
        };
        for (x, ui) in next.block_mut(l).iter_mut().zip(&u) {
            *x -= factor * ui;
        }
        steps.push(step);
    }
    Ok((next, steps))
}

/// Step-decay schedule: `lr0 * factor^(milestones <= round)`.
pub fn milestone_lr(lr0: f64, round: usize, milestones: &[usize], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= round).count();
    lr0 * factor.powi(passed as i32)
}
