//! Noise schedules and the routing probabilities of the reparameterized reverse step.
//!
//! Keep-probabilities are written `alpha` throughout: `alpha[t]` is the chance a
//! token survives step `t`, and `alpha_bar[t]` the chance it survives steps
//! `1..=t`. The forward kernel is `q(x_t | x_{t-1}) = alpha_t * delta(x_{t-1}) +
//! (1 - alpha_t) * q_noise`, so the interpolated noise `q_noise(x_t)` used by the
//! sampler mixes `delta(x_t)` with weight `alpha_t`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseKind;
use crate::{Error, Result};

/// Largest `alpha_bar[T]` accepted for schedules that do not reach zero exactly.
pub const ALPHA_BAR_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha_bar[t] = 1 - t/T`
    LinearMask,
    /// `alpha_bar[t] = cos^2(pi/2 * t/T)`
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::LinearMask => "linear_mask",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_mask" | "linear" => Ok(ScheduleKind::LinearMask),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    /// `alpha[t - 1]` for `t = 1..=T`.
    alpha: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`; `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let alpha_bar: Vec<f64> = (0..=steps)
        .map(|t| {
            let frac = t as f64 / steps as f64;
            match kind {
                ScheduleKind::LinearMask => 1.0 - frac,
                ScheduleKind::Cosine => (std::f64::consts::FRAC_PI_2 * frac).cos().powi(2),
            }
        })
        .collect();
    let alpha = (1..=steps)
        .map(|t| {
            if alpha_bar[t - 1] > 0.0 {
                alpha_bar[t] / alpha_bar[t - 1]
            } else {
                0.0
            }
        })
        .collect();
    let schedule = NoiseSchedule {
        kind,
        steps,
        alpha,
        alpha_bar,
    };
    debug_assert!(schedule.alpha_bar(steps) <= ALPHA_BAR_FLOOR);
    Ok(schedule)
}

/// One reverse move from step `from` down to step `to < from`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    /// Keep-probability of the forward kernel from `to` to `from`: `alpha_bar[from] / alpha_bar[to]`.
    pub keep: f64,
    /// Probability that a token already equal to the estimate stays as it is.
    pub lambda1: f64,
    /// Probability that a noisy token jumps to the estimate.
    pub lambda2: f64,
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total step count `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step keep-probability, `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::Step {
                t,
                max: self.steps,
            })
        } else {
            Ok(())
        }
    }

    /// Routing probabilities for a jump `from -> to`, chosen so the routed
    /// sampler's marginal equals the exact posterior `q(x_to | x_from, x_0)`.
    pub fn transition(&self, from: usize, to: usize, noise: &NoiseKind) -> Result<Transition> {
        self.check_step(from)?;
        if to >= from {
            return Err(Error::InvalidArgument(format!(
                "reverse transition must decrease the step, got {from} -> {to}"
            )));
        }
        let ab_from = self.alpha_bar[from];
        let ab_to = self.alpha_bar[to];
        let keep = if ab_to > 0.0 { ab_from / ab_to } else { 0.0 };
        let lambda2 = if 1.0 - ab_from > 0.0 {
            ((ab_to - ab_from) / (1.0 - ab_from)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        // Noise mass sitting on a token that matches x_0: zero for absorbing noise.
        let m = noise.kept_mass();
        let denom = ab_from + (1.0 - ab_from) * m;
        let lambda1 = if denom > 0.0 {
            (1.0 - (1.0 - keep) * (1.0 - ab_to) * m / denom).clamp(0.0, 1.0)
        } else {
            1.0
        };
        Ok(Transition {
            from,
            to,
            keep,
            lambda1,
            lambda2,
        })
    }

    /// Serializable summary written into checkpoints and config snapshots.
    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            kind: self.kind,
            steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps)
    }
}

/// Single-step routing probabilities, `lambda1[t - 1]` and `lambda2[t - 1]` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingProbs {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    transitions: Vec<Transition>,
}

impl RoutingProbs {
    /// The transition `t -> t - 1`.
    pub fn step(&self, t: usize) -> Result<&Transition> {
        if t == 0 || t > self.transitions.len() {
            return Err(Error::Step {
                t,
                max: self.transitions.len(),
            });
        }
        Ok(&self.transitions[t - 1])
    }
}

pub fn routing_probs(schedule: &NoiseSchedule, noise: &NoiseKind) -> RoutingProbs {
    let transitions: Vec<Transition> = (1..=schedule.steps())
        .map(|t| {
            schedule
                .transition(t, t - 1, noise)
                .expect("single steps are always in range")
        })
        .collect();
    RoutingProbs {
        lambda1: transitions.iter().map(|tr| tr.lambda1).collect(),
        lambda2: transitions.iter().map(|tr| tr.lambda2).collect(),
        transitions,
    }
}

/// `t,alpha_bar,alpha,lambda1,lambda2` rows for `t = 0..=T` (row 0 has no transition).
pub fn schedule_table_csv(schedule: &NoiseSchedule, noise: &NoiseKind) -> String {
    let routing = routing_probs(schedule, noise);
    let mut out = String::from("t,alpha_bar,alpha,lambda1,lambda2\n");
    out.push_str(&format!("0,{},,,\n", schedule.alpha_bar(0)));
    for t in 1..=schedule.steps() {
        out.push_str(&format!(
            "{t},{},{},{},{}\n",
            schedule.alpha_bar(t),
            schedule.alpha(t),
            routing.lambda1[t - 1],
            routing.lambda2[t - 1]
        ));
    }
    out
}
