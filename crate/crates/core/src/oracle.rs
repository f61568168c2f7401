//! Exhaustive comparison of the reverse sampler against the exact posterior on
//! every small instance.

use std::collections::BTreeMap;

use crate::diffusion::{forward_marginal, oracle_reverse_distribution, posterior, total_variation, DiffusionState, NoiseKind};
use crate::schedule::{make_schedule, routing_probs, NoiseSchedule, ScheduleKind};
use crate::{Result, TokenId};

/// Instance sizes covered by [`run_oracle_suite`]. Vocabulary size counts every
/// distinct token, the mask included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleBounds {
    pub max_vocab: usize,
    pub max_len: usize,
    pub max_steps: usize,
}

impl Default for OracleBounds {
    fn default() -> Self {
        OracleBounds {
            max_vocab: 5,
            max_len: 3,
            max_steps: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleViolation {
    pub check: &'static str,
    pub schedule: ScheduleKind,
    pub noise: &'static str,
    pub vocab: usize,
    pub steps: usize,
    pub t: usize,
    pub x0: Vec<TokenId>,
    pub xt: Vec<TokenId>,
    pub tv: f64,
}

impl std::fmt::Display for OracleViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} {} V={} T={} t={} x0={:?} xt={:?} tv={:.3e}",
            self.check, self.schedule, self.noise, self.vocab, self.steps, self.t, self.x0, self.xt, self.tv
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub tolerance: f64,
    /// Reverse-step instances compared against the posterior.
    pub n_posterior: usize,
    /// `(x_0, t)` instances checked for marginal consistency.
    pub n_marginal: usize,
    pub max_tv: f64,
    pub violations: Vec<OracleViolation>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Every sequence of length `len` over `alphabet`, in lexicographic order.
fn sequences(alphabet: &[TokenId], len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                alphabet.iter().map(move |&a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    out
}

/// Joint distribution of independent per-position distributions.
fn product(marginals: &[BTreeMap<TokenId, f64>]) -> BTreeMap<Vec<TokenId>, f64> {
    let mut joint = BTreeMap::from([(Vec::new(), 1.0)]);
    for m in marginals {
        let mut next = BTreeMap::new();
        for (prefix, p) in &joint {
            for (&tok, &q) in m {
                let mut k: Vec<TokenId> = prefix.clone();
                k.push(tok);
                next.insert(k, p * q);
            }
        }
        joint = next;
    }
    joint
}

fn forward_joint(x0: &[TokenId], t: usize, s: &NoiseSchedule, noise: &NoiseKind) -> Result<BTreeMap<Vec<TokenId>, f64>> {
    let marginals = x0
        .iter()
        .map(|&a| forward_marginal(a, t, s, noise))
        .collect::<Result<Vec<_>>>()?;
    Ok(product(&marginals))
}

/// Noise kinds with exactly `vocab` distinct tokens, paired with their clean alphabets.
fn noise_kinds(vocab: usize) -> Vec<(NoiseKind, Vec<TokenId>)> {
    let real: Vec<TokenId> = (0..vocab as TokenId).collect();
    let mut out = Vec::new();
    if vocab >= 2 {
        let mask = vocab as TokenId - 1;
        out.push((NoiseKind::Absorbing { mask_id: mask }, real[..vocab - 1].to_vec()));
    }
    if let Ok(m) = NoiseKind::multinomial_over(real.clone()) {
        out.push((m, real));
    }
    out
}

/// Checks, for both schedules and both noise kinds:
///
/// * the reverse step with the true `x_0` against the productwise Bayes posterior, for
///   every reachable `x_t`;
/// * that forward to `t` then one reverse step reproduces the forward marginal at `t - 1`.
///
/// Any total-variation distance at or above `tolerance` is recorded as a violation.
pub fn run_oracle_suite(bounds: OracleBounds, tolerance: f64) -> Result<OracleReport> {
    let mut report = OracleReport {
        tolerance,
        n_posterior: 0,
        n_marginal: 0,
        max_tv: 0.0,
        violations: Vec::new(),
    };
    for kind in [ScheduleKind::LinearMask, ScheduleKind::Cosine] {
        for steps in 1..=bounds.max_steps {
            let schedule = make_schedule(kind, steps)?;
            for vocab in 2..=bounds.max_vocab {
                for (noise, clean) in noise_kinds(vocab) {
                    let routing = routing_probs(&schedule, &noise);
                    let all: Vec<TokenId> = (0..vocab as TokenId).collect();
                    for len in 1..=bounds.max_len {
                        let noisy = sequences(&all, len);
                        for x0 in sequences(&clean, len) {
                            let x0_state = DiffusionState::clean(x0.clone());
                            for t in 1..=steps {
                                let tr = routing.step(t)?;
                                let record = |check, xt: &[TokenId], tv: f64, report: &mut OracleReport| {
                                    report.max_tv = report.max_tv.max(tv);
                                    if !(tv < tolerance) {
                                        report.violations.push(OracleViolation {
                                            check,
                                            schedule: kind,
                                            noise: noise.name(),
                                            vocab,
                                            steps,
                                            t,
                                            x0: x0.clone(),
                                            xt: xt.to_vec(),
                                            tv,
                                        });
                                    }
                                };
                                let reachable = forward_joint(&x0, t, &schedule, &noise)?;
                                let mut composed: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
                                for xt in &noisy {
                                    let Some(&pt) = reachable.get(xt).filter(|&&p| p > 0.0) else {
                                        continue;
                                    };
                                    let marginals = x0
                                        .iter()
                                        .zip(xt)
                                        .map(|(&a, &b)| posterior(a, b, t, &schedule, &noise))
                                        .collect::<Result<Vec<_>>>()?;
                                    let exact = product(&marginals);
                                    let xt_state = DiffusionState { ids: xt.clone(), t };
                                    let sampled = oracle_reverse_distribution(&xt_state, &x0_state, tr, &noise)?;
                                    record("posterior", xt, total_variation(&exact, &sampled), &mut report);
                                    report.n_posterior += 1;
                                    for (succ, p) in sampled {
                                        *composed.entry(succ).or_insert(0.0) += pt * p;
                                    }
                                }
                                let previous = forward_joint(&x0, t - 1, &schedule, &noise)?;
                                record("marginal", &[], total_variation(&composed, &previous), &mut report);
                                report.n_marginal += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}
