//! The discrete diffusion process over token ids.
//!
//! Positions are corrupted independently. The reverse step factorizes the exact
//! posterior through a per-position Bernoulli routing variable `v`:
//!
//! - kept branch (the token already matches the estimate): with probability
//!   `lambda1` keep it, else redraw from `q_noise`;
//! - noisy branch: with probability `lambda2` jump to the estimate `x0_hat`,
//!   else draw from the interpolated noise `keep * delta(x_t) + (1 - keep) * q_noise`.
//!
//! For absorbing noise a position is on the kept branch iff it is not the mask
//! token, so revealed tokens are never re-masked.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::schedule::{NoiseSchedule, Transition};
use crate::tokenizer::Vocabulary;
use crate::{Error, Result, TokenId};

pub const ORACLE_MAX_VOCAB: usize = 8;
pub const ORACLE_MAX_LEN: usize = 4;

/// Token sequence at noise level `t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiffusionState {
    pub ids: Vec<TokenId>,
    pub t: usize,
}

impl DiffusionState {
    pub fn clean(ids: Vec<TokenId>) -> Self {
        DiffusionState { ids, t: 0 }
    }
}

/// Routing variables drawn by one reverse step, one per position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingSample {
    pub v: Vec<bool>,
    /// `true` where the position took the kept branch.
    pub kept_branch: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NoiseKind {
    /// Point mass on the mask token.
    Absorbing { mask_id: TokenId },
    /// Uniform over a fixed support (the non-special ids of the vocabulary).
    Multinomial { support: Vec<TokenId> },
}

impl NoiseKind {
    pub fn absorbing(vocab: &Vocabulary) -> Self {
        NoiseKind::Absorbing {
            mask_id: vocab.mask_id(),
        }
    }

    pub fn multinomial(vocab: &Vocabulary) -> Result<Self> {
        Self::multinomial_over(vocab.subword_ids())
    }

    pub fn multinomial_over(mut support: Vec<TokenId>) -> Result<Self> {
        support.sort_unstable();
        support.dedup();
        if support.is_empty() {
            return Err(Error::InvalidArgument("multinomial noise needs a nonempty support".into()));
        }
        Ok(NoiseKind::Multinomial { support })
    }

    /// Builds the named kind (`absorbing` or `multinomial`) for a vocabulary.
    pub fn from_name(name: &str, vocab: &Vocabulary) -> Result<Self> {
        match name {
            "absorbing" => Ok(Self::absorbing(vocab)),
            "multinomial" | "uniform" => Self::multinomial(vocab),
            other => Err(Error::Config(format!("unknown noise kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Absorbing { .. } => "absorbing",
            NoiseKind::Multinomial { .. } => "multinomial",
        }
    }

    /// `q_noise(id)`.
    pub fn prob(&self, id: TokenId) -> f64 {
        match self {
            NoiseKind::Absorbing { mask_id } => (id == *mask_id) as u8 as f64,
            NoiseKind::Multinomial { support } => {
                if support.binary_search(&id).is_ok() {
                    1.0 / support.len() as f64
                } else {
                    0.0
                }
            }
        }
    }

    /// Noise mass on a regular (non-mask) token.
    pub fn kept_mass(&self) -> f64 {
        match self {
            NoiseKind::Absorbing { .. } => 0.0,
            NoiseKind::Multinomial { support } => 1.0 / support.len() as f64,
        }
    }

    /// Tokens with nonzero noise mass, ascending.
    pub fn support(&self) -> Vec<TokenId> {
        match self {
            NoiseKind::Absorbing { mask_id } => vec![*mask_id],
            NoiseKind::Multinomial { support } => support.clone(),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        match self {
            NoiseKind::Absorbing { mask_id } => *mask_id,
            NoiseKind::Multinomial { support } => support[rng.random_range(0..support.len())],
        }
    }

    /// Stationary state of the forward chain (all-mask for absorbing noise).
    pub fn stationary<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<TokenId> {
        (0..len).map(|_| self.draw(rng)).collect()
    }

    /// Which routing branch a position is on.
    fn on_kept_branch(&self, xt: TokenId, x0_hat: TokenId) -> bool {
        match self {
            NoiseKind::Absorbing { mask_id } => xt != *mask_id,
            NoiseKind::Multinomial { .. } => xt == x0_hat,
        }
    }

    /// `true` where the token is still noise from the model's point of view.
    pub fn is_noisy(&self, xt: TokenId, x0: TokenId) -> bool {
        !self.on_kept_branch(xt, x0)
    }
}

/// Closed-form forward marginal `q(x_t | x_0) = alpha_bar_t * delta(x_0) + (1 - alpha_bar_t) * q_noise`.
pub fn forward_marginal(
    x0: TokenId,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
) -> Result<BTreeMap<TokenId, f64>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let mut dist = BTreeMap::new();
    *dist.entry(x0).or_insert(0.0) += ab;
    for y in noise.support() {
        *dist.entry(y).or_insert(0.0) += (1.0 - ab) * noise.prob(y);
    }
    dist.retain(|_, p| *p > 0.0);
    Ok(dist)
}

/// Noises `ids` in place to level `t` at the given positions only.
pub fn noise_positions_with<R: Rng + ?Sized>(
    ids: &mut [TokenId],
    positions: &[usize],
    t: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
    rng: &mut R,
) -> Result<()> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    for &i in positions {
        if rng.random::<f64>() >= ab {
            ids[i] = noise.draw(rng);
        }
    }
    Ok(())
}

pub fn forward_sample_with<R: Rng + ?Sized>(
    x0: &[TokenId],
    t: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let mut ids = x0.to_vec();
    let all: Vec<usize> = (0..ids.len()).collect();
    noise_positions_with(&mut ids, &all, t, schedule, noise, rng)?;
    Ok(ids)
}

/// Samples `x_t ~ q(x_t | x_0)` independently per position.
pub fn forward_sample(
    x0: &DiffusionState,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
    rng_seed: u64,
) -> Result<DiffusionState> {
    if x0.t != 0 {
        return Err(Error::InvalidArgument(format!(
            "forward_sample expects a clean state, got t={}",
            x0.t
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let ids = forward_sample_with(&x0.ids, t, schedule, noise, &mut rng)?;
    Ok(DiffusionState { ids, t })
}

/// Exact `q(x_s | x_t, x_0)` for `s < t` by Bayes' rule over the forward kernels.
pub fn posterior_between(
    x0: TokenId,
    xt: TokenId,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
) -> Result<BTreeMap<TokenId, f64>> {
    schedule.check_step(from)?;
    if to >= from {
        return Err(Error::InvalidArgument(format!(
            "posterior needs to < from, got {from} -> {to}"
        )));
    }
    let ab_to = schedule.alpha_bar(to);
    let keep = if ab_to > 0.0 {
        schedule.alpha_bar(from) / ab_to
    } else {
        0.0
    };
    let mut candidates: BTreeSet<TokenId> = noise.support().into_iter().collect();
    candidates.insert(x0);
    candidates.insert(xt);

    let mut dist = BTreeMap::new();
    let mut total = 0.0;
    for &y in &candidates {
        let kernel = keep * (xt == y) as u8 as f64 + (1.0 - keep) * noise.prob(xt);
        let marginal = ab_to * (y == x0) as u8 as f64 + (1.0 - ab_to) * noise.prob(y);
        let w = kernel * marginal;
        if w > 0.0 {
            dist.insert(y, w);
            total += w;
        }
    }
    if total <= 0.0 {
        return Err(Error::Inconsistent(format!(
            "x_t={xt} has zero probability given x_0={x0} at step {from}"
        )));
    }
    for p in dist.values_mut() {
        *p /= total;
    }
    Ok(dist)
}

/// Exact single-step posterior `q(x_{t-1} | x_t, x_0)`.
pub fn posterior(
    x0: TokenId,
    xt: TokenId,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
) -> Result<BTreeMap<TokenId, f64>> {
    if t == 0 {
        return Err(Error::Step {
            t,
            max: schedule.steps(),
        });
    }
    posterior_between(x0, xt, t, t - 1, schedule, noise)
}

/// How a reverse step picks the routing variables.
#[derive(Debug, Clone, Copy)]
pub enum ReverseMode<'a> {
    /// Draw every `v` from its Bernoulli.
    Stochastic,
    /// Route the `ceil(lambda2 * n_noisy)` most confident noisy positions to the
    /// estimate; kept-branch positions always keep.
    TopK { confidence: &'a [f64] },
}

/// One reverse move along `transition`, returning the new state and the routing draw.
pub fn reverse_step(
    xt: &DiffusionState,
    x0_hat: &[TokenId],
    transition: &Transition,
    noise: &NoiseKind,
    mode: ReverseMode<'_>,
    rng_seed: u64,
) -> Result<(DiffusionState, RoutingSample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    reverse_step_with(xt, x0_hat, transition, noise, mode, &mut rng)
}

pub fn reverse_step_with<R: Rng + ?Sized>(
    xt: &DiffusionState,
    x0_hat: &[TokenId],
    transition: &Transition,
    noise: &NoiseKind,
    mode: ReverseMode<'_>,
    rng: &mut R,
) -> Result<(DiffusionState, RoutingSample)> {
    let n = xt.ids.len();
    if x0_hat.len() != n {
        return Err(Error::Shape(format!(
            "x0_hat has length {}, state has {n}",
            x0_hat.len()
        )));
    }
    if xt.t == 0 || xt.t != transition.from {
        return Err(Error::InvalidArgument(format!(
            "state at step {} cannot take transition {} -> {}",
            xt.t, transition.from, transition.to
        )));
    }
    let kept_branch: Vec<bool> = xt
        .ids
        .iter()
        .zip(x0_hat)
        .map(|(&a, &b)| noise.on_kept_branch(a, b))
        .collect();

    let v: Vec<bool> = match mode {
        ReverseMode::Stochastic => kept_branch
            .iter()
            .map(|&kept| {
                let lambda = if kept {
                    transition.lambda1
                } else {
                    transition.lambda2
                };
                rng.random::<f64>() < lambda
            })
            .collect(),
        ReverseMode::TopK { confidence } => {
            if confidence.len() != n {
                return Err(Error::Shape(format!(
                    "confidence has length {}, state has {n}",
                    confidence.len()
                )));
            }
            let mut noisy: Vec<usize> = (0..n).filter(|&i| !kept_branch[i]).collect();
            let k = ((transition.lambda2 * noisy.len() as f64) - 1e-9).ceil().max(0.0) as usize;
            noisy.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
            let mut v = kept_branch.clone();
            for &i in noisy.iter().take(k) {
                v[i] = true;
            }
            v
        }
    };

    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let next = match (kept_branch[i], v[i]) {
            (true, true) => xt.ids[i],
            (true, false) => noise.draw(rng),
            (false, true) => x0_hat[i],
            (false, false) => {
                if rng.random::<f64>() < transition.keep {
                    xt.ids[i]
                } else {
                    noise.draw(rng)
                }
            }
        };
        ids.push(next);
    }
    Ok((
        DiffusionState {
            ids,
            t: transition.to,
        },
        RoutingSample { v, kept_branch },
    ))
}

/// Exact successor distribution of the stochastic reverse step, obtained by
/// enumerating every routing assignment and every noise draw.
///
/// Refuses instances with more than [`ORACLE_MAX_VOCAB`] distinct tokens or
/// sequences longer than [`ORACLE_MAX_LEN`].
pub fn oracle_reverse_distribution(
    xt: &DiffusionState,
    x0: &DiffusionState,
    transition: &Transition,
    noise: &NoiseKind,
) -> Result<BTreeMap<Vec<TokenId>, f64>> {
    let n = xt.ids.len();
    if x0.ids.len() != n {
        return Err(Error::Shape(format!(
            "x0 has length {}, x_t has {n}",
            x0.ids.len()
        )));
    }
    let mut universe: BTreeSet<TokenId> = noise.support().into_iter().collect();
    universe.extend(&xt.ids);
    universe.extend(&x0.ids);
    if universe.len() > ORACLE_MAX_VOCAB || n > ORACLE_MAX_LEN {
        return Err(Error::OracleScale {
            vocab: universe.len(),
            len: n,
        });
    }

    // Per position: every (v, noise component, token) leaf with its probability.
    let support = noise.support();
    let branches: Vec<Vec<(TokenId, f64)>> = (0..n)
        .map(|i| {
            let (a, b) = (xt.ids[i], x0.ids[i]);
            let mut leaves = Vec::new();
            if noise.on_kept_branch(a, b) {
                leaves.push((a, transition.lambda1));
                for &y in &support {
                    leaves.push((y, (1.0 - transition.lambda1) * noise.prob(y)));
                }
            } else {
                leaves.push((b, transition.lambda2));
                leaves.push((a, (1.0 - transition.lambda2) * transition.keep));
                for &y in &support {
                    leaves.push((
                        y,
                        (1.0 - transition.lambda2) * (1.0 - transition.keep) * noise.prob(y),
                    ));
                }
            }
            leaves.retain(|&(_, p)| p > 0.0);
            leaves
        })
        .collect();

    let mut dist = BTreeMap::new();
    let mut cursor = vec![0usize; n];
    loop {
        let mut p = 1.0;
        let mut state = Vec::with_capacity(n);
        for (i, &c) in cursor.iter().enumerate() {
            let (tok, q) = branches[i][c];
            p *= q;
            state.push(tok);
        }
        *dist.entry(state).or_insert(0.0) += p;

        // odometer over the leaf choices
        let mut i = 0;
        loop {
            if i == n {
                return Ok(dist);
            }
            cursor[i] += 1;
            if cursor[i] < branches[i].len() {
                break;
            }
            cursor[i] = 0;
            i += 1;
        }
    }
}

/// Total-variation distance between two distributions given as maps.
pub fn total_variation<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, &pa) in a {
        sum += (pa - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, &pb) in b {
        if !a.contains_key(k) {
            sum += pb.abs();
        }
    }
    0.5 * sum
}
