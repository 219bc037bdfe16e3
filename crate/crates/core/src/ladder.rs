//! Ladder statistics at the first strict ascent.
//!
//! For a chain started at y, τ⁺ = inf{t ≥ 0 | Y_t > Y_0} is the first ladder
//! epoch and φ(y) = E_y[γ(Y_{τ⁺}) − Σ_{i=1}^{τ⁺} h(Y_i)] the expected payoff
//! net of cost collected there. Three backends:
//! - exact closed forms for upward-skip-free lattice walks (Wald's identity
//!   gives E(τ⁺) = u/E(X₁); the ladder height is one lattice unit a.s.),
//! - exact linear systems for finite chains,
//! - Monte Carlo with confidence intervals otherwise.
//!
//! The module also houses the descending-ladder cost transform ĥ used by the
//! Lévy threshold function.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_dense;
use crate::model::{
    CostSpec, FiniteChainSpec, LevySpec, MCConfig, ProblemSpec, ProcessSpec, StepDistribution,
};
use crate::quad::adaptive_simpson;
use crate::rng::{pairwise_sum, SeedStream};
use crate::stats::{z_for_level, Moments};

/// Truncation depth (in lattice units below the start) for the skip-free
/// first-passage cost system. Downward excursions have geometric tails under
/// positive drift, so 64 units is far past double precision.
pub const SKIPFREE_TRUNCATION_DEPTH: usize = 64;

/// Censoring fraction above which MC ladder estimates are flagged.
pub const CENSORING_WARN: f64 = 0.01;
/// Censoring fraction above which MC ladder estimation errors out.
pub const CENSORING_FAIL: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderMethod {
    ExactSkipfree,
    ExactChain,
    MonteCarlo,
}

/// Confidence-interval half-widths for each estimate (0 for exact methods).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LadderCis {
    pub e_tau_plus: f64,
    pub phi: f64,
    pub e_cost: f64,
    pub e_weight: f64,
}

/// Per-state ladder statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderStats {
    pub y: f64,
    /// E_y(τ⁺) ≥ 1, expected steps to the first strict ascent.
    pub e_tau_plus: f64,
    /// φ(y) = E_y[γ(Y_{τ⁺}) − Σ h(Y_i)].
    pub phi: f64,
    /// E_y Σ_{i=1}^{τ⁺} h(Y_i) ≥ 0.
    pub e_cost: f64,
    /// E_y Σ_{i=1}^{τ⁺} g(Y_i) > 0.
    pub e_weight: f64,
    pub ci_halfwidths: LadderCis,
    pub method: LadderMethod,
    /// Fraction of MC paths that hit the step cap (0 for exact methods).
    pub censored_fraction: f64,
    /// Estimates flagged when censoring exceeds `CENSORING_WARN`.
    pub unreliable: bool,
    /// Reported bound on the skip-free system truncation (0 elsewhere).
    pub truncation_error: f64,
}

// ---------------------------------------------------------------------------
// Exact backend: upward-skip-free lattice walks
// ---------------------------------------------------------------------------

/// Lundberg-type decay root ρ ∈ (0,1) with E[ρ^{X/u}] = 1; the probability of
/// ever descending k units decays like ρ^k.
fn descent_decay_root(steps_units: &[(i64, f64)]) -> f64 {
    if !steps_units.iter().any(|&(m, p)| m < 0 && p > 0.0) {
        return 0.0;
    }
    let psi = |r: f64| -> f64 {
        steps_units
            .iter()
            .map(|&(m, p)| p * r.powi(m as i32))
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-9);
    // ψ(ρ) − 1 is +∞ at 0⁺ and < 0 just below 1 under positive drift.
    if psi(hi) - 1.0 >= 0.0 {
        return 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if psi(mid) - 1.0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Expected one-step value of `f` from position x.
fn one_step_mean(
    walk_units: &[(i64, f64)],
    unit: f64,
    x: f64,
    f: &dyn Fn(f64) -> Result<f64>,
) -> Result<f64> {
    let mut acc = 0.0;
    for &(m, p) in walk_units {
        if p > 0.0 {
            acc += p * f(x + m as f64 * unit)?;
        }
    }
    Ok(acc)
}

/// Solves W(z) = E_z[Σ_{i=1}^{τ⁺_y} f(Y_i)] on the sub-lattice
/// {y, y−u, …, y−K·u}, clamping the continuation below the truncation depth.
fn skipfree_accumulated(
    steps_units: &[(i64, f64)],
    unit: f64,
    y: f64,
    f: &dyn Fn(f64) -> Result<f64>,
    depth: usize,
) -> Result<(f64, f64)> {
    let k = depth;
    let n = k + 1;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for row in 0..n {
        let x = y - row as f64 * unit;
        a[row][row] = 1.0;
        b[row] = one_step_mean(steps_units, unit, x, f)?;
        for &(m, p) in steps_units {
            if p == 0.0 {
                continue;
            }
            // Landing depth after the step; negative depth means passage.
            let land = row as i64 - m;
            if land >= 0 {
                let land = (land as usize).min(k);
                a[row][land] -= p;
            }
        }
    }
    let w = solve_dense(a, b)?;
    let rho = descent_decay_root(steps_units);
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tail = if rho > 0.0 {
        rho.powi(k as i32) * scale
    } else {
        0.0
    };
    Ok((w[0], tail))
}

/// Exact ladder statistics for upward-skip-free lattice walks.
///
/// The ladder height is one lattice unit a.s., so E(τ⁺) = u/E(X₁) by Wald
/// and φ(y) = γ(y+u) − E_y[Σ h(Y_i)] with the cost solved exactly.
pub fn ladder_stats_exact_skipfree(
    walk: &StepDistribution,
    p: &ProblemSpec,
    y: f64,
) -> Result<LadderStats> {
    let lat = walk
        .lattice()
        .ok_or_else(|| Error::MethodInapplicable("walk has no lattice structure".into()))?;
    if !lat.is_skip_free_up() {
        return Err(Error::MethodInapplicable(
            "walk is not upward-skip-free: max upward step exceeds one lattice unit".into(),
        ));
    }
    let mean = walk.mean();
    if !(mean > 0.0) {
        return Err(Error::MethodInapplicable(
            "skip-free closed form needs E(X₁) > 0".into(),
        ));
    }
    let u = lat.unit;
    let e_tau = u / mean;

    let (e_cost, cost_tail) = match p.cost.as_constant() {
        Some(c) => (c * e_tau, 0.0),
        None => skipfree_accumulated(
            &lat.steps_units,
            u,
            y,
            &|x| p.h(x),
            SKIPFREE_TRUNCATION_DEPTH,
        )?,
    };
    let (e_weight, weight_tail) = match p.weight.as_constant() {
        Some(g) => (g * e_tau, 0.0),
        None => skipfree_accumulated(
            &lat.steps_units,
            u,
            y,
            &|x| p.g(x),
            SKIPFREE_TRUNCATION_DEPTH,
        )?,
    };
    let phi = p.gamma(y + u)? - e_cost;
    Ok(LadderStats {
        y,
        e_tau_plus: e_tau,
        phi,
        e_cost,
        e_weight,
        ci_halfwidths: LadderCis::default(),
        method: LadderMethod::ExactSkipfree,
        censored_fraction: 0.0,
        unreliable: false,
        truncation_error: cost_tail.max(weight_tail),
    })
}

// ---------------------------------------------------------------------------
// Exact backend: finite chains
// ---------------------------------------------------------------------------

fn chain_reaches_above(chain: &FiniteChainSpec, cut: usize) -> bool {
    // Exact reachability of {states > cut} from every state ≤ cut through the
    // support graph restricted to {≤ cut}.
    let n = cut + 1;
    let mut can_exit = vec![false; n];
    for (i, flag) in can_exit.iter_mut().enumerate() {
        *flag = chain.kernel[i][cut + 1..].iter().any(|&p| p > 0.0);
    }
    loop {
        let mut changed = false;
        for i in 0..n {
            if can_exit[i] {
                continue;
            }
            if (0..n).any(|j| chain.kernel[i][j] > 0.0 && can_exit[j]) {
                can_exit[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    can_exit.iter().all(|&b| b)
}

fn sub_kernel_spectral_radius(chain: &FiniteChainSpec, cut: usize) -> f64 {
    let n = cut + 1;
    let mut x = vec![1.0; n];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut next = vec![0.0; n];
        for (i, nx) in next.iter_mut().enumerate() {
            *nx = (0..n).map(|j| chain.kernel[i][j] * x[j]).sum();
        }
        let norm = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        for v in &mut next {
            *v /= norm;
        }
        x = next;
    }
    lambda
}

/// Exact ladder statistics for a finite chain via (I − P_{≤y}) v = r systems.
pub fn ladder_stats_finite_chain(
    chain: &FiniteChainSpec,
    p: &ProblemSpec,
    y: f64,
) -> Result<LadderStats> {
    chain.validate()?;
    let yi = chain.state_index(y)?;
    if yi + 1 == chain.states.len() {
        return Err(Error::LadderEpochNotIntegrable(
            "no states above y: τ⁺ = ∞ a.s.".into(),
        ));
    }
    if !chain_reaches_above(chain, yi) {
        return Err(Error::LadderEpochNotIntegrable(
            "sub-chain on {states ≤ y} cannot reach {> y}".into(),
        ));
    }
    let rho = sub_kernel_spectral_radius(chain, yi);
    if rho >= 1.0 - 1e-9 {
        return Err(Error::LadderEpochNotIntegrable(format!(
            "sub-kernel spectral radius {rho} too close to 1"
        )));
    }

    let n = yi + 1;
    let build = |rhs: Vec<f64>| -> Result<Vec<f64>> {
        let mut a = vec![vec![0.0; n]; n];
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = 1.0;
            for (j, cell) in row.iter_mut().enumerate() {
                *cell -= chain.kernel[i][j];
            }
        }
        solve_dense(a, rhs)
    };

    // Expected steps, accumulated cost, accumulated weight, exit payoff.
    let steps = build(vec![1.0; n])?;
    let mut rhs_cost = vec![0.0; n];
    let mut rhs_weight = vec![0.0; n];
    let mut rhs_exit = vec![0.0; n];
    for i in 0..n {
        for (j, &prob) in chain.kernel[i].iter().enumerate() {
            if prob == 0.0 {
                continue;
            }
            let s = chain.states[j];
            rhs_cost[i] += prob * p.h(s)?;
            rhs_weight[i] += prob * p.g(s)?;
            if j > yi {
                rhs_exit[i] += prob * p.gamma(s)?;
            }
        }
    }
    let cost = build(rhs_cost)?;
    let weight = build(rhs_weight)?;
    let exit = build(rhs_exit)?;

    Ok(LadderStats {
        y,
        e_tau_plus: steps[yi],
        phi: exit[yi] - cost[yi],
        e_cost: cost[yi],
        e_weight: weight[yi],
        ci_halfwidths: LadderCis::default(),
        method: LadderMethod::ExactChain,
        censored_fraction: 0.0,
        unreliable: false,
        truncation_error: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo backend
// ---------------------------------------------------------------------------

/// Per-path ladder draws: numerator a = γ(Y_{τ⁺}) − Σh − γ(y), steps τ⁺,
/// accumulated cost Σ h and weight Σ g.
#[derive(Debug, Clone)]
pub struct LadderSampleSet {
    pub a: Vec<f64>,
    pub tau: Vec<f64>,
    pub cost: Vec<f64>,
    pub weight: Vec<f64>,
    pub censored_fraction: f64,
}

impl LadderSampleSet {
    pub fn unreliable(&self) -> bool {
        self.censored_fraction > CENSORING_WARN
    }
}

struct PathDraw {
    a: f64,
    tau: f64,
    cost: f64,
    weight: f64,
    censored: bool,
}

fn simulate_one_walk_ladder(
    sampler: &crate::model::WalkSampler,
    p: &ProblemSpec,
    y: f64,
    max_steps: usize,
    rng: &mut crate::rng::CounterRng,
) -> Result<PathDraw> {
    let gamma_y = p.gamma(y)?;
    let mut pos = y;
    let mut cost = 0.0;
    let mut weight = 0.0;
    for step in 1..=max_steps {
        pos += sampler.sample(rng);
        cost += p.h(pos)?;
        weight += p.g(pos)?;
        if pos > y {
            return Ok(PathDraw {
                a: p.gamma(pos)? - cost - gamma_y,
                tau: step as f64,
                cost,
                weight,
                censored: false,
            });
        }
    }
    Ok(PathDraw {
        a: 0.0,
        tau: 0.0,
        cost: 0.0,
        weight: 0.0,
        censored: true,
    })
}

fn simulate_one_chain_ladder(
    chain: &FiniteChainSpec,
    sampler: &crate::model::ChainSampler,
    p: &ProblemSpec,
    start: usize,
    max_steps: usize,
    rng: &mut crate::rng::CounterRng,
) -> Result<PathDraw> {
    let y = chain.states[start];
    let gamma_y = p.gamma(y)?;
    let mut idx = start;
    let mut cost = 0.0;
    let mut weight = 0.0;
    for step in 1..=max_steps {
        idx = sampler.step(idx, rng);
        let s = chain.states[idx];
        cost += p.h(s)?;
        weight += p.g(s)?;
        if s > y {
            return Ok(PathDraw {
                a: p.gamma(s)? - cost - gamma_y,
                tau: step as f64,
                cost,
                weight,
                censored: false,
            });
        }
    }
    Ok(PathDraw {
        a: 0.0,
        tau: 0.0,
        cost: 0.0,
        weight: 0.0,
        censored: true,
    })
}

/// Raw per-path ladder draws from y (walks and chains).
pub fn simulate_ladder_set(
    p: &ProblemSpec,
    y: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<LadderSampleSet> {
    let draws: Vec<Result<PathDraw>> = match &p.process {
        ProcessSpec::Walk(w) => {
            let sampler = w.sampler();
            (0..cfg.paths)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream.derive_index(i as u64).rng();
                    simulate_one_walk_ladder(&sampler, p, y, cfg.max_steps, &mut rng)
                })
                .collect()
        }
        ProcessSpec::Chain(c) => {
            let sampler = c.sampler();
            let start = c.state_index(y)?;
            (0..cfg.paths)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream.derive_index(i as u64).rng();
                    simulate_one_chain_ladder(c, &sampler, p, start, cfg.max_steps, &mut rng)
                })
                .collect()
        }
        ProcessSpec::Levy(_) => {
            return Err(Error::MethodInapplicable(
                "discrete ladder simulation needs a walk or chain".into(),
            ))
        }
    };
    let mut a = Vec::with_capacity(cfg.paths);
    let mut tau = Vec::with_capacity(cfg.paths);
    let mut cost = Vec::with_capacity(cfg.paths);
    let mut weight = Vec::with_capacity(cfg.paths);
    let mut censored = 0usize;
    for d in draws {
        let d = d?;
        if d.censored {
            censored += 1;
        } else {
            a.push(d.a);
            tau.push(d.tau);
            cost.push(d.cost);
            weight.push(d.weight);
        }
    }
    let censored_fraction = censored as f64 / cfg.paths as f64;
    if censored_fraction > CENSORING_FAIL {
        return Err(Error::EstimationFailed(format!(
            "{:.1}% of ladder paths hit the {}-step cap",
            100.0 * censored_fraction,
            cfg.max_steps
        )));
    }
    Ok(LadderSampleSet {
        a,
        tau,
        cost,
        weight,
        censored_fraction,
    })
}

/// Monte-Carlo ladder statistics: paths from y until the first strict new
/// maximum, normal-approximation CIs at `cfg.ci_level`.
pub fn ladder_stats_mc(
    p: &ProblemSpec,
    y: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<LadderStats> {
    let set = simulate_ladder_set(p, y, cfg, stream)?;
    let gamma_y = p.gamma(y)?;
    let z = z_for_level(cfg.ci_level);

    // Per-path φ-samples recovered from the numerator draws.
    let phi_samples: Vec<f64> = set.a.iter().map(|a| a + gamma_y).collect();
    let m_phi = Moments::from_slice(&phi_samples);
    let m_tau = Moments::from_slice(&set.tau);
    let m_w = Moments::from_slice(&set.weight);
    let m_cost = Moments::from_slice(&set.cost);
    Ok(LadderStats {
        y,
        e_tau_plus: m_tau.mean,
        phi: m_phi.mean,
        e_cost: m_cost.mean,
        e_weight: m_w.mean,
        ci_halfwidths: LadderCis {
            e_tau_plus: z * m_tau.stderr(),
            phi: z * m_phi.stderr(),
            e_cost: z * m_cost.stderr(),
            e_weight: z * m_w.stderr(),
        },
        method: LadderMethod::MonteCarlo,
        censored_fraction: set.censored_fraction,
        unreliable: set.unreliable(),
        truncation_error: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Pooled ladder sample for random walks (common random numbers)
// ---------------------------------------------------------------------------

/// One ladder segment of a random walk from 0: the partial sums
/// S_1, …, S_{τ⁺} with S_{τ⁺} > 0.
#[derive(Debug, Clone)]
struct LadderSegment {
    partials: Vec<f64>,
}

/// A pooled sample of ladder segments, reusable at every start level because
/// the ladder law of a random walk does not depend on y. Evaluating f across
/// levels with one pool gives common random numbers for the bisection.
pub struct LadderPool {
    walk: StepDistribution,
    segments: Vec<LadderSegment>,
    stream: SeedStream,
    next_index: u64,
    max_steps: usize,
    censored: usize,
}

impl LadderPool {
    pub fn new(
        walk: &StepDistribution,
        n: usize,
        max_steps: usize,
        stream: &SeedStream,
    ) -> Result<Self> {
        let mut pool = Self {
            walk: walk.clone(),
            segments: Vec::new(),
            stream: *stream,
            next_index: 0,
            max_steps,
            censored: 0,
        };
        pool.extend(n)?;
        Ok(pool)
    }

    pub fn extend(&mut self, n: usize) -> Result<()> {
        let sampler = self.walk.sampler();
        let start = self.next_index;
        let draws: Vec<(Option<LadderSegment>, bool)> = (0..n as u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = self.stream.derive_index(start + k).rng();
                let mut partials = Vec::with_capacity(4);
                let mut s = 0.0;
                for _ in 0..self.max_steps {
                    s += sampler.sample(&mut rng);
                    partials.push(s);
                    if s > 0.0 {
                        return (Some(LadderSegment { partials }), false);
                    }
                }
                (None, true)
            })
            .collect();
        self.next_index += n as u64;
        for (seg, censored) in draws {
            if censored {
                self.censored += 1;
            } else if let Some(seg) = seg {
                self.segments.push(seg);
            }
        }
        let total = self.next_index as usize;
        if self.censored as f64 / total as f64 > CENSORING_FAIL {
            return Err(Error::EstimationFailed(format!(
                "{:.1}% of pooled ladder segments hit the step cap",
                100.0 * self.censored as f64 / total as f64
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn censored_fraction(&self) -> f64 {
        self.censored as f64 / self.next_index.max(1) as f64
    }

    /// Evaluate the pooled draws at level y (common random numbers in y).
    pub fn eval_set(&self, p: &ProblemSpec, y: f64) -> Result<LadderSampleSet> {
        let gamma_y = p.gamma(y)?;
        let outs: Vec<Result<(f64, f64, f64, f64)>> = self
            .segments
            .par_iter()
            .map(|seg| {
                let mut cost = 0.0;
                let mut weight = 0.0;
                for &s in &seg.partials {
                    cost += p.h(y + s)?;
                    weight += p.g(y + s)?;
                }
                let top = y + *seg.partials.last().unwrap();
                Ok((
                    p.gamma(top)? - cost - gamma_y,
                    seg.partials.len() as f64,
                    cost,
                    weight,
                ))
            })
            .collect();
        let mut a = Vec::with_capacity(outs.len());
        let mut tau = Vec::with_capacity(outs.len());
        let mut cost = Vec::with_capacity(outs.len());
        let mut weight = Vec::with_capacity(outs.len());
        for o in outs {
            let (ai, ti, ci, wi) = o?;
            a.push(ai);
            tau.push(ti);
            cost.push(ci);
            weight.push(wi);
        }
        Ok(LadderSampleSet {
            a,
            tau,
            cost,
            weight,
            censored_fraction: self.censored_fraction(),
        })
    }
}

// ---------------------------------------------------------------------------
// φ − γ evaluator shared by the ladder-sum pricing and identity checks
// ---------------------------------------------------------------------------

/// Evaluates φ(y) − γ(y) (with a standard error) at arbitrary record heights.
pub enum PhiGammaEval<'a> {
    SkipFree {
        walk: StepDistribution,
        p: &'a ProblemSpec,
    },
    Chain {
        chain: &'a FiniteChainSpec,
        p: &'a ProblemSpec,
    },
    Pool {
        pool: LadderPool,
        p: &'a ProblemSpec,
    },
}

impl<'a> PhiGammaEval<'a> {
    /// Picks the tightest applicable backend for the process.
    pub fn for_problem(p: &'a ProblemSpec, cfg: &MCConfig, stream: &SeedStream) -> Result<Self> {
        match &p.process {
            ProcessSpec::Walk(w) => {
                let skipfree =
                    w.lattice().map(|l| l.is_skip_free_up()).unwrap_or(false) && w.mean() > 0.0;
                if skipfree {
                    Ok(Self::SkipFree { walk: w.clone(), p })
                } else {
                    let pool =
                        LadderPool::new(w, cfg.paths, cfg.max_steps, &stream.derive("phi-pool"))?;
                    Ok(Self::Pool { pool, p })
                }
            }
            ProcessSpec::Chain(chain) => Ok(Self::Chain { chain, p }),
            ProcessSpec::Levy(_) => Err(Error::MethodInapplicable(
                "φ − γ evaluator is a discrete-process construct".into(),
            )),
        }
    }

    /// Returns (φ(y) − γ(y), standard error).
    pub fn eval(&self, y: f64) -> Result<(f64, f64)> {
        match self {
            Self::SkipFree { walk, p } => {
                let st = ladder_stats_exact_skipfree(walk, p, y)?;
                Ok((st.phi - p.gamma(y)?, 0.0))
            }
            Self::Chain { chain, p } => {
                let st = ladder_stats_finite_chain(chain, p, y)?;
                Ok((st.phi - p.gamma(y)?, 0.0))
            }
            Self::Pool { pool, p } => {
                let set = pool.eval_set(p, y)?;
                let m = Moments::from_slice(&set.a);
                Ok((m.mean, m.stderr()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Descending-ladder cost transform ĥ
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HatMethod {
    AnalyticBm,
    McSkeleton,
}

/// ĥ sampled on a grid: the expected total cost along the descending ladder
/// height process, normalized so ladder-time passage means match the
/// process's first-passage means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HatFunction {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub ci_halfwidths: Vec<f64>,
    pub method: HatMethod,
}

impl HatFunction {
    pub fn eval(&self, y: f64) -> Result<f64> {
        let knots: Vec<(f64, f64)> = self
            .grid
            .iter()
            .copied()
            .zip(self.values.iter().copied())
            .collect();
        if knots.len() == 1 {
            return Ok(knots[0].1);
        }
        let lo = knots[0].0;
        let hi = knots[knots.len() - 1].0;
        if !(lo..=hi).contains(&y) {
            return Err(Error::Extrapolation { x: y, lo, hi });
        }
        let j = knots
            .partition_point(|k| k.0 <= y)
            .clamp(1, knots.len() - 1);
        let (x0, v0) = knots[j - 1];
        let (x1, v1) = knots[j];
        Ok(v0 + (v1 - v0) * (y - x0) / (x1 - x0))
    }

    /// Trapezoid quadrature of ĥ over [a, b] ⊆ grid range.
    pub fn integrate(&self, a: f64, b: f64) -> Result<f64> {
        let n = 512;
        let step = (b - a) / n as f64;
        let mut acc = 0.5 * (self.eval(a)? + self.eval(b)?);
        for i in 1..n {
            acc += self.eval(a + step * i as f64)?;
        }
        Ok(acc * step)
    }
}

/// Analytic ĥ for drifting Brownian motion:
/// ĥ(y) = θ ∫₀^∞ e^{−θw} h(y − w) dw with θ = 2μ/σ² — the exponential
/// smoothing induced by the Exp(θ) all-time descent depth. Constant h maps
/// to itself.
pub fn hat_analytic_bm(mu: f64, sigma: f64, cost: &CostSpec, y: f64) -> Result<f64> {
    if !(mu > 0.0) || !(sigma > 0.0) {
        return Err(Error::MethodInapplicable(
            "analytic ĥ needs mu > 0, sigma > 0".into(),
        ));
    }
    if let Some(c) = cost.as_constant() {
        return Ok(c);
    }
    let theta = 2.0 * mu / (sigma * sigma);
    // Substitute v = e^{−θw}: ĥ(y) = ∫₀¹ h(y + ln v / θ) dv. Tables are
    // extended by their edge values for the deep tail.
    let integrand = |v: f64| cost.eval_clamped(y + v.ln() / theta);
    Ok(adaptive_simpson(&integrand, 1e-12, 1.0, 1e-10))
}

/// Skeleton-MC ĥ: simulate descending records of the Δ-skeleton walk and form
/// the ratio estimator
///   ĥ(y) ≈ E[Σ_j h(y − D_j)] / E[#records],
/// whose normalization is exactly the first-passage time matching of the
/// ladder clocks (the g ≡ 1 case pins the denominator). The step Δ is halved
/// until the output moves by < 2% between refinements.
pub fn hat_transform_mc(
    levy: &LevySpec,
    cost: &CostSpec,
    grid: &[f64],
    cfg: &MCConfig,
    stream: &SeedStream,
    dt0: f64,
) -> Result<HatFunction> {
    levy.validate()?;
    if let Some(c) = cost.as_constant() {
        // The ratio estimator returns a constant exactly, at any Δ.
        return Ok(HatFunction {
            grid: grid.to_vec(),
            values: vec![c; grid.len()],
            ci_halfwidths: vec![0.0; grid.len()],
            method: HatMethod::McSkeleton,
        });
    }
    let mut dt = dt0;
    let mut prev: Option<Vec<f64>> = None;
    let mut result = None;
    for refinement in 0..4 {
        let (values, cis) =
            hat_mc_at_dt(levy, cost, grid, cfg, &stream.derive_index(refinement), dt)?;
        if let Some(pv) = &prev {
            let rel_change = pv
                .iter()
                .zip(values.iter())
                .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-9))
                .fold(0.0f64, f64::max);
            if rel_change < 0.02 {
                result = Some((values, cis));
                break;
            }
        }
        prev = Some(values.clone());
        result = Some((values, cis));
        dt *= 0.5;
    }
    let (values, ci_halfwidths) = result.unwrap();
    Ok(HatFunction {
        grid: grid.to_vec(),
        values,
        ci_halfwidths,
        method: HatMethod::McSkeleton,
    })
}

/// Single-Δ skeleton estimate of ĥ with no constant-cost shortcut; the
/// refinement wrapper and the acceptance checks drive this directly.
pub fn hat_transform_mc_at(
    levy: &LevySpec,
    cost: &CostSpec,
    grid: &[f64],
    cfg: &MCConfig,
    stream: &SeedStream,
    dt: f64,
) -> Result<HatFunction> {
    let (values, ci_halfwidths) = hat_mc_at_dt(levy, cost, grid, cfg, stream, dt)?;
    Ok(HatFunction {
        grid: grid.to_vec(),
        values,
        ci_halfwidths,
        method: HatMethod::McSkeleton,
    })
}

fn hat_mc_at_dt(
    levy: &LevySpec,
    cost: &CostSpec,
    grid: &[f64],
    cfg: &MCConfig,
    stream: &SeedStream,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let horizon_time = 16.0 / levy.mean().max(0.1);
    let steps = ((horizon_time / dt) as usize).clamp(16, cfg.max_steps);
    let n_paths = cfg.paths;
    // Record depths per path (descending records of the skeleton, start
    // included at depth 0).
    let depths: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.derive_index(i as u64).rng();
            let mut pos = 0.0;
            let mut min = 0.0;
            let mut d = vec![0.0];
            for _ in 0..steps {
                pos += levy.sample_increment(dt, &mut rng);
                if pos < min {
                    min = pos;
                    d.push(-pos);
                }
            }
            d
        })
        .collect();

    let counts: Vec<f64> = depths.iter().map(|d| d.len() as f64).collect();
    let z = z_for_level(cfg.ci_level);
    let mut values = Vec::with_capacity(grid.len());
    let mut cis = Vec::with_capacity(grid.len());
    for &y in grid {
        let sums: Vec<f64> = depths
            .iter()
            .map(|d| {
                let per: Vec<f64> = d.iter().map(|&w| cost.eval_clamped(y - w)).collect();
                pairwise_sum(&per)
            })
            .collect();
        let (ratio, se) = crate::stats::ratio_stderr(&sums, &counts);
        values.push(ratio.max(0.0));
        cis.push(z * se);
    }
    Ok((values, cis))
}

/// ĥ on a grid: analytic for Brownian motion with drift, skeleton MC with
/// first-passage-matched normalization otherwise.
pub fn hat_transform(
    levy: &LevySpec,
    cost: &CostSpec,
    grid: &[f64],
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<HatFunction> {
    levy.validate()?;
    if grid.is_empty() {
        return Err(Error::InvalidSpec("hat grid is empty".into()));
    }
    for w in grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidSpec(
                "hat grid must be strictly increasing".into(),
            ));
        }
    }
    match levy {
        LevySpec::BmDrift { mu, sigma } => {
            let values: Vec<f64> = grid
                .iter()
                .map(|&y| hat_analytic_bm(*mu, *sigma, cost, y))
                .collect::<Result<_>>()?;
            Ok(HatFunction {
                grid: grid.to_vec(),
                values,
                ci_halfwidths: vec![0.0; grid.len()],
                method: HatMethod::AnalyticBm,
            })
        }
        _ => hat_transform_mc(
            levy,
            cost,
            grid,
            cfg,
            stream,
            crate::levy_sim::DEFAULT_SKELETON_DT,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PayoffSpec, WeightSpec};

    fn problem(process: ProcessSpec, payoff: PayoffSpec, cost: CostSpec) -> ProblemSpec {
        ProblemSpec {
            process,
            payoff,
            cost,
            weight: WeightSpec::default(),
        }
    }

    fn skipfree_walk() -> StepDistribution {
        StepDistribution::TwoPoint {
            p: 0.75,
            u: 1.0,
            d: 1.0,
        }
    }

    fn cap5() -> PayoffSpec {
        PayoffSpec::PiecewiseLinearCap { cap: 5.0 }
    }

    #[test]
    fn skipfree_wald_no_cost() {
        let p = problem(
            ProcessSpec::Walk(skipfree_walk()),
            cap5(),
            CostSpec::Constant { c: 0.0 },
        );
        let st = ladder_stats_exact_skipfree(&skipfree_walk(), &p, 1.0).unwrap();
        assert!((st.e_tau_plus - 2.0).abs() < 1e-12);
        assert!((st.phi - 2.0).abs() < 1e-12); // γ(2) = 2
        assert_eq!(st.ci_halfwidths.phi, 0.0);
    }

    #[test]
    fn skipfree_constant_cost_example() {
        let p = problem(
            ProcessSpec::Walk(skipfree_walk()),
            cap5(),
            CostSpec::Constant { c: 0.1 },
        );
        let st = ladder_stats_exact_skipfree(&skipfree_walk(), &p, 3.0).unwrap();
        // φ(3) = γ(4) − 0.1·2 = 3.8
        assert!((st.phi - 3.8).abs() < 1e-12);
        assert!((st.e_cost - 0.2).abs() < 1e-12);
    }

    #[test]
    fn deterministic_up_walk() {
        let walk = StepDistribution::TwoPoint {
            p: 1.0,
            u: 1.0,
            d: 1.0,
        };
        let p = problem(
            ProcessSpec::Walk(walk.clone()),
            cap5(),
            CostSpec::AffinePositive { a: 0.0, b: 0.1 },
        );
        let st = ladder_stats_exact_skipfree(&walk, &p, 0.0).unwrap();
        assert!((st.e_tau_plus - 1.0).abs() < 1e-12);
        // One deterministic step to 1: φ = γ(1) − h(1) = 1 − 0.1
        assert!((st.phi - 0.9).abs() < 1e-12);
    }

    #[test]
    fn skipfree_affine_cost_matches_mc() {
        let walk = skipfree_walk();
        let p = problem(
            ProcessSpec::Walk(walk.clone()),
            cap5(),
            CostSpec::AffinePositive { a: 0.2, b: 0.1 },
        );
        let exact = ladder_stats_exact_skipfree(&walk, &p, 1.0).unwrap();
        assert!(exact.truncation_error < 1e-10);
        let cfg = MCConfig {
            paths: 40_000,
            seed: 77,
            max_steps: 10_000,
            ci_level: 0.99,
            levy_delta: None,
        };
        let mc = ladder_stats_mc(&p, 1.0, &cfg, &cfg.stream().derive("t")).unwrap();
        assert!(
            (mc.e_cost - exact.e_cost).abs() <= mc.ci_halfwidths.e_cost,
            "mc {} vs exact {} (ci {})",
            mc.e_cost,
            exact.e_cost,
            mc.ci_halfwidths.e_cost
        );
        assert!((mc.e_tau_plus - 2.0).abs() <= mc.ci_halfwidths.e_tau_plus);
    }

    #[test]
    fn rejects_non_skipfree() {
        let walk = StepDistribution::TwoPoint {
            p: 0.6,
            u: 2.0,
            d: 1.0,
        };
        let p = problem(
            ProcessSpec::Walk(walk.clone()),
            cap5(),
            CostSpec::Constant { c: 0.0 },
        );
        assert!(matches!(
            ladder_stats_exact_skipfree(&walk, &p, 0.0),
            Err(Error::MethodInapplicable(_))
        ));
    }

    #[test]
    fn chain_forced_transition() {
        let chain = FiniteChainSpec {
            states: vec![0.0, 1.0],
            kernel: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        };
        let p = problem(
            ProcessSpec::Chain(chain.clone()),
            cap5(),
            CostSpec::Constant { c: 0.3 },
        );
        let st = ladder_stats_finite_chain(&chain, &p, 0.0).unwrap();
        assert!((st.e_tau_plus - 1.0).abs() < 1e-12);
        // φ(0) = γ(1) − h(1) = 1 − 0.3
        assert!((st.phi - 0.7).abs() < 1e-12);
    }

    #[test]
    fn chain_geometric_holding() {
        let chain = FiniteChainSpec {
            states: vec![0.0, 1.0, 2.0],
            kernel: vec![
                vec![0.5, 0.25, 0.25],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0],
            ],
        };
        let p = problem(
            ProcessSpec::Chain(chain.clone()),
            cap5(),
            CostSpec::Constant { c: 0.0 },
        );
        let st = ladder_stats_finite_chain(&chain, &p, 0.0).unwrap();
        assert!((st.e_tau_plus - 2.0).abs() < 1e-10);
        // Exit splits evenly between states 1 and 2: φ = 0.5·1 + 0.5·2.
        assert!((st.phi - 1.5).abs() < 1e-10);
    }

    #[test]
    fn chain_absorbing_below_errors() {
        let chain = FiniteChainSpec {
            states: vec![0.0, 1.0, 2.0],
            kernel: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.5],
                vec![0.0, 0.0, 1.0],
            ],
        };
        let p = problem(
            ProcessSpec::Chain(chain.clone()),
            cap5(),
            CostSpec::Constant { c: 0.0 },
        );
        assert!(matches!(
            ladder_stats_finite_chain(&chain, &p, 1.0),
            Err(Error::LadderEpochNotIntegrable(_))
        ));
    }

    #[test]
    fn mc_covers_exact_skipfree() {
        let p = problem(
            ProcessSpec::Walk(skipfree_walk()),
            cap5(),
            CostSpec::Constant { c: 0.1 },
        );
        let cfg = MCConfig {
            paths: 100_000,
            seed: 4242,
            max_steps: 10_000,
            ci_level: 0.99,
            levy_delta: None,
        };
        let st = ladder_stats_mc(&p, 0.0, &cfg, &cfg.stream().derive("mc-cover")).unwrap();
        assert!((st.e_tau_plus - 2.0).abs() <= st.ci_halfwidths.e_tau_plus);
        assert!(st.censored_fraction < 1e-3);
        assert!(!st.unreliable);
    }

    #[test]
    fn deterministic_walk_zero_variance() {
        let walk = StepDistribution::TwoPoint {
            p: 1.0,
            u: 1.0,
            d: 0.0,
        };
        let p = problem(
            ProcessSpec::Walk(walk),
            cap5(),
            CostSpec::Constant { c: 0.0 },
        );
        let cfg = MCConfig {
            paths: 500,
            seed: 7,
            max_steps: 100,
            ci_level: 0.99,
            levy_delta: None,
        };
        let st = ladder_stats_mc(&p, 0.0, &cfg, &cfg.stream().derive("det")).unwrap();
        assert_eq!(st.e_tau_plus, 1.0);
        assert_eq!(st.ci_halfwidths.e_tau_plus, 0.0);
    }

    #[test]
    fn gaussian_phi_consistent_across_seeds() {
        // No closed form for the gaussian ladder height; two independent
        // seeds must agree within overlapping CIs (φ = E S_{τ⁺} here).
        let p = problem(
            ProcessSpec::Walk(StepDistribution::Gaussian { m: 1.0, s: 1.0 }),
            PayoffSpec::LookupTable {
                knots: vec![(-500.0, -500.0), (500.0, 500.0)],
            },
            CostSpec::Constant { c: 0.0 },
        );
        let mut stats = Vec::new();
        for seed in [111u64, 222] {
            let cfg = MCConfig {
                paths: 30_000,
                seed,
                max_steps: 10_000,
                ci_level: 0.99,
                levy_delta: None,
            };
            stats.push(ladder_stats_mc(&p, 0.0, &cfg, &cfg.stream().derive("g")).unwrap());
        }
        let (a, b) = (&stats[0], &stats[1]);
        let gap = (a.phi - b.phi).abs();
        assert!(
            gap <= a.ci_halfwidths.phi + b.ci_halfwidths.phi,
            "φ estimates disagree: {} ± {} vs {} ± {}",
            a.phi,
            a.ci_halfwidths.phi,
            b.phi,
            b.ci_halfwidths.phi
        );
        assert!(a.phi > 0.0 && b.phi > 0.0);
    }

    #[test]
    fn pool_matches_direct_mc() {
        let walk = StepDistribution::Gaussian { m: 1.0, s: 1.0 };
        let p = problem(
            ProcessSpec::Walk(walk.clone()),
            PayoffSpec::SoftplusConcave { a: 0.0, s: 1.0 },
            CostSpec::Constant { c: 0.0 },
        );
        let stream = SeedStream::root(3).derive("pool");
        let pool = LadderPool::new(&walk, 50_000, 10_000, &stream).unwrap();
        let set = pool.eval_set(&p, 0.0).unwrap();
        let m_tau = Moments::from_slice(&set.tau);
        // Direct MC with an independent stream.
        let cfg = MCConfig {
            paths: 50_000,
            seed: 19,
            max_steps: 10_000,
            ci_level: 0.99,
            levy_delta: None,
        };
        let st = ladder_stats_mc(&p, 0.0, &cfg, &cfg.stream().derive("direct")).unwrap();
        let tol =
            3.0 * (m_tau.stderr().powi(2) + (st.ci_halfwidths.e_tau_plus / 2.5758).powi(2)).sqrt();
        assert!(
            (m_tau.mean - st.e_tau_plus).abs() <= tol,
            "pool {} vs direct {} tol {}",
            m_tau.mean,
            st.e_tau_plus,
            tol
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // φ(y) − γ(y) non-increasing in y for concave payoffs with
            // non-decreasing costs on drift-positive walks.
            #[test]
            fn phi_minus_gamma_non_increasing(
                y in -8.0f64..4.0,
                dy in 0.05f64..4.0,
                cost_c in 0.0f64..0.5,
                concave_softplus in proptest::bool::ANY,
            ) {
                let payoff = if concave_softplus {
                    PayoffSpec::SoftplusConcave { a: 1.0, s: 2.0 }
                } else {
                    PayoffSpec::PiecewiseLinearCap { cap: 5.0 }
                };
                let p = problem(
                    ProcessSpec::Walk(skipfree_walk()),
                    payoff,
                    CostSpec::AffinePositive { a: cost_c, b: 0.02 },
                );
                let w = skipfree_walk();
                let lo = ladder_stats_exact_skipfree(&w, &p, y).unwrap();
                let hi = ladder_stats_exact_skipfree(&w, &p, y + dy).unwrap();
                let a = lo.phi - p.gamma(y).unwrap();
                let b = hi.phi - p.gamma(y + dy).unwrap();
                prop_assert!(b <= a + 1e-9, "φ−γ rose from {a} to {b} over [{y}, {}]", y + dy);
            }

            // ĥ of a non-negative cost stays non-negative.
            #[test]
            fn hat_non_negative(y in -5.0f64..5.0, a in -1.0f64..1.0, b in 0.0f64..0.5) {
                let cost = CostSpec::AffinePositive { a, b };
                let v = hat_analytic_bm(1.0, 1.0, &cost, y).unwrap();
                prop_assert!(v >= -1e-12, "ĥ({y}) = {v}");
            }
        }
    }

    #[test]
    fn hat_constant_cost_is_identity() {
        let levy = LevySpec::BmDrift {
            mu: 1.0,
            sigma: 1.0,
        };
        let grid = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
        let cfg = MCConfig::default();
        let hat = hat_transform(
            &levy,
            &CostSpec::Constant { c: 0.5 },
            &grid,
            &cfg,
            &cfg.stream().derive("hat"),
        )
        .unwrap();
        for &v in &hat.values {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert_eq!(hat.method, HatMethod::AnalyticBm);

        // Drift-independence of constant-cost ĥ.
        let levy2 = LevySpec::BmDrift {
            mu: 2.0,
            sigma: 1.0,
        };
        let hat2 = hat_transform(
            &levy2,
            &CostSpec::Constant { c: 1.0 },
            &grid,
            &cfg,
            &cfg.stream().derive("hat2"),
        )
        .unwrap();
        for &v in &hat2.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hat_zero_cost_is_zero() {
        let levy = LevySpec::CppDrift {
            drift: 0.5,
            rate: 1.0,
            jump: crate::model::JumpLaw::Exponential { mean: 0.5 },
        };
        let cfg = MCConfig {
            paths: 2_000,
            seed: 1,
            max_steps: 20_000,
            ci_level: 0.99,
            levy_delta: None,
        };
        let hat = hat_transform(
            &levy,
            &CostSpec::Constant { c: 0.0 },
            &[0.0, 1.0],
            &cfg,
            &cfg.stream().derive("hat0"),
        )
        .unwrap();
        assert!(hat.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hat_analytic_affine_cost() {
        // ĥ(y) = θ∫₀^∞ e^{−θw} max(y−w, 0) dw for h(x) = max(x, 0); for
        // y ≥ 0 this is y − (1 − e^{−θy})/θ.
        let (mu, sigma) = (1.0, 1.0);
        let theta = 2.0 * mu / (sigma * sigma);
        let cost = CostSpec::AffinePositive { a: 0.0, b: 1.0 };
        for y in [0.5f64, 1.0, 3.0] {
            let expect = y - (1.0 - (-theta * y).exp()) / theta;
            let got = hat_analytic_bm(mu, sigma, &cost, y).unwrap();
            assert!((got - expect).abs() < 1e-7, "y={y}: {got} vs {expect}");
        }
    }

    #[test]
    fn hat_skeleton_tracks_analytic_for_affine_cost() {
        let levy = LevySpec::BmDrift {
            mu: 1.0,
            sigma: 1.0,
        };
        let cost = CostSpec::AffinePositive { a: 0.0, b: 1.0 };
        let grid = vec![1.0, 2.0];
        let cfg = MCConfig {
            paths: 4_000,
            seed: 31,
            max_steps: 400_000,
            ci_level: 0.99,
            levy_delta: None,
        };
        let hat = hat_transform_mc(
            &levy,
            &cost,
            &grid,
            &cfg,
            &cfg.stream().derive("hat-skel"),
            1.0 / 4096.0,
        )
        .unwrap();
        for (i, &y) in grid.iter().enumerate() {
            let exact = hat_analytic_bm(1.0, 1.0, &cost, y).unwrap();
            let err = (hat.values[i] - exact).abs();
            let tol = hat.ci_halfwidths[i].max(0.05 * exact);
            assert!(
                err <= tol,
                "y={y}: skeleton {} vs exact {exact}",
                hat.values[i]
            );
        }
    }
}
