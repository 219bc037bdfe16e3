//! Independent ground-truth engines: dynamic-programming value iteration for
//! discrete problems, closed-form scale/Green formulas for drifting Brownian
//! motion, and Monte-Carlo verifiers for the two representation identities
//! (telescoping ladder sum, maximum representation).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::hat_analytic_bm;
use crate::levy_sim::PassageEngine;
use crate::model::{CostSpec, LevySpec, MCConfig, ProblemSpec, ProcessSpec};
use crate::quad::adaptive_simpson;
use crate::rng::SeedStream;
use crate::stats::Moments;
use crate::threshold::{threshold_rule_report, Boundary, LadderConvention};

// ---------------------------------------------------------------------------
// Brownian closed forms
// ---------------------------------------------------------------------------

/// Exit of (a, b) for Brownian motion with drift μ and volatility σ started
/// at x: (P(exit at b), E(exit time)). θ = 2μ/σ² is the scale exponent.
pub fn bm_scale_exit(mu: f64, sigma: f64, a: f64, b: f64, x: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidSpec("bm_scale_exit needs sigma > 0".into()));
    }
    if !(a < x && x < b) {
        return Err(Error::InvalidSpec(format!(
            "need a < x < b, got ({a}, {x}, {b})"
        )));
    }
    if mu == 0.0 {
        let p_up = (x - a) / (b - a);
        let e_time = (x - a) * (b - x) / (sigma * sigma);
        return Ok((p_up, e_time));
    }
    let theta = 2.0 * mu / (sigma * sigma);
    // (e^{−θa} − e^{−θx}) / (e^{−θa} − e^{−θb}), written overflow-safe.
    let p_up = (-theta * (x - a)).exp_m1() / (-theta * (b - a)).exp_m1();
    let e_time = (p_up * b + (1.0 - p_up) * a - x) / mu;
    Ok((p_up, e_time))
}

fn bm_theta(mu: f64, sigma: f64) -> f64 {
    2.0 * mu / (sigma * sigma)
}

/// E_x ∫₀^{τ_y} h(X_s) ds for the upward first passage of drifting Brownian
/// motion (μ > 0), via the Green density of the killed motion on (−∞, y]:
///   G(x, z) = (e^{−θ(x−z)} − e^{−θ(y−z)})/μ  for z ≤ x,
///   G(x, z) = (1 − e^{−θ(y−z)})/μ            for x ≤ z ≤ y.
/// Constant h bypasses quadrature: c·(y − x)/μ exactly.
pub fn bm_green_expected_cost(mu: f64, sigma: f64, x: f64, y: f64, h: &CostSpec) -> Result<f64> {
    if !(mu > 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidSpec(
            "green oracle needs mu > 0, sigma > 0".into(),
        ));
    }
    if !(x < y) {
        return Err(Error::InvalidSpec(format!("need x < y, got ({x}, {y})")));
    }
    if let Some(c) = h.as_constant() {
        return Ok(c * (y - x) / mu);
    }
    let theta = bm_theta(mu, sigma);
    let upper = adaptive_simpson(
        &|z: f64| (1.0 - (-theta * (y - z)).exp()) / mu * h.eval_clamped(z),
        x,
        y,
        1e-8,
    );
    // Tail below x decays like e^{−θ(x−z)}; cut 50 e-foldings deep.
    let cut = x - 50.0 / theta;
    let lower = adaptive_simpson(
        &|z: f64| ((-theta * (x - z)).exp() - (-theta * (y - z)).exp()) / mu * h.eval_clamped(z),
        cut,
        x,
        1e-8,
    );
    Ok(upper + lower)
}

/// E_x ∫₀^{T} h(X_s) ds for the exit time T of (a, b), from the two-sided
/// Green function; constant h returns c·E(T) exactly.
pub fn bm_interval_green_cost(
    mu: f64,
    sigma: f64,
    a: f64,
    b: f64,
    x: f64,
    h: &CostSpec,
) -> Result<f64> {
    if !(a < x && x < b) {
        return Err(Error::InvalidSpec(format!(
            "need a < x < b, got ({a}, {x}, {b})"
        )));
    }
    if let Some(c) = h.as_constant() {
        let (_, e_time) = bm_scale_exit(mu, sigma, a, b, x)?;
        return Ok(c * e_time);
    }
    if mu == 0.0 {
        let g = |z: f64| {
            let (l, u) = (x.min(z), x.max(z));
            (l - a) * (b - u) / (b - a) * 2.0 / (sigma * sigma)
        };
        return Ok(adaptive_simpson(
            &|z: f64| g(z) * h.eval_clamped(z),
            a,
            b,
            1e-8,
        ));
    }
    let theta = bm_theta(mu, sigma);
    let g = |z: f64| {
        let (l, u) = (x.min(z), x.max(z));
        (1.0 - (-theta * (l - a)).exp()) * ((-theta * (u - z)).exp() - (-theta * (b - z)).exp())
            / (mu * (1.0 - (-theta * (b - a)).exp()))
    };
    Ok(adaptive_simpson(
        &|z: f64| g(z) * h.eval_clamped(z),
        a,
        b,
        1e-8,
    ))
}

// ---------------------------------------------------------------------------
// Dynamic-programming oracle
// ---------------------------------------------------------------------------

/// Tolerance for reading the stopping set off a converged value function.
pub const STOPPING_SET_TOL: f64 = 1e-9;

const MAX_DP_SWEEPS: usize = 1_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DPSolution {
    pub states: Vec<f64>,
    pub values: Vec<f64>,
    pub gamma: Vec<f64>,
    pub stopping_set: Vec<bool>,
    pub iterations: usize,
    pub residual: f64,
}

impl DPSolution {
    pub fn value_at(&self, y: f64) -> Option<f64> {
        self.states
            .iter()
            .position(|&s| (s - y).abs() <= 1e-9 * (1.0 + y.abs()))
            .map(|i| self.values[i])
    }
}

/// Value iteration from V⁰ = γ for the undiscounted Bellman fixed point
/// V = max(γ, E[V(Y₁)] − E[h(Y₁)]).
///
/// Lattice walks are truncated to [lo, hi]: targets above hi stop at their
/// payoff; targets below lo continue against a penalty floor
/// γ(lo) − 10(1 + |γ(lo)|), which keeps deep descent strictly bad without
/// planting a stopping incentive at the edge.
pub fn dp_value_iteration(p: &ProblemSpec, domain: (f64, f64), tol: f64) -> Result<DPSolution> {
    match &p.process {
        ProcessSpec::Walk(w) => {
            let lat = w.lattice().ok_or_else(|| {
                Error::MethodInapplicable("DP oracle needs a lattice walk or a finite chain".into())
            })?;
            let (lo, hi) = domain;
            if !(lo < hi) {
                return Err(Error::InvalidSpec("domain must satisfy lo < hi".into()));
            }
            let u = lat.unit;
            let k_lo = (lo / u).ceil() as i64;
            let k_hi = (hi / u).floor() as i64;
            let n = (k_hi - k_lo + 1) as usize;
            if n < 3 {
                return Err(Error::InvalidSpec(
                    "domain holds fewer than 3 lattice states".into(),
                ));
            }
            let states: Vec<f64> = (k_lo..=k_hi).map(|k| k as f64 * u).collect();
            let gamma: Vec<f64> = states.iter().map(|&s| p.gamma(s)).collect::<Result<_>>()?;
            let penalty = gamma[0] - 10.0 * (1.0 + gamma[0].abs());

            // Per-state expected one-step cost and per-target payoffs.
            let mut exp_cost = vec![0.0; n];
            for (i, &s) in states.iter().enumerate() {
                for &(m, prob) in &lat.steps_units {
                    if prob > 0.0 {
                        exp_cost[i] += prob * p.h(s + m as f64 * u)?;
                    }
                }
            }
            let above_gamma = |k: i64| -> Result<f64> { p.gamma(k as f64 * u) };

            let mut v = gamma.clone();
            let mut iterations = 0;
            let mut residual = f64::INFINITY;
            while iterations < MAX_DP_SWEEPS {
                iterations += 1;
                let mut next = vec![0.0; n];
                let mut delta = 0.0f64;
                for i in 0..n {
                    let k = k_lo + i as i64;
                    let mut cont = 0.0;
                    for &(m, prob) in &lat.steps_units {
                        if prob == 0.0 {
                            continue;
                        }
                        let kt = k + m;
                        cont += prob
                            * if kt > k_hi {
                                above_gamma(kt)?
                            } else if kt < k_lo {
                                penalty
                            } else {
                                v[(kt - k_lo) as usize]
                            };
                    }
                    next[i] = gamma[i].max(cont - exp_cost[i]);
                    delta = delta.max((next[i] - v[i]).abs());
                }
                v = next;
                residual = delta;
                if delta < tol {
                    break;
                }
            }
            if residual >= tol {
                return Err(Error::DpFailed(format!(
                    "no convergence after {MAX_DP_SWEEPS} sweeps (residual {residual})"
                )));
            }
            let stopping_set = v
                .iter()
                .zip(gamma.iter())
                .map(|(&vv, &gg)| vv - gg <= STOPPING_SET_TOL)
                .collect();
            Ok(DPSolution {
                states,
                values: v,
                gamma,
                stopping_set,
                iterations,
                residual,
            })
        }
        ProcessSpec::Chain(c) => {
            c.validate()?;
            let n = c.states.len();
            let gamma: Vec<f64> = c
                .states
                .iter()
                .map(|&s| p.gamma(s))
                .collect::<Result<_>>()?;
            let mut exp_cost = vec![0.0; n];
            for i in 0..n {
                for (j, &prob) in c.kernel[i].iter().enumerate() {
                    if prob > 0.0 {
                        exp_cost[i] += prob * p.h(c.states[j])?;
                    }
                }
            }
            let mut v = gamma.clone();
            let mut iterations = 0;
            let mut residual = f64::INFINITY;
            while iterations < MAX_DP_SWEEPS {
                iterations += 1;
                let mut next = vec![0.0; n];
                let mut delta = 0.0f64;
                for i in 0..n {
                    let cont: f64 = c.kernel[i]
                        .iter()
                        .enumerate()
                        .map(|(j, &prob)| prob * v[j])
                        .sum();
                    next[i] = gamma[i].max(cont - exp_cost[i]);
                    delta = delta.max((next[i] - v[i]).abs());
                }
                v = next;
                residual = delta;
                if delta < tol {
                    break;
                }
            }
            if residual >= tol {
                return Err(Error::DpFailed(format!(
                    "no convergence after {MAX_DP_SWEEPS} sweeps (residual {residual})"
                )));
            }
            let stopping_set = v
                .iter()
                .zip(gamma.iter())
                .map(|(&vv, &gg)| vv - gg <= STOPPING_SET_TOL)
                .collect();
            Ok(DPSolution {
                states: c.states.clone(),
                values: v,
                gamma,
                stopping_set,
                iterations,
                residual,
            })
        }
        ProcessSpec::Levy(_) => Err(Error::MethodInapplicable(
            "DP oracle needs a lattice walk or a finite chain".into(),
        )),
    }
}

/// Default DP domain around a threshold guess: 40 lattice units below,
/// 15 above, widened until the values at probe states stop moving.
pub fn dp_auto_domain(
    p: &ProblemSpec,
    x_bar_guess: f64,
    probes: &[f64],
    tol: f64,
) -> Result<(f64, f64)> {
    let unit = p
        .process
        .as_walk()
        .and_then(|w| w.lattice())
        .map(|l| l.unit)
        .unwrap_or(1.0);
    let mut lo = x_bar_guess - 40.0 * unit;
    let hi = x_bar_guess + 15.0 * unit;
    let mut prev: Option<DPSolution> = None;
    for _ in 0..5 {
        let sol = dp_value_iteration(p, (lo, hi), tol)?;
        if let Some(ps) = &prev {
            let sensitive = probes
                .iter()
                .any(|&q| match (sol.value_at(q), ps.value_at(q)) {
                    (Some(a), Some(b)) => (a - b).abs() > tol * 10.0,
                    _ => true,
                });
            if !sensitive {
                return Ok((lo, hi));
            }
        }
        prev = Some(sol);
        lo -= 8.0 * unit;
    }
    Ok((lo, hi))
}

// ---------------------------------------------------------------------------
// Identity checkers
// ---------------------------------------------------------------------------

/// Outcome of a representation-identity check; |z| ≤ 3 passes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub stderr: f64,
    pub z: f64,
    pub censored_fraction: f64,
}

impl IdentityReport {
    pub fn passes(&self) -> bool {
        self.z.abs() <= 3.0
    }
}

/// Telescoping ladder-sum identity for discrete processes:
///   E_x[γ(Y_{τ_y}) − Σ h(Y_i)] = γ(x) + E_x[Σ_{σ_n < τ_y} (φ − γ)(Y_{σ_n})].
/// The sum runs over ladder epochs strictly before τ_y; the inclusive
/// convention is exposed to document the off-by-one-ladder-step gap.
pub fn check_ladder_sum_identity(
    p: &ProblemSpec,
    x: f64,
    y: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
    convention: LadderConvention,
) -> Result<IdentityReport> {
    if x > y {
        return Err(Error::InvalidSpec(format!("need x ≤ y, got ({x}, {y})")));
    }
    let report = threshold_rule_report(p, y, Boundary::Strict, x, cfg, stream, convention)?;
    Ok(IdentityReport {
        lhs: report.direct,
        rhs: report.ladder_sum,
        residual: report.residual,
        stderr: report.residual_stderr,
        z: report.residual_z,
        censored_fraction: report.censored_fraction,
    })
}

/// Maximum representation for Lévy processes:
///   γ(x) = −E_x[∫₀^{τ_ȳ} f(sup X) dt] + E_x[γ(X_{τ_ȳ}) − ∫₀^{τ_ȳ} h dt],
/// checked pathwise against a supplied f.
pub fn check_max_representation_with(
    levy: &LevySpec,
    p: &ProblemSpec,
    x: f64,
    y_bar: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
    f: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<IdentityReport> {
    if x > y_bar {
        return Err(Error::InvalidSpec(format!(
            "need x ≤ ȳ, got ({x}, {y_bar})"
        )));
    }
    let engine = PassageEngine::for_levy(levy);
    let max_time = 200.0 * (y_bar - x).max(1.0) / levy.mean();
    let samples: Vec<Result<(f64, bool)>> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.derive_index(i as u64).rng();
            let s = engine.sample_passage(x, y_bar, &p.cost, Some(f), max_time, &mut rng)?;
            if s.censored {
                return Ok((0.0, true));
            }
            let rhs = -s.fsup_integral + p.gamma(s.terminal)? - s.cost_integral;
            Ok((rhs, false))
        })
        .collect();
    let mut rhs = Vec::with_capacity(cfg.paths);
    let mut censored = 0usize;
    for s in samples {
        let (v, c) = s?;
        if c {
            censored += 1;
        } else {
            rhs.push(v);
        }
    }
    let frac = censored as f64 / cfg.paths as f64;
    if frac > 0.10 {
        return Err(Error::EstimationFailed(format!(
            "{:.1}% of passage paths censored",
            100.0 * frac
        )));
    }
    let m = Moments::from_slice(&rhs);
    let lhs = p.gamma(x)?;
    let residual = m.mean - lhs;
    let stderr = m.stderr();
    Ok(IdentityReport {
        lhs,
        rhs: m.mean,
        residual,
        stderr,
        z: if stderr > 0.0 { residual / stderr } else { 0.0 },
        censored_fraction: frac,
    })
}

/// Builds f = A_Hγ − ĥ for the process and runs the maximum-representation
/// check with it.
pub fn check_max_representation(
    levy: &LevySpec,
    p: &ProblemSpec,
    x: f64,
    y_bar: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<IdentityReport> {
    let f = levy_f_closure(
        levy,
        p,
        x - 1.0,
        y_bar + 1.0,
        cfg,
        &stream.derive("f-closure"),
    )?;
    check_max_representation_with(levy, p, x, y_bar, cfg, stream, f.as_ref())
}

/// A cheap callable form of the Lévy threshold function on [lo, hi]:
/// analytic for the Brownian backend, grid interpolation of the
/// difference-quotient estimates otherwise.
pub fn levy_f_closure(
    levy: &LevySpec,
    p: &ProblemSpec,
    lo: f64,
    hi: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<Box<dyn Fn(f64) -> f64 + Sync + Send>> {
    match levy {
        LevySpec::BmDrift { mu, sigma } => {
            if let Some(c) = p.cost.as_constant() {
                let payoff = p.payoff.clone();
                let mu = *mu;
                Ok(Box::new(move |x: f64| {
                    mu * payoff.derivative(x).unwrap_or(f64::NAN) - c
                }))
            } else {
                // ĥ is smooth; tabulate once and interpolate.
                let n = 257;
                let step = (hi - lo) / (n - 1) as f64;
                let grid: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
                let vals: Vec<f64> = grid
                    .iter()
                    .map(|&u| hat_analytic_bm(*mu, *sigma, &p.cost, u))
                    .collect::<Result<_>>()?;
                let payoff = p.payoff.clone();
                let mu = *mu;
                Ok(Box::new(move |x: f64| {
                    let t = ((x - lo) / step).clamp(0.0, (n - 1) as f64);
                    let j = (t.floor() as usize).min(n - 2);
                    let w = t - j as f64;
                    let hat = vals[j] * (1.0 - w) + vals[j + 1] * w;
                    mu * payoff.derivative(x).unwrap_or(f64::NAN) - hat
                }))
            }
        }
        _ => {
            let n = 33;
            let step = (hi - lo) / (n - 1) as f64;
            let grid: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
            let vals: Vec<f64> = grid
                .par_iter()
                .enumerate()
                .map(|(i, &u)| {
                    crate::threshold::evaluate_f_levy(
                        levy,
                        p,
                        u,
                        cfg,
                        &stream.derive_index(i as u64),
                    )
                    .map(|(f, _)| f)
                })
                .collect::<Result<_>>()?;
            Ok(Box::new(move |x: f64| {
                let t = ((x - lo) / step).clamp(0.0, (n - 1) as f64);
                let j = (t.floor() as usize).min(n - 2);
                let w = t - j as f64;
                vals[j] * (1.0 - w) + vals[j + 1] * w
            }))
        }
    }
}

/// Direct continuum pricing of a threshold rule for a Lévy problem:
/// E[γ(X_τ) − ∫ h] for τ the first passage above `x_stop` from `y_start`.
pub fn levy_threshold_value(
    levy: &LevySpec,
    p: &ProblemSpec,
    y_start: f64,
    x_stop: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<(f64, f64, f64)> {
    if y_start >= x_stop {
        return Ok((p.gamma(y_start)?, 0.0, 0.0));
    }
    let engine = PassageEngine::for_levy(levy);
    let max_time = 200.0 * (x_stop - y_start).max(1.0) / levy.mean();
    let samples: Vec<Result<(f64, bool)>> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.derive_index(i as u64).rng();
            let s = engine.sample_passage(y_start, x_stop, &p.cost, None, max_time, &mut rng)?;
            if s.censored {
                return Ok((0.0, true));
            }
            Ok((p.gamma(s.terminal)? - s.cost_integral, false))
        })
        .collect();
    let mut vals = Vec::with_capacity(cfg.paths);
    let mut censored = 0usize;
    for s in samples {
        let (v, c) = s?;
        if c {
            censored += 1;
        } else {
            vals.push(v);
        }
    }
    let frac = censored as f64 / cfg.paths as f64;
    if frac > 0.10 {
        return Err(Error::EstimationFailed(format!(
            "{:.1}% of value paths censored",
            100.0 * frac
        )));
    }
    let m = Moments::from_slice(&vals);
    Ok((m.mean, m.stderr(), frac))
}
