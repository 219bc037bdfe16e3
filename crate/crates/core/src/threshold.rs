//! The threshold function f, its certification, root finding, and pricing of
//! threshold rules.
//!
//! f(y) = (φ(y) − γ(y)) / E_y(τ⁺): positive where waiting for the process to
//! exceed the present level beats stopping now. Under the certified
//! hypotheses (unique sign change, non-increasing past it) the root x̄ is the
//! optimal threshold; the entry boundary is strict, (x̄, ∞), when f(x̄) > 0
//! and non-strict, [x̄, ∞), when f(x̄) ≤ 0.
//!
//! The weighted variant f̃ divides by E_y Σ g(Y_i) instead, for a positive
//! weight g; it shares the root and is the form the spatial discretization
//! uses with g = real time per embedded step.
//!
//! For Lévy processes f = A_H γ − ĥ, the ladder-height generator applied to
//! γ minus the descending-ladder cost transform. For Brownian motion with
//! drift the ascending ladder height process is the pure drift μ·t (with the
//! first-passage time normalization), so A_H γ = μγ′.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{
    hat_analytic_bm, ladder_stats_exact_skipfree, ladder_stats_finite_chain, simulate_ladder_set,
    LadderPool, PhiGammaEval,
};
use crate::levy_sim::PassageEngine;
use crate::model::{LevySpec, MCConfig, ProblemSpec, ProcessSpec, StepDistribution};
use crate::rng::SeedStream;
use crate::stats::{ratio_stderr, z_for_level, Moments};

/// Fallback spatial step for the difference-quotient Lévy backend.
pub const DEFAULT_PASSAGE_DELTA: f64 = 0.25;

/// Path-budget multiplier ladder for CI-aware decisions (quadrupled twice).
const BOOST_LEVELS: [usize; 3] = [1, 4, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FVariant {
    Standard,
    Weighted,
    Levy,
}

/// Sampled threshold function on a grid with CI half-widths (0 for exact
/// backends).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FCurve {
    pub grid: Vec<f64>,
    pub f_values: Vec<f64>,
    pub ci_halfwidths: Vec<f64>,
    pub variant: FVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Enter (x̄, ∞).
    Strict,
    /// Enter [x̄, ∞).
    Nonstrict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Assumption2Status {
    Certified,
    Violated { pairs: Vec<(f64, f64)> },
    Inconclusive { indices: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Assumption2Report {
    #[serde(flatten)]
    pub status: Assumption2Status,
    /// Grid bracket containing the sign change, when one exists.
    pub sign_change: Option<(f64, f64)>,
}

/// The root of f with its boundary classification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Threshold {
    pub x_bar: f64,
    pub boundary: Boundary,
    pub f_at_root: f64,
    #[serde(rename = "ci")]
    pub f_ci: f64,
    pub assumption2: Assumption2Report,
    pub bracket: (f64, f64),
    /// True when the CI at the root straddled zero and the non-strict rule
    /// was applied by convention.
    pub boundary_inconclusive: bool,
}

// ---------------------------------------------------------------------------
// f evaluation
// ---------------------------------------------------------------------------

fn walk_is_skipfree_exact(w: &StepDistribution) -> bool {
    w.lattice().map(|l| l.is_skip_free_up()).unwrap_or(false) && w.mean() > 0.0
}

fn variant_for(p: &ProblemSpec) -> FVariant {
    if p.weight.is_unit() {
        FVariant::Standard
    } else {
        FVariant::Weighted
    }
}

fn evaluate_f_discrete(
    p: &ProblemSpec,
    y: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
    paths_override: Option<usize>,
) -> Result<(f64, f64)> {
    let weighted = !p.weight.is_unit();
    match &p.process {
        ProcessSpec::Walk(w) if walk_is_skipfree_exact(w) => {
            let st = ladder_stats_exact_skipfree(w, p, y)?;
            let denom = if weighted { st.e_weight } else { st.e_tau_plus };
            if !(denom > 0.0) {
                return Err(Error::IllConditionedRatio(format!(
                    "denominator {denom} at y = {y}"
                )));
            }
            Ok(((st.phi - p.gamma(y)?) / denom, 0.0))
        }
        ProcessSpec::Chain(c) => {
            let st = ladder_stats_finite_chain(c, p, y)?;
            let denom = if weighted { st.e_weight } else { st.e_tau_plus };
            if !(denom > 0.0) {
                return Err(Error::IllConditionedRatio(format!(
                    "denominator {denom} at y = {y}"
                )));
            }
            Ok(((st.phi - p.gamma(y)?) / denom, 0.0))
        }
        ProcessSpec::Walk(_) => {
            let mut mc = *cfg;
            if let Some(n) = paths_override {
                mc.paths = n;
            }
            let set = simulate_ladder_set(p, y, &mc, stream)?;
            let denom: &[f64] = if weighted { &set.weight } else { &set.tau };
            let (f, se) = ratio_stderr(&set.a, denom);
            let md = Moments::from_slice(denom);
            let z = z_for_level(cfg.ci_level);
            if md.mean - z * md.stderr() <= 0.0 {
                return Err(Error::IllConditionedRatio(format!(
                    "denominator CI contains 0 at y = {y}"
                )));
            }
            Ok((f, z * se))
        }
        ProcessSpec::Levy(_) => unreachable!("dispatched in evaluate_f"),
    }
}

/// Evaluate f (or the weighted f̃ when the problem carries a non-unit
/// weight) at y. Returns (f, CI half-width); exact backends give 0.
pub fn evaluate_f(
    p: &ProblemSpec,
    y: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<(f64, f64)> {
    match &p.process {
        ProcessSpec::Levy(l) => evaluate_f_levy(l, p, y, cfg, stream),
        _ => evaluate_f_discrete(p, y, cfg, stream, None),
    }
}

/// Lévy threshold function f = A_H γ − ĥ.
///
/// Brownian backend: analytic μγ′(x) − ĥ(x). Otherwise the difference
/// quotient over a first passage above x + δ, Richardson-extrapolated over
/// δ and δ/2.
pub fn evaluate_f_levy(
    levy: &LevySpec,
    p: &ProblemSpec,
    x: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<(f64, f64)> {
    levy.validate()?;
    match levy {
        LevySpec::BmDrift { mu, sigma } => {
            let f = mu * p.payoff.derivative(x)? - hat_analytic_bm(*mu, *sigma, &p.cost, x)?;
            Ok((f, 0.0))
        }
        _ => {
            let delta = cfg.levy_delta.unwrap_or(DEFAULT_PASSAGE_DELTA);
            let (f1, se1) =
                levy_f_difference_quotient(levy, p, x, delta, cfg, &stream.derive("fq1"))?;
            let (f2, se2) =
                levy_f_difference_quotient(levy, p, x, 0.5 * delta, cfg, &stream.derive("fq2"))?;
            // First-order Richardson: f ≈ 2 f_{δ/2} − f_δ.
            let f = 2.0 * f2 - f1;
            let se = (4.0 * se2 * se2 + se1 * se1).sqrt();
            Ok((f, se))
        }
    }
}

/// One-sided difference quotient [E_x γ(X_τ) − γ(x) − E_x ∫h] / E_x(τ) for
/// the passage above x + δ.
pub fn levy_f_difference_quotient(
    levy: &LevySpec,
    p: &ProblemSpec,
    x: f64,
    delta: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<(f64, f64)> {
    let engine = PassageEngine::for_levy(levy);
    let max_time = 200.0 * delta / levy.mean();
    let gamma_x = p.gamma(x)?;
    let samples: Vec<Result<(f64, f64, bool)>> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.derive_index(i as u64).rng();
            let s = engine.sample_passage(x, x + delta, &p.cost, None, max_time, &mut rng)?;
            if s.censored {
                return Ok((0.0, 0.0, true));
            }
            let num = p.gamma(s.terminal)? - gamma_x - s.cost_integral;
            Ok((num, s.duration, false))
        })
        .collect();
    let mut nums = Vec::with_capacity(cfg.paths);
    let mut durs = Vec::with_capacity(cfg.paths);
    let mut censored = 0usize;
    for s in samples {
        let (n, d, c) = s?;
        if c {
            censored += 1;
        } else {
            nums.push(n);
            durs.push(d);
        }
    }
    let frac = censored as f64 / cfg.paths as f64;
    if frac > 0.10 {
        return Err(Error::EstimationFailed(format!(
            "{:.1}% of first-passage paths censored",
            100.0 * frac
        )));
    }
    let (f, se) = ratio_stderr(&nums, &durs);
    Ok((f, z_for_level(cfg.ci_level) * se))
}

/// Evaluate f on a grid; grid points use disjoint substreams keyed by index
/// and run in parallel. Walks without the closed form share one pooled
/// ladder sample across all points (common random numbers).
pub fn build_fcurve(
    p: &ProblemSpec,
    grid: &[f64],
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<FCurve> {
    for w in grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidSpec(
                "f-curve grid must be strictly increasing".into(),
            ));
        }
    }
    let variant = match &p.process {
        ProcessSpec::Levy(_) => FVariant::Levy,
        _ => variant_for(p),
    };
    let use_pool = matches!(&p.process, ProcessSpec::Walk(w) if !walk_is_skipfree_exact(w));
    let pts: Vec<Result<(f64, f64)>> = if use_pool {
        let w = p.process.as_walk().unwrap();
        let pool = LadderPool::new(w, cfg.paths, cfg.max_steps, &stream.derive("fcurve-pool"))?;
        let weighted = !p.weight.is_unit();
        let z = z_for_level(cfg.ci_level);
        grid.iter()
            .map(|&y| {
                let set = pool.eval_set(p, y)?;
                let denom: &[f64] = if weighted { &set.weight } else { &set.tau };
                let (f, se) = ratio_stderr(&set.a, denom);
                Ok((f, z * se))
            })
            .collect()
    } else {
        grid.par_iter()
            .enumerate()
            .map(|(i, &y)| {
                let s = stream.derive("fcurve").derive_index(i as u64);
                evaluate_f(p, y, cfg, &s)
            })
            .collect()
    };
    let mut f_values = Vec::with_capacity(grid.len());
    let mut ci = Vec::with_capacity(grid.len());
    for r in pts {
        let (f, c) = r?;
        f_values.push(f);
        ci.push(c);
    }
    Ok(FCurve {
        grid: grid.to_vec(),
        f_values,
        ci_halfwidths: ci,
        variant,
    })
}

// ---------------------------------------------------------------------------
// Assumption-2 certification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RobustSign {
    Positive,
    Negative,
    Unknown,
}

fn robust_sign(f: f64, ci: f64) -> RobustSign {
    if f - ci > 0.0 {
        RobustSign::Positive
    } else if f + ci < 0.0 {
        RobustSign::Negative
    } else {
        RobustSign::Unknown
    }
}

/// Certify the threshold-function hypotheses on a sampled curve:
/// (i) exactly one CI-robust sign change (positive then negative),
/// (ii) f non-increasing past the change, up to CI slack.
pub fn validate_assumption2(curve: &FCurve) -> Result<Assumption2Report> {
    let n = curve.grid.len();
    if n < 2 {
        return Err(Error::InvalidSpec(
            "assumption-2 check needs ≥ 2 grid points".into(),
        ));
    }
    let signs: Vec<RobustSign> = curve
        .f_values
        .iter()
        .zip(curve.ci_halfwidths.iter())
        .map(|(&f, &c)| robust_sign(f, c))
        .collect();
    let last_pos = signs.iter().rposition(|&s| s == RobustSign::Positive);
    let first_neg = signs.iter().position(|&s| s == RobustSign::Negative);

    // Robust increase pairs (monotonicity violations) anywhere at or past the
    // first negative point, or globally when no sign change exists.
    let incr_pairs = |from: usize| -> Vec<(f64, f64)> {
        (from..n - 1)
            .filter(|&k| {
                curve.f_values[k + 1] - curve.f_values[k]
                    > curve.ci_halfwidths[k] + curve.ci_halfwidths[k + 1] + 1e-12
            })
            .map(|k| (curve.grid[k], curve.grid[k + 1]))
            .collect()
    };

    match (last_pos, first_neg) {
        (Some(lp), Some(fneg)) => {
            if fneg < lp {
                // Negative before a later positive: more than one sign change.
                return Ok(Assumption2Report {
                    status: Assumption2Status::Violated {
                        pairs: vec![(curve.grid[fneg], curve.grid[lp])],
                    },
                    sign_change: None,
                });
            }
            let pairs = incr_pairs(fneg);
            if !pairs.is_empty() {
                return Ok(Assumption2Report {
                    status: Assumption2Status::Violated { pairs },
                    sign_change: Some((curve.grid[lp], curve.grid[fneg])),
                });
            }
            let unknown: Vec<usize> = (0..n)
                .filter(|&k| signs[k] == RobustSign::Unknown && !(lp..=fneg).contains(&k))
                .collect();
            if unknown.len() * 10 > n * 3 {
                return Ok(Assumption2Report {
                    status: Assumption2Status::Inconclusive { indices: unknown },
                    sign_change: Some((curve.grid[lp], curve.grid[fneg])),
                });
            }
            Ok(Assumption2Report {
                status: Assumption2Status::Certified,
                sign_change: Some((curve.grid[lp], curve.grid[fneg])),
            })
        }
        (Some(_), None) => {
            // All-positive region: an increasing f can already falsify the
            // hypotheses; otherwise there is simply no bracket on this grid.
            let pairs = incr_pairs(0);
            if !pairs.is_empty() {
                Ok(Assumption2Report {
                    status: Assumption2Status::Violated { pairs },
                    sign_change: None,
                })
            } else {
                Err(Error::BracketNotFound(
                    "f is positive on the whole grid; extend it to the right".into(),
                ))
            }
        }
        (None, Some(_)) => Err(Error::BracketNotFound(
            "f is negative on the whole grid; extend it to the left".into(),
        )),
        (None, None) => Err(Error::BracketNotFound(
            "no CI-robust sign anywhere on the grid".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// CI-aware bisection
// ---------------------------------------------------------------------------

struct EvalRecord {
    y: f64,
    f: f64,
    ci: f64,
}

/// Evaluate with escalating path budget until the CI excludes zero.
/// Exact evaluations (ci = 0) are decided immediately; an exact zero is a
/// root hit.
enum SignDecision {
    Positive { f: f64, ci: f64 },
    Negative { f: f64, ci: f64 },
    ExactZero,
    Straddles,
}

fn decide_sign<E>(eval: &mut E, y: f64) -> Result<SignDecision>
where
    E: FnMut(f64, usize) -> Result<(f64, f64)>,
{
    for &boost in &BOOST_LEVELS {
        let (f, ci) = eval(y, boost)?;
        if ci == 0.0 {
            return Ok(if f > 0.0 {
                SignDecision::Positive { f, ci }
            } else if f < 0.0 {
                SignDecision::Negative { f, ci }
            } else {
                SignDecision::ExactZero
            });
        }
        match robust_sign(f, ci) {
            RobustSign::Positive => return Ok(SignDecision::Positive { f, ci }),
            RobustSign::Negative => return Ok(SignDecision::Negative { f, ci }),
            RobustSign::Unknown => continue,
        }
    }
    Ok(SignDecision::Straddles)
}

/// Boundary from f at the reported root. `slack` absorbs the O(tol)
/// placement error of the bracket midpoint for exact backends; the CI plays
/// that role for MC backends. A positive f within slack resolves to
/// non-strict by convention and is flagged (it matters on lattices, where
/// the two entry rules differ).
fn classify_boundary(f: f64, ci: f64, slack: f64) -> (Boundary, bool) {
    if f - ci > slack {
        (Boundary::Strict, false)
    } else if f + ci <= slack {
        (Boundary::Nonstrict, f > 0.0 && f - ci > 0.0)
    } else {
        (Boundary::Nonstrict, true)
    }
}

fn ci_bisect<E>(eval: &mut E, bracket: (f64, f64), tol: f64) -> Result<(Threshold, Vec<EvalRecord>)>
where
    E: FnMut(f64, usize) -> Result<(f64, f64)>,
{
    let (mut lo, mut hi) = bracket;
    if !(hi > lo) {
        return Err(Error::InvalidSpec("bracket must satisfy lo < hi".into()));
    }
    let mut records = Vec::new();
    match decide_sign(eval, lo)? {
        SignDecision::Positive { f, ci } => records.push(EvalRecord { y: lo, f, ci }),
        SignDecision::Negative { .. } => {
            return Err(Error::BracketNotFound(format!(
                "f({lo}) is negative, not positive"
            )))
        }
        SignDecision::ExactZero | SignDecision::Straddles => {
            return Err(Error::RootInconclusive { lo, hi })
        }
    }
    match decide_sign(eval, hi)? {
        SignDecision::Negative { f, ci } => records.push(EvalRecord { y: hi, f, ci }),
        // f exactly 0 at the right end still brackets the infimum of
        // {f ≤ 0}, which is the root the threshold rule needs.
        SignDecision::ExactZero => records.push(EvalRecord {
            y: hi,
            f: 0.0,
            ci: 0.0,
        }),
        SignDecision::Positive { .. } => {
            return Err(Error::BracketNotFound(format!(
                "f({hi}) is positive, not negative"
            )))
        }
        SignDecision::Straddles => return Err(Error::RootInconclusive { lo, hi }),
    }

    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        // A contested midpoint often IS the root (round-number roots land on
        // bracket midpoints); one off-center retry still shrinks the bracket
        // by a quarter before giving up.
        let mut contested = false;
        let mut split = mid;
        loop {
            match decide_sign(eval, split)? {
                SignDecision::Positive { f, ci } => {
                    records.push(EvalRecord { y: split, f, ci });
                    lo = split;
                    break;
                }
                SignDecision::Negative { f, ci } => {
                    records.push(EvalRecord { y: split, f, ci });
                    hi = split;
                    break;
                }
                SignDecision::ExactZero => {
                    records.push(EvalRecord {
                        y: split,
                        f: 0.0,
                        ci: 0.0,
                    });
                    hi = split;
                    break;
                }
                SignDecision::Straddles if !contested => {
                    contested = true;
                    split = mid + 0.25 * (hi - lo);
                }
                SignDecision::Straddles => return Err(Error::RootInconclusive { lo, hi }),
            }
        }
    }

    let x_bar = 0.5 * (lo + hi);
    let (f_root, ci_root) = eval(x_bar, *BOOST_LEVELS.last().unwrap())?;
    records.push(EvalRecord {
        y: x_bar,
        f: f_root,
        ci: ci_root,
    });
    // Exact backends: the midpoint misses the true root by O(tol), so f at
    // it is a signed epsilon; bound that by the f values over the final
    // bracket and classify against it.
    let slack = if ci_root == 0.0 {
        let (f_lo, _) = eval(lo, 1)?;
        let (f_hi, _) = eval(hi, 1)?;
        2.0 * f_lo.abs().max(f_hi.abs())
    } else {
        0.0
    };
    let (boundary, inconclusive) = classify_boundary(f_root, ci_root, slack);

    records.sort_by(|a, b| a.y.partial_cmp(&b.y).unwrap());
    records.dedup_by(|a, b| a.y == b.y);
    let curve = FCurve {
        grid: records.iter().map(|r| r.y).collect(),
        f_values: records.iter().map(|r| r.f).collect(),
        ci_halfwidths: records.iter().map(|r| r.ci).collect(),
        variant: FVariant::Standard,
    };
    let assumption2 = validate_assumption2(&curve).unwrap_or(Assumption2Report {
        status: Assumption2Status::Inconclusive { indices: vec![] },
        sign_change: None,
    });

    Ok((
        Threshold {
            x_bar,
            boundary,
            f_at_root: f_root,
            f_ci: ci_root,
            assumption2,
            bracket: (lo, hi),
            boundary_inconclusive: inconclusive,
        },
        records,
    ))
}

/// CI-aware bisection for the root of y ↦ f(y) on a bracket with
/// sign(f(lo)) > 0 > sign(f(hi)). Contested comparisons quadruple the path
/// budget (16× cap) before declaring the root inconclusive.
pub fn find_root(
    p: &ProblemSpec,
    bracket: (f64, f64),
    cfg: &MCConfig,
    tol: f64,
    stream: &SeedStream,
) -> Result<Threshold> {
    if !(tol > 0.0) {
        return Err(Error::InvalidSpec("tolerance must be positive".into()));
    }
    let mut call = 0u64;
    let mut eval = |y: f64, boost: usize| -> Result<(f64, f64)> {
        call += 1;
        let s = stream.derive("find-root").derive_index(call);
        match &p.process {
            ProcessSpec::Levy(l) => {
                let mut boosted = *cfg;
                boosted.paths = cfg.paths * boost;
                evaluate_f_levy(l, p, y, &boosted, &s)
            }
            _ => evaluate_f_discrete(p, y, cfg, &s, Some(cfg.paths * boost)),
        }
    };
    ci_bisect(&mut eval, bracket, tol).map(|(t, _)| t)
}

// ---------------------------------------------------------------------------
// Random-walk specialization (pooled common random numbers)
// ---------------------------------------------------------------------------

fn check_concave_on(p: &ProblemSpec, lo: f64, hi: f64) -> Result<()> {
    let grid = crate::model::ProbeGrid { lo, hi, count: 256 }.clamped_to(p.payoff.domain());
    let pts = grid.points();
    for w in pts.windows(3) {
        let g0 = p.gamma(w[0])?;
        let g1 = p.gamma(w[1])?;
        let g2 = p.gamma(w[2])?;
        let second = g2 - 2.0 * g1 + g0;
        if second > 1e-9 * (1.0 + g1.abs()) {
            return Err(Error::AssumptionViolated(format!(
                "payoff is not concave near {}",
                w[1]
            )));
        }
    }
    Ok(())
}

fn check_h_monotone(p: &ProblemSpec) -> Result<()> {
    let grid = crate::model::ProbeGrid::default().clamped_to(p.cost.domain());
    let mut prev: Option<f64> = None;
    for x in grid.points() {
        let hx = p.h(x)?;
        if hx < 0.0 {
            return Err(Error::AssumptionViolated(format!(
                "cost is negative at {x}"
            )));
        }
        if let Some(ph) = prev {
            if hx < ph - 1e-12 {
                return Err(Error::AssumptionViolated(format!(
                    "cost is decreasing near {x}"
                )));
            }
        }
        prev = Some(hx);
    }
    Ok(())
}

/// Threshold solver specialized to random walks: a single pooled ladder
/// sample is reused at every level (the ladder law of a walk does not depend
/// on the start), giving common random numbers across the bisection.
/// Auto-brackets by scanning an expanding grid.
pub fn random_walk_threshold(
    walk: &StepDistribution,
    p: &ProblemSpec,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<Threshold> {
    walk.validate()?;
    check_h_monotone(p)?;

    let exact = walk_is_skipfree_exact(walk);
    let mut pool = if exact {
        None
    } else {
        Some(LadderPool::new(
            walk,
            cfg.paths,
            cfg.max_steps,
            &stream.derive("rw-pool"),
        )?)
    };
    let weighted = !p.weight.is_unit();
    let z = z_for_level(cfg.ci_level);
    let mut pool_boost = 1usize;
    let mut eval = |y: f64, boost: usize| -> Result<(f64, f64)> {
        if exact {
            return evaluate_f_discrete(p, y, cfg, stream, None);
        }
        let pool_ref = pool.as_mut().unwrap();
        if boost > pool_boost {
            pool_ref.extend(cfg.paths * (boost - pool_boost))?;
            pool_boost = boost;
        }
        let set = pool_ref.eval_set(p, y)?;
        let denom: &[f64] = if weighted { &set.weight } else { &set.tau };
        let (f, se) = ratio_stderr(&set.a, denom);
        Ok((f, z * se))
    };

    // Expanding scan for a CI-robust sign change.
    let domain = p.payoff.domain();
    let mut half_range = 2.0f64;
    let bracket = loop {
        let lo_lim = domain.map(|d| d.0).unwrap_or(f64::NEG_INFINITY);
        let hi_lim = domain.map(|d| d.1).unwrap_or(f64::INFINITY);
        let lo = (-half_range).max(lo_lim);
        let hi = half_range.min(hi_lim);
        let n = 17;
        let step = (hi - lo) / (n - 1) as f64;
        let mut last_pos: Option<f64> = None;
        let mut first_neg: Option<f64> = None;
        for i in 0..n {
            let y = lo + step * i as f64;
            // Points whose ladder segments run off a lookup table are simply
            // not probeable; skip them in the search.
            let (f, ci) = match eval(y, 1) {
                Ok(v) => v,
                Err(Error::Extrapolation { .. }) => continue,
                Err(e) => return Err(e),
            };
            let exact_zero = ci == 0.0 && f == 0.0;
            match robust_sign(f, ci) {
                RobustSign::Positive => {
                    if first_neg.is_none() {
                        last_pos = Some(y);
                    }
                }
                RobustSign::Negative => {
                    if first_neg.is_none() && last_pos.is_some() {
                        first_neg = Some(y);
                    }
                }
                // A flat-zero tail after a positive region still pins the
                // root as the infimum of {f ≤ 0}.
                RobustSign::Unknown if exact_zero => {
                    if first_neg.is_none() && last_pos.is_some() {
                        first_neg = Some(y);
                    }
                }
                RobustSign::Unknown => {}
            }
        }
        if let (Some(a), Some(b)) = (last_pos, first_neg) {
            break (a, b);
        }
        half_range *= 2.0;
        if half_range > 4096.0 {
            return Err(Error::BracketNotFound(
                "no sign change of f found while expanding the scan range".into(),
            ));
        }
    };

    // Concavity is only required from the root region upward.
    check_concave_on(p, bracket.0, bracket.0.max(bracket.1) + 10.0)?;

    // Exact backends can push the bracket to fine tolerance; pooled MC stops
    // where the CI at near-root midpoints would start straddling zero.
    let tol = if exact { 1e-6 } else { 0.02 };
    ci_bisect(&mut eval, bracket, tol).map(|(t, _)| t)
}

// ---------------------------------------------------------------------------
// Threshold-rule pricing: direct simulation and the ladder-sum representation
// ---------------------------------------------------------------------------

/// Which ladder epochs enter the telescoping sum relative to the stopping
/// time. The strict convention (epochs before stopping) is the one that
/// closes the identity; the inclusive variant exists to document the gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LadderConvention {
    StrictlyBefore,
    Inclusive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub direct: f64,
    pub direct_stderr: f64,
    pub ladder_sum: f64,
    pub ladder_sum_stderr: f64,
    /// ladder_sum − direct, from pathwise pairing.
    pub residual: f64,
    pub residual_stderr: f64,
    pub residual_z: f64,
    pub censored_fraction: f64,
}

fn in_stopping_set(pos: f64, x_stop: f64, boundary: Boundary) -> bool {
    match boundary {
        Boundary::Strict => pos > x_stop,
        Boundary::Nonstrict => pos >= x_stop,
    }
}

struct RulePath {
    direct: f64,
    records: Vec<f64>,
    final_record: f64,
    censored: bool,
}

fn simulate_rule_paths(
    p: &ProblemSpec,
    x_stop: f64,
    boundary: Boundary,
    y_start: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<Vec<RulePath>> {
    match &p.process {
        ProcessSpec::Walk(w) => {
            let sampler = w.sampler();
            (0..cfg.paths)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream.derive_index(i as u64).rng();
                    let mut pos = y_start;
                    let mut max = y_start;
                    let mut cost = 0.0;
                    let mut records = vec![y_start];
                    for _ in 0..cfg.max_steps {
                        pos += sampler.sample(&mut rng);
                        cost += p.h(pos)?;
                        if in_stopping_set(pos, x_stop, boundary) {
                            return Ok(RulePath {
                                direct: p.gamma(pos)? - cost,
                                records,
                                final_record: pos,
                                censored: false,
                            });
                        }
                        if pos > max {
                            max = pos;
                            records.push(pos);
                        }
                    }
                    Ok(RulePath {
                        direct: 0.0,
                        records: vec![],
                        final_record: 0.0,
                        censored: true,
                    })
                })
                .collect()
        }
        ProcessSpec::Chain(c) => {
            let sampler = c.sampler();
            let start = c.state_index(y_start)?;
            (0..cfg.paths)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream.derive_index(i as u64).rng();
                    let mut idx = start;
                    let mut max = c.states[start];
                    let mut cost = 0.0;
                    let mut records = vec![c.states[start]];
                    for _ in 0..cfg.max_steps {
                        idx = sampler.step(idx, &mut rng);
                        let pos = c.states[idx];
                        cost += p.h(pos)?;
                        if in_stopping_set(pos, x_stop, boundary) {
                            return Ok(RulePath {
                                direct: p.gamma(pos)? - cost,
                                records,
                                final_record: pos,
                                censored: false,
                            });
                        }
                        if pos > max {
                            max = pos;
                            records.push(pos);
                        }
                    }
                    Ok(RulePath {
                        direct: 0.0,
                        records: vec![],
                        final_record: 0.0,
                        censored: true,
                    })
                })
                .collect()
        }
        ProcessSpec::Levy(_) => Err(Error::MethodInapplicable(
            "threshold-rule pricing by ladder sums is a discrete-process construct".into(),
        )),
    }
}

/// Price a threshold rule two ways: direct simulation of
/// E[γ(Y_τ) − Σ h(Y_i)], and the telescoping ladder sum
/// γ(y₀) + Σ_{records before τ} (φ − γ)(Y_σ). Their difference is reported
/// as an identity residual with a pathwise-paired z-score.
pub fn value_of_threshold(
    p: &ProblemSpec,
    x_stop: f64,
    boundary: Boundary,
    y_start: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<ValueEstimate> {
    threshold_rule_report(
        p,
        x_stop,
        boundary,
        y_start,
        cfg,
        stream,
        LadderConvention::StrictlyBefore,
    )
}

pub fn threshold_rule_report(
    p: &ProblemSpec,
    x_stop: f64,
    boundary: Boundary,
    y_start: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
    convention: LadderConvention,
) -> Result<ValueEstimate> {
    if in_stopping_set(y_start, x_stop, boundary) {
        let v = p.gamma(y_start)?;
        return Ok(ValueEstimate {
            direct: v,
            direct_stderr: 0.0,
            ladder_sum: v,
            ladder_sum_stderr: 0.0,
            residual: 0.0,
            residual_stderr: 0.0,
            residual_z: 0.0,
            censored_fraction: 0.0,
        });
    }
    let evaluator = PhiGammaEval::for_problem(p, cfg, &stream.derive("phi-eval"))?;
    let paths = simulate_rule_paths(p, x_stop, boundary, y_start, cfg, &stream.derive("paths"))?;

    let gamma_start = p.gamma(y_start)?;
    let mut cache: HashMap<u64, (f64, f64)> = HashMap::new();
    let mut phi_at = |y: f64| -> Result<(f64, f64)> {
        if let Some(&v) = cache.get(&y.to_bits()) {
            return Ok(v);
        }
        let v = evaluator.eval(y)?;
        cache.insert(y.to_bits(), v);
        Ok(v)
    };

    let mut direct = Vec::with_capacity(paths.len());
    let mut ladder = Vec::with_capacity(paths.len());
    let mut resid = Vec::with_capacity(paths.len());
    let mut pool_var_acc = Vec::with_capacity(paths.len());
    let mut censored = 0usize;
    for path in &paths {
        if path.censored {
            censored += 1;
            continue;
        }
        let mut sum = gamma_start;
        let mut pool_var = 0.0;
        for &r in &path.records {
            let (v, se) = phi_at(r)?;
            sum += v;
            pool_var += se * se;
        }
        if convention == LadderConvention::Inclusive {
            let (v, se) = phi_at(path.final_record)?;
            sum += v;
            pool_var += se * se;
        }
        direct.push(path.direct);
        ladder.push(sum);
        resid.push(sum - path.direct);
        pool_var_acc.push(pool_var);
    }
    let censored_fraction = censored as f64 / cfg.paths as f64;
    if censored_fraction > 0.10 {
        return Err(Error::EstimationFailed(format!(
            "{:.1}% of rule paths hit the step cap",
            100.0 * censored_fraction
        )));
    }

    let md = Moments::from_slice(&direct);
    let ml = Moments::from_slice(&ladder);
    let mr = Moments::from_slice(&resid);
    // Pooled φ estimates contribute variance that does not shrink with more
    // rule paths; fold an approximate term into the residual error.
    let pool_term = if pool_var_acc.is_empty() {
        0.0
    } else {
        (Moments::from_slice(&pool_var_acc).mean).sqrt()
    };
    let residual_stderr = (mr.stderr().powi(2) + pool_term.powi(2)).sqrt();
    let z = if mr.mean == 0.0 && residual_stderr == 0.0 {
        0.0
    } else {
        mr.mean / residual_stderr.max(1e-300)
    };
    Ok(ValueEstimate {
        direct: md.mean,
        direct_stderr: md.stderr(),
        ladder_sum: ml.mean,
        ladder_sum_stderr: (ml.stderr().powi(2) + pool_term.powi(2)).sqrt(),
        residual: mr.mean,
        residual_stderr,
        residual_z: z,
        censored_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostSpec, PayoffSpec, WeightSpec};

    fn skipfree_cap5(c: f64) -> ProblemSpec {
        ProblemSpec {
            process: ProcessSpec::Walk(StepDistribution::TwoPoint {
                p: 0.75,
                u: 1.0,
                d: 1.0,
            }),
            payoff: PayoffSpec::PiecewiseLinearCap { cap: 5.0 },
            cost: CostSpec::Constant { c },
            weight: WeightSpec::default(),
        }
    }

    fn cfg(paths: usize, seed: u64) -> MCConfig {
        MCConfig {
            paths,
            seed,
            max_steps: 100_000,
            ci_level: 0.99,
            levy_delta: None,
        }
    }

    #[test]
    fn f_exact_skipfree_examples() {
        let p = skipfree_cap5(0.1);
        let c = cfg(100, 0);
        let s = c.stream();
        let (f, ci) = evaluate_f(&p, 3.0, &c, &s).unwrap();
        assert_eq!(ci, 0.0);
        assert!((f - 0.4).abs() < 1e-12, "f(3) = {f}");
        let (f, _) = evaluate_f(&p, 4.9, &c, &s).unwrap();
        assert!((f + 0.05).abs() < 1e-12, "f(4.9) = {f}");
    }

    #[test]
    fn f_zero_for_constant_payoff_no_cost() {
        let p = ProblemSpec {
            process: ProcessSpec::Walk(StepDistribution::TwoPoint {
                p: 0.75,
                u: 1.0,
                d: 1.0,
            }),
            payoff: PayoffSpec::LookupTable {
                knots: vec![(-100.0, 2.0), (100.0, 2.0)],
            },
            cost: CostSpec::Constant { c: 0.0 },
            weight: WeightSpec::default(),
        };
        let c = cfg(100, 0);
        let (f, _) = evaluate_f(&p, 1.0, &c, &c.stream()).unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn f_levy_bm_softplus() {
        let levy = LevySpec::BmDrift {
            mu: 1.0,
            sigma: 1.0,
        };
        let p = ProblemSpec {
            process: ProcessSpec::Levy(levy.clone()),
            payoff: PayoffSpec::SoftplusConcave { a: 0.0, s: 1.0 },
            cost: CostSpec::Constant { c: 0.5 },
            weight: WeightSpec::default(),
        };
        let c = cfg(100, 0);
        let (f0, ci) = evaluate_f_levy(&levy, &p, 0.0, &c, &c.stream()).unwrap();
        assert_eq!(ci, 0.0);
        assert!(f0.abs() < 1e-12, "f(0) = {f0}");
        let (fm, _) = evaluate_f_levy(&levy, &p, -30.0, &c, &c.stream()).unwrap();
        assert!((fm - 0.5).abs() < 1e-9, "f(−∞) → {fm}");
        // γ′ ≡ 1 linear payoff: f ≡ μ with no cost.
        let p2 = ProblemSpec {
            process: ProcessSpec::Levy(LevySpec::BmDrift {
                mu: 2.0,
                sigma: 1.0,
            }),
            payoff: PayoffSpec::LookupTable {
                knots: vec![(-100.0, -100.0), (100.0, 100.0)],
            },
            cost: CostSpec::Constant { c: 0.0 },
            weight: WeightSpec::default(),
        };
        let (f2, _) = evaluate_f_levy(
            &LevySpec::BmDrift {
                mu: 2.0,
                sigma: 1.0,
            },
            &p2,
            0.7,
            &c,
            &c.stream(),
        )
        .unwrap();
        assert!((f2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn assumption2_certifies_skipfree_cap() {
        let p = skipfree_cap5(0.1);
        let c = cfg(100, 0);
        let grid: Vec<f64> = (0..=8).map(|k| k as f64).collect();
        let curve = build_fcurve(&p, &grid, &c, &c.stream()).unwrap();
        let rep = validate_assumption2(&curve).unwrap();
        assert_eq!(rep.status, Assumption2Status::Certified);
        let (a, b) = rep.sign_change.unwrap();
        assert_eq!((a, b), (4.0, 5.0));
    }

    #[test]
    fn assumption2_flags_convex_payoff() {
        // γ = e^x via a lookup table keeps the table-kind path honest.
        let knots: Vec<(f64, f64)> = (-30..=30).map(|k| (k as f64, (k as f64).exp())).collect();
        let p = ProblemSpec {
            process: ProcessSpec::Walk(StepDistribution::TwoPoint {
                p: 0.75,
                u: 1.0,
                d: 1.0,
            }),
            payoff: PayoffSpec::LookupTable { knots },
            cost: CostSpec::Constant { c: 0.0 },
            weight: WeightSpec::default(),
        };
        let c = cfg(100, 0);
        let grid: Vec<f64> = (0..=6).map(|k| k as f64).collect();
        let curve = build_fcurve(&p, &grid, &c, &c.stream()).unwrap();
        match validate_assumption2(&curve).unwrap().status {
            Assumption2Status::Violated { pairs } => assert!(!pairs.is_empty()),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn assumption2_flat_curve_has_no_bracket() {
        let curve = FCurve {
            grid: vec![0.0, 1.0, 2.0],
            f_values: vec![0.0; 3],
            ci_halfwidths: vec![0.0; 3],
            variant: FVariant::Standard,
        };
        assert!(matches!(
            validate_assumption2(&curve),
            Err(Error::BracketNotFound(_))
        ));
    }

    #[test]
    fn find_root_skipfree_exact() {
        let p = skipfree_cap5(0.1);
        let c = cfg(100, 0);
        let t = find_root(&p, (0.0, 8.0), &c, 1e-9, &c.stream()).unwrap();
        assert!((t.x_bar - 4.8).abs() < 1e-9, "x̄ = {}", t.x_bar);
        assert_eq!(t.boundary, Boundary::Nonstrict);
        assert!(t.f_at_root.abs() < 1e-9);
    }

    #[test]
    fn find_root_levy_bm() {
        let levy = LevySpec::BmDrift {
            mu: 1.0,
            sigma: 1.0,
        };
        let p = ProblemSpec {
            process: ProcessSpec::Levy(levy),
            payoff: PayoffSpec::SoftplusConcave { a: 0.0, s: 1.0 },
            cost: CostSpec::Constant { c: 0.5 },
            weight: WeightSpec::default(),
        };
        let c = cfg(100, 0);
        let t = find_root(&p, (-5.0, 5.0), &c, 1e-7, &c.stream()).unwrap();
        assert!(t.x_bar.abs() < 1e-6, "x̄ = {}", t.x_bar);
    }

    #[test]
    fn find_root_flat_f_inconclusive() {
        let p = ProblemSpec {
            process: ProcessSpec::Walk(StepDistribution::TwoPoint {
                p: 0.75,
                u: 1.0,
                d: 1.0,
            }),
            payoff: PayoffSpec::LookupTable {
                knots: vec![(-100.0, 1.0), (100.0, 1.0)],
            },
            cost: CostSpec::Constant { c: 0.0 },
            weight: WeightSpec::default(),
        };
        let c = cfg(100, 0);
        assert!(matches!(
            find_root(&p, (0.0, 4.0), &c, 1e-6, &c.stream()),
            Err(Error::RootInconclusive { .. })
        ));
    }

    #[test]
    fn weighted_variant_scales_f_only() {
        let mut p = skipfree_cap5(0.1);
        p.weight = WeightSpec::Constant { c: 2.5 };
        let c = cfg(100, 0);
        let base = skipfree_cap5(0.1);
        for y in [1.0, 3.0, 4.5, 6.0] {
            let (f, _) = evaluate_f(&base, y, &c, &c.stream()).unwrap();
            let (ft, _) = evaluate_f(&p, y, &c, &c.stream()).unwrap();
            assert!((ft - f / 2.5).abs() < 1e-12, "f̃ = f/κ failed at {y}");
        }
        let t = find_root(&base, (0.0, 8.0), &c, 1e-9, &c.stream()).unwrap();
        let tw = find_root(&p, (0.0, 8.0), &c, 1e-9, &c.stream()).unwrap();
        assert!((t.x_bar - tw.x_bar).abs() < 1e-9);
        assert_eq!(t.boundary, tw.boundary);
    }

    #[test]
    fn random_walk_threshold_skipfree() {
        let p = skipfree_cap5(0.1);
        let c = cfg(100, 0);
        let w = p.process.as_walk().unwrap().clone();
        let t = random_walk_threshold(&w, &p, &c, &c.stream()).unwrap();
        assert!((t.x_bar - 4.8).abs() < 1e-5, "x̄ = {}", t.x_bar);
        assert_eq!(t.boundary, Boundary::Nonstrict);
    }

    #[test]
    fn random_walk_threshold_zero_cost_root_at_cap() {
        // h ≡ 0: f(y) = (γ(y+1) − γ(y))/2 is positive below 5 and exactly 0
        // from 5 on; the root is the infimum of the zero set.
        let p = skipfree_cap5(0.0);
        let c = cfg(100, 0);
        let w = p.process.as_walk().unwrap().clone();
        let t = random_walk_threshold(&w, &p, &c, &c.stream()).unwrap();
        assert!((t.x_bar - 5.0).abs() < 1e-5, "x̄ = {}", t.x_bar);
        assert_eq!(t.boundary, Boundary::Nonstrict);
    }

    #[test]
    fn levy_backends_agree_on_softplus_instance() {
        // Analytic Brownian backend vs the difference-quotient estimator.
        let levy = LevySpec::BmDrift {
            mu: 1.0,
            sigma: 1.0,
        };
        let p = ProblemSpec {
            process: ProcessSpec::Levy(levy.clone()),
            payoff: PayoffSpec::SoftplusConcave { a: 0.0, s: 1.0 },
            cost: CostSpec::Constant { c: 0.5 },
            weight: WeightSpec::default(),
        };
        let c = MCConfig {
            paths: 30_000,
            seed: 88,
            max_steps: 100_000,
            ci_level: 0.99,
            levy_delta: Some(0.125),
        };
        for x in [-1.0, 0.0, 0.5] {
            let (exact, _) = evaluate_f_levy(&levy, &p, x, &c, &c.stream()).unwrap();
            let delta = c.levy_delta.unwrap();
            let (f1, ci1) =
                levy_f_difference_quotient(&levy, &p, x, delta, &c, &c.stream().derive("d1"))
                    .unwrap();
            let (f2, ci2) =
                levy_f_difference_quotient(&levy, &p, x, delta / 2.0, &c, &c.stream().derive("d2"))
                    .unwrap();
            let rich = 2.0 * f2 - f1;
            let ci = (4.0 * ci2 * ci2 + ci1 * ci1).sqrt();
            // Agreement within CI plus the O(δ²) Richardson remainder.
            let tol = ci + 0.5 * delta * delta;
            assert!(
                (rich - exact).abs() <= tol,
                "x={x}: quotient {rich} vs analytic {exact} (tol {tol})"
            );
        }
    }

    #[test]
    fn random_walk_threshold_rejects_convex_payoff() {
        let knots: Vec<(f64, f64)> = (-40..=40)
            .map(|k| (k as f64, (k as f64 / 4.0).exp()))
            .collect();
        let p = ProblemSpec {
            process: ProcessSpec::Walk(StepDistribution::TwoPoint {
                p: 0.75,
                u: 1.0,
                d: 1.0,
            }),
            payoff: PayoffSpec::LookupTable { knots },
            cost: CostSpec::Constant { c: 2.0 },
            weight: WeightSpec::default(),
        };
        let c = cfg(2_000, 0);
        let w = p.process.as_walk().unwrap().clone();
        let r = random_walk_threshold(&w, &p, &c, &c.stream());
        assert!(
            matches!(
                r,
                Err(Error::AssumptionViolated(_)) | Err(Error::BracketNotFound(_))
            ),
            "got {r:?}"
        );
    }

    #[test]
    fn gaussian_threshold_two_seeds_agree() {
        let p = ProblemSpec {
            process: ProcessSpec::Walk(StepDistribution::Gaussian { m: 1.0, s: 1.0 }),
            payoff: PayoffSpec::PiecewiseLinearCap { cap: 5.0 },
            cost: CostSpec::Constant { c: 0.05 },
            weight: WeightSpec::default(),
        };
        let w = p.process.as_walk().unwrap().clone();
        let c1 = cfg(60_000, 101);
        let c2 = cfg(60_000, 202);
        let t1 = random_walk_threshold(&w, &p, &c1, &c1.stream()).unwrap();
        let t2 = random_walk_threshold(&w, &p, &c2, &c2.stream()).unwrap();
        assert!(
            (t1.x_bar - t2.x_bar).abs() <= 0.05,
            "seeds disagree: {} vs {}",
            t1.x_bar,
            t2.x_bar
        );
    }

    #[test]
    fn value_of_threshold_worked_example() {
        let p = skipfree_cap5(0.1);
        let c = cfg(60_000, 12);
        let v = value_of_threshold(&p, 4.8, Boundary::Nonstrict, 0.0, &c, &c.stream()).unwrap();
        // Closed form: both routes give 4.
        assert!(
            (v.direct - 4.0).abs() <= 3.0 * v.direct_stderr,
            "direct {} ± {}",
            v.direct,
            v.direct_stderr
        );
        assert!(
            (v.ladder_sum - 4.0).abs() < 1e-9,
            "ladder sum {}",
            v.ladder_sum
        );
        assert!(v.residual.abs() <= 3.0 * v.residual_stderr.max(1e-12));
    }

    #[test]
    fn value_immediate_stop_above_threshold() {
        let p = skipfree_cap5(0.1);
        let c = cfg(100, 0);
        let v = value_of_threshold(&p, 4.8, Boundary::Nonstrict, 6.0, &c, &c.stream()).unwrap();
        assert_eq!(v.direct, 5.0);
        assert_eq!(v.ladder_sum, 5.0);
    }

    #[test]
    fn value_constant_payoff_no_cost() {
        let p = ProblemSpec {
            process: ProcessSpec::Walk(StepDistribution::TwoPoint {
                p: 0.75,
                u: 1.0,
                d: 1.0,
            }),
            payoff: PayoffSpec::LookupTable {
                knots: vec![(-200.0, 7.0), (200.0, 7.0)],
            },
            cost: CostSpec::Constant { c: 0.0 },
            weight: WeightSpec::default(),
        };
        let c = cfg(1_000, 3);
        let v = value_of_threshold(&p, 3.0, Boundary::Nonstrict, 0.0, &c, &c.stream()).unwrap();
        assert!((v.direct - 7.0).abs() < 1e-12);
        assert!((v.ladder_sum - 7.0).abs() < 1e-12);
    }

    #[test]
    fn dominance_of_root_threshold() {
        // The rule at x̄ = 4.8 beats every nearby grid threshold; common
        // random numbers make the lattice tie at 4.3 an exact equality.
        let p = skipfree_cap5(0.1);
        let c = cfg(60_000, 7777);
        let at_root =
            value_of_threshold(&p, 4.8, Boundary::Nonstrict, 0.0, &c, &c.stream()).unwrap();
        for other in [3.8, 4.3, 5.3, 5.8] {
            let v =
                value_of_threshold(&p, other, Boundary::Nonstrict, 0.0, &c, &c.stream()).unwrap();
            let slack = 3.0 * (at_root.direct_stderr.powi(2) + v.direct_stderr.powi(2)).sqrt();
            assert!(
                at_root.direct >= v.direct - slack.max(1e-12),
                "threshold {other} beat the root: {} vs {}",
                v.direct,
                at_root.direct
            );
        }
    }

    #[test]
    fn scale_invariance_of_root() {
        // Scaling h and γ − γ(x̄) by λ leaves the root and boundary unchanged.
        let lambda = 3.0;
        let base = skipfree_cap5(0.1);
        let c = cfg(100, 0);
        let t0 = find_root(&base, (0.0, 8.0), &c, 1e-9, &c.stream()).unwrap();
        let g_at_root = 4.8;
        // γ' = γ(x̄) + λ(γ − γ(x̄)) is piecewise linear with the same kink.
        let knots = vec![
            (-200.0, g_at_root + lambda * (-200.0 - g_at_root)),
            (5.0, g_at_root + lambda * (5.0 - g_at_root)),
            (200.0, g_at_root + lambda * (5.0 - g_at_root)),
        ];
        let scaled = ProblemSpec {
            process: base.process.clone(),
            payoff: PayoffSpec::LookupTable { knots },
            cost: CostSpec::Constant { c: 0.1 * lambda },
            weight: WeightSpec::default(),
        };
        let t1 = find_root(&scaled, (0.0, 8.0), &c, 1e-9, &c.stream()).unwrap();
        assert!(
            (t0.x_bar - t1.x_bar).abs() < 1e-9,
            "{} vs {}",
            t0.x_bar,
            t1.x_bar
        );
        assert_eq!(t0.boundary, t1.boundary);
        // And f itself scales by λ.
        let (f0, _) = evaluate_f(&base, 2.0, &c, &c.stream()).unwrap();
        let (f1, _) = evaluate_f(&scaled, 2.0, &c, &c.stream()).unwrap();
        assert!((f1 - lambda * f0).abs() < 1e-9);
    }
}
