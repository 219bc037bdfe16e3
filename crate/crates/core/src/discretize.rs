//! Dyadic discretizations of a Lévy stopping problem.
//!
//! Two suitable schemes, both producing an embedded discrete problem that the
//! threshold machinery solves as-is:
//! - time: observe X on the grid k·2⁻ⁿ; the embedded walk steps by Lévy
//!   increments and the per-step cost is ⌈h⌉ₙ(x) = E_x ∫₀^{2⁻ⁿ} h(X_s) ds;
//! - spatial: observe X at exits of ±2⁻ⁿ cells; for continuous paths the
//!   embedded walk is upward-skip-free by construction, the per-step cost is
//!   the expected running cost over one cell exit, and the weighted variant
//!   f̃ with g = real exit duration reproduces the Lévy threshold function in
//!   the limit.
//!
//! Values of the embedded problems increase to the continuum value and their
//! stopping sets shrink to the continuum one; the report tracks thresholds,
//! probe values, and the residuals |f_n − (A_Hγ − ĥ)| per level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::hat_analytic_bm;
use crate::levy_sim::seg_cost;
use crate::model::{
    CostSpec, JumpLaw, LevySpec, MCConfig, ProbeGrid, ProblemSpec, ProcessSpec, StepDistribution,
    WeightSpec,
};
use crate::oracle::{bm_green_expected_cost, bm_interval_green_cost, bm_scale_exit};
use crate::rng::SeedStream;
use crate::threshold::{
    evaluate_f, evaluate_f_levy, find_root, levy_f_difference_quotient, random_walk_threshold,
    value_of_threshold, Threshold, ValueEstimate,
};

/// Payoff/cost bound for the time scheme's probe check; beyond this the
/// scheme's standing boundedness assumption is treated as failed.
const BOUNDEDNESS_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Time,
    Spatial,
}

/// One level of a discretization: the embedded discrete problem plus the
/// real-time bookkeeping needed to interpret it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddedWalk {
    pub level: u32,
    pub scheme: Scheme,
    /// 2⁻ⁿ: the time step (time scheme) or grid step (spatial scheme).
    pub delta: f64,
    /// Expected real duration of one embedded step.
    pub real_time_per_step: f64,
    /// Set when jump overshoots were snapped to the nearest grid point.
    pub grid_snap_bias: bool,
    /// The embedded discrete problem (walk process, ⌈h⌉ₙ cost, duration
    /// weight for the spatial scheme).
    pub problem: ProblemSpec,
}

fn check_bounded_probes(p: &ProblemSpec) -> Result<()> {
    let grid = ProbeGrid::default()
        .clamped_to(p.payoff.domain())
        .clamped_to(p.cost.domain());
    for x in grid.points() {
        if p.payoff.eval(x)?.abs() > BOUNDEDNESS_LIMIT || p.h(x)?.abs() > BOUNDEDNESS_LIMIT {
            return Err(Error::MethodInapplicable(format!(
                "payoff/cost probe at {x} exceeds the boundedness limit"
            )));
        }
    }
    Ok(())
}

/// E_x ∫₀^dt h(X_s) ds for Brownian motion, by quadrature over time and the
/// Gaussian marginal.
fn bm_step_cost(mu: f64, sigma: f64, x: f64, dt: f64, h: &CostSpec) -> f64 {
    let inner = |s: f64| -> f64 {
        if s <= 0.0 {
            return h.eval_clamped(x);
        }
        let sd = sigma * s.sqrt();
        let m = x + mu * s;
        crate::quad::adaptive_simpson(
            &|z: f64| {
                let phi = (-(0.5) * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                phi * h.eval_clamped(m + sd * z)
            },
            -8.0,
            8.0,
            1e-9,
        )
    };
    crate::quad::adaptive_simpson(&inner, 0.0, dt, 1e-9 * dt.max(1e-6))
}

fn cost_table_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| lo + step * k as f64).collect()
}

/// Dyadic time grid embedding: Yⁿ_k = X_{k/2ⁿ}.
pub fn build_time_discretization(
    levy: &LevySpec,
    p: &ProblemSpec,
    n: u32,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<EmbeddedWalk> {
    levy.validate()?;
    check_bounded_probes(p)?;
    let dt = 0.5f64.powi(n as i32);

    let process = match levy {
        LevySpec::BmDrift { mu, sigma } => ProcessSpec::Walk(StepDistribution::Gaussian {
            m: mu * dt,
            s: sigma * dt.sqrt(),
        }),
        _ => ProcessSpec::Walk(StepDistribution::LevyIncrement {
            levy: levy.clone(),
            dt,
        }),
    };

    let cost = match p.cost.as_constant() {
        Some(c) => CostSpec::Constant { c: c * dt },
        None => {
            let grid = cost_table_grid(-32.0, 32.0, 0.25);
            let knots: Vec<(f64, f64)> = match levy {
                LevySpec::BmDrift { mu, sigma } => grid
                    .iter()
                    .map(|&x| (x, bm_step_cost(*mu, *sigma, x, dt, &p.cost)))
                    .collect(),
                LevySpec::CppDrift { drift, rate, jump } => {
                    let s = stream.derive("ceil-h");
                    grid.iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let mut rng = s.derive_index(i as u64).rng();
                            let m = (cfg.paths / 20).max(500);
                            let mut acc = 0.0;
                            for _ in 0..m {
                                acc += cpp_step_cost_sample(
                                    *drift, *rate, jump, x, dt, &p.cost, &mut rng,
                                );
                            }
                            (x, acc / m as f64)
                        })
                        .collect()
                }
                LevySpec::JumpDiffusion { .. } => {
                    let s = stream.derive("ceil-h");
                    let sub = 16usize;
                    grid.iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let mut rng = s.derive_index(i as u64).rng();
                            let m = (cfg.paths / 20).max(500);
                            let mut acc = 0.0;
                            for _ in 0..m {
                                let mut pos = x;
                                for _ in 0..sub {
                                    pos += levy.sample_increment(dt / sub as f64, &mut rng);
                                    acc += p.cost.eval_clamped(pos) * dt / sub as f64;
                                }
                            }
                            (x, acc / m as f64)
                        })
                        .collect()
                }
            };
            CostSpec::LookupTable { knots }
        }
    };

    Ok(EmbeddedWalk {
        level: n,
        scheme: Scheme::Time,
        delta: dt,
        real_time_per_step: dt,
        grid_snap_bias: false,
        problem: ProblemSpec {
            process,
            payoff: p.payoff.clone(),
            cost,
            weight: WeightSpec::default(),
        },
    })
}

fn cpp_step_cost_sample(
    drift: f64,
    rate: f64,
    jump: &JumpLaw,
    x: f64,
    dt: f64,
    h: &CostSpec,
    rng: &mut crate::rng::CounterRng,
) -> f64 {
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};
    let n = if rate > 0.0 {
        Poisson::new(rate * dt).unwrap().sample(rng) as usize
    } else {
        0
    };
    let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * dt).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut pos = x;
    let mut t0 = 0.0;
    let mut acc = 0.0;
    for tj in times {
        acc += seg_cost(h, pos, drift, tj - t0);
        pos += drift * (tj - t0) + jump.sample(rng);
        t0 = tj;
    }
    acc + seg_cost(h, pos, drift, dt - t0)
}

/// Dyadic spatial embedding: observe X at exits of (x − δ, x + δ) cells with
/// δ = 2⁻ⁿ. Continuous paths give an exactly skip-free two-point walk with
/// closed-form exit data; jump processes fall back to Monte-Carlo exit
/// triples with overshoots snapped to the grid.
pub fn build_spatial_discretization(
    levy: &LevySpec,
    p: &ProblemSpec,
    n: u32,
    range: (f64, f64),
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<EmbeddedWalk> {
    levy.validate()?;
    if !(range.0 < range.1) {
        return Err(Error::InvalidSpec(
            "spatial range must satisfy lo < hi".into(),
        ));
    }
    let delta = 0.5f64.powi(n as i32);
    match levy {
        LevySpec::BmDrift { mu, sigma } => {
            let (p_up, e_dur) = bm_scale_exit(*mu, *sigma, -delta, delta, 0.0)?;
            let cost = match p.cost.as_constant() {
                Some(c) => CostSpec::Constant { c: c * e_dur },
                None => {
                    let knots: Vec<(f64, f64)> =
                        cost_table_grid(range.0 - 16.0, range.1 + 2.0, delta)
                            .iter()
                            .map(|&x| {
                                bm_interval_green_cost(
                                    *mu,
                                    *sigma,
                                    x - delta,
                                    x + delta,
                                    x,
                                    &p.cost,
                                )
                                .map(|v| (x, v))
                            })
                            .collect::<Result<_>>()?;
                    CostSpec::LookupTable { knots }
                }
            };
            Ok(EmbeddedWalk {
                level: n,
                scheme: Scheme::Spatial,
                delta,
                real_time_per_step: e_dur,
                grid_snap_bias: false,
                problem: ProblemSpec {
                    process: ProcessSpec::Walk(StepDistribution::TwoPoint {
                        p: p_up,
                        u: delta,
                        d: delta,
                    }),
                    payoff: p.payoff.clone(),
                    cost,
                    weight: WeightSpec::Constant { c: e_dur },
                },
            })
        }
        _ => {
            let c = p.cost.as_constant().ok_or_else(|| {
                Error::MethodInapplicable(
                    "spatial scheme for jump processes supports constant costs only".into(),
                )
            })?;
            let (steps, mean_dur, snapped) =
                mc_exit_triples(levy, delta, cfg, &stream.derive("exit-triples"))?;
            Ok(EmbeddedWalk {
                level: n,
                scheme: Scheme::Spatial,
                delta,
                real_time_per_step: mean_dur,
                grid_snap_bias: snapped,
                problem: ProblemSpec {
                    process: ProcessSpec::Walk(StepDistribution::LatticePmf { steps }),
                    payoff: p.payoff.clone(),
                    cost: CostSpec::Constant { c: c * mean_dur },
                    weight: WeightSpec::Constant { c: mean_dur },
                },
            })
        }
    }
}

/// Estimate the cell-exit law of a spatially homogeneous jump process:
/// (snapped landing pmf, mean exit duration, snap flag).
fn mc_exit_triples(
    levy: &LevySpec,
    delta: f64,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<(Vec<(f64, f64)>, f64, bool)> {
    use std::collections::BTreeMap;
    let n = cfg.paths.max(1_000);
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut total_dur = 0.0;
    let mut snapped = false;
    let max_time = 1_000.0 * delta / levy.mean().abs().max(1e-6);
    for i in 0..n {
        let mut rng = stream.derive_index(i as u64).rng();
        let (exit_pos, dur) = simulate_cell_exit(levy, delta, max_time, &mut rng)?;
        let mut k = (exit_pos / delta).round() as i64;
        if k == 0 {
            k = if exit_pos >= 0.0 { 1 } else { -1 };
        }
        if (exit_pos - k as f64 * delta).abs() > 1e-12 * delta.max(1.0) {
            snapped = true;
        }
        *counts.entry(k).or_insert(0) += 1;
        total_dur += dur;
    }
    let steps: Vec<(f64, f64)> = counts
        .into_iter()
        .map(|(k, c)| (k as f64 * delta, c as f64 / n as f64))
        .collect();
    Ok((steps, total_dur / n as f64, snapped))
}

fn simulate_cell_exit(
    levy: &LevySpec,
    delta: f64,
    max_time: f64,
    rng: &mut crate::rng::CounterRng,
) -> Result<(f64, f64)> {
    use rand_distr::{Distribution, Exp};
    match levy {
        LevySpec::CppDrift { drift, rate, jump } => {
            let exp = if *rate > 0.0 {
                Some(Exp::new(*rate).map_err(|e| Error::OracleFailed(format!("exp: {e}")))?)
            } else {
                None
            };
            let mut pos = 0.0;
            let mut t = 0.0;
            loop {
                let to_jump = exp.as_ref().map(|e| e.sample(rng)).unwrap_or(f64::INFINITY);
                if *drift != 0.0 {
                    let target = if *drift > 0.0 { delta } else { -delta };
                    let s_cross = (target - pos) / drift;
                    if s_cross >= 0.0 && s_cross <= to_jump {
                        return Ok((target, t + s_cross));
                    }
                }
                if t + to_jump > max_time {
                    return Err(Error::EstimationFailed(
                        "cell exit simulation exceeded the time cap".into(),
                    ));
                }
                t += to_jump;
                pos += drift * to_jump + jump.sample(rng);
                if pos >= delta || pos <= -delta {
                    return Ok((pos, t));
                }
            }
        }
        LevySpec::JumpDiffusion { .. } => {
            let dt = crate::levy_sim::DEFAULT_SKELETON_DT.min(delta * delta / 16.0);
            let mut pos = 0.0;
            let mut t = 0.0;
            while t < max_time {
                pos += levy.sample_increment(dt, rng);
                t += dt;
                if pos >= delta || pos <= -delta {
                    return Ok((pos, t));
                }
            }
            Err(Error::EstimationFailed(
                "cell exit simulation exceeded the time cap".into(),
            ))
        }
        LevySpec::BmDrift { .. } => unreachable!("closed form used for Brownian cells"),
    }
}

// ---------------------------------------------------------------------------
// Level solves and the convergence report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeValue {
    pub probe: f64,
    /// Start point after snapping onto the level grid (spatial scheme).
    pub snapped: f64,
    pub value: ValueEstimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSolution {
    pub level: u32,
    pub delta: f64,
    /// None when f < 0 everywhere at this level (immediate stopping).
    pub threshold: Option<Threshold>,
    pub probe_values: Vec<ProbeValue>,
    pub grid_snap_bias: bool,
}

/// Solve one embedded level: threshold via the random-walk machinery (the
/// spatial scheme runs the duration-weighted variant f̃ through its weight),
/// then probe values via both pricing routes.
pub fn solve_level(
    walk: &EmbeddedWalk,
    probes: &[f64],
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<LevelSolution> {
    let dist = walk
        .problem
        .process
        .as_walk()
        .ok_or_else(|| Error::InvalidSpec("embedded problem lost its walk process".into()))?
        .clone();
    let threshold = match random_walk_threshold(&dist, &walk.problem, cfg, &stream.derive("thr")) {
        Ok(t) => Some(t),
        // A contested bracket still pins the level root; keep the midpoint
        // with the bracket as its uncertainty and flag it.
        Err(Error::RootInconclusive { lo, hi }) => Some(Threshold {
            x_bar: 0.5 * (lo + hi),
            boundary: crate::threshold::Boundary::Nonstrict,
            f_at_root: 0.0,
            f_ci: 0.0,
            assumption2: crate::threshold::Assumption2Report {
                status: crate::threshold::Assumption2Status::Inconclusive { indices: vec![] },
                sign_change: Some((lo, hi)),
            },
            bracket: (lo, hi),
            boundary_inconclusive: true,
        }),
        Err(Error::BracketNotFound(_)) => {
            // Distinguish "stopping dominates everywhere" from a genuine
            // bracketing failure by probing f at the requested points.
            let all_negative = probes.iter().all(|&q| {
                evaluate_f(&walk.problem, q, cfg, &stream.derive("probe-f"))
                    .map(|(f, ci)| f + ci < 0.0)
                    .unwrap_or(false)
            });
            if all_negative {
                None
            } else {
                return Err(Error::BracketNotFound(format!(
                    "level {}: no sign change and f is not negative at the probes",
                    walk.level
                )));
            }
        }
        Err(e) => return Err(e),
    };

    let mut probe_values = Vec::with_capacity(probes.len());
    for (i, &probe) in probes.iter().enumerate() {
        let snapped = match walk.scheme {
            Scheme::Spatial => (probe / walk.delta).floor() * walk.delta,
            Scheme::Time => probe,
        };
        let value = match &threshold {
            Some(t) => value_of_threshold(
                &walk.problem,
                t.x_bar,
                t.boundary,
                snapped,
                cfg,
                &stream.derive("value").derive_index(i as u64),
            )?,
            None => {
                let v = walk.problem.gamma(snapped)?;
                ValueEstimate {
                    direct: v,
                    direct_stderr: 0.0,
                    ladder_sum: v,
                    ladder_sum_stderr: 0.0,
                    residual: 0.0,
                    residual_stderr: 0.0,
                    residual_z: 0.0,
                    censored_fraction: 0.0,
                }
            }
        };
        probe_values.push(ProbeValue {
            probe,
            snapped,
            value,
        });
    }
    Ok(LevelSolution {
        level: walk.level,
        delta: walk.delta,
        threshold,
        probe_values,
        grid_snap_bias: walk.grid_snap_bias,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscretizationReport {
    pub scheme: Scheme,
    pub levels: Vec<u32>,
    pub deltas: Vec<f64>,
    pub thresholds: Vec<Option<f64>>,
    pub probes: Vec<f64>,
    /// Probe values indexed by level, then probe.
    pub values: Vec<Vec<ProbeValue>>,
    /// |f_n − (A_Hγ − ĥ)| per level and probe (Brownian backend only).
    pub f_residuals: Vec<Vec<Option<f64>>>,
    pub monotone_values_ok: bool,
    pub monotone_thresholds_ok: bool,
    pub limit_estimate: Option<f64>,
    pub estimated_order: Option<f64>,
    /// Continuum threshold from the Lévy backend, when available.
    pub continuum_x_bar: Option<f64>,
    pub notes: Vec<String>,
}

fn richardson(thresholds: &[f64]) -> (Option<f64>, Option<f64>) {
    let k = thresholds.len();
    if k < 2 {
        return (None, None);
    }
    let d_last = thresholds[k - 1] - thresholds[k - 2];
    let mut order = 1.0;
    let mut estimated = None;
    if k >= 3 {
        let d_prev = thresholds[k - 2] - thresholds[k - 3];
        if d_last != 0.0 && d_prev / d_last > 0.0 {
            order = (d_prev / d_last).log2();
            estimated = Some(order);
        }
    }
    let denom = 2.0f64.powf(order) - 1.0;
    if denom <= 0.0 {
        return (None, estimated);
    }
    (Some(thresholds[k - 1] + d_last / denom), estimated)
}

/// Continuum threshold for the Lévy problem by expanding-scan bisection on
/// the analytic or difference-quotient f.
pub fn continuum_threshold(
    levy: &LevySpec,
    p: &ProblemSpec,
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<Threshold> {
    let levy_problem = ProblemSpec {
        process: ProcessSpec::Levy(levy.clone()),
        payoff: p.payoff.clone(),
        cost: p.cost.clone(),
        weight: WeightSpec::default(),
    };
    // The analytic Brownian f bisects to fine tolerance; MC
    // difference-quotient backends stop where near-root estimates would
    // start straddling zero.
    let tol = match levy {
        LevySpec::BmDrift { .. } => 1e-7,
        _ => 0.05,
    };
    let mut half = 2.0f64;
    loop {
        let (lo, hi) = (-half, half);
        let f_lo = evaluate_f_levy(levy, &levy_problem, lo, cfg, &stream.derive("scan-lo"))?;
        let f_hi = evaluate_f_levy(levy, &levy_problem, hi, cfg, &stream.derive("scan-hi"))?;
        if f_lo.0 - f_lo.1 > 0.0 && f_hi.0 + f_hi.1 < 0.0 {
            return find_root(&levy_problem, (lo, hi), cfg, tol, stream);
        }
        half *= 2.0;
        if half > 512.0 {
            return Err(Error::BracketNotFound(
                "no sign change of the Lévy threshold function".into(),
            ));
        }
    }
}

/// Run a level sequence, check V_n monotone in n and thresholds monotone
/// toward the continuum value, and extrapolate the limit.
#[allow(clippy::too_many_arguments)]
pub fn solve_sequence(
    levy: &LevySpec,
    p: &ProblemSpec,
    scheme: Scheme,
    n_list: &[u32],
    probes: &[f64],
    range: (f64, f64),
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<DiscretizationReport> {
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidSpec(
            "levels must be strictly increasing".into(),
        ));
    }
    let mut notes = Vec::new();
    let mut levels = Vec::new();
    let mut deltas = Vec::new();
    let mut thresholds = Vec::new();
    let mut values = Vec::new();
    let mut brackets = Vec::new();
    for &n in n_list {
        let s = stream.derive("level").derive_index(n as u64);
        let walk = match scheme {
            Scheme::Time => build_time_discretization(levy, p, n, cfg, &s)?,
            Scheme::Spatial => build_spatial_discretization(levy, p, n, range, cfg, &s)?,
        };
        let sol = solve_level(&walk, probes, cfg, &s)?;
        levels.push(n);
        deltas.push(sol.delta);
        thresholds.push(sol.threshold.as_ref().map(|t| t.x_bar));
        brackets.push(sol.threshold.as_ref().map(|t| t.bracket));
        if sol.grid_snap_bias {
            notes.push(format!("level {n}: jump overshoots snapped to the grid"));
        }
        values.push(sol.probe_values);
    }

    // V_n non-decreasing in n at every probe, within 3 pooled stderr.
    let mut monotone_values_ok = true;
    for pi in 0..probes.len() {
        for li in 1..values.len() {
            let a = &values[li - 1][pi].value;
            let b = &values[li][pi].value;
            let slack = 3.0 * (a.direct_stderr.powi(2) + b.direct_stderr.powi(2)).sqrt();
            if b.direct < a.direct - slack {
                monotone_values_ok = false;
                notes.push(format!(
                    "V_n at probe {} drops from {} to {} between levels {} and {}",
                    probes[pi],
                    a.direct,
                    b.direct,
                    levels[li - 1],
                    levels[li]
                ));
            }
        }
    }

    // Thresholds non-decreasing (stopping sets nest) within bracket slack.
    let mut monotone_thresholds_ok = true;
    let known: Vec<(usize, f64)> = thresholds
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|v| (i, v)))
        .collect();
    for w in known.windows(2) {
        let (i0, x0) = w[0];
        let (i1, x1) = w[1];
        let slack = brackets[i0]
            .map(|b| b.1 - b.0)
            .unwrap_or(0.0)
            .max(brackets[i1].map(|b| b.1 - b.0).unwrap_or(0.0))
            + 1e-9;
        if x1 < x0 - slack {
            monotone_thresholds_ok = false;
            notes.push(format!(
                "threshold drops from {x0} to {x1} between levels {} and {}",
                levels[i0], levels[i1]
            ));
        }
    }

    let known_values: Vec<f64> = known.iter().map(|&(_, v)| v).collect();
    let (limit_estimate, estimated_order) = richardson(&known_values);

    let continuum_x_bar = continuum_threshold(levy, p, cfg, &stream.derive("continuum"))
        .ok()
        .map(|t| t.x_bar);

    // Analytic f_n residuals for the Brownian backend.
    let f_residuals: Vec<Vec<Option<f64>>> = match levy {
        LevySpec::BmDrift { mu, sigma } => levels
            .iter()
            .zip(deltas.iter())
            .map(|(_, &d)| {
                probes
                    .iter()
                    .map(|&x| spatial_fn_residual(*mu, *sigma, p, x, d).ok())
                    .collect()
            })
            .collect(),
        _ => {
            notes.push("f_n residuals reported analytically only for the Brownian backend".into());
            vec![vec![None; probes.len()]; levels.len()]
        }
    };

    Ok(DiscretizationReport {
        scheme,
        levels,
        deltas,
        thresholds,
        probes: probes.to_vec(),
        values,
        f_residuals,
        monotone_values_ok,
        monotone_thresholds_ok,
        limit_estimate,
        estimated_order,
        continuum_x_bar,
        notes,
    })
}

/// Exact spatial f_n for the Brownian backend:
/// f_n(x) = [γ(x+δ) − γ(x) − E_x ∫₀^{τ_{x+δ}} h] · μ/δ
/// (the real time to the embedded walk's ladder epoch is δ/μ by Wald).
pub fn spatial_fn_exact(mu: f64, sigma: f64, p: &ProblemSpec, x: f64, delta: f64) -> Result<f64> {
    let num = p.gamma(x + delta)?
        - p.gamma(x)?
        - bm_green_expected_cost(mu, sigma, x, x + delta, &p.cost)?;
    Ok(num * mu / delta)
}

fn spatial_fn_residual(mu: f64, sigma: f64, p: &ProblemSpec, x: f64, delta: f64) -> Result<f64> {
    let f_n = spatial_fn_exact(mu, sigma, p, x, delta)?;
    let limit = mu * p.payoff.derivative(x)? - hat_analytic_bm(mu, sigma, &p.cost, x)?;
    Ok((f_n - limit).abs())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FnResidual {
    pub level: u32,
    pub delta: f64,
    pub probe: f64,
    pub f_n: f64,
    pub f_n_ci: f64,
    pub f_limit: f64,
    pub residual: f64,
}

/// Residuals |f_n − (A_Hγ − ĥ)| per level and probe: analytic for the
/// Brownian backend, difference-quotient Monte Carlo otherwise.
pub fn check_fn_convergence(
    levy: &LevySpec,
    p: &ProblemSpec,
    n_list: &[u32],
    probes: &[f64],
    cfg: &MCConfig,
    stream: &SeedStream,
) -> Result<Vec<FnResidual>> {
    let mut rows = Vec::with_capacity(n_list.len() * probes.len());
    for &n in n_list {
        let delta = 0.5f64.powi(n as i32);
        for &x in probes {
            let (f_n, f_n_ci, f_limit) = match levy {
                LevySpec::BmDrift { mu, sigma } => {
                    let f_n = spatial_fn_exact(*mu, *sigma, p, x, delta)?;
                    let lim =
                        mu * p.payoff.derivative(x)? - hat_analytic_bm(*mu, *sigma, &p.cost, x)?;
                    (f_n, 0.0, lim)
                }
                _ => {
                    let s = stream
                        .derive("fn")
                        .derive_index((n as u64) << 16)
                        .derive_index(x.to_bits());
                    let (f_n, ci) = levy_f_difference_quotient(levy, p, x, delta, cfg, &s)?;
                    let (lim, _) = evaluate_f_levy(levy, p, x, cfg, &s.derive("lim"))?;
                    (f_n, ci, lim)
                }
            };
            rows.push(FnResidual {
                level: n,
                delta,
                probe: x,
                f_n,
                f_n_ci,
                f_limit,
                residual: (f_n - f_limit).abs(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PayoffSpec;

    fn bm_softplus() -> (LevySpec, ProblemSpec) {
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
        (levy, p)
    }

    fn cfg(paths: usize, seed: u64) -> MCConfig {
        MCConfig {
            paths,
            seed,
            max_steps: 1_000_000,
            ci_level: 0.99,
            levy_delta: None,
        }
    }

    #[test]
    fn time_scheme_constant_cost_is_exact() {
        let (levy, p) = bm_softplus();
        let c = cfg(1_000, 1);
        let w = build_time_discretization(&levy, &p, 2, &c, &c.stream()).unwrap();
        assert_eq!(w.delta, 0.25);
        assert_eq!(w.real_time_per_step, 0.25);
        match &w.problem.process {
            ProcessSpec::Walk(StepDistribution::Gaussian { m, s }) => {
                assert!((m - 0.25).abs() < 1e-15);
                assert!((s - 0.5).abs() < 1e-15);
            }
            other => panic!("unexpected embedded process {other:?}"),
        }
        assert_eq!(w.problem.cost.as_constant(), Some(0.125));
        // ⌈h⌉ₙ ≡ 0 at every level when h ≡ 0.
        let p0 = ProblemSpec {
            cost: CostSpec::Constant { c: 0.0 },
            ..p.clone()
        };
        let w0 = build_time_discretization(&levy, &p0, 5, &c, &c.stream()).unwrap();
        assert_eq!(w0.problem.cost.as_constant(), Some(0.0));
    }

    #[test]
    fn time_scheme_level_zero_is_unit_grid() {
        let (levy, p) = bm_softplus();
        let c = cfg(1_000, 1);
        let w = build_time_discretization(&levy, &p, 0, &c, &c.stream()).unwrap();
        assert_eq!(w.delta, 1.0);
        assert_eq!(w.problem.cost.as_constant(), Some(0.5));
    }

    #[test]
    fn time_grids_nest_structurally() {
        // {k/2ⁿ} ⊆ {k/2ⁿ⁺¹}: dyadic deltas halve exactly, so every level-n
        // stopping time k·Δₙ equals 2k·Δₙ₊₁ on the next grid.
        let (levy, p) = bm_softplus();
        let c = cfg(1_000, 1);
        let mut prev: Option<f64> = None;
        for n in 0..6 {
            let w = build_time_discretization(&levy, &p, n, &c, &c.stream()).unwrap();
            if let Some(pd) = prev {
                assert_eq!(w.delta * 2.0, pd);
            }
            prev = Some(w.delta);
        }
    }

    #[test]
    fn spatial_scheme_closed_form_cell() {
        let (levy, p) = bm_softplus();
        let c = cfg(1_000, 1);
        let w = build_spatial_discretization(&levy, &p, 1, (-6.0, 6.0), &c, &c.stream()).unwrap();
        assert_eq!(w.delta, 0.5);
        match &w.problem.process {
            ProcessSpec::Walk(StepDistribution::TwoPoint { p: pu, u, d }) => {
                assert!((pu - 0.731059).abs() < 1e-6);
                assert_eq!((*u, *d), (0.5, 0.5));
            }
            other => panic!("unexpected embedded process {other:?}"),
        }
        assert!((w.real_time_per_step - 0.231059).abs() < 1e-6);
        // Per-step cost c·E(duration) ≈ 0.5·0.231059.
        assert!((w.problem.cost.as_constant().unwrap() - 0.115530).abs() < 1e-5);
        // Embedded walk is upward-skip-free by construction.
        let lat = w.problem.process.as_walk().unwrap().lattice().unwrap();
        assert!(lat.is_skip_free_up());
    }

    #[test]
    fn spatial_pure_drift_limit() {
        // σ → 0⁺: p_up → 1, duration → δ/μ.
        let levy = LevySpec::BmDrift {
            mu: 1.0,
            sigma: 1e-5,
        };
        let p = ProblemSpec {
            process: ProcessSpec::Levy(levy.clone()),
            payoff: PayoffSpec::SoftplusConcave { a: 0.0, s: 1.0 },
            cost: CostSpec::Constant { c: 0.0 },
            weight: WeightSpec::default(),
        };
        let c = cfg(1_000, 1);
        let w = build_spatial_discretization(&levy, &p, 1, (-2.0, 2.0), &c, &c.stream()).unwrap();
        match &w.problem.process {
            ProcessSpec::Walk(StepDistribution::TwoPoint { p: pu, .. }) => {
                assert!((pu - 1.0).abs() < 1e-9)
            }
            _ => unreachable!(),
        }
        assert!((w.real_time_per_step - 0.5).abs() < 1e-6);
    }

    #[test]
    fn solve_level_spatial_roots_match_closed_form() {
        let (levy, p) = bm_softplus();
        let c = cfg(20_000, 5);
        for (n, expect) in [(1u32, -0.25), (2, -0.125)] {
            let w =
                build_spatial_discretization(&levy, &p, n, (-6.0, 6.0), &c, &c.stream()).unwrap();
            let sol = solve_level(&w, &[-1.0], &c, &c.stream().derive_index(n as u64)).unwrap();
            let t = sol.threshold.unwrap();
            // Exact bisection oracle on f_n for the same level.
            let mut lo = -1.0;
            let mut hi = 0.5;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let f = spatial_fn_exact(1.0, 1.0, &p, mid, w.delta).unwrap();
                if f > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let oracle_root = 0.5 * (lo + hi);
            assert!(
                (t.x_bar - oracle_root).abs() < 1e-4,
                "level {n}: {} vs oracle {oracle_root}",
                t.x_bar
            );
            // The level roots sit near −δ/2.
            assert!((t.x_bar - expect).abs() < 5e-3, "level {n}: {}", t.x_bar);
        }
    }

    #[test]
    fn immediate_stopping_level() {
        let levy = LevySpec::BmDrift {
            mu: 1.0,
            sigma: 1.0,
        };
        let p = ProblemSpec {
            process: ProcessSpec::Levy(levy.clone()),
            payoff: PayoffSpec::SoftplusConcave { a: 0.0, s: 1.0 },
            cost: CostSpec::Constant { c: 50.0 },
            weight: WeightSpec::default(),
        };
        let c = cfg(2_000, 9);
        let w = build_time_discretization(&levy, &p, 2, &c, &c.stream()).unwrap();
        let sol = solve_level(&w, &[-1.0, 0.0], &c, &c.stream()).unwrap();
        assert!(sol.threshold.is_none());
        for pv in &sol.probe_values {
            let g = p.gamma(pv.snapped).unwrap();
            assert_eq!(pv.value.direct, g);
        }
    }

    #[test]
    fn fn_residuals_halve_per_level() {
        let (levy, p) = bm_softplus();
        let c = cfg(1_000, 1);
        let rows =
            check_fn_convergence(&levy, &p, &[2, 3, 4, 5], &[-1.0, 0.0, 1.0], &c, &c.stream())
                .unwrap();
        for &x in &[-1.0, 0.0, 1.0] {
            let res: Vec<f64> = rows
                .iter()
                .filter(|r| r.probe == x)
                .map(|r| r.residual)
                .collect();
            assert_eq!(res.len(), 4);
            for w in res.windows(2) {
                let ratio = w[1] / w[0];
                assert!(
                    (0.4..=0.6).contains(&ratio),
                    "probe {x}: residual ratio {ratio} outside halving band ({res:?})"
                );
            }
        }
    }

    #[test]
    fn fn_exact_cancellations() {
        // Linear payoff, zero cost: f_n = μ exactly at every level.
        let levy = LevySpec::BmDrift {
            mu: 2.0,
            sigma: 1.0,
        };
        let p = ProblemSpec {
            process: ProcessSpec::Levy(levy.clone()),
            payoff: PayoffSpec::LookupTable {
                knots: vec![(-100.0, -100.0), (100.0, 100.0)],
            },
            cost: CostSpec::Constant { c: 0.0 },
            weight: WeightSpec::default(),
        };
        for n in 1..=4 {
            let f_n = spatial_fn_exact(2.0, 1.0, &p, 0.3, 0.5f64.powi(n)).unwrap();
            assert!((f_n - 2.0).abs() < 1e-9);
        }
        // Constant payoff, constant cost: f_n = −c at every level.
        let p2 = ProblemSpec {
            payoff: PayoffSpec::LookupTable {
                knots: vec![(-100.0, 3.0), (100.0, 3.0)],
            },
            cost: CostSpec::Constant { c: 0.7 },
            ..p
        };
        for n in 1..=4 {
            let f_n = spatial_fn_exact(2.0, 1.0, &p2, 0.0, 0.5f64.powi(n)).unwrap();
            assert!((f_n + 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn bm_step_cost_small_dt_expansion() {
        // E_x∫₀^Δ h(X_s)ds = h(x)Δ + O(Δ²) for smooth-enough h away from the
        // kink of the positive part.
        let h = CostSpec::AffinePositive { a: 1.0, b: 0.5 };
        for (x, dt) in [(2.0, 0.05), (3.0, 0.1)] {
            let v = bm_step_cost(1.0, 1.0, x, dt, &h);
            let lead = h.eval(x).unwrap() * dt;
            assert!(
                (v - lead).abs() < 2.0 * dt * dt,
                "x={x}, dt={dt}: {v} vs leading {lead}"
            );
        }
    }

    #[test]
    fn time_scheme_sequence_runs_end_to_end() {
        let (levy, p) = bm_softplus();
        let c = cfg(8_000, 17);
        let rep = solve_sequence(
            &levy,
            &p,
            Scheme::Time,
            &[2, 3],
            &[-1.0],
            (-6.0, 6.0),
            &c,
            &c.stream(),
        )
        .unwrap();
        assert_eq!(rep.levels, vec![2, 3]);
        // Gaussian-step thresholds are MC-noisy but must sit near the
        // continuum root 0 at these levels.
        for t in rep.thresholds.iter().flatten() {
            assert!(t.abs() < 0.5, "time-scheme threshold {t}");
        }
        assert!(rep.monotone_values_ok, "notes: {:?}", rep.notes);
    }

    #[test]
    fn spatial_embedded_ladder_exact_vs_mc_agree() {
        // The skip-free closed form and raw MC must tell the same story on
        // the embedded cell-exit walk.
        let (levy, p) = bm_softplus();
        let c = cfg(40_000, 21);
        let w = build_spatial_discretization(&levy, &p, 2, (-6.0, 6.0), &c, &c.stream()).unwrap();
        let dist = w.problem.process.as_walk().unwrap().clone();
        let exact = crate::ladder::ladder_stats_exact_skipfree(&dist, &w.problem, -1.0).unwrap();
        let mc =
            crate::ladder::ladder_stats_mc(&w.problem, -1.0, &c, &c.stream().derive("mc")).unwrap();
        assert!(
            (mc.e_tau_plus - exact.e_tau_plus).abs() <= mc.ci_halfwidths.e_tau_plus,
            "E(τ⁺): mc {} vs exact {}",
            mc.e_tau_plus,
            exact.e_tau_plus
        );
        assert!(
            (mc.phi - exact.phi).abs() <= mc.ci_halfwidths.phi,
            "φ: mc {} vs exact {}",
            mc.phi,
            exact.phi
        );
        assert!(
            (mc.e_weight - exact.e_weight).abs() <= mc.ci_halfwidths.e_weight,
            "weight: mc {} vs exact {}",
            mc.e_weight,
            exact.e_weight
        );
    }

    #[test]
    fn single_level_sequence_trivially_monotone() {
        let (levy, p) = bm_softplus();
        let c = cfg(5_000, 3);
        let rep = solve_sequence(
            &levy,
            &p,
            Scheme::Spatial,
            &[3],
            &[-1.0],
            (-6.0, 6.0),
            &c,
            &c.stream(),
        )
        .unwrap();
        assert!(rep.monotone_values_ok);
        assert!(rep.monotone_thresholds_ok);
        assert!(rep.limit_estimate.is_none());
    }
}
