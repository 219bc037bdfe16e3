//! Problem definition types: payoff γ, running cost h, optional weight g,
//! process descriptions (random walk, finite chain, Lévy), Monte-Carlo
//! configuration, and feasibility diagnostics.
//!
//! All types are immutable after construction and safe to share across
//! workers; samplers draw from explicit counter-based streams.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, SeedStream};
use crate::stats::Moments;

/// Relative tolerance for probability mass / kernel row sums.
pub const MASS_TOL: f64 = 1e-12;

fn interp(knots: &[(f64, f64)], x: f64) -> Result<f64> {
    let lo = knots.first().map(|k| k.0).unwrap_or(f64::NAN);
    let hi = knots.last().map(|k| k.0).unwrap_or(f64::NAN);
    if knots.len() < 2 || !(lo..=hi).contains(&x) {
        return Err(Error::Extrapolation { x, lo, hi });
    }
    let j = match knots.binary_search_by(|k| k.0.partial_cmp(&x).unwrap()) {
        Ok(j) => return Ok(knots[j].1),
        Err(j) => j,
    };
    let (x0, y0) = knots[j - 1];
    let (x1, y1) = knots[j];
    Ok(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
}

fn interp_clamped(knots: &[(f64, f64)], x: f64) -> f64 {
    let lo = knots.first().unwrap().0;
    let hi = knots.last().unwrap().0;
    interp(knots, x.clamp(lo, hi)).unwrap_or(f64::NAN)
}

fn check_knots(knots: &[(f64, f64)], what: &str) -> Result<()> {
    if knots.len() < 2 {
        return Err(Error::InvalidSpec(format!("{what}: need at least 2 knots")));
    }
    for w in knots.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::InvalidSpec(format!(
                "{what}: knot abscissae must be strictly increasing"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Payoff, cost, weight
// ---------------------------------------------------------------------------

/// Payoff function γ. Non-decreasing by contract (checked by diagnostics,
/// not assumed).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum PayoffSpec {
    /// γ(x) = min(x, cap): slope one, then constant.
    PiecewiseLinearCap { cap: f64 },
    /// γ(x) = −s·log(1 + exp(−(x−a)/s)): smooth, concave, increasing.
    SoftplusConcave { a: f64, s: f64 },
    /// Sorted knots with linear interpolation; refuses extrapolation.
    LookupTable { knots: Vec<(f64, f64)> },
}

impl PayoffSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::PiecewiseLinearCap { cap } => {
                if !cap.is_finite() {
                    return Err(Error::InvalidSpec("cap must be finite".into()));
                }
            }
            Self::SoftplusConcave { a, s } => {
                if !a.is_finite() || !(*s > 0.0) {
                    return Err(Error::InvalidSpec("softplus needs finite a, s > 0".into()));
                }
            }
            Self::LookupTable { knots } => check_knots(knots, "payoff table")?,
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        match self {
            Self::PiecewiseLinearCap { cap } => Ok(x.min(*cap)),
            Self::SoftplusConcave { a, s } => Ok(-s * (-(x - a) / s).exp().ln_1p()),
            Self::LookupTable { knots } => interp(knots, x),
        }
    }

    /// Table kinds clamp instead of erroring; used only for heuristic path
    /// diagnostics where far excursions are expected.
    pub fn eval_clamped(&self, x: f64) -> f64 {
        match self {
            Self::LookupTable { knots } => interp_clamped(knots, x),
            _ => self.eval(x).unwrap(),
        }
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        match self {
            Self::PiecewiseLinearCap { cap } => Ok(if x < *cap { 1.0 } else { 0.0 }),
            Self::SoftplusConcave { a, s } => {
                // γ(x) = −s·log(1+e^{−t}) has γ′ = 1/(1+e^{t}), t = (x−a)/s.
                let t = (x - a) / s;
                Ok(1.0 / (1.0 + t.exp()))
            }
            Self::LookupTable { knots } => {
                let lo = knots[0].0;
                let hi = knots[knots.len() - 1].0;
                if !(lo..=hi).contains(&x) {
                    return Err(Error::Extrapolation { x, lo, hi });
                }
                let j = knots
                    .partition_point(|k| k.0 <= x)
                    .clamp(1, knots.len() - 1);
                let (x0, y0) = knots[j - 1];
                let (x1, y1) = knots[j];
                Ok((y1 - y0) / (x1 - x0))
            }
        }
    }

    /// Abscissae where the derivative jumps (skipped by finite-difference
    /// probes).
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            Self::PiecewiseLinearCap { cap } => vec![*cap],
            Self::SoftplusConcave { .. } => vec![],
            Self::LookupTable { knots } => knots.iter().map(|k| k.0).collect(),
        }
    }

    /// True for kinds with an analytic derivative formula (the
    /// finite-difference agreement check applies only to these).
    pub fn is_analytic(&self) -> bool {
        !matches!(self, Self::LookupTable { .. })
    }

    pub fn domain(&self) -> Option<(f64, f64)> {
        match self {
            Self::LookupTable { knots } => Some((knots[0].0, knots[knots.len() - 1].0)),
            _ => None,
        }
    }
}

/// Running cost h ≥ 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum CostSpec {
    Constant {
        c: f64,
    },
    /// h(x) = max(a + b·x, 0).
    AffinePositive {
        a: f64,
        b: f64,
    },
    LookupTable {
        knots: Vec<(f64, f64)>,
    },
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Constant { c } => {
                if !(*c >= 0.0) {
                    return Err(Error::InvalidSpec("constant cost must be ≥ 0".into()));
                }
            }
            Self::AffinePositive { a, b } => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::InvalidSpec("affine cost needs finite a, b".into()));
                }
            }
            Self::LookupTable { knots } => check_knots(knots, "cost table")?,
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        match self {
            Self::Constant { c } => Ok(*c),
            Self::AffinePositive { a, b } => Ok((a + b * x).max(0.0)),
            Self::LookupTable { knots } => interp(knots, x),
        }
    }

    pub fn eval_clamped(&self, x: f64) -> f64 {
        match self {
            Self::LookupTable { knots } => interp_clamped(knots, x),
            _ => self.eval(x).unwrap(),
        }
    }

    /// Some(c) when the cost is constant; enables several exact fast paths.
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Self::Constant { c } => Some(*c),
            _ => None,
        }
    }

    pub fn domain(&self) -> Option<(f64, f64)> {
        match self {
            Self::LookupTable { knots } => Some((knots[0].0, knots[knots.len() - 1].0)),
            _ => None,
        }
    }
}

/// Strictly positive weight g for the weighted threshold-function variant.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum WeightSpec {
    Constant { c: f64 },
    LookupTable { knots: Vec<(f64, f64)> },
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self::Constant { c: 1.0 }
    }
}

impl WeightSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Constant { c } => {
                if !(*c > 0.0) {
                    return Err(Error::InvalidSpec(
                        "weight must be strictly positive".into(),
                    ));
                }
            }
            Self::LookupTable { knots } => check_knots(knots, "weight table")?,
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        match self {
            Self::Constant { c } => Ok(*c),
            Self::LookupTable { knots } => interp(knots, x),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Self::Constant { c } => Some(*c),
            _ => None,
        }
    }

    pub fn is_unit(&self) -> bool {
        matches!(self, Self::Constant { c } if *c == 1.0)
    }
}

// ---------------------------------------------------------------------------
// Processes
// ---------------------------------------------------------------------------

/// One i.i.d. step of a random walk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum StepDistribution {
    /// +u with probability p, −d otherwise.
    TwoPoint {
        p: f64,
        u: f64,
        d: f64,
    },
    /// Finite support table of (step, probability).
    LatticePmf {
        steps: Vec<(f64, f64)>,
    },
    Gaussian {
        m: f64,
        s: f64,
    },
    /// Increment of a Lévy process over a fixed time step — the embedded
    /// walk of the dyadic time discretization.
    LevyIncrement {
        levy: LevySpec,
        dt: f64,
    },
}

/// Lattice structure of a walk, when its support lies on u·ℤ.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeInfo {
    pub unit: f64,
    /// Support in lattice units with probabilities.
    pub steps_units: Vec<(i64, f64)>,
    /// Largest upward step in lattice units.
    pub max_up_units: i64,
}

impl LatticeInfo {
    /// Upward-skip-free: never jumps up by more than one lattice unit.
    pub fn is_skip_free_up(&self) -> bool {
        self.max_up_units == 1
    }
}

fn float_gcd(mut a: f64, mut b: f64) -> f64 {
    a = a.abs();
    b = b.abs();
    if a < b {
        std::mem::swap(&mut a, &mut b);
    }
    // Euclid with a relative snap tolerance; good enough for spec'd lattices.
    let tol = 1e-9 * a.max(1.0);
    while b > tol {
        let r = a - (a / b).round() * b;
        a = b;
        b = r.abs();
    }
    a
}

impl StepDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::TwoPoint { p, u, d } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::InvalidSpec("two_point: p must lie in [0,1]".into()));
                }
                if !(*u > 0.0) || !(*d >= 0.0) {
                    return Err(Error::InvalidSpec("two_point: need u > 0, d ≥ 0".into()));
                }
                if *p == 0.0 {
                    return Err(Error::InfeasibleProblem("P(X₁ > 0) = 0".into()));
                }
            }
            Self::LatticePmf { steps } => {
                if steps.is_empty() {
                    return Err(Error::InvalidSpec("lattice_pmf: empty support".into()));
                }
                let mass: f64 = steps.iter().map(|s| s.1).sum();
                if (mass - 1.0).abs() > MASS_TOL {
                    return Err(Error::InvalidSpec(format!(
                        "lattice_pmf: probabilities sum to {mass}, not 1"
                    )));
                }
                if steps.iter().any(|s| s.1 < 0.0) {
                    return Err(Error::InvalidSpec(
                        "lattice_pmf: negative probability".into(),
                    ));
                }
                if !steps.iter().any(|s| s.0 > 0.0 && s.1 > 0.0) {
                    return Err(Error::InfeasibleProblem("P(X₁ > 0) = 0".into()));
                }
            }
            Self::Gaussian { m, s } => {
                if !(*s > 0.0) || !m.is_finite() {
                    return Err(Error::InvalidSpec("gaussian: need finite m, s > 0".into()));
                }
            }
            Self::LevyIncrement { levy, dt } => {
                if !(*dt > 0.0) {
                    return Err(Error::InvalidSpec("levy_increment: need dt > 0".into()));
                }
                levy.validate()?;
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::TwoPoint { p, u, d } => p * u - (1.0 - p) * d,
            Self::LatticePmf { steps } => steps.iter().map(|(s, p)| s * p).sum(),
            Self::Gaussian { m, .. } => *m,
            Self::LevyIncrement { levy, dt } => levy.mean() * dt,
        }
    }

    pub fn p_positive(&self) -> f64 {
        match self {
            Self::TwoPoint { p, .. } => *p,
            Self::LatticePmf { steps } => steps.iter().filter(|s| s.0 > 0.0).map(|s| s.1).sum(),
            Self::Gaussian { .. } => 1.0,
            Self::LevyIncrement { levy, dt } => match levy {
                LevySpec::BmDrift { .. } | LevySpec::JumpDiffusion { .. } => 1.0,
                LevySpec::CppDrift { drift, rate, jump } => {
                    if *drift > 0.0 {
                        1.0
                    } else {
                        jump.p_positive() * (1.0 - (-rate * dt).exp())
                    }
                }
            },
        }
    }

    /// Lattice structure, or None for continuous steps.
    pub fn lattice(&self) -> Option<LatticeInfo> {
        let steps: Vec<(f64, f64)> = match self {
            Self::TwoPoint { p, u, d } => {
                let mut v = vec![(*u, *p)];
                if *p < 1.0 {
                    v.push((-*d, 1.0 - *p));
                }
                v
            }
            Self::LatticePmf { steps } => steps.clone(),
            Self::Gaussian { .. } | Self::LevyIncrement { .. } => return None,
        };
        let mut unit = 0.0;
        for &(s, p) in &steps {
            if p > 0.0 && s != 0.0 {
                unit = if unit == 0.0 {
                    s.abs()
                } else {
                    float_gcd(unit, s.abs())
                };
            }
        }
        if unit <= 0.0 {
            return None;
        }
        let mut steps_units = Vec::with_capacity(steps.len());
        for &(s, p) in &steps {
            let k = s / unit;
            if (k - k.round()).abs() > 1e-6 {
                return None;
            }
            steps_units.push((k.round() as i64, p));
        }
        let max_up_units = steps_units
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(k, _)| *k)
            .max()
            .unwrap_or(0);
        Some(LatticeInfo {
            unit,
            steps_units,
            max_up_units,
        })
    }

    pub fn sampler(&self) -> WalkSampler {
        match self {
            Self::TwoPoint { p, u, d } => WalkSampler::TwoPoint {
                p: *p,
                u: *u,
                d: *d,
            },
            Self::LatticePmf { steps } => {
                let mut cum = Vec::with_capacity(steps.len());
                let mut acc = 0.0;
                for &(s, p) in steps {
                    acc += p;
                    cum.push((acc, s));
                }
                if let Some(last) = cum.last_mut() {
                    last.0 = 1.0;
                }
                WalkSampler::Table { cum }
            }
            Self::Gaussian { m, s } => WalkSampler::Gaussian {
                dist: Normal::new(*m, *s).expect("validated gaussian"),
            },
            Self::LevyIncrement { levy, dt } => WalkSampler::Levy {
                levy: levy.clone(),
                dt: *dt,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub enum WalkSampler {
    TwoPoint { p: f64, u: f64, d: f64 },
    Table { cum: Vec<(f64, f64)> },
    Gaussian { dist: Normal<f64> },
    Levy { levy: LevySpec, dt: f64 },
}

impl WalkSampler {
    #[inline]
    pub fn sample(&self, rng: &mut CounterRng) -> f64 {
        match self {
            Self::TwoPoint { p, u, d } => {
                if rng.random::<f64>() < *p {
                    *u
                } else {
                    -*d
                }
            }
            Self::Table { cum } => {
                let v: f64 = rng.random();
                for &(c, s) in cum {
                    if v <= c {
                        return s;
                    }
                }
                cum.last().unwrap().1
            }
            Self::Gaussian { dist } => dist.sample(rng),
            Self::Levy { levy, dt } => levy.sample_increment(*dt, rng),
        }
    }
}

/// A finite-state Markov chain on an ordered real grid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FiniteChainSpec {
    pub states: Vec<f64>,
    pub kernel: Vec<Vec<f64>>,
}

impl FiniteChainSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::InvalidSpec("finite_chain: no states".into()));
        }
        for w in self.states.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidSpec(
                    "finite_chain: states must be strictly increasing".into(),
                ));
            }
        }
        if self.kernel.len() != n {
            return Err(Error::InvalidSpec(
                "finite_chain: kernel is not square".into(),
            ));
        }
        for (i, row) in self.kernel.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidSpec(format!(
                    "finite_chain: row {i} has wrong length"
                )));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "finite_chain: row {i} negative mass"
                )));
            }
            let mass: f64 = row.iter().sum();
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(Error::InfeasibleProblem(format!(
                    "non-stochastic kernel row {i}: sums to {mass}"
                )));
            }
        }
        Ok(())
    }

    pub fn state_index(&self, y: f64) -> Result<usize> {
        self.states
            .iter()
            .position(|&s| (s - y).abs() <= 1e-12 * (1.0 + y.abs()))
            .ok_or_else(|| Error::InvalidSpec(format!("{y} is not a chain state")))
    }

    pub fn sampler(&self) -> ChainSampler {
        let cum = self
            .kernel
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                let mut c: Vec<f64> = row
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
                if let Some(last) = c.last_mut() {
                    *last = 1.0;
                }
                c
            })
            .collect();
        ChainSampler { cum }
    }
}

#[derive(Debug, Clone)]
pub struct ChainSampler {
    cum: Vec<Vec<f64>>,
}

impl ChainSampler {
    #[inline]
    pub fn step(&self, from: usize, rng: &mut CounterRng) -> usize {
        let row = &self.cum[from];
        let v: f64 = rng.random();
        match row.binary_search_by(|c| c.partial_cmp(&v).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(row.len() - 1),
        }
    }
}

/// Jump-size law for compound-Poisson parts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum JumpLaw {
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// Exponential with the sign of `mean` (negative mean ⇒ downward jumps).
    Exponential {
        mean: f64,
    },
    TwoPoint {
        up: f64,
        down: f64,
        p_up: f64,
    },
}

impl JumpLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Gaussian { std, .. } if !(*std > 0.0) => {
                Err(Error::InvalidSpec("jump gaussian: std must be > 0".into()))
            }
            Self::Exponential { mean } if *mean == 0.0 || !mean.is_finite() => Err(
                Error::InvalidSpec("jump exponential: mean must be nonzero".into()),
            ),
            Self::TwoPoint { up, down, p_up } => {
                if !(0.0..=1.0).contains(p_up) || !(*up > 0.0) || !(*down > 0.0) {
                    Err(Error::InvalidSpec("jump two_point: bad parameters".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Gaussian { mean, .. } => *mean,
            Self::Exponential { mean } => *mean,
            Self::TwoPoint { up, down, p_up } => p_up * up - (1.0 - p_up) * down,
        }
    }

    pub fn sample(&self, rng: &mut CounterRng) -> f64 {
        match self {
            Self::Gaussian { mean, std } => Normal::new(*mean, *std).unwrap().sample(rng),
            Self::Exponential { mean } => {
                let e = Exp::new(1.0 / mean.abs()).unwrap().sample(rng);
                e * mean.signum()
            }
            Self::TwoPoint { up, down, p_up } => {
                if rng.random::<f64>() < *p_up {
                    *up
                } else {
                    -*down
                }
            }
        }
    }

    /// Probability of a strictly positive jump.
    pub fn p_positive(&self) -> f64 {
        match self {
            Self::Gaussian { .. } => 1.0,
            Self::Exponential { mean } => {
                if *mean > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::TwoPoint { p_up, .. } => *p_up,
        }
    }
}

/// Lévy process description. E(X₁) > 0 is required everywhere the ladder
/// construction is used.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LevySpec {
    BmDrift {
        mu: f64,
        sigma: f64,
    },
    CppDrift {
        drift: f64,
        rate: f64,
        jump: JumpLaw,
    },
    JumpDiffusion {
        mu: f64,
        sigma: f64,
        rate: f64,
        jump: JumpLaw,
    },
}

impl LevySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::BmDrift { mu, sigma } => {
                if !(*mu > 0.0) || !(*sigma > 0.0) {
                    return Err(Error::InvalidSpec(
                        "bm_drift: need mu > 0, sigma > 0".into(),
                    ));
                }
            }
            Self::CppDrift { rate, jump, .. } => {
                if !(*rate >= 0.0) {
                    return Err(Error::InvalidSpec("cpp_drift: rate must be ≥ 0".into()));
                }
                jump.validate()?;
            }
            Self::JumpDiffusion {
                sigma, rate, jump, ..
            } => {
                if !(*sigma > 0.0) || !(*rate >= 0.0) {
                    return Err(Error::InvalidSpec(
                        "jump_diffusion: need sigma > 0, rate ≥ 0".into(),
                    ));
                }
                jump.validate()?;
            }
        }
        if !(self.mean() > 0.0) {
            return Err(Error::InfeasibleProblem(format!(
                "levy process needs E(X₁) > 0, got {}",
                self.mean()
            )));
        }
        Ok(())
    }

    /// Analytic E(X₁).
    pub fn mean(&self) -> f64 {
        match self {
            Self::BmDrift { mu, .. } => *mu,
            Self::CppDrift { drift, rate, jump } => drift + rate * jump.mean(),
            Self::JumpDiffusion { mu, rate, jump, .. } => mu + rate * jump.mean(),
        }
    }

    /// Exact increment over a time step dt (all three kinds admit one).
    pub fn sample_increment(&self, dt: f64, rng: &mut CounterRng) -> f64 {
        match self {
            Self::BmDrift { mu, sigma } => {
                Normal::new(mu * dt, sigma * dt.sqrt()).unwrap().sample(rng)
            }
            Self::CppDrift { drift, rate, jump } => {
                let mut x = drift * dt;
                if *rate > 0.0 {
                    let n = Poisson::new(rate * dt).unwrap().sample(rng) as u64;
                    for _ in 0..n {
                        x += jump.sample(rng);
                    }
                }
                x
            }
            Self::JumpDiffusion {
                mu,
                sigma,
                rate,
                jump,
            } => {
                let mut x = Normal::new(mu * dt, sigma * dt.sqrt()).unwrap().sample(rng);
                if *rate > 0.0 {
                    let n = Poisson::new(rate * dt).unwrap().sample(rng) as u64;
                    for _ in 0..n {
                        x += jump.sample(rng);
                    }
                }
                x
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Problem spec and configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ProcessSpec {
    Walk(StepDistribution),
    Chain(FiniteChainSpec),
    Levy(LevySpec),
}

/// Flat `{kind, params}` wire representation of a process.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
enum ProcessRepr {
    TwoPoint {
        p: f64,
        u: f64,
        d: f64,
    },
    LatticePmf {
        steps: Vec<(f64, f64)>,
    },
    Gaussian {
        m: f64,
        s: f64,
    },
    LevyIncrement {
        levy: LevySpec,
        dt: f64,
    },
    FiniteChain {
        states: Vec<f64>,
        kernel: Vec<Vec<f64>>,
    },
    BmDrift {
        mu: f64,
        sigma: f64,
    },
    CppDrift {
        drift: f64,
        rate: f64,
        jump: JumpLaw,
    },
    JumpDiffusion {
        mu: f64,
        sigma: f64,
        rate: f64,
        jump: JumpLaw,
    },
}

impl From<ProcessRepr> for ProcessSpec {
    fn from(r: ProcessRepr) -> Self {
        match r {
            ProcessRepr::TwoPoint { p, u, d } => Self::Walk(StepDistribution::TwoPoint { p, u, d }),
            ProcessRepr::LatticePmf { steps } => Self::Walk(StepDistribution::LatticePmf { steps }),
            ProcessRepr::Gaussian { m, s } => Self::Walk(StepDistribution::Gaussian { m, s }),
            ProcessRepr::LevyIncrement { levy, dt } => {
                Self::Walk(StepDistribution::LevyIncrement { levy, dt })
            }
            ProcessRepr::FiniteChain { states, kernel } => {
                Self::Chain(FiniteChainSpec { states, kernel })
            }
            ProcessRepr::BmDrift { mu, sigma } => Self::Levy(LevySpec::BmDrift { mu, sigma }),
            ProcessRepr::CppDrift { drift, rate, jump } => {
                Self::Levy(LevySpec::CppDrift { drift, rate, jump })
            }
            ProcessRepr::JumpDiffusion {
                mu,
                sigma,
                rate,
                jump,
            } => Self::Levy(LevySpec::JumpDiffusion {
                mu,
                sigma,
                rate,
                jump,
            }),
        }
    }
}

impl From<ProcessSpec> for ProcessRepr {
    fn from(p: ProcessSpec) -> Self {
        match p {
            ProcessSpec::Walk(StepDistribution::TwoPoint { p, u, d }) => Self::TwoPoint { p, u, d },
            ProcessSpec::Walk(StepDistribution::LatticePmf { steps }) => Self::LatticePmf { steps },
            ProcessSpec::Walk(StepDistribution::Gaussian { m, s }) => Self::Gaussian { m, s },
            ProcessSpec::Walk(StepDistribution::LevyIncrement { levy, dt }) => {
                Self::LevyIncrement { levy, dt }
            }
            ProcessSpec::Chain(FiniteChainSpec { states, kernel }) => {
                Self::FiniteChain { states, kernel }
            }
            ProcessSpec::Levy(LevySpec::BmDrift { mu, sigma }) => Self::BmDrift { mu, sigma },
            ProcessSpec::Levy(LevySpec::CppDrift { drift, rate, jump }) => {
                Self::CppDrift { drift, rate, jump }
            }
            ProcessSpec::Levy(LevySpec::JumpDiffusion {
                mu,
                sigma,
                rate,
                jump,
            }) => Self::JumpDiffusion {
                mu,
                sigma,
                rate,
                jump,
            },
        }
    }
}

impl Serialize for ProcessSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ProcessRepr::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProcessSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        ProcessRepr::deserialize(d).map(Self::from)
    }
}

impl ProcessSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Walk(w) => w.validate(),
            Self::Chain(c) => c.validate(),
            Self::Levy(l) => l.validate(),
        }
    }

    pub fn as_walk(&self) -> Option<&StepDistribution> {
        match self {
            Self::Walk(w) => Some(w),
            _ => None,
        }
    }

    pub fn as_chain(&self) -> Option<&FiniteChainSpec> {
        match self {
            Self::Chain(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_levy(&self) -> Option<&LevySpec> {
        match self {
            Self::Levy(l) => Some(l),
            _ => None,
        }
    }
}

fn default_weight() -> WeightSpec {
    WeightSpec::default()
}

/// The full input object: process, payoff γ, cost h, optional weight g.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemSpec {
    pub process: ProcessSpec,
    pub payoff: PayoffSpec,
    pub cost: CostSpec,
    #[serde(default = "default_weight")]
    pub weight: WeightSpec,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        self.process.validate()?;
        self.payoff.validate()?;
        self.cost.validate()?;
        self.weight.validate()
    }

    pub fn gamma(&self, x: f64) -> Result<f64> {
        self.payoff.eval(x)
    }

    pub fn h(&self, x: f64) -> Result<f64> {
        self.cost.eval(x)
    }

    pub fn g(&self, x: f64) -> Result<f64> {
        self.weight.eval(x)
    }
}

fn default_ci_level() -> f64 {
    0.99
}

/// Monte-Carlo configuration; one seed drives every substream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MCConfig {
    pub paths: usize,
    pub seed: u64,
    pub max_steps: usize,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    /// Spatial step δ for the Lévy difference-quotient backend (defaults to
    /// the module constant when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levy_delta: Option<f64>,
}

impl MCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths < 100 {
            return Err(Error::InvalidSpec("mc.paths must be ≥ 100".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::InvalidSpec("mc.max_steps must be ≥ 1".into()));
        }
        if !(0.0 < self.ci_level && self.ci_level < 1.0) {
            return Err(Error::InvalidSpec("mc.ci_level must lie in (0,1)".into()));
        }
        Ok(())
    }

    pub fn stream(&self) -> SeedStream {
        SeedStream::root(self.seed)
    }
}

impl Default for MCConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            seed: 0,
            max_steps: 100_000,
            ci_level: 0.99,
            levy_delta: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Probe grid and diagnostics
// ---------------------------------------------------------------------------

/// Equally spaced probes for monotonicity and sign checks.
/// Default: 512 points on [−20, 20].
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ProbeGrid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        Self {
            lo: -20.0,
            hi: 20.0,
            count: 512,
        }
    }
}

impl ProbeGrid {
    pub fn points(&self) -> Vec<f64> {
        if self.count <= 1 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.lo + step * i as f64).collect()
    }

    /// Intersect with a table domain so probes never extrapolate.
    pub fn clamped_to(&self, domain: Option<(f64, f64)>) -> ProbeGrid {
        match domain {
            None => *self,
            Some((lo, hi)) => ProbeGrid {
                lo: self.lo.max(lo),
                hi: self.hi.min(hi),
                count: self.count,
            },
        }
    }
}

/// Evidence report from `validate_problem`. Heuristics only; nothing here is
/// a proof (in particular the transience flag).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub drift_analytic: Option<f64>,
    pub drift_mc: Option<f64>,
    pub drift_mc_stderr: Option<f64>,
    pub drift_positive: bool,
    pub sampler_consistent: bool,
    pub transient_ok: bool,
    pub transient_attained_fraction: f64,
    pub gamma_monotone: bool,
    pub gamma_violations: Vec<(f64, f64)>,
    pub h_nonnegative: bool,
    pub h_monotone: bool,
    pub derivative_ok: bool,
    pub derivative_max_rel_err: f64,
    pub weight_positive: bool,
    pub notes: Vec<String>,
}

impl Diagnostics {
    /// Overall verdict used for the CLI exit code.
    pub fn passes(&self) -> bool {
        self.drift_positive
            && self.transient_ok
            && self.gamma_monotone
            && self.h_nonnegative
            && self.derivative_ok
            && self.weight_positive
            && self.sampler_consistent
    }
}

/// Number of one-step draws used for the sampler-vs-mean consistency check.
const DRIFT_DRAWS: usize = 1_000_000;

/// Heuristic feasibility diagnostics: drift sign, transience evidence,
/// monotonicity probes, derivative agreement. Reports evidence only.
pub fn validate_problem(p: &ProblemSpec, cfg: &MCConfig, probe: &ProbeGrid) -> Result<Diagnostics> {
    p.validate()?;
    cfg.validate()?;
    let stream = cfg.stream().derive("validate");
    let mut notes = Vec::new();

    // Drift.
    let (drift_analytic, drift_mc, drift_se, sampler_consistent) = match &p.process {
        ProcessSpec::Walk(w) => {
            if w.p_positive() <= 0.0 {
                return Err(Error::InfeasibleProblem("P(X₁ > 0) = 0".into()));
            }
            let sampler = w.sampler();
            let mut rng = stream.derive("drift").rng();
            let draws: Vec<f64> = (0..DRIFT_DRAWS).map(|_| sampler.sample(&mut rng)).collect();
            let m = Moments::from_slice(&draws);
            let consistent = (m.mean - w.mean()).abs() <= 4.0 * m.stderr().max(1e-15);
            (Some(w.mean()), Some(m.mean), Some(m.stderr()), consistent)
        }
        ProcessSpec::Levy(l) => {
            let mut rng = stream.derive("drift").rng();
            let n = DRIFT_DRAWS / 10;
            let draws: Vec<f64> = (0..n).map(|_| l.sample_increment(1.0, &mut rng)).collect();
            let m = Moments::from_slice(&draws);
            let consistent = (m.mean - l.mean()).abs() <= 4.0 * m.stderr().max(1e-15);
            (Some(l.mean()), Some(m.mean), Some(m.stderr()), consistent)
        }
        ProcessSpec::Chain(_) => {
            notes.push("finite chain: one-step drift varies by state; skipped".into());
            (None, None, None, true)
        }
    };
    let drift_positive = match (&p.process, drift_analytic) {
        (ProcessSpec::Chain(_), _) => true,
        (_, Some(m)) => m > 0.0,
        _ => false,
    };
    if !drift_positive {
        notes.push("warning: estimated drift E(X₁) ≤ 0".into());
    }

    // Transience heuristic: γ(Y_n) − Σ h(Y_i) should peak early.
    let horizon = cfg.max_steps.min(10_000);
    let n_paths = cfg.paths.min(1_000);
    let tr_stream = stream.derive("transience");
    let mut attained = 0usize;
    for i in 0..n_paths {
        let mut rng = tr_stream.derive_index(i as u64).rng();
        let mut argmax = 0usize;
        let mut best;
        let mut acc_cost = 0.0;
        match &p.process {
            ProcessSpec::Walk(w) => {
                let sampler = w.sampler();
                let mut y = 0.0;
                best = p.payoff.eval_clamped(y);
                for k in 1..=horizon {
                    y += sampler.sample(&mut rng);
                    acc_cost += p.cost.eval_clamped(y);
                    let v = p.payoff.eval_clamped(y) - acc_cost;
                    if v > best {
                        best = v;
                        argmax = k;
                    }
                }
            }
            ProcessSpec::Chain(c) => {
                let sampler = c.sampler();
                let mut idx = 0usize;
                best = p.payoff.eval_clamped(c.states[idx]);
                for k in 1..=horizon.min(5_000) {
                    idx = sampler.step(idx, &mut rng);
                    let y = c.states[idx];
                    acc_cost += p.cost.eval_clamped(y);
                    let v = p.payoff.eval_clamped(y) - acc_cost;
                    if v > best {
                        best = v;
                        argmax = k;
                    }
                }
            }
            ProcessSpec::Levy(l) => {
                let mut y = 0.0;
                best = p.payoff.eval_clamped(y);
                for k in 1..=horizon.min(5_000) {
                    y += l.sample_increment(1.0, &mut rng);
                    acc_cost += p.cost.eval_clamped(y);
                    let v = p.payoff.eval_clamped(y) - acc_cost;
                    if v > best {
                        best = v;
                        argmax = k;
                    }
                }
            }
        }
        let _ = best;
        let effective_horizon = match &p.process {
            ProcessSpec::Walk(_) => horizon,
            _ => horizon.min(5_000),
        };
        if argmax < effective_horizon {
            attained += 1;
        }
    }
    let transient_attained_fraction = attained as f64 / n_paths as f64;
    let transient_ok = transient_attained_fraction >= 0.95;

    // Monotonicity probes.
    let grid = probe
        .clamped_to(p.payoff.domain())
        .clamped_to(p.cost.domain());
    let pts = grid.points();
    let mut gamma_monotone = true;
    let mut gamma_violations = Vec::new();
    let mut prev_gamma: Option<(f64, f64)> = None;
    for &x in &pts {
        let gx = p.payoff.eval(x)?;
        if let Some((px, pg)) = prev_gamma {
            if gx < pg - 1e-12 * (1.0 + pg.abs()) {
                gamma_monotone = false;
                if gamma_violations.len() < 16 {
                    gamma_violations.push((px, x));
                }
            }
        }
        prev_gamma = Some((x, gx));
    }

    let mut h_nonnegative = true;
    let mut h_monotone = true;
    let mut prev_h: Option<f64> = None;
    for &x in &pts {
        let hx = p.cost.eval(x)?;
        if hx < 0.0 {
            h_nonnegative = false;
        }
        if let Some(ph) = prev_h {
            if hx < ph - 1e-12 * (1.0 + ph.abs()) {
                h_monotone = false;
            }
        }
        prev_h = Some(hx);
    }

    let mut weight_positive = true;
    if let WeightSpec::LookupTable { .. } = &p.weight {
        let wgrid = probe.clamped_to(match &p.weight {
            WeightSpec::LookupTable { knots } => Some((knots[0].0, knots[knots.len() - 1].0)),
            _ => None,
        });
        for &x in &wgrid.points() {
            if p.weight.eval(x)? <= 0.0 {
                weight_positive = false;
            }
        }
    } else if let WeightSpec::Constant { c } = &p.weight {
        weight_positive = *c > 0.0;
    }

    // Derivative agreement (analytic payoff kinds only).
    let mut derivative_ok = true;
    let mut derivative_max_rel_err = 0.0f64;
    if p.payoff.is_analytic() {
        let kinks = p.payoff.kinks();
        let fd_h = 1e-5;
        for &x in &pts {
            if kinks.iter().any(|&k| (x - k).abs() < 1e-3) {
                continue;
            }
            let d = p.payoff.derivative(x)?;
            let fd = (p.payoff.eval(x + fd_h)? - p.payoff.eval(x - fd_h)?) / (2.0 * fd_h);
            let denom = d.abs().max(1e-8);
            let rel = (fd - d).abs() / denom;
            derivative_max_rel_err = derivative_max_rel_err.max(rel);
            if rel > 1e-6 && (fd - d).abs() > 1e-9 {
                derivative_ok = false;
            }
        }
    }

    Ok(Diagnostics {
        drift_analytic,
        drift_mc,
        drift_mc_stderr: drift_se,
        drift_positive,
        sampler_consistent,
        transient_ok,
        transient_attained_fraction,
        gamma_monotone,
        gamma_violations,
        h_nonnegative,
        h_monotone,
        derivative_ok,
        derivative_max_rel_err,
        weight_positive,
        notes,
    })
}
