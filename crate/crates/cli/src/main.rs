//! Batch front end: reads a problem config, dispatches to the solver /
//! oracle / discretization pipelines, and writes CSV/JSON reports.
//!
//! Exit codes: 0 success, 2 assumption violated or inconclusive (results are
//! still written), 1 error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use optstop_core::discretize::{check_fn_convergence, continuum_threshold, solve_sequence, Scheme};
use optstop_core::error::Error as CoreError;
use optstop_core::ladder::hat_transform;
use optstop_core::model::{validate_problem, MCConfig, ProbeGrid, ProblemSpec, ProcessSpec};
use optstop_core::oracle::{
    check_ladder_sum_identity, check_max_representation, dp_auto_domain, dp_value_iteration,
    IdentityReport,
};
use optstop_core::rng::SeedStream;
use optstop_core::threshold::{
    build_fcurve, find_root, random_walk_threshold, validate_assumption2, Assumption2Status,
    Boundary, FCurve, LadderConvention, Threshold,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "optstop",
    version,
    about = "One-sided optimal stopping with linear running costs: thresholds, oracles, discretizations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Problem configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Find the optimal threshold and write threshold.json + fcurve.csv.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        /// Evaluation grid "lo:hi:count" for the f-curve.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
    },
    /// Evaluate the threshold function on a grid.
    #[command(name = "f-curve")]
    FCurve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
    },
    /// Dynamic-programming oracle and threshold-equivalence verdict.
    #[command(name = "oracle-dp")]
    OracleDp {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the representation-identity checkers.
    #[command(name = "check-identity")]
    CheckIdentity {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Discretize a Lévy problem across levels and report convergence.
    Discretize {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated levels, e.g. "1,2,3,4".
        #[arg(long)]
        levels: Option<String>,
    },
    /// Feasibility diagnostics for the problem spec.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
    },
}

// ---------------------------------------------------------------------------
// Config file schema
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct ConfigFile {
    #[serde(flatten)]
    problem: ProblemSpec,
    mc: MCConfig,
    #[serde(default)]
    solve: Option<SolveSection>,
    #[serde(default)]
    dp: Option<DpSection>,
    #[serde(default)]
    identity: Option<IdentitySection>,
    #[serde(default)]
    discretize: Option<DiscretizeSection>,
    #[serde(default)]
    grid: Option<GridSection>,
    #[serde(default)]
    probe: Option<ProbeGrid>,
}

#[derive(Deserialize)]
struct SolveSection {
    bracket: Option<(f64, f64)>,
    #[serde(default = "default_tol")]
    tol: f64,
}

fn default_tol() -> f64 {
    1e-9
}

#[derive(Deserialize)]
struct DpSection {
    lo: Option<f64>,
    hi: Option<f64>,
    #[serde(default = "default_dp_tol")]
    tol: f64,
}

fn default_dp_tol() -> f64 {
    1e-10
}

#[derive(Deserialize)]
struct IdentitySection {
    x: Option<f64>,
    y_bar: Option<f64>,
}

#[derive(Deserialize)]
struct DiscretizeSection {
    #[serde(default = "default_scheme")]
    scheme: Scheme,
    levels: Option<Vec<u32>>,
    probes: Option<Vec<f64>>,
    range: Option<(f64, f64)>,
}

fn default_scheme() -> Scheme {
    Scheme::Spatial
}

#[derive(Deserialize, Clone, Copy)]
struct GridSection {
    lo: f64,
    hi: f64,
    count: usize,
}

// ---------------------------------------------------------------------------
// Manifest and output helpers
// ---------------------------------------------------------------------------

#[derive(Serialize, Clone)]
struct Manifest {
    command: String,
    version: String,
    seed: u64,
    config_sha256: String,
    config_path: String,
    /// Wall-clock timestamp; lives only in manifest.json so payloads stay
    /// byte-identical across reruns.
    #[serde(skip_serializing_if = "Option::is_none")]
    timestamp_unix: Option<u64>,
}

impl Manifest {
    fn payload_stanza(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "version": self.version,
            "config_sha256": self.config_sha256,
        })
    }

    fn csv_header(&self) -> String {
        format!(
            "# seed={} version={} config_sha256={}\n",
            self.seed, self.version, self.config_sha256
        )
    }
}

/// 17 significant digits, '.' decimal, platform-independent.
fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{:.16e}", x)
    }
}

fn write_text(dir: &Path, name: &str, content: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), content).with_context(|| format!("writing {name}"))?;
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(dir, name, &text)
}

fn fcurve_csv(curve: &FCurve, manifest: &Manifest) -> String {
    let mut s = manifest.csv_header();
    s.push_str("y,f,ci_low,ci_high,variant\n");
    let variant = match curve.variant {
        optstop_core::threshold::FVariant::Standard => "standard",
        optstop_core::threshold::FVariant::Weighted => "weighted",
        optstop_core::threshold::FVariant::Levy => "levy",
    };
    for i in 0..curve.grid.len() {
        let (f, c) = (curve.f_values[i], curve.ci_halfwidths[i]);
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(curve.grid[i]),
            fmt_f64(f),
            fmt_f64(f - c),
            fmt_f64(f + c),
            variant
        ));
    }
    s
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("grid must be \"lo:hi:count\", got {spec:?}");
    }
    let lo: f64 = parts[0].parse().context("grid lo")?;
    let hi: f64 = parts[1].parse().context("grid hi")?;
    let count: usize = parts[2].parse().context("grid count")?;
    if !(hi > lo) || count < 2 {
        bail!("grid needs hi > lo and count ≥ 2");
    }
    let step = (hi - lo) / (count - 1) as f64;
    Ok((0..count).map(|i| lo + step * i as f64).collect())
}

fn parse_levels(spec: &str) -> Result<Vec<u32>> {
    spec.split(',')
        .map(|t| t.trim().parse::<u32>().context("level list"))
        .collect()
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces
// ---------------------------------------------------------------------------

struct Loaded {
    problem: ProblemSpec,
    mc: MCConfig,
    config: ConfigFile,
    manifest: Manifest,
}

fn load(common: &CommonArgs, command: &str) -> Result<Loaded> {
    if let Some(n) = common.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let raw = fs::read(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    let config: ConfigFile = serde_json::from_slice(&raw)
        .with_context(|| format!("parsing config {}", common.config.display()))?;
    let mut mc = config.mc;
    if let Some(seed) = common.seed {
        mc.seed = seed;
    }
    mc.validate()?;
    let problem = config.problem.clone();
    problem.validate()?;
    let mut hasher = Sha256::new();
    hasher.update(&raw);
    let digest = hasher.finalize();
    let config_sha256: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .ok();
    Ok(Loaded {
        problem,
        mc,
        config,
        manifest: Manifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed: mc.seed,
            config_sha256,
            config_path: common.config.display().to_string(),
            timestamp_unix: timestamp,
        },
    })
}

enum SolveOutcome {
    Found(Threshold),
    Inconclusive { lo: f64, hi: f64 },
}

/// Threshold for any process kind: pooled/exact walk machinery, Lévy root
/// find with auto-bracketing, or the state-curve crossing for chains.
fn solve_threshold(
    p: &ProblemSpec,
    config: &ConfigFile,
    mc: &MCConfig,
    stream: &SeedStream,
) -> Result<SolveOutcome> {
    let wrap = |r: std::result::Result<Threshold, CoreError>| match r {
        Ok(t) => Ok(SolveOutcome::Found(t)),
        Err(CoreError::RootInconclusive { lo, hi }) => Ok(SolveOutcome::Inconclusive { lo, hi }),
        Err(e) => Err(e.into()),
    };
    match &p.process {
        ProcessSpec::Walk(w) => {
            if let Some(section) = &config.solve {
                if let Some(bracket) = section.bracket {
                    return wrap(find_root(p, bracket, mc, section.tol, stream));
                }
            }
            wrap(random_walk_threshold(w, p, mc, stream))
        }
        ProcessSpec::Levy(l) => {
            if let Some(section) = &config.solve {
                if let Some(bracket) = section.bracket {
                    return wrap(find_root(p, bracket, mc, section.tol, stream));
                }
            }
            wrap(continuum_threshold(l, p, mc, stream))
        }
        ProcessSpec::Chain(c) => {
            // τ⁺ is undefined from the top state (nothing above it).
            let grid = &c.states[..c.states.len().saturating_sub(1)];
            let curve = build_fcurve(p, grid, mc, stream)?;
            let a2 = validate_assumption2(&curve)?;
            let (lo, hi) = a2.sign_change.ok_or_else(|| {
                CoreError::BracketNotFound("no sign change across chain states".into())
            })?;
            let idx = curve.grid.iter().position(|&s| s == hi).unwrap();
            let f_at = curve.f_values[idx];
            let ci = curve.ci_halfwidths[idx];
            Ok(SolveOutcome::Found(Threshold {
                x_bar: 0.5 * (lo + hi),
                boundary: Boundary::Nonstrict,
                f_at_root: f_at,
                f_ci: ci,
                assumption2: a2,
                bracket: (lo, hi),
                boundary_inconclusive: false,
            }))
        }
    }
}

fn threshold_json(t: &Threshold, manifest: &Manifest) -> serde_json::Value {
    let mut v = serde_json::to_value(t).expect("threshold serializes");
    v["manifest"] = manifest.payload_stanza();
    v
}

fn default_curve_grid(p: &ProblemSpec, t: &Threshold) -> Vec<f64> {
    if let Some(c) = p.process.as_chain() {
        // f is undefined at the top state (no states above it).
        return c.states[..c.states.len().saturating_sub(1)].to_vec();
    }
    let lo = t.x_bar - 4.0;
    let hi = t.x_bar + 4.0;
    let n = 41;
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

fn lattice_state_space(p: &ProblemSpec) -> bool {
    match &p.process {
        ProcessSpec::Chain(_) => true,
        ProcessSpec::Walk(w) => w.lattice().is_some(),
        ProcessSpec::Levy(_) => false,
    }
}

/// An inconclusive boundary only matters on lattice state spaces, where the
/// strict and non-strict entry rules can actually differ; for continuous
/// state the two rules coincide a.s. and the flag is informational.
fn assumption_ok(p: &ProblemSpec, t: &Threshold) -> bool {
    matches!(t.assumption2.status, Assumption2Status::Certified)
        && (!t.boundary_inconclusive || !lattice_state_space(p))
}

// ---------------------------------------------------------------------------
// Subcommand drivers
// ---------------------------------------------------------------------------

fn cmd_solve(common: &CommonArgs, grid: &Option<String>) -> Result<u8> {
    let loaded = load(common, "solve")?;
    let stream = loaded.mc.stream().derive("solve");
    let outcome = solve_threshold(&loaded.problem, &loaded.config, &loaded.mc, &stream)?;
    write_json(
        &common.out,
        "manifest.json",
        &serde_json::to_value(&loaded.manifest)?,
    )?;
    match outcome {
        SolveOutcome::Found(mut t) => {
            let grid_pts = match (grid, &loaded.config.grid) {
                (Some(s), _) => parse_grid(s)?,
                (None, Some(g)) => {
                    let step = (g.hi - g.lo) / (g.count - 1) as f64;
                    (0..g.count).map(|i| g.lo + step * i as f64).collect()
                }
                (None, None) => default_curve_grid(&loaded.problem, &t),
            };
            let curve = build_fcurve(
                &loaded.problem,
                &grid_pts,
                &loaded.mc,
                &stream.derive("curve"),
            )?;
            // The evenly spaced curve certifies the hypotheses more sharply
            // than the root-clustered bisection records; prefer its verdict
            // when it covers a sign change.
            if let Ok(rep) = validate_assumption2(&curve) {
                t.assumption2 = rep;
            }
            write_json(
                &common.out,
                "threshold.json",
                &threshold_json(&t, &loaded.manifest),
            )?;
            write_text(
                &common.out,
                "fcurve.csv",
                &fcurve_csv(&curve, &loaded.manifest),
            )?;
            Ok(if assumption_ok(&loaded.problem, &t) { 0 } else { 2 })
        }
        SolveOutcome::Inconclusive { lo, hi } => {
            let v = serde_json::json!({
                "root_inconclusive": true,
                "bracket": [lo, hi],
                "manifest": loaded.manifest.payload_stanza(),
            });
            write_json(&common.out, "threshold.json", &v)?;
            Ok(2)
        }
    }
}

fn cmd_fcurve(common: &CommonArgs, grid: &Option<String>) -> Result<u8> {
    let loaded = load(common, "f-curve")?;
    let stream = loaded.mc.stream().derive("f-curve");
    let grid_pts = match (grid, &loaded.config.grid) {
        (Some(s), _) => parse_grid(s)?,
        (None, Some(g)) => {
            let step = (g.hi - g.lo) / (g.count - 1) as f64;
            (0..g.count).map(|i| g.lo + step * i as f64).collect()
        }
        (None, None) => {
            if let Some(c) = loaded.problem.process.as_chain() {
                c.states[..c.states.len().saturating_sub(1)].to_vec()
            } else {
                bail!("f-curve needs --grid lo:hi:count (or a grid section in the config)")
            }
        }
    };
    let curve = build_fcurve(&loaded.problem, &grid_pts, &loaded.mc, &stream)?;
    write_json(
        &common.out,
        "manifest.json",
        &serde_json::to_value(&loaded.manifest)?,
    )?;
    write_text(
        &common.out,
        "fcurve.csv",
        &fcurve_csv(&curve, &loaded.manifest),
    )?;

    // For Lévy problems the descending-ladder transform ĥ rides along.
    if let Some(levy) = loaded.problem.process.as_levy() {
        let hat = hat_transform(
            levy,
            &loaded.problem.cost,
            &grid_pts,
            &loaded.mc,
            &stream.derive("hat"),
        )?;
        let mut s = loaded.manifest.csv_header();
        s.push_str("y,h_hat,ci_low,ci_high,method\n");
        let method = match hat.method {
            optstop_core::ladder::HatMethod::AnalyticBm => "analytic_bm",
            optstop_core::ladder::HatMethod::McSkeleton => "mc_skeleton",
        };
        for i in 0..hat.grid.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(hat.grid[i]),
                fmt_f64(hat.values[i]),
                fmt_f64(hat.values[i] - hat.ci_halfwidths[i]),
                fmt_f64(hat.values[i] + hat.ci_halfwidths[i]),
                method
            ));
        }
        write_text(&common.out, "hat.csv", &s)?;
    }

    let a2 = validate_assumption2(&curve);
    match a2 {
        Ok(rep) if matches!(rep.status, Assumption2Status::Certified) => Ok(0),
        Ok(_) => Ok(2),
        Err(CoreError::BracketNotFound(_)) => Ok(2),
        Err(e) => Err(e.into()),
    }
}

fn cmd_oracle_dp(common: &CommonArgs) -> Result<u8> {
    let loaded = load(common, "oracle-dp")?;
    let stream = loaded.mc.stream().derive("solve");
    let outcome = solve_threshold(&loaded.problem, &loaded.config, &loaded.mc, &stream)?;
    let t = match outcome {
        SolveOutcome::Found(t) => t,
        SolveOutcome::Inconclusive { lo, hi } => {
            bail!("threshold inconclusive on bracket ({lo}, {hi}); cannot compare with DP")
        }
    };
    let tol = loaded.config.dp.as_ref().map(|d| d.tol).unwrap_or(1e-10);
    let domain = match &loaded.config.dp {
        Some(DpSection {
            lo: Some(lo),
            hi: Some(hi),
            ..
        }) => (*lo, *hi),
        _ => dp_auto_domain(&loaded.problem, t.x_bar, &[t.x_bar - 5.0, t.x_bar], tol)?,
    };
    let sol = dp_value_iteration(&loaded.problem, domain, tol)?;

    // Lattice trace of the threshold rule vs the DP stopping set, away from
    // the truncation edges.
    let margin = 5;
    let mut mismatches = Vec::new();
    for (i, &s) in sol.states.iter().enumerate() {
        if i < margin || i + margin >= sol.states.len() {
            continue;
        }
        let rule_stops = match t.boundary {
            Boundary::Nonstrict => s >= t.x_bar,
            Boundary::Strict => s > t.x_bar,
        };
        if rule_stops != sol.stopping_set[i] {
            mismatches.push(s);
        }
    }
    let matches = mismatches.is_empty();

    write_json(
        &common.out,
        "manifest.json",
        &serde_json::to_value(&loaded.manifest)?,
    )?;
    let mut s = loaded.manifest.csv_header();
    s.push_str("state,V,gamma,stopping\n");
    for i in 0..sol.states.len() {
        s.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(sol.states[i]),
            fmt_f64(sol.values[i]),
            fmt_f64(sol.gamma[i]),
            u8::from(sol.stopping_set[i])
        ));
    }
    write_text(&common.out, "dp.csv", &s)?;
    write_json(
        &common.out,
        "dp_verdict.json",
        &serde_json::json!({
            "stopping_set_matches_threshold_rule": matches,
            "mismatched_states": mismatches,
            "x_bar": t.x_bar,
            "boundary": t.boundary,
            "dp_iterations": sol.iterations,
            "dp_residual": sol.residual,
            "domain": domain,
            "manifest": loaded.manifest.payload_stanza(),
        }),
    )?;
    write_json(
        &common.out,
        "threshold.json",
        &threshold_json(&t, &loaded.manifest),
    )?;
    Ok(if matches && assumption_ok(&loaded.problem, &t) { 0 } else { 2 })
}

fn identity_value(name: &str, rep: &IdentityReport) -> serde_json::Value {
    serde_json::json!({
        "name": name,
        "lhs": rep.lhs,
        "rhs": rep.rhs,
        "residual": rep.residual,
        "stderr": rep.stderr,
        "z": rep.z,
        "censored_fraction": rep.censored_fraction,
        "passes": rep.passes(),
    })
}

fn cmd_check_identity(common: &CommonArgs) -> Result<u8> {
    let loaded = load(common, "check-identity")?;
    let stream = loaded.mc.stream().derive("check-identity");
    let mut checks = Vec::new();
    let mut ok = true;
    match &loaded.problem.process {
        ProcessSpec::Levy(levy) => {
            let (x, y_bar) = match &loaded.config.identity {
                Some(IdentitySection {
                    x: Some(x),
                    y_bar: Some(y),
                    ..
                }) => (*x, *y),
                _ => {
                    let t = continuum_threshold(
                        levy,
                        &loaded.problem,
                        &loaded.mc,
                        &stream.derive("thr"),
                    )?;
                    (t.x_bar - 1.0, t.x_bar + 2.0)
                }
            };
            let rep = check_max_representation(
                levy,
                &loaded.problem,
                x,
                y_bar,
                &loaded.mc,
                &stream.derive("max-rep"),
            )?;
            ok &= rep.passes();
            checks.push(identity_value("max_representation", &rep));
        }
        _ => {
            let (x, y) = match &loaded.config.identity {
                Some(IdentitySection {
                    x: Some(x),
                    y_bar: Some(y),
                    ..
                }) => (*x, *y),
                _ => {
                    let outcome = solve_threshold(
                        &loaded.problem,
                        &loaded.config,
                        &loaded.mc,
                        &stream.derive("thr"),
                    )?;
                    match outcome {
                        SolveOutcome::Found(t) => (t.x_bar - 5.0, t.x_bar),
                        SolveOutcome::Inconclusive { lo, hi } => (lo - 5.0, 0.5 * (lo + hi)),
                    }
                }
            };
            let rep = check_ladder_sum_identity(
                &loaded.problem,
                x,
                y,
                &loaded.mc,
                &stream.derive("ladder-sum"),
                LadderConvention::StrictlyBefore,
            )?;
            ok &= rep.passes();
            checks.push(identity_value("ladder_sum", &rep));
        }
    }
    write_json(
        &common.out,
        "manifest.json",
        &serde_json::to_value(&loaded.manifest)?,
    )?;
    write_json(
        &common.out,
        "identity.json",
        &serde_json::json!({
            "checks": checks,
            "manifest": loaded.manifest.payload_stanza(),
        }),
    )?;
    Ok(if ok { 0 } else { 2 })
}

fn cmd_discretize(common: &CommonArgs, levels_arg: &Option<String>) -> Result<u8> {
    let loaded = load(common, "discretize")?;
    let levy = loaded
        .problem
        .process
        .as_levy()
        .ok_or_else(|| anyhow::anyhow!("discretize needs a Lévy process config"))?
        .clone();
    let stream = loaded.mc.stream().derive("discretize");
    let section = loaded.config.discretize.as_ref();
    let scheme = section.map(|d| d.scheme).unwrap_or(Scheme::Spatial);
    let levels = match (levels_arg, section.and_then(|d| d.levels.clone())) {
        (Some(s), _) => parse_levels(s)?,
        (None, Some(v)) => v,
        (None, None) => vec![1, 2, 3, 4],
    };
    let continuum = continuum_threshold(&levy, &loaded.problem, &loaded.mc, &stream.derive("cont"))
        .map(|t| t.x_bar)
        .unwrap_or(0.0);
    let probes = match section.and_then(|d| d.probes.clone()) {
        Some(v) => v,
        // Default: 5 equally spaced points strictly below the continuum
        // threshold estimate.
        None => (1..=5).map(|k| continuum - 0.4 * k as f64).collect(),
    };
    let range = section
        .and_then(|d| d.range)
        .unwrap_or((continuum - 6.0, continuum + 6.0));

    let report = solve_sequence(
        &levy,
        &loaded.problem,
        scheme,
        &levels,
        &probes,
        range,
        &loaded.mc,
        &stream.derive("sequence"),
    )?;
    let residuals = check_fn_convergence(
        &levy,
        &loaded.problem,
        &levels,
        &probes,
        &loaded.mc,
        &stream.derive("fn"),
    )?;

    write_json(
        &common.out,
        "manifest.json",
        &serde_json::to_value(&loaded.manifest)?,
    )?;
    let mut v = serde_json::to_value(&report)?;
    v["manifest"] = loaded.manifest.payload_stanza();
    write_json(&common.out, "discretization.json", &v)?;

    let mut s = loaded.manifest.csv_header();
    s.push_str("level,delta,x_bar_n");
    for p in &report.probes {
        s.push_str(&format!(",V[{p}],se[{p}],fres[{p}]"));
    }
    s.push('\n');
    for (li, &level) in report.levels.iter().enumerate() {
        s.push_str(&format!("{level},{}", fmt_f64(report.deltas[li])));
        match report.thresholds[li] {
            Some(x) => s.push_str(&format!(",{}", fmt_f64(x))),
            None => s.push_str(","),
        }
        for pi in 0..report.probes.len() {
            let pv = &report.values[li][pi];
            s.push_str(&format!(
                ",{},{}",
                fmt_f64(pv.value.direct),
                fmt_f64(pv.value.direct_stderr)
            ));
            match report.f_residuals[li][pi] {
                Some(r) => s.push_str(&format!(",{}", fmt_f64(r))),
                None => s.push_str(","),
            }
        }
        s.push('\n');
    }
    write_text(&common.out, "discretization.csv", &s)?;

    let mut fr = loaded.manifest.csv_header();
    fr.push_str("level,delta,probe,f_n,f_n_ci,f_limit,residual\n");
    for r in &residuals {
        fr.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.level,
            fmt_f64(r.delta),
            fmt_f64(r.probe),
            fmt_f64(r.f_n),
            fmt_f64(r.f_n_ci),
            fmt_f64(r.f_limit),
            fmt_f64(r.residual)
        ));
    }
    write_text(&common.out, "fn_residuals.csv", &fr)?;

    Ok(
        if report.monotone_values_ok && report.monotone_thresholds_ok {
            0
        } else {
            2
        },
    )
}

fn cmd_validate(common: &CommonArgs) -> Result<u8> {
    let loaded = load(common, "validate")?;
    let probe = loaded.config.probe.unwrap_or_default();
    let diag = validate_problem(&loaded.problem, &loaded.mc, &probe)?;
    write_json(
        &common.out,
        "manifest.json",
        &serde_json::to_value(&loaded.manifest)?,
    )?;
    let mut v = serde_json::to_value(&diag)?;
    v["manifest"] = loaded.manifest.payload_stanza();
    v["passes"] = serde_json::json!(diag.passes());
    write_json(&common.out, "diagnostics.json", &v)?;
    if !diag.passes() {
        if !diag.gamma_monotone {
            let shown: Vec<_> = diag.gamma_violations.iter().take(3).collect();
            eprintln!(
                "monotonicity violation: payoff decreases on probe pairs {shown:?} (first {} shown)",
                shown.len()
            );
        }
        if !diag.drift_positive {
            eprintln!("warning: drift E(X₁) is not positive");
        }
        return Ok(2);
    }
    Ok(0)
}

fn run() -> Result<u8> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Solve { common, grid } => cmd_solve(common, grid),
        Command::FCurve { common, grid } => cmd_fcurve(common, grid),
        Command::OracleDp { common } => cmd_oracle_dp(common),
        Command::CheckIdentity { common } => cmd_check_identity(common),
        Command::Discretize { common, levels } => cmd_discretize(common, levels),
        Command::Validate { common } => cmd_validate(common),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
