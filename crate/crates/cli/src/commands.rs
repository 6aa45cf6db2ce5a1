use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use nuhyp::blocks::{
    block_points, default_epsilon, eps0, resonance_from_stats, resonance_times, select_power, tempered_audit_orbit,
    write_profile_csv, Exponents, PowerSelection, ResonanceProfile,
};
use nuhyp::cocycle::{cocycle_stats, orbit, CocycleStats, OrbitSegment};
use nuhyp::horseshoe::{periodic_growth, run_horseshoe, HorseshoeParams};
use nuhyp::manifolds::{chart_radius, local_stable_manifold, local_unstable_manifold, ManifoldCertificate, ManifoldConfig};
use nuhyp::shadowing::{
    close_periodic, periodic_point_near, recurrence_with_gap, shadow_constructive, shadow_newton, ConstructiveConfig,
    NewtonConfig, PeriodicCertificate, PseudoOrbit, ShadowConstants, ShadowResult,
};
use nuhyp::spectrum::{approximate_spectrum_by_periodic, SpectrumConfig};
use nuhyp::systems::{default_splitting, map_from_descriptor};
use nuhyp::{Error, Splitting, TorusMap, TorusPoint};

use crate::config::{Command, RunConfig, UsageError};
use crate::output::Output;

#[derive(Debug)]
pub enum CliError {
    Usage(UsageError),
    Core(Error),
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(Error::Io(e.into()))
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Runs the command and returns a one-line summary for stdout.
pub fn run(cfg: &RunConfig) -> Result<String> {
    match cfg.command {
        Command::Analyze => analyze(cfg),
        Command::Manifold => manifold(cfg),
        Command::Shadow => shadow(cfg),
        Command::Close => close(cfg),
        Command::Horseshoe => horseshoe(cfg),
        Command::Spectrum => spectrum(cfg),
        Command::SelectPower => power(cfg),
    }
}

fn system(cfg: &RunConfig) -> Result<(Arc<TorusMap>, Arc<dyn Splitting>)> {
    let map = Arc::new(map_from_descriptor(&cfg.system)?);
    let s = default_splitting(&map)?;
    Ok((map, s))
}

/// Orbit of length n + window from the start point, its cocycle and exponents,
/// and the checked epsilon.
struct Base {
    x0: TorusPoint,
    seg: OrbitSegment,
    stats: CocycleStats,
    exps: Exponents,
    eps0: f64,
    epsilon: f64,
}

fn base(cfg: &RunConfig, map: &TorusMap, s: &dyn Splitting, steps: usize) -> Result<Base> {
    let x0 = cfg.start_point();
    let seg = orbit(map, &x0, steps)?;
    let stats = cocycle_stats(&seg, s)?;
    let exps = Exponents::from_stats(&stats);
    let e0 = eps0(&[exps.chi_e, exps.chi_f]);
    let epsilon = cfg.epsilon.unwrap_or_else(|| default_epsilon(&exps));
    if epsilon >= e0 {
        return Err(Error::EpsilonTooLarge { epsilon, eps0: e0 }.into());
    }
    Ok(Base {
        x0,
        seg,
        stats,
        exps,
        eps0: e0,
        epsilon,
    })
}

fn verify(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Verification(what()).into())
    }
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LevelRow {
    t: f64,
    density: f64,
    lower: f64,
    upper: f64,
    times: usize,
    tail_start: usize,
    block_points: usize,
    mesh: Option<f64>,
}

#[derive(Serialize)]
struct TemperedSummary {
    n: usize,
    max_late: f64,
    max_mid: f64,
    decay_pass: bool,
    loose_pass: bool,
}

#[derive(Serialize)]
struct AnalyzeReport {
    x0: TorusPoint,
    chi_e: f64,
    chi_f: f64,
    eps0: f64,
    epsilon: f64,
    window: usize,
    windowed: bool,
    computed: usize,
    max_log_a1: f64,
    max_log_a2: f64,
    levels: Vec<LevelRow>,
    tempered: Option<TemperedSummary>,
}

fn analyze(cfg: &RunConfig) -> Result<String> {
    let (map, s) = system(cfg)?;
    let b = base(cfg, &map, s.as_ref(), cfg.n + cfg.window)?;
    let profile = resonance_from_stats(&b.stats, &b.exps, b.epsilon, cfg.window, b.x0)?;
    let tail_start = cfg.n / 2;
    let mut levels = Vec::new();
    for &t in &cfg.levels {
        let h = resonance_times(&profile, t)?;
        let block = match block_points(&b.seg, &h, tail_start) {
            Ok(bl) => Some(bl),
            Err(Error::EmptyTail { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        levels.push(LevelRow {
            t,
            density: h.density,
            lower: h.lower,
            upper: h.upper,
            times: h.times.len(),
            tail_start,
            block_points: block.as_ref().map_or(0, |bl| bl.points.len()),
            mesh: block.map(|bl| bl.mesh),
        });
    }
    let tempered = if cfg.tempered {
        let (a, _) = tempered_audit_orbit(map.as_ref(), s.as_ref(), &b.x0, cfg.n, b.epsilon, cfg.window, &cfg.levels)?;
        Some(TemperedSummary {
            n: a.n,
            max_late: a.max_late,
            max_mid: a.max_mid,
            decay_pass: a.decay_pass,
            loose_pass: a.loose_pass,
        })
    } else {
        None
    };
    let report = AnalyzeReport {
        x0: b.x0,
        chi_e: b.exps.chi_e,
        chi_f: b.exps.chi_f,
        eps0: b.eps0,
        epsilon: b.epsilon,
        window: cfg.window,
        windowed: profile.windowed,
        computed: profile.len(),
        max_log_a1: profile.a1.iter().copied().fold(0.0, f64::max),
        max_log_a2: profile.a2.iter().copied().fold(0.0, f64::max),
        levels,
        tempered,
    };
    let mut out = Output::new(cfg)?;
    out.json("analyze.json", &report)?;
    let mut w = out.text("profile.csv")?;
    write_profile_csv(&profile, &cfg.levels, &mut w)?;
    w.flush()?;
    let mut w = out.text("cocycle.csv")?;
    b.stats.write_csv(&mut w)?;
    w.flush()?;
    let dens: Vec<String> = report.levels.iter().map(|l| format!("H_{}={:.4}", l.t, l.density)).collect();
    Ok(format!(
        "analyze: chi_E={:.6} chi_F={:.6} eps={} {}",
        report.chi_e,
        report.chi_f,
        report.epsilon,
        dens.join(" ")
    ))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ManifoldReport {
    block_index: usize,
    point: TorusPoint,
    t: f64,
    epsilon: f64,
    chart_radius: f64,
    forward_returns: usize,
    backward_returns: usize,
    stable: ManifoldCertificate,
    unstable: ManifoldCertificate,
}

fn manifold(cfg: &RunConfig) -> Result<String> {
    let (map, s) = system(cfg)?;
    let b = base(cfg, &map, s.as_ref(), cfg.n + cfg.window)?;
    let profile: ResonanceProfile = resonance_from_stats(&b.stats, &b.exps, b.epsilon, cfg.window, b.x0)?;
    let h = resonance_times(&profile, cfg.t)?;
    if h.times.len() < 3 {
        return Err(Error::Precondition(format!("only {} resonance times at level {}", h.times.len(), cfg.t)).into());
    }
    let j = match cfg.index {
        Some(i) if h.contains(i) => i,
        Some(i) => return Err(Error::Precondition(format!("index {i} is not a resonance time at level {}", cfg.t)).into()),
        None => h.times[h.times.len() / 3],
    };
    let forward: Vec<usize> = h.times.iter().filter(|&&n| n > j).map(|&n| n - j).collect();
    let backward: Vec<usize> = h.times.iter().rev().filter(|&&n| n < j).map(|&n| j - n).collect();
    let r = chart_radius(map.as_ref(), s.as_ref(), b.epsilon, 16);
    let mut mcfg = ManifoldConfig::new(cfg.t, b.epsilon, b.exps, r);
    mcfg.seed = cfg.seed;
    let x = b.seg.points[j];
    let (ws, cs) = local_stable_manifold(map.as_ref(), s.as_ref(), &x, &forward, &mcfg)?;
    let (wu, cu) = local_unstable_manifold(map.as_ref(), s.as_ref(), &x, &backward, &mcfg)?;
    let report = ManifoldReport {
        block_index: j,
        point: x,
        t: cfg.t,
        epsilon: b.epsilon,
        chart_radius: r,
        forward_returns: forward.len(),
        backward_returns: backward.len(),
        stable: cs,
        unstable: cu,
    };
    let mut out = Output::new(cfg)?;
    out.json("manifold.json", &report)?;
    let mut w = out.csv("manifold.csv")?;
    w.write_record(["kind", "x", "y"])?;
    for (kind, disk) in [("stable", &ws), ("unstable", &wu)] {
        for p in disk.polyline(64) {
            w.serialize((kind, p.coords[0], p.coords[1]))?;
        }
    }
    w.flush()?;
    let (st, un) = (&report.stable, &report.unstable);
    verify(st.contraction.pass && un.contraction.pass, || "contraction audit failed".into())?;
    Ok(format!(
        "manifold: index {j} r={r:.4e} stable tangency={:.2e} unstable tangency={:.2e}",
        st.tangency, un.tangency
    ))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ShadowReport {
    entries: usize,
    beta: f64,
    t: f64,
    epsilon: f64,
    constants: ShadowConstants,
    constructive: Option<ShadowResult>,
    newton: Option<ShadowResult>,
    /// distance between the two shadow points when both solvers ran
    agreement: Option<f64>,
}

fn read_input(cfg: &RunConfig) -> Result<String> {
    let p = cfg
        .input
        .as_ref()
        .ok_or_else(|| UsageError(format!("{} needs an input file", cfg.command.name())))?;
    std::fs::read_to_string(p).map_err(|e| UsageError(format!("cannot read input {p}: {e}")).into())
}

fn shadow(cfg: &RunConfig) -> Result<String> {
    let text = read_input(cfg)?;
    let (map, s) = system(cfg)?;
    let mut po = PseudoOrbit::from_text(&text)?;
    if po.beta.is_nan() {
        po = po.with_measured_beta(map.as_ref());
    }
    let b = base(cfg, &map, s.as_ref(), cfg.n)?;
    let consts = ShadowConstants::measure(map.as_ref(), s.as_ref(), po.block_level, b.epsilon, b.exps, cfg.samples, cfg.seed)?;
    let constructive = if cfg.solver != "newton" {
        Some(shadow_constructive(map.as_ref(), s.as_ref(), &po, &consts, &ConstructiveConfig::default())?)
    } else {
        None
    };
    let newton = if cfg.solver != "constructive" {
        Some(shadow_newton(map.as_ref(), &po, consts.c1, consts.lambda, &NewtonConfig::default())?)
    } else {
        None
    };
    let agreement = match (&constructive, &newton) {
        (Some(a), Some(b)) => Some(a.z.distance(&b.z)),
        _ => None,
    };
    let report = ShadowReport {
        entries: po.len(),
        beta: po.beta,
        t: po.block_level,
        epsilon: b.epsilon,
        constants: consts,
        constructive,
        newton,
        agreement,
    };
    let mut out = Output::new(cfg)?;
    out.json("shadow.json", &report)?;
    let results: Vec<&ShadowResult> = report.constructive.iter().chain(report.newton.iter()).collect();
    let z = results[0].z;
    let max_err = results.iter().map(|r| r.max_error()).fold(0.0, f64::max);
    verify(results.iter().all(|r| r.envelope_pass), || "shadowing envelope violated".into())?;
    Ok(format!(
        "shadow: z=({:.15}, {:.15}) max_error={max_err:.3e} agreement={}",
        z.coords[0],
        z.coords[1],
        agreement.map_or("n/a".into(), |a| format!("{a:.3e}"))
    ))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CloseReport {
    source: String,
    seed_point: TorusPoint,
    period: usize,
    gap: f64,
    epsilon: f64,
    constants: ShadowConstants,
    certificate: PeriodicCertificate,
}

const CLOSE_RESIDUAL: f64 = 1e-10;

fn close(cfg: &RunConfig) -> Result<String> {
    let (map, s) = system(cfg)?;
    let (po, source) = if cfg.input.is_some() {
        (PseudoOrbit::from_text(&read_input(cfg)?)?, "input".to_string())
    } else if cfg.period > 0 {
        let x0 = cfg.start_point();
        if cfg.gap > 0.0 {
            let (p, _) = periodic_point_near(map.as_ref(), &x0, cfg.period, 1e-15)?;
            let x = recurrence_with_gap(map.as_ref(), s.as_ref(), &p, cfg.period, cfg.gap)?;
            (PseudoOrbit::periodic_chain(x, cfg.period, 0, cfg.gap, cfg.t)?, "recurrence".to_string())
        } else {
            (PseudoOrbit::periodic_chain(x0, cfg.period, 0, 0.0, cfg.t)?, "start point".to_string())
        }
    } else {
        return Err(UsageError("close needs an input file or a period".into()).into());
    };
    let po = po.with_measured_beta(map.as_ref());
    let b = base(cfg, &map, s.as_ref(), cfg.n)?;
    let consts = ShadowConstants::measure(map.as_ref(), s.as_ref(), po.block_level, b.epsilon, b.exps, cfg.samples, cfg.seed)?;
    let cert = close_periodic(map.as_ref(), s.as_ref(), &po, Some(&consts), 1e-14)?;
    let report = CloseReport {
        source,
        seed_point: po.points[0],
        period: po.steps[0],
        gap: po.beta,
        epsilon: b.epsilon,
        constants: consts,
        certificate: cert,
    };
    let mut out = Output::new(cfg)?;
    out.json("close.json", &report)?;
    let c = &report.certificate;
    verify(c.residual <= CLOSE_RESIDUAL, || format!("closing residual {:e}", c.residual))?;
    verify(c.bounds_pass, || format!("hyperbolicity bounds fail: lambda = {}", c.lambda))?;
    Ok(format!(
        "close: p=({:.15}, {:.15}) period {} residual={:.2e} floquet=({:.12}, {:.12})",
        c.p.coords[0], c.p.coords[1], c.period, c.residual, c.floquet[0], c.floquet[1]
    ))
}

// ---------------------------------------------------------------------------

fn horseshoe(cfg: &RunConfig) -> Result<String> {
    let (map, s) = system(cfg)?;
    let mut p = HorseshoeParams::desk(cfg.n, cfg.epsilon.unwrap_or(0.3), cfg.seed);
    p.support_size = cfg.support_size;
    p.measure_steps = cfg.measure_steps;
    p.candidates = cfg.candidates;
    p.alphabet_trim = cfg.alphabet_trim;
    let run = run_horseshoe(map.as_ref(), s.as_ref(), &p)?;
    let model = &run.model;
    let symbols: Vec<usize> = (0..model.alphabet.len().min(2)).collect();
    let linear = map.terms.is_empty().then_some(&map.linear);
    let growth = periodic_growth(map.as_ref(), &model.alphabet, &symbols, model.m, &[1, 2, 3], 1e-9, linear)?;
    let mut out = Output::new(cfg)?;
    out.json("horseshoe.json", &run)?;
    let mut w = out.csv("alphabet.csv")?;
    w.write_record(["symbol", "x", "y"])?;
    for (i, a) in model.alphabet.iter().enumerate() {
        w.serialize((i, a.coords[0], a.coords[1]))?;
    }
    w.flush()?;
    for (name, pts) in [("decoded.csv", &run.audit.cloud), ("support.csv", &run.support_sample)] {
        let mut w = out.csv(name)?;
        w.write_record(["x", "y"])?;
        for q in pts {
            w.serialize((q.coords[0], q.coords[1]))?;
        }
        w.flush()?;
    }
    let mut w = out.csv("growth.csv")?;
    w.write_record(["word_length", "period", "words", "distinct", "rate", "lefschetz"])?;
    for g in &growth {
        w.serialize((g.word_length, g.period, g.words, g.distinct, g.rate, g.lefschetz))?;
    }
    w.flush()?;
    let a = &run.audit;
    Ok(format!(
        "horseshoe: |alphabet|={} m={} entropy={:.4} h_mu={:.4} gap={:.4} hausdorff={:.4} measure={:.4} hyperbolic={} injective={}",
        model.alphabet.len(),
        model.m,
        a.entropy_estimate,
        a.h_mu,
        a.entropy_gap,
        a.hausdorff,
        a.measure_distance.bound,
        a.hyperbolicity_pass,
        a.injectivity_pass
    ))
}

// ---------------------------------------------------------------------------

fn spectrum(cfg: &RunConfig) -> Result<String> {
    let (map, s) = system(cfg)?;
    let mut sc = SpectrumConfig::new(cfg.epsilon.unwrap_or(0.05));
    sc.t = cfg.t;
    sc.lyapunov_steps = cfg.n;
    sc.window = cfg.window;
    sc.budget = cfg.budget;
    sc.seed = cfg.seed;
    let x0 = cfg.start_point();
    let report = approximate_spectrum_by_periodic(map.as_ref(), s.as_ref(), &x0, &sc)?;
    let mut out = Output::new(cfg)?;
    out.json("spectrum.json", &report)?;
    let m = &report.matched;
    let mut w = out.csv("floquet.csv")?;
    w.write_record(["rank", "mu_exponent", "periodic_exponent", "gap"])?;
    for (i, (a, b)) in m.mu_exponents.iter().zip(&m.periodic_exponents).enumerate() {
        w.serialize((i, a, b, (a - b).abs()))?;
    }
    w.flush()?;
    verify(m.pass, || format!("spectrum gap {} above {}", m.max_gap, m.tolerance))?;
    Ok(format!(
        "spectrum: period {} max_gap={:.4e} tolerance={}",
        report.certificate.period, m.max_gap, m.tolerance
    ))
}

// ---------------------------------------------------------------------------

fn power(cfg: &RunConfig) -> Result<String> {
    let (map, s) = system(cfg)?;
    let x0 = cfg.start_point();
    let eps = match cfg.epsilon {
        Some(e) => e,
        None => base(cfg, &map, s.as_ref(), cfg.n)?.epsilon,
    };
    let sel: PowerSelection = select_power(map.as_ref(), s.as_ref(), &x0, eps, cfg.theta, &cfg.powers, cfg.n, cfg.window)?;
    let mut out = Output::new(cfg)?;
    out.json("select_power.json", &sel)?;
    Ok(format!("select-power: N={} density={:.4}", sel.n, sel.density))
}
