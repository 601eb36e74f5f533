//! The six subcommands.

use serde::Serialize;

use qsteer::model::{steady_state, step_map, continuum_residual, continuum_steady_state};
use qsteer::protocol::{
    evaluate_from_bins, run_session, verify_announcements, AliceStrategy, BinVerdict,
    ProtocolReport, Session, MIN_BIN_SLIPS,
};
use qsteer::qla::max_abs;
use qsteer::rng::derive_seed;
use qsteer::scenarios::{
    closed_form_generators, closed_form_t, construct_t_schmidt, continuum_joint_steady_state,
    gate_decoupling_residual, nonlocal_collision_map, theta_star, two_qubit_gksl,
    verify_dichotomic_conditions, ScenarioSpec,
};
use qsteer::steering::{
    delta_s, ensemble_avg_sq, entanglement_boundary, eta_crit_search, generate_ensemble,
    nonlocal_violation, EtaCritResult,
};
use qsteer::BlochVec;

use crate::config::RunConfig;
use crate::output::{num, report, with_ext, write_json, CsvWriter};
use crate::AppError;

type CmdResult = Result<(), AppError>;

// ---------------------------------------------------------------------------
// validate

#[derive(Serialize)]
struct Check {
    name: &'static str,
    residual: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    fn new(name: &'static str, residual: f64, tolerance: f64) -> Self {
        Self { name, residual, tolerance, pass: residual <= tolerance }
    }
}

#[derive(Serialize)]
struct ValidateOutput {
    checks: Vec<Check>,
    all_pass: bool,
}

pub fn cmd_validate(cfg: &RunConfig) -> CmdResult {
    let tol = cfg.extra_f64("tolerance", 1e-12)?;
    let p = cfg.params;
    let vac = p.with_eta(-1.0)?;
    let mut checks = Vec::new();

    // steady state is a fixed point of the collision map
    let mut fp_res = 0.0f64;
    for eta in [-1.0, -0.9, -0.5] {
        let pe = p.with_eta(eta)?;
        let ss = steady_state(&pe)?.to_state()?;
        let stepped = step_map(&ss, &pe)?;
        fp_res = fp_res.max(max_abs(&(stepped.density() - ss.density())));
    }
    checks.push(Check::new("steady-state-fixed-point", fp_res, tol));

    // thermal steady state is the vacuum one scaled by −η
    let r_vac = steady_state(&vac)?;
    let mut scale_res = 0.0f64;
    for k in 1..=5 {
        let eta = -0.2 * k as f64;
        let r = steady_state(&p.with_eta(eta)?)?;
        scale_res = scale_res.max(r.sub(&r_vac.scale(-eta)).norm());
    }
    checks.push(Check::new("thermal-scaling", scale_res, 1e-13));

    // adaptive jump identities close on the dichotomic pair
    let (d1, d2) = verify_dichotomic_conditions(&vac)?;
    checks.push(Check::new("dichotomic-jump-identities", d1.max(d2), tol));

    // constructed gate: decoupling and exact fixed point
    let gate = construct_t_schmidt(&vac)?;
    checks.push(Check::new(
        "gate-decoupling",
        gate_decoupling_residual(&vac, &gate)?,
        1e-10,
    ));
    let rho_star = theta_star(&vac)?.to_state()?;
    let next = nonlocal_collision_map(&rho_star, &vac, &gate)?;
    checks.push(Check::new(
        "gate-fixed-point",
        max_abs(&(next.density() - rho_star.density())),
        1e-9,
    ));

    // closed-form gate: Hermitian generators, unitarity, residual shrinking
    let (s1, s2) = closed_form_generators(&vac)?;
    let herm = max_abs(&(s1.matrix() - s1.dagger().matrix()))
        .max(max_abs(&(s2.matrix() - s2.dagger().matrix())));
    checks.push(Check::new("closed-form-hermitian", herm, 1e-14));
    let mut residuals = Vec::new();
    for scale in [1.0, 0.5, 0.25] {
        let pe = vac.with_dt(vac.dt * scale)?;
        let g = closed_form_t(&pe)?;
        let star = theta_star(&pe)?.to_state()?;
        let next = nonlocal_collision_map(&star, &pe, &g)?;
        residuals.push(max_abs(&(next.density() - star.density())));
    }
    let monotone = residuals.windows(2).all(|w| w[1] < w[0]);
    checks.push(Check {
        name: "closed-form-residual-monotone",
        residual: *residuals.last().unwrap(),
        tolerance: residuals[0],
        pass: monotone,
    });

    // joint generator annihilates the continuum pair state
    let theta = continuum_joint_steady_state(&vac);
    let rhs = two_qubit_gksl(&theta.to_state()?, &vac)?;
    checks.push(Check::new("joint-generator-annihilation", max_abs(&rhs), 1e-10));
    let marg_res = theta
        .system_marginal()
        .sub(&continuum_steady_state(&vac))
        .norm();
    checks.push(Check::new("joint-marginal", marg_res, tol));

    // one collision approaches the continuum generator at rate δt
    let probes = [
        BlochVec::new(0.3, -0.2, 0.4),
        BlochVec::new(-0.5, 0.1, -0.3),
        BlochVec::new(0.0, 0.7, 0.2),
        BlochVec::new(0.2, 0.2, -0.8),
        BlochVec::new(-0.6, -0.3, 0.1),
    ];
    let mut ratio_res = 0.0f64;
    for eta in [-1.0, -0.9] {
        for b in &probes {
            let rho = b.to_state()?;
            let r1 = continuum_residual(&p.with_eta(eta)?, &rho)?;
            let r2 = continuum_residual(&p.with_eta(eta)?.with_dt(p.dt * 0.5)?, &rho)?;
            ratio_res = ratio_res.max((r1 / r2 - 2.0).abs());
        }
    }
    checks.push(Check::new("continuum-halving", ratio_res, 0.3));

    let all_pass = checks.iter().all(|c| c.pass);
    for c in &checks {
        let mark = if c.pass { "ok  " } else { "FAIL" };
        println!("{mark} {:32} residual {:.3e} (tolerance {:.1e})", c.name, c.residual, c.tolerance);
    }
    if let Some(base) = &cfg.out {
        let out = ValidateOutput { checks, all_pass };
        write_json(&with_ext(base, "json"), &report(&cfg.echo(), cfg.seed, out))?;
    }
    if all_pass {
        println!("all identity checks passed");
        Ok(())
    } else {
        Err(AppError::Check("identity checks failed".into()))
    }
}

// ---------------------------------------------------------------------------
// ensemble

#[derive(Serialize)]
struct EnsembleSummary {
    scenario: String,
    trajectories: u32,
    collisions: u64,
    distinct_endpoints_1e6: usize,
    mean: BlochVec,
    avg_sq: [f64; 3],
    mean_purity: f64,
}

pub fn cmd_ensemble(cfg: &RunConfig) -> CmdResult {
    let spec = ScenarioSpec::from_name(cfg.scenario.as_deref().unwrap_or("x"))?;
    let budget = cfg.budget()?;
    let ensemble = generate_ensemble(&spec, &cfg.params, &budget, cfg.seed)?;

    let base = cfg.out_base("ensemble");
    let mut csv = CsvWriter::new(&["trajectory_id", "x", "y", "z", "purity"]);
    for (i, m) in ensemble.members.iter().enumerate() {
        csv.row(&[
            i.to_string(),
            num(m.bloch.x),
            num(m.bloch.y),
            num(m.bloch.z),
            num(m.purity),
        ]);
    }
    let csv_path = with_ext(&base, "csv");
    csv.write_to(&csv_path)?;

    let count = ensemble.members.len();
    let mut mean = BlochVec::zero();
    let mut purity = 0.0;
    for m in &ensemble.members {
        mean = mean.add(&m.bloch.scale(m.weight));
        purity += m.weight * m.purity;
    }
    let summary = EnsembleSummary {
        scenario: ensemble.scenario.clone(),
        trajectories: budget.trajectories,
        collisions: budget.collisions,
        distinct_endpoints_1e6: ensemble.distinct_points(1e-6),
        mean,
        avg_sq: [
            ensemble_avg_sq(&ensemble, &BlochVec::x_axis()).0,
            ensemble_avg_sq(&ensemble, &BlochVec::y_axis()).0,
            ensemble_avg_sq(&ensemble, &BlochVec::z_axis()).0,
        ],
        mean_purity: purity,
    };
    write_json(&with_ext(&base, "json"), &report(&cfg.echo(), cfg.seed, &summary))?;
    println!(
        "{} endpoints ({} distinct at 1e-6) -> {}",
        count,
        summary.distinct_endpoints_1e6,
        csv_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// steering

pub fn cmd_steering(cfg: &RunConfig) -> CmdResult {
    let budget = cfg.budget()?;
    let rep = delta_s(&cfg.params, &budget, cfg.seed)?;
    let base = cfg.out_base("steering");
    write_json(&with_ext(&base, "json"), &report(&cfg.echo(), cfg.seed, &rep))?;
    let verdict = if rep.delta_s > 3.0 * rep.stderr {
        "steering detected"
    } else if rep.delta_s < -3.0 * rep.stderr {
        "no steering"
    } else {
        "inconclusive at this budget"
    };
    println!(
        "delta_S = {:.6} +/- {:.6} ({verdict})",
        rep.delta_s, rep.stderr
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-eta

#[derive(Serialize)]
struct SweepRow {
    eta: f64,
    delta_s: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct SweepOutput {
    rows: Vec<SweepRow>,
    crit: EtaCritResult,
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

pub fn cmd_sweep_eta(cfg: &RunConfig) -> CmdResult {
    let lo = cfg.extra_f64("eta_min", -1.0)?;
    let hi = cfg.extra_f64("eta_max", -0.5)?;
    let points = cfg.extra_usize("eta_points", 11)?;
    let budget = cfg.budget()?;

    let mut rows = Vec::new();
    for (i, eta) in linspace(lo, hi, points).into_iter().enumerate() {
        let rep = delta_s(&cfg.params.with_eta(eta)?, &budget, derive_seed(cfg.seed, i as u64))?;
        println!("eta = {eta:+.4}  delta_S = {:+.5} +/- {:.5}", rep.delta_s, rep.stderr);
        rows.push(SweepRow { eta, delta_s: rep.delta_s, stderr: rep.stderr });
    }

    let crit_lo = cfg.extra_f64("crit_lo", -0.9)?;
    let crit_hi = cfg.extra_f64("crit_hi", -0.5)?;
    let crit_tol = cfg.extra_f64("crit_tolerance", 0.02)?;
    let crit = eta_crit_search(&cfg.params, crit_lo, crit_hi, crit_tol, &budget, cfg.seed)?;
    println!(
        "eta_crit in [{:.4}, {:.4}] (midpoint {:.4} +/- {:.4})",
        crit.eta_lo, crit.eta_hi, crit.eta_crit, crit.uncertainty
    );

    let base = cfg.out_base("sweep-eta");
    let mut csv = CsvWriter::new(&["eta", "delta_s", "stderr"]);
    for r in &rows {
        csv.row(&[num(r.eta), num(r.delta_s), num(r.stderr)]);
    }
    csv.write_to(&with_ext(&base, "csv"))?;
    write_json(
        &with_ext(&base, "json"),
        &report(&cfg.echo(), cfg.seed, SweepOutput { rows, crit }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// concurrence-map

#[derive(Serialize)]
struct MapOutput {
    contour: Vec<(f64, f64)>,
}

pub fn cmd_concurrence_map(cfg: &RunConfig) -> CmdResult {
    let dt_lo = cfg.extra_f64("dt_min", 1e-3)?;
    let dt_hi = cfg.extra_f64("dt_max", 0.3)?;
    let dt_points = cfg.extra_usize("dt_points", 30)?;
    let eta_lo = cfg.extra_f64("eta_min", -1.0)?;
    let eta_hi = cfg.extra_f64("eta_max", -0.5)?;
    let eta_points = cfg.extra_usize("eta_points", 26)?;

    let dts = linspace(dt_lo, dt_hi, dt_points);
    let etas = linspace(eta_lo, eta_hi, eta_points);
    let map = entanglement_boundary(&cfg.params, &dts, &etas)?;

    // flag the first separable row after an entangled one in each column
    let per_dt = etas.len();
    let mut flags = vec![0u8; map.rows.len()];
    for (col, chunk) in map.rows.chunks(per_dt).enumerate() {
        for i in 1..chunk.len() {
            if chunk[i - 1].2 > 0.0 && chunk[i].2 == 0.0 {
                flags[col * per_dt + i] = 1;
                break;
            }
        }
    }
    let base = cfg.out_base("concurrence-map");
    let mut csv = CsvWriter::new(&["dt", "eta", "concurrence", "boundary"]);
    for (row, flag) in map.rows.iter().zip(&flags) {
        csv.row(&[num(row.0), num(row.1), num(row.2), flag.to_string()]);
    }
    csv.write_to(&with_ext(&base, "csv"))?;
    write_json(
        &with_ext(&base, "json"),
        &report(&cfg.echo(), cfg.seed, MapOutput { contour: map.contour.clone() }),
    )?;
    println!(
        "{} grid points, boundary located for {} of {} dt columns",
        map.rows.len(),
        map.contour.len(),
        dts.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// protocol

#[derive(Serialize)]
struct SessionSummary {
    scenario: String,
    runs: u64,
    collisions: u64,
    bins: usize,
    total_slips: u64,
}

impl SessionSummary {
    fn of(s: &Session) -> Self {
        Self {
            scenario: s.scenario.clone(),
            runs: s.runs,
            collisions: s.collisions,
            bins: s.bins.len(),
            total_slips: s.total_slips(),
        }
    }
}

#[derive(Serialize)]
struct VerdictCounts {
    consistent: usize,
    inconsistent: usize,
    unjudged: usize,
}

#[derive(Serialize)]
struct ProtocolOutput {
    strategy: String,
    sessions: Vec<SessionSummary>,
    report: Option<ProtocolReport>,
    verdict_counts: VerdictCounts,
    verdicts: Vec<BinVerdict>,
    /// maximal nonlocal-violation benchmark for context, vacuum only
    max_violation: Option<f64>,
}

fn transcript_csv(sessions: &[&Session]) -> CsvWriter {
    let mut csv = CsvWriter::new(&[
        "run",
        "scenario",
        "announced_x",
        "announced_y",
        "announced_z",
        "axis",
        "outcome",
    ]);
    for s in sessions {
        for row in &s.transcript {
            csv.row(&[
                row.run.to_string(),
                s.scenario.clone(),
                num(row.announced.x),
                num(row.announced.y),
                num(row.announced.z),
                row.axis.label().to_string(),
                row.outcome.to_string(),
            ]);
        }
    }
    csv
}

pub fn cmd_protocol(cfg: &RunConfig) -> CmdResult {
    let strategy_name = cfg.extra_str("strategy").unwrap_or("honest").to_string();
    let runs = cfg.extra_u64("runs", if cfg.fast { 30_000 } else { 120_000 })?;
    let collisions = if cfg.steps_given { cfg.steps } else { 10_000 };
    // the fast preset halves the per-bin floor so the ring bins still qualify
    let min_slips =
        cfg.extra_u64("min_slips", if cfg.fast { MIN_BIN_SLIPS / 2 } else { MIN_BIN_SLIPS })?;
    let tolerance = cfg.extra_f64("tolerance", 0.05)?;
    let p = cfg.params;

    let mut sessions: Vec<Session> = Vec::new();
    let mut report_out: Option<ProtocolReport> = None;

    match (strategy_name.as_str(), cfg.scenario.as_deref()) {
        ("honest", None) => {
            // The full game over scenarios whose ensembles concentrate on a
            // few bins, so tomography fills up: the x-scenario ring carries
            // the y- and z-terms, the two-point adaptive ensemble the x-term.
            let sx = run_session(
                &AliceStrategy::Honest(ScenarioSpec::from_name("x")?),
                runs,
                collisions,
                &p,
                derive_seed(cfg.seed, u64::from(u32::MAX) + 11),
            )?;
            // two bins soak up every adaptive run; a tenth of the budget fills
            // them generously
            let sa = run_session(
                &AliceStrategy::Honest(ScenarioSpec::Adaptive),
                (runs / 10).max(1_200),
                collisions,
                &p,
                derive_seed(cfg.seed, u64::from(u32::MAX) + 12),
            )?;
            let dirs_x = [BlochVec::y_axis(), BlochVec::z_axis()];
            let dirs_a = [BlochVec::x_axis()];
            let rep = evaluate_from_bins(
                &[(&sx, &dirs_x[..]), (&sa, &dirs_a[..])],
                min_slips,
            )?;
            println!(
                "reconstructed LHS = {:.4} +/- {:.4} (delta_S = {:+.4})",
                rep.lhs, rep.stderr, rep.delta_s
            );
            report_out = Some(rep);
            sessions.push(sx);
            sessions.push(sa);
        }
        ("honest", Some(name)) => {
            let session = run_session(
                &AliceStrategy::Honest(ScenarioSpec::from_name(name)?),
                runs,
                collisions,
                &p,
                derive_seed(cfg.seed, u64::from(u32::MAX) + 11),
            )?;
            sessions.push(session);
        }
        ("fixed-ensemble", _) => {
            let (rp, rm) = qsteer::scenarios::dichotomic_targets(&p)?;
            let strategy = AliceStrategy::FixedEnsemble {
                members: vec![(0.5, rp), (0.5, rm)],
            };
            let session = run_session(
                &strategy,
                runs,
                collisions,
                &p,
                derive_seed(cfg.seed, u64::from(u32::MAX) + 13),
            )?;
            let dirs = [BlochVec::x_axis(), BlochVec::y_axis(), BlochVec::z_axis()];
            let rep = evaluate_from_bins(&[(&session, &dirs[..])], min_slips)?;
            println!(
                "cheat LHS = {:.4} +/- {:.4} (bound 1 + 3 sigma = {:.4})",
                rep.lhs,
                rep.stderr,
                1.0 + 3.0 * rep.stderr
            );
            report_out = Some(rep);
            sessions.push(session);
        }
        ("announce-without-measuring", scenario) => {
            let spec = ScenarioSpec::from_name(scenario.unwrap_or("adaptive"))?;
            let session = run_session(
                &AliceStrategy::AnnounceWithoutMeasuring(spec),
                runs,
                collisions,
                &p,
                derive_seed(cfg.seed, u64::from(u32::MAX) + 14),
            )?;
            let dirs = [BlochVec::x_axis(), BlochVec::y_axis(), BlochVec::z_axis()];
            let rep = evaluate_from_bins(&[(&session, &dirs[..])], min_slips)?;
            println!(
                "cheat LHS = {:.4} +/- {:.4} (bound 1 + 3 sigma = {:.4})",
                rep.lhs,
                rep.stderr,
                1.0 + 3.0 * rep.stderr
            );
            report_out = Some(rep);
            sessions.push(session);
        }
        (other, _) => {
            return Err(AppError::Config(crate::config::ConfigError(format!(
                "unknown strategy '{other}' (honest | fixed-ensemble | announce-without-measuring)"
            ))));
        }
    }

    let mut verdicts = Vec::new();
    for s in &sessions {
        verdicts.extend(verify_announcements(s, tolerance, min_slips));
    }
    let counts = VerdictCounts {
        consistent: verdicts.iter().filter(|v| v.consistent == Some(true)).count(),
        inconsistent: verdicts.iter().filter(|v| v.consistent == Some(false)).count(),
        unjudged: verdicts.iter().filter(|v| v.consistent.is_none()).count(),
    };
    println!(
        "bins: {} consistent, {} inconsistent, {} unjudged",
        counts.consistent, counts.inconsistent, counts.unjudged
    );

    let max_violation = if p.is_vacuum() {
        Some(nonlocal_violation(&p)?.lhs)
    } else {
        None
    };

    let base = cfg.out_base("protocol");
    let session_refs: Vec<&Session> = sessions.iter().collect();
    transcript_csv(&session_refs).write_to(&with_ext(&base, "transcript.csv"))?;
    let out = ProtocolOutput {
        strategy: strategy_name,
        sessions: sessions.iter().map(SessionSummary::of).collect(),
        report: report_out,
        verdict_counts: counts,
        verdicts,
        max_violation,
    };
    write_json(&with_ext(&base, "json"), &report(&cfg.echo(), cfg.seed, &out))?;
    Ok(())
}
