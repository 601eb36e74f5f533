//! Endpoint-ensemble statistics and steering certification.
//!
//! The measured-environment scenarios leave the system in a pure conditional
//! state at the end of each trajectory; the weighted set of those endpoints
//! is the scenario's endpoint ensemble. Averaging squared spin components
//! over suitable ensembles gives the three-term inequality whose value above
//! 1 certifies steering, the steerability ΔS, and — scanned over the
//! environment polarization η — the critical temperature where steerability
//! is lost.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_q, env_state, steady_state, BlochVec, ModelParams};
use crate::qla::{kron_states, sigma_y, C64, QState};
use crate::rng::{derive_seed, trajectory_rng};
use crate::scenarios::{
    run_trajectory, steered_ensembles_from_control, theta_star, ScenarioSpec, SpinObservable,
};

// ---------------------------------------------------------------------------
// Ensembles

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub weight: f64,
    pub bloch: BlochVec,
    pub purity: f64,
}

/// Trajectory counts for ensemble generation. `collisions` is the trajectory
/// length; `burn_in` is the mixing floor it must not undercut.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrajectoryBudget {
    pub trajectories: u32,
    pub collisions: u64,
    pub burn_in: u64,
}

impl TrajectoryBudget {
    pub fn new(trajectories: u32, collisions: u64, burn_in: u64) -> Result<Self> {
        if trajectories == 0 {
            return Err(Error::InvalidParams("at least one trajectory required".into()));
        }
        if collisions < burn_in {
            return Err(Error::InvalidParams(format!(
                "trajectory length {collisions} is shorter than the burn-in {burn_in}"
            )));
        }
        Ok(Self { trajectories, collisions, burn_in })
    }

    /// Reference budget: 10³ trajectories of 10⁶ collisions.
    pub fn full() -> Self {
        Self { trajectories: 1_000, collisions: 1_000_000, burn_in: 50_000 }
    }

    /// CI-scale budget: 10⁴ collisions clear the 1/(γδt) = 10³ mixing time of
    /// the reference parameters by a factor of ten.
    pub fn fast() -> Self {
        Self { trajectories: 1_000, collisions: 10_000, burn_in: 10_000 }
    }

    pub fn with_trajectories(mut self, trajectories: u32) -> Self {
        self.trajectories = trajectories;
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EndpointEnsemble {
    pub scenario: String,
    pub members: Vec<EnsembleMember>,
    pub params: ModelParams,
    pub budget: TrajectoryBudget,
    pub master_seed: u64,
}

impl EndpointEnsemble {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.members.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidState(format!("ensemble weights sum to {total}")));
        }
        for m in &self.members {
            if m.bloch.norm() > 1.0 + 1e-9 {
                return Err(Error::InvalidState(format!(
                    "member Bloch norm {} exceeds 1",
                    m.bloch.norm()
                )));
            }
        }
        Ok(())
    }

    /// Number of distinct endpoints after greedy clustering at the given
    /// Bloch-distance tolerance (reporting only; members stay unclustered).
    pub fn distinct_points(&self, tol: f64) -> usize {
        let mut reps: Vec<BlochVec> = Vec::new();
        for m in &self.members {
            if !reps.iter().any(|r| r.sub(&m.bloch).norm() <= tol) {
                reps.push(m.bloch);
            }
        }
        reps.len()
    }
}

/// Simulate `budget.trajectories` independent trajectories and collect their
/// endpoints with equal weights. Trajectory i draws from a stream derived
/// from (master_seed, i), so the result is independent of worker count and
/// scheduling.
pub fn generate_ensemble(
    spec: &ScenarioSpec,
    params: &ModelParams,
    budget: &TrajectoryBudget,
    master_seed: u64,
) -> Result<EndpointEnsemble> {
    TrajectoryBudget::new(budget.trajectories, budget.collisions, budget.burn_in)?;
    let endpoints: Vec<Result<crate::scenarios::Endpoint>> = (0..budget.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(master_seed, i as u64);
            run_trajectory(spec, params, budget.collisions, &mut rng)
        })
        .collect();
    let weight = 1.0 / budget.trajectories as f64;
    let mut members = Vec::with_capacity(budget.trajectories as usize);
    for e in endpoints {
        let e = e?;
        members.push(EnsembleMember { weight, bloch: e.bloch, purity: e.purity });
    }
    let ensemble = EndpointEnsemble {
        scenario: spec.id(),
        members,
        params: *params,
        budget: *budget,
        master_seed,
    };
    ensemble.validate()?;
    Ok(ensemble)
}

// ---------------------------------------------------------------------------
// Inequality statistics

/// Weighted average of the squared spin component along `n`, with the
/// standard error of the weighted mean.
pub fn ensemble_avg_sq(e: &EndpointEnsemble, n: &BlochVec) -> (f64, f64) {
    let mut mean = 0.0;
    for m in &e.members {
        let q = n.dot(&m.bloch);
        mean += m.weight * q * q;
    }
    let mut var = 0.0;
    for m in &e.members {
        let q = n.dot(&m.bloch);
        let d = q * q - mean;
        var += m.weight * m.weight * d * d;
    }
    (mean, var.sqrt())
}

/// Three-term squared-spin sum E₁[⟨σ_n⟩²] + E₂[⟨σ_m⟩²] + E₃[⟨σ_k⟩²] over
/// pairwise-orthogonal directions. Values above 1 certify steering.
pub fn inequality_lhs(
    e1: &EndpointEnsemble,
    e2: &EndpointEnsemble,
    e3: &EndpointEnsemble,
    n: &BlochVec,
    m: &BlochVec,
    k: &BlochVec,
) -> Result<(f64, f64)> {
    for (a, b) in [(n, m), (m, k), (n, k)] {
        if a.dot(b).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!(
                "inequality directions are not orthogonal (dot = {})",
                a.dot(b)
            )));
        }
    }
    let (v1, s1) = ensemble_avg_sq(e1, n);
    let (v2, s2) = ensemble_avg_sq(e2, m);
    let (v3, s3) = ensemble_avg_sq(e3, k);
    Ok((v1 + v2 + v3, (s1 * s1 + s2 * s2 + s3 * s3).sqrt()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteeringReport {
    /// E_x[⟨σy⟩²], E_x[⟨σz⟩²], E_y[⟨σx⟩²]
    pub terms: [f64; 3],
    pub term_stderrs: [f64; 3],
    pub lhs: f64,
    pub delta_s: f64,
    pub stderr: f64,
    /// directions paired with the terms above
    pub directions: [BlochVec; 3],
    pub params: ModelParams,
    pub budget: TrajectoryBudget,
    pub master_seed: u64,
}

/// Steerability ΔS: generate the x- and y-measurement endpoint ensembles and
/// evaluate E_x[⟨σy⟩²] + E_x[⟨σz⟩²] + E_y[⟨σx⟩²] − 1.
pub fn delta_s(
    params: &ModelParams,
    budget: &TrajectoryBudget,
    master_seed: u64,
) -> Result<SteeringReport> {
    let seed_x = derive_seed(master_seed, u64::from(u32::MAX) + 1);
    let seed_y = derive_seed(master_seed, u64::from(u32::MAX) + 2);
    let ens_x = generate_ensemble(
        &ScenarioSpec::NonAdaptive(SpinObservable::x()),
        params,
        budget,
        seed_x,
    )?;
    let ens_y = generate_ensemble(
        &ScenarioSpec::NonAdaptive(SpinObservable::y()),
        params,
        budget,
        seed_y,
    )?;
    report_from_ensembles(&ens_x, &ens_y, params, budget, master_seed)
}

/// Assemble a steering report out of pre-generated x- and y-scenario
/// ensembles.
pub fn report_from_ensembles(
    ens_x: &EndpointEnsemble,
    ens_y: &EndpointEnsemble,
    params: &ModelParams,
    budget: &TrajectoryBudget,
    master_seed: u64,
) -> Result<SteeringReport> {
    let dirs = [BlochVec::y_axis(), BlochVec::z_axis(), BlochVec::x_axis()];
    let (t1, s1) = ensemble_avg_sq(ens_x, &dirs[0]);
    let (t2, s2) = ensemble_avg_sq(ens_x, &dirs[1]);
    let (t3, s3) = ensemble_avg_sq(ens_y, &dirs[2]);
    let (lhs, stderr) =
        inequality_lhs(ens_x, ens_x, ens_y, &dirs[0], &dirs[1], &dirs[2])?;
    Ok(SteeringReport {
        terms: [t1, t2, t3],
        term_stderrs: [s1, s2, s3],
        lhs,
        delta_s: lhs - 1.0,
        stderr,
        directions: dirs,
        params: *params,
        budget: *budget,
        master_seed,
    })
}

// ---------------------------------------------------------------------------
// Critical-temperature search

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EtaCritResult {
    pub eta_lo: f64,
    pub eta_hi: f64,
    pub eta_crit: f64,
    pub uncertainty: f64,
    /// (η, ΔS, stderr) for every evaluation performed
    pub evaluations: Vec<(f64, f64, f64)>,
}

/// ΔS at one η with a sign that is statistically established: the budget is
/// doubled (up to `max_doublings`) until |ΔS| > 3·stderr.
fn delta_s_signed(
    params: &ModelParams,
    eta: f64,
    budget: &TrajectoryBudget,
    master_seed: u64,
    max_doublings: u32,
    evaluations: &mut Vec<(f64, f64, f64)>,
) -> Result<f64> {
    let p = params.with_eta(eta)?;
    let mut b = *budget;
    for attempt in 0..=max_doublings {
        let seed = derive_seed(master_seed, (eta.to_bits()) ^ u64::from(attempt));
        let report = delta_s(&p, &b, seed)?;
        evaluations.push((eta, report.delta_s, report.stderr));
        if report.delta_s.abs() > 3.0 * report.stderr {
            return Ok(report.delta_s);
        }
        b = b.with_trajectories(b.trajectories.saturating_mul(2));
    }
    Err(Error::Statistics(format!(
        "ΔS at η = {eta} is indistinguishable from 0 at the available budget"
    )))
}

/// Bisect the sign change of ΔS(η) on [eta_lo, eta_hi] down to `tolerance`.
/// Requires steerability at `eta_lo` and none at `eta_hi`.
pub fn eta_crit_search(
    params: &ModelParams,
    eta_lo: f64,
    eta_hi: f64,
    tolerance: f64,
    budget: &TrajectoryBudget,
    master_seed: u64,
) -> Result<EtaCritResult> {
    if !(eta_lo < eta_hi) || tolerance <= 0.0 {
        return Err(Error::InvalidParams("need eta_lo < eta_hi and tolerance > 0".into()));
    }
    let mut evals = Vec::new();
    let max_doublings = 3;
    let lo_sign = delta_s_signed(params, eta_lo, budget, master_seed, max_doublings, &mut evals)?;
    let hi_sign = delta_s_signed(params, eta_hi, budget, master_seed, max_doublings, &mut evals)?;
    if lo_sign <= 0.0 || hi_sign >= 0.0 {
        return Err(Error::Domain(format!(
            "no sign change: ΔS({eta_lo}) = {lo_sign}, ΔS({eta_hi}) = {hi_sign}"
        )));
    }
    let (mut lo, mut hi) = (eta_lo, eta_hi);
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        match delta_s_signed(params, mid, budget, master_seed, max_doublings, &mut evals) {
            Ok(s) if s > 0.0 => lo = mid,
            Ok(_) => hi = mid,
            // midpoint sign unresolvable at the budget cap: the bracket is
            // still valid, just wider than asked
            Err(Error::Statistics(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(EtaCritResult {
        eta_lo: lo,
        eta_hi: hi,
        eta_crit: 0.5 * (lo + hi),
        uncertainty: 0.5 * (hi - lo),
        evaluations: evals,
    })
}

// ---------------------------------------------------------------------------
// Concurrence and the entanglement boundary

/// Two-qubit concurrence via the spin-flip construction: the square roots of
/// the eigenvalues of ρρ̃ in decreasing order give C = max(0, √μ₁−√μ₂−√μ₃−√μ₄).
/// The eigenvalues are obtained from the Hermitian matrix A ρ̃ A (A the
/// Hermitian square root of ρ), which shares the nonzero spectrum of ρρ̃;
/// negative numerical dust below 1e−12 is clamped to zero.
pub fn concurrence(rho: &QState) -> Result<f64> {
    if rho.dim() != 4 {
        return Err(Error::DimMismatch(format!("concurrence of dim {}", rho.dim())));
    }
    let m = rho.density();
    let yy = sigma_y().matrix().kronecker(sigma_y().matrix());
    let flipped = &yy * m.conjugate() * &yy;

    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut sqrt_rho = DMatrix::<C64>::zeros(4, 4);
    for k in 0..4 {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        for i in 0..4 {
            for j in 0..4 {
                sqrt_rho[(i, j)] += v[i] * v[j].conj() * crate::qla::cr(lam);
            }
        }
    }
    let h = &sqrt_rho * flipped * &sqrt_rho;
    // dust of either sign below the tolerance would otherwise leak √|dust|
    // into the subtraction
    let mut mu: Vec<f64> = nalgebra::SymmetricEigen::new(h)
        .eigenvalues
        .iter()
        .map(|&x| if x.abs() < 1e-12 { 0.0 } else { x })
        .collect();
    if mu.iter().any(|&x| x < 0.0) {
        return Err(Error::Domain(format!("spin-flip spectrum has negative value {mu:?}")));
    }
    mu.sort_by(|a, b| b.total_cmp(a));
    let c = mu[0].sqrt() - mu[1].sqrt() - mu[2].sqrt() - mu[3].sqrt();
    Ok(if c > 1e-12 { c } else { 0.0 })
}

/// Concurrence between the system (in its thermal steady state) and one
/// fresh subenvironment after a single collision.
pub fn post_collision_concurrence(params: &ModelParams) -> Result<f64> {
    let rho_ss = steady_state(params)?.to_state()?;
    let joint = kron_states(&rho_ss, &env_state(params))?;
    let evolved = build_q(params).apply(&joint)?;
    concurrence(&evolved)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryMap {
    /// (dt, eta, concurrence) in row-major grid order (dt outer)
    pub rows: Vec<(f64, f64, f64)>,
    /// per-dt boundary: η midpoint of the last entangled / first separable pair
    pub contour: Vec<(f64, f64)>,
}

/// Map post-collision system–subenvironment concurrence over a (δt, η) grid
/// and locate the zero contour along each δt column (η scanned upward from
/// the entangled vacuum end).
pub fn entanglement_boundary(
    params: &ModelParams,
    dt_grid: &[f64],
    eta_grid: &[f64],
) -> Result<BoundaryMap> {
    if dt_grid.is_empty() || eta_grid.is_empty() {
        return Err(Error::InvalidParams("empty grid".into()));
    }
    let mut etas = eta_grid.to_vec();
    etas.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(dt_grid.len() * etas.len());
    let mut contour = Vec::new();
    for &dt in dt_grid {
        let mut boundary = None;
        let mut prev: Option<(f64, f64)> = None;
        for &eta in &etas {
            let p = ModelParams::new(params.gamma, params.omega, dt, eta)?;
            let c = post_collision_concurrence(&p)?;
            rows.push((dt, eta, c));
            if let Some((eta_prev, c_prev)) = prev {
                if boundary.is_none() && c_prev > 0.0 && c == 0.0 {
                    boundary = Some(0.5 * (eta_prev + eta));
                }
            }
            prev = Some((eta, c));
        }
        if let Some(b) = boundary {
            contour.push((dt, b));
        }
    }
    Ok(BoundaryMap { rows, contour })
}

// ---------------------------------------------------------------------------
// Maximal violation with control measurements

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonlocalViolation {
    pub lhs: f64,
    pub terms: [f64; 3],
    /// Bob's fixed inequality directions
    pub directions: [BlochVec; 3],
    /// optimized control measurement direction per term
    pub control_directions: [BlochVec; 3],
}

/// E[⟨σ_n⟩²] of the ensemble steered onto the system by measuring the
/// control along `m`.
fn steered_term(rho_sc: &QState, m: &BlochVec, n: &BlochVec) -> Result<f64> {
    let pair = steered_ensembles_from_control(rho_sc, m)?;
    Ok(pair
        .iter()
        .map(|(w, r)| {
            let q = n.dot(r);
            w * q * q
        })
        .sum())
}

fn fibonacci_sphere(count: usize) -> Vec<BlochVec> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            BlochVec::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn spherical(theta: f64, phi: f64) -> BlochVec {
    BlochVec::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

/// Maximize one steered term over the control direction: coarse spherical
/// grid followed by pattern search in spherical coordinates down to an
/// angular step of 1e−6.
fn maximize_term(rho_sc: &QState, n: &BlochVec, grid: &[BlochVec]) -> Result<(f64, BlochVec)> {
    let mut best_dir = grid[0];
    let mut best = f64::NEG_INFINITY;
    for m in grid {
        let v = steered_term(rho_sc, m, n)?;
        if v > best {
            best = v;
            best_dir = *m;
        }
    }
    let mut theta = best_dir.z.clamp(-1.0, 1.0).acos();
    let mut phi = best_dir.y.atan2(best_dir.x);
    let mut step = (4.0 / grid.len() as f64).sqrt(); // ≈ grid spacing in radians
    while step > 1e-6 {
        let mut improved = false;
        for (dt, dp) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let cand = spherical(theta + dt, phi + dp);
            let v = steered_term(rho_sc, &cand, n)?;
            if v > best {
                best = v;
                theta += dt;
                phi += dp;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((best, spherical(theta, phi)))
}

/// Maximal steering-inequality value achievable on the pure system⊗control
/// target state by optimizing the control measurement directions, with Bob's
/// directions fixed to x, y, z.
pub fn nonlocal_violation(params: &ModelParams) -> Result<NonlocalViolation> {
    let rho_sc = theta_star(params)?.to_state()?;
    nonlocal_violation_on(&rho_sc)
}

/// Same optimization on an explicitly supplied system⊗control state.
pub fn nonlocal_violation_on(rho_sc: &QState) -> Result<NonlocalViolation> {
    let grid = fibonacci_sphere(400);
    let dirs = [BlochVec::x_axis(), BlochVec::y_axis(), BlochVec::z_axis()];
    let mut terms = [0.0f64; 3];
    let mut controls = [BlochVec::z_axis(); 3];
    for (i, n) in dirs.iter().enumerate() {
        let (v, m) = maximize_term(rho_sc, n, &grid)?;
        terms[i] = v;
        controls[i] = m;
    }
    Ok(NonlocalViolation {
        lhs: terms.iter().sum(),
        terms,
        directions: dirs,
        control_directions: controls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qla::cr;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn reference() -> ModelParams {
        ModelParams::reference()
    }

    fn tiny_budget() -> TrajectoryBudget {
        TrajectoryBudget { trajectories: 64, collisions: 2_000, burn_in: 1_000 }
    }

    fn member(w: f64, x: f64, y: f64, z: f64) -> EnsembleMember {
        let b = BlochVec::new(x, y, z);
        EnsembleMember { weight: w, bloch: b, purity: 0.5 * (1.0 + b.dot(&b)) }
    }

    fn handmade(members: Vec<EnsembleMember>) -> EndpointEnsemble {
        EndpointEnsemble {
            scenario: "test".into(),
            members,
            params: reference(),
            budget: tiny_budget(),
            master_seed: 0,
        }
    }

    #[test]
    fn avg_sq_pole_and_circle() {
        let pole = handmade(vec![member(1.0, 1.0, 0.0, 0.0)]);
        assert_abs_diff_eq!(ensemble_avg_sq(&pole, &BlochVec::x_axis()).0, 1.0, epsilon = 1e-15);

        // uniform great circle around x: E[⟨σy⟩²] = ∫cos² = ½
        let n = 720;
        let circle = handmade(
            (0..n)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n as f64;
                    member(1.0 / n as f64, 0.0, t.cos(), t.sin())
                })
                .collect(),
        );
        let (vy, _) = ensemble_avg_sq(&circle, &BlochVec::y_axis());
        assert_abs_diff_eq!(vy, 0.5, epsilon = 1e-12);
        // purity identity on the great circle
        let (vz, _) = ensemble_avg_sq(&circle, &BlochVec::z_axis());
        assert_abs_diff_eq!(vy + vz, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn avg_sq_dichotomic_matches_target_geometry() {
        let p = reference();
        let (rp, rm) = crate::scenarios::dichotomic_targets(&p).unwrap();
        let e = handmade(vec![
            member(0.5, rp.x, rp.y, rp.z),
            member(0.5, rm.x, rm.y, rm.z),
        ]);
        let ss = steady_state(&p).unwrap();
        let (vx, _) = ensemble_avg_sq(&e, &BlochVec::x_axis());
        assert_abs_diff_eq!(vx, 1.0 - ss.y * ss.y - ss.z * ss.z, epsilon = 1e-12);
    }

    #[test]
    fn lhs_requires_orthogonality() {
        let e = handmade(vec![member(1.0, 0.0, 0.0, 1.0)]);
        let bad = inequality_lhs(
            &e,
            &e,
            &e,
            &BlochVec::x_axis(),
            &BlochVec::x_axis(),
            &BlochVec::z_axis(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn lhs_trivial_values() {
        let mixed = handmade(vec![member(1.0, 0.0, 0.0, 0.0)]);
        let (v, _) = inequality_lhs(
            &mixed,
            &mixed,
            &mixed,
            &BlochVec::x_axis(),
            &BlochVec::y_axis(),
            &BlochVec::z_axis(),
        )
        .unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);

        // one pure state used thrice decomposes its unit norm
        let pure = handmade(vec![member(1.0, 0.36, -0.48, 0.8)]);
        let (v, _) = inequality_lhs(
            &pure,
            &pure,
            &pure,
            &BlochVec::x_axis(),
            &BlochVec::y_axis(),
            &BlochVec::z_axis(),
        )
        .unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn generated_ensemble_is_valid_and_reproducible() {
        let p = reference();
        let spec = ScenarioSpec::NonAdaptive(SpinObservable::y());
        let b = tiny_budget();
        let e1 = generate_ensemble(&spec, &p, &b, 42).unwrap();
        let e2 = generate_ensemble(&spec, &p, &b, 42).unwrap();
        e1.validate().unwrap();
        assert_eq!(e1.members.len(), 64);
        for (a, b) in e1.members.iter().zip(e2.members.iter()) {
            assert_eq!(a.bloch.x.to_bits(), b.bloch.x.to_bits());
            assert_eq!(a.bloch.y.to_bits(), b.bloch.y.to_bits());
            assert_eq!(a.bloch.z.to_bits(), b.bloch.z.to_bits());
        }
        let e3 = generate_ensemble(&spec, &p, &b, 43).unwrap();
        assert!(e1
            .members
            .iter()
            .zip(e3.members.iter())
            .any(|(a, b)| a.bloch.x.to_bits() != b.bloch.x.to_bits()));
    }

    #[test]
    fn ensemble_independent_of_worker_count() {
        let p = reference();
        let spec = ScenarioSpec::NonAdaptive(SpinObservable::x());
        let b = tiny_budget();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| generate_ensemble(&spec, &p, &b, 7).unwrap())
        };
        let single = run(1);
        let multi = run(4);
        for (a, b) in single.members.iter().zip(multi.members.iter()) {
            assert_eq!(a.bloch.x.to_bits(), b.bloch.x.to_bits());
            assert_eq!(a.bloch.y.to_bits(), b.bloch.y.to_bits());
            assert_eq!(a.bloch.z.to_bits(), b.bloch.z.to_bits());
        }
    }

    #[test]
    fn x_scenario_endpoints_live_on_the_yz_great_circle() {
        let p = reference();
        let spec = ScenarioSpec::NonAdaptive(SpinObservable::x());
        let e = generate_ensemble(&spec, &p, &tiny_budget(), 9).unwrap();
        for m in &e.members {
            assert!(m.bloch.x.abs() <= 1e-6, "x = {}", m.bloch.x);
            assert_abs_diff_eq!(m.purity, 1.0, epsilon = 1e-9);
        }
        let (vy, _) = ensemble_avg_sq(&e, &BlochVec::y_axis());
        let (vz, _) = ensemble_avg_sq(&e, &BlochVec::z_axis());
        assert_abs_diff_eq!(vy + vz, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn adaptive_ensemble_is_dichotomic() {
        let p = reference();
        // the orbit contracts onto the pair at rate γδt/2 per collision, so
        // 1e-6 clustering needs ≈ 2·ln(1e6)/(γδt) ≈ 28k collisions
        let budget = TrajectoryBudget { trajectories: 64, collisions: 40_000, burn_in: 20_000 };
        let e = generate_ensemble(&ScenarioSpec::Adaptive, &p, &budget, 21).unwrap();
        assert_eq!(e.distinct_points(1e-6), 2);
        let (rp, rm) = crate::scenarios::dichotomic_targets(&p).unwrap();
        for m in &e.members {
            let d = m.bloch.sub(&rp).norm().min(m.bloch.sub(&rm).norm());
            assert!(d <= 1e-6, "endpoint off the dichotomic pair by {d}");
        }
    }

    #[test]
    fn concurrence_bell_and_product() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bell =
            QState::pure(DVector::from_vec(vec![cr(s), cr(0.0), cr(0.0), cr(s)])).unwrap();
        assert_abs_diff_eq!(concurrence(&bell).unwrap(), 1.0, epsilon = 1e-10);

        let a = BlochVec::new(0.3, -0.5, 0.2).to_state().unwrap();
        let b = BlochVec::new(-0.1, 0.4, 0.7).to_state().unwrap();
        let prod = kron_states(&a, &b).unwrap();
        assert_eq!(concurrence(&prod).unwrap(), 0.0);
    }

    #[test]
    fn concurrence_of_pure_target_matches_marginal_formula() {
        let p = reference();
        let rho = theta_star(&p).unwrap().to_state().unwrap();
        let r = steady_state(&p).unwrap().norm();
        // pure two-qubit state: C = 2λ₁λ₂ with λᵢ² = (1 ± r)/2
        let want = (1.0 - r * r).sqrt();
        assert_abs_diff_eq!(concurrence(&rho).unwrap(), want, epsilon = 1e-9);
    }

    #[test]
    fn post_collision_concurrence_signs() {
        let p = reference();
        assert!(post_collision_concurrence(&p).unwrap() > 0.0);
        assert_eq!(
            post_collision_concurrence(&p.with_eta(-0.72).unwrap()).unwrap(),
            0.0
        );
    }

    #[test]
    fn boundary_map_contour_brackets_vacuum_edge() {
        let p = reference();
        let dt_grid = [1e-3, 2e-3];
        let eta_grid: Vec<f64> = (0..11).map(|k| -1.0 + 0.04 * k as f64).collect();
        let map = entanglement_boundary(&p, &dt_grid, &eta_grid).unwrap();
        assert_eq!(map.rows.len(), 22);
        assert_eq!(map.contour.len(), 2);
        for &(_, eta_b) in &map.contour {
            assert!(eta_b > -1.0 && eta_b < -0.5);
        }
    }

    #[test]
    fn nonlocal_violation_product_state_stays_classical() {
        let r = BlochVec::new(0.3, 0.1, -0.4);
        let rho = kron_states(
            &r.to_state().unwrap(),
            &BlochVec::new(0.0, 0.0, 0.5).to_state().unwrap(),
        )
        .unwrap();
        let v = nonlocal_violation_on(&rho).unwrap();
        assert!(v.lhs <= r.dot(&r) + 1e-9, "lhs = {}", v.lhs);
    }

    #[test]
    fn nonlocal_violation_bell_state_is_maximal() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bell =
            QState::pure(DVector::from_vec(vec![cr(s), cr(0.0), cr(0.0), cr(s)])).unwrap();
        let v = nonlocal_violation_on(&bell).unwrap();
        assert!(v.lhs > 3.0 - 1e-6, "lhs = {}", v.lhs);
    }

    proptest! {
        #[test]
        fn avg_sq_permutation_and_split_invariant(
            blochs in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 2..12),
            nx in -1.0f64..1.0, ny in -1.0f64..1.0, nz in -1.0f64..1.0,
        ) {
            prop_assume!(nx * nx + ny * ny + nz * nz > 1e-3);
            let n = BlochVec::new(nx, ny, nz).normalized().unwrap();
            let count = blochs.len() as f64;
            let members: Vec<EnsembleMember> = blochs
                .iter()
                .map(|&(x, y, z)| {
                    let b = BlochVec::new(x, y, z);
                    let b = if b.norm() > 1.0 { b.scale(1.0 / b.norm()) } else { b };
                    member(1.0 / count, b.x, b.y, b.z)
                })
                .collect();
            let base = handmade(members.clone());
            let (v0, _) = ensemble_avg_sq(&base, &n);

            let mut reversed = members.clone();
            reversed.reverse();
            let (v1, _) = ensemble_avg_sq(&handmade(reversed), &n);
            prop_assert!((v0 - v1).abs() <= 1e-12);

            // split the first member into two identical halves
            let mut split = members;
            let mut half = split[0];
            half.weight *= 0.5;
            split[0] = half;
            split.insert(1, half);
            let (v2, _) = ensemble_avg_sq(&handmade(split), &n);
            prop_assert!((v0 - v2).abs() <= 1e-12);
        }

        #[test]
        fn concurrence_vanishes_on_separable_mixtures(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = trajectory_rng(seed, 0);
            let mut rho = DMatrix::<C64>::zeros(4, 4);
            let mut weights = [0.0f64; 10];
            let mut total = 0.0;
            for w in &mut weights {
                *w = rng.random::<f64>();
                total += *w;
            }
            for w in weights {
                let rand_bloch = |rng: &mut rand_chacha::ChaCha8Rng| {
                    loop {
                        let v = BlochVec::new(
                            2.0 * rng.random::<f64>() - 1.0,
                            2.0 * rng.random::<f64>() - 1.0,
                            2.0 * rng.random::<f64>() - 1.0,
                        );
                        if v.norm() <= 1.0 {
                            return v;
                        }
                    }
                };
                let a = rand_bloch(&mut rng).to_density();
                let b = rand_bloch(&mut rng).to_density();
                rho += a.kronecker(&b).scale(w / total);
            }
            let state = QState::mixed(rho).unwrap();
            prop_assert_eq!(concurrence(&state).unwrap(), 0.0);
        }
    }
}
