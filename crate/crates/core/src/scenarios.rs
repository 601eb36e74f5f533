//! Measurement scenarios on the environment.
//!
//! Each collision hands one fresh subenvironment to the measurement
//! apparatus. Three scenario families are implemented:
//!
//! * non-adaptive — every subenvironment is projected along one fixed spin
//!   direction right after its collision;
//! * adaptive — two near-z directions n₁/n₂ are alternated so that the
//!   conditional system state, once converged, only ever jumps between the
//!   two antipodal-x members r± of a dichotomic ensemble;
//! * nonlocal — subenvironments are never measured directly; a control qubit
//!   accumulates their correlations through a two-qubit gate T after every
//!   collision and is measured once at the very end, which steers the system
//!   without touching its reduced dynamics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_q, embed_two_qubit, env_state, steady_state, BlochVec, ModelParams, ThetaRep,
};
use crate::qla::{
    c, cr, expm_hermitian, kron_states, schmidt, sigma_minus, sigma_x, sigma_y, sigma_z, C64,
    QOperator, QState,
};

// ---------------------------------------------------------------------------
// Observables and scenario specification

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpinObservable {
    direction: BlochVec,
}

impl SpinObservable {
    pub fn new(direction: BlochVec) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!(
                "spin direction norm {} must be 1",
                direction.norm()
            )));
        }
        Ok(Self { direction })
    }

    pub fn x() -> Self {
        Self { direction: BlochVec::x_axis() }
    }

    pub fn y() -> Self {
        Self { direction: BlochVec::y_axis() }
    }

    pub fn z() -> Self {
        Self { direction: BlochVec::z_axis() }
    }

    pub fn direction(&self) -> BlochVec {
        self.direction
    }

    /// Sharp effect ½(1 ± n·σ).
    pub fn effect(&self, sign: i8) -> DMatrix<C64> {
        let s = if sign >= 0 { 1.0 } else { -1.0 };
        let n = self.direction;
        DMatrix::from_row_slice(
            2,
            2,
            &[
                cr(0.5 * (1.0 + s * n.z)),
                c(0.5 * s * n.x, -0.5 * s * n.y),
                c(0.5 * s * n.x, 0.5 * s * n.y),
                cr(0.5 * (1.0 - s * n.z)),
            ],
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ScenarioSpec {
    NonAdaptive(SpinObservable),
    Adaptive,
    /// Control qubit measured along the given direction after the last
    /// collision.
    Nonlocal { control_direction: SpinObservable },
}

impl ScenarioSpec {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "x" => Ok(Self::NonAdaptive(SpinObservable::x())),
            "y" => Ok(Self::NonAdaptive(SpinObservable::y())),
            "z" => Ok(Self::NonAdaptive(SpinObservable::z())),
            "adaptive" => Ok(Self::Adaptive),
            "nonlocal" => Ok(Self::Nonlocal { control_direction: SpinObservable::z() }),
            other => Err(Error::InvalidParams(format!("unknown scenario '{other}'"))),
        }
    }

    pub fn id(&self) -> String {
        fn axis_name(n: &BlochVec) -> Option<&'static str> {
            let eps = 1e-12;
            if (n.x - 1.0).abs() < eps && n.y.abs() < eps && n.z.abs() < eps {
                Some("x")
            } else if n.x.abs() < eps && (n.y - 1.0).abs() < eps && n.z.abs() < eps {
                Some("y")
            } else if n.x.abs() < eps && n.y.abs() < eps && (n.z - 1.0).abs() < eps {
                Some("z")
            } else {
                None
            }
        }
        match self {
            Self::NonAdaptive(obs) => {
                let n = obs.direction();
                axis_name(&n)
                    .map(str::to_owned)
                    .unwrap_or_else(|| format!("dir({:.6},{:.6},{:.6})", n.x, n.y, n.z))
            }
            Self::Adaptive => "adaptive".into(),
            Self::Nonlocal { control_direction } => {
                let n = control_direction.direction();
                match axis_name(&n) {
                    Some(a) => format!("nonlocal-{a}"),
                    None => format!("nonlocal({:.6},{:.6},{:.6})", n.x, n.y, n.z),
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Subenvironment measurement (reference path)

/// Project the second (subenvironment) factor of a two-qubit state along
/// `n`. The outcome is +1 when `u` falls below the +1 Born probability.
/// Returns (outcome, probability of that outcome, conditional system state).
pub fn measure_subenv(
    joint: &QState,
    n: &SpinObservable,
    u: f64,
) -> Result<(i8, f64, QState)> {
    if joint.dim() != 4 {
        return Err(Error::DimMismatch(format!("joint dim {}", joint.dim())));
    }
    let rho = joint.density();
    let unnorm = |sign: i8| -> (f64, DMatrix<C64>) {
        let e = n.effect(sign);
        // Tr_A[(1⊗E)ρ(1⊗E)] = Tr_A[ρ(1⊗E)] for projective E
        let mut out = DMatrix::<C64>::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = C64::default();
                for a in 0..2 {
                    for b in 0..2 {
                        acc += rho[(2 * i + a, 2 * j + b)] * e[(b, a)];
                    }
                }
                out[(i, j)] = acc;
            }
        }
        let p = out.diagonal().sum().re;
        (p, out)
    };
    let (p_plus, m_plus) = unnorm(1);
    let (p_minus, m_minus) = unnorm(-1);
    if p_plus < 1e-15 && p_minus < 1e-15 {
        return Err(Error::InvalidState("measurement with vanishing total probability".into()));
    }
    let (outcome, p, m) = if u < p_plus {
        (1i8, p_plus, m_plus)
    } else {
        (-1i8, p_minus, m_minus)
    };
    let cond = QState::mixed(m.unscale(p))?;
    Ok((outcome, p, cond))
}

// ---------------------------------------------------------------------------
// Trajectory state (reference path)

#[derive(Clone, Debug)]
enum Payload {
    Plain { rho: QState },
    Adaptive { rho: QState, dir_index: u8 },
    Nonlocal { rho_sc: QState },
}

/// Conditional state of one discrete trajectory, together with its private
/// RNG stream. Exactly one payload variant is live, matching the scenario.
#[derive(Clone, Debug)]
pub struct TrajectoryState {
    pub step: u64,
    pub rng: ChaCha8Rng,
    payload: Payload,
}

impl TrajectoryState {
    pub fn start(spec: &ScenarioSpec, rho0: &QState, rng: ChaCha8Rng) -> Result<Self> {
        if rho0.dim() != 2 {
            return Err(Error::DimMismatch(format!("system dim {}", rho0.dim())));
        }
        let payload = match spec {
            ScenarioSpec::NonAdaptive(_) => Payload::Plain { rho: rho0.clone() },
            // the first measured direction is n₁ by convention
            ScenarioSpec::Adaptive => Payload::Adaptive { rho: rho0.clone(), dir_index: 1 },
            ScenarioSpec::Nonlocal { .. } => Payload::Nonlocal {
                rho_sc: kron_states(rho0, &QState::ground())?,
            },
        };
        Ok(Self { step: 0, rng, payload })
    }

    /// Reduced system state, whatever the payload.
    pub fn system_state(&self) -> Result<QState> {
        match &self.payload {
            Payload::Plain { rho } | Payload::Adaptive { rho, .. } => Ok(rho.clone()),
            Payload::Nonlocal { rho_sc } => crate::qla::partial_trace(rho_sc, &[2, 2], &[0]),
        }
    }

    pub fn direction_index(&self) -> Option<u8> {
        match &self.payload {
            Payload::Adaptive { dir_index, .. } => Some(*dir_index),
            _ => None,
        }
    }

    pub fn joint_control_state(&self) -> Option<&QState> {
        match &self.payload {
            Payload::Nonlocal { rho_sc } => Some(rho_sc),
            _ => None,
        }
    }
}

/// One collision + fixed-direction measurement.
pub fn nonadaptive_step(
    t: &mut TrajectoryState,
    params: &ModelParams,
    spec: &ScenarioSpec,
) -> Result<()> {
    let ScenarioSpec::NonAdaptive(obs) = spec else {
        return Err(Error::InvalidParams("nonadaptive_step needs a non-adaptive spec".into()));
    };
    let Payload::Plain { rho } = &mut t.payload else {
        return Err(Error::InvalidState("trajectory payload does not match scenario".into()));
    };
    let joint = kron_states(rho, &env_state(params))?;
    let evolved = build_q(params).apply(&joint)?;
    let u: f64 = t.rng.random();
    let (_, _, cond) = measure_subenv(&evolved, obs, u)?;
    *rho = cond;
    t.step += 1;
    Ok(())
}

// ---------------------------------------------------------------------------
// Adaptive scenario

/// The two measured directions n₁ = (0, sin g, cos g), n₂ = (0, −sin g, cos g).
pub fn adaptive_directions(params: &ModelParams) -> (BlochVec, BlochVec) {
    let g = params.g();
    (
        BlochVec::new(0.0, g.sin(), g.cos()),
        BlochVec::new(0.0, -g.sin(), g.cos()),
    )
}

/// The dichotomic targets r± = (±√(1−y²−z²), y_ss, z_ss): unit vectors as
/// close to ±x as the steady state allows. Defined for the vacuum.
pub fn dichotomic_targets(params: &ModelParams) -> Result<(BlochVec, BlochVec)> {
    if !params.is_vacuum() {
        return Err(Error::Domain("dichotomic targets are a vacuum construction".into()));
    }
    let ss = steady_state(params)?;
    let x = (1.0 - ss.y * ss.y - ss.z * ss.z).sqrt();
    Ok((BlochVec::new(x, ss.y, ss.z), BlochVec::new(-x, ss.y, ss.z)))
}

/// Unnormalized post-measurement system state after one collision from `r`,
/// measuring the subenvironment along `n` with outcome `sign`.
fn conditional_after(
    r: &BlochVec,
    n: &SpinObservable,
    sign: i8,
    params: &ModelParams,
) -> Result<(f64, BlochVec)> {
    let joint = kron_states(&r.to_state()?, &env_state(params))?;
    let evolved = build_q(params).apply(&joint)?;
    let u_forced = if sign > 0 { 0.0 } else { 1.0 - 1e-16 };
    let (outcome, p, cond) = measure_subenv(&evolved, n, u_forced)?;
    debug_assert_eq!(outcome, sign);
    Ok((p, BlochVec::from_state(&cond)?))
}

/// Check the defining jump identities of the adaptive scheme. The scheme is
/// anchored so that measuring n₂ at r⁺ and n₁ at r⁻ is closed on {r⁺, r⁻}:
/// outcome −1 leaves the member fixed, outcome +1 swaps it. Returns the
/// worst-branch Bloch-distance residuals (for n₁ and n₂ respectively).
pub fn verify_dichotomic_conditions(params: &ModelParams) -> Result<(f64, f64)> {
    let (n1, n2) = adaptive_directions(params);
    let (rp, rm) = dichotomic_targets(params)?;
    let n1 = SpinObservable::new(n1)?;
    let n2 = SpinObservable::new(n2)?;

    // n₁ acts at r⁻: +1 jumps to r⁺, −1 stays at r⁻
    let (_, to_plus) = conditional_after(&rm, &n1, 1, params)?;
    let (_, stay_minus) = conditional_after(&rm, &n1, -1, params)?;
    let res1 = to_plus.sub(&rp).norm().max(stay_minus.sub(&rm).norm());

    // n₂ acts at r⁺: +1 jumps to r⁻, −1 stays at r⁺
    let (_, to_minus) = conditional_after(&rp, &n2, 1, params)?;
    let (_, stay_plus) = conditional_after(&rp, &n2, -1, params)?;
    let res2 = to_minus.sub(&rm).norm().max(stay_plus.sub(&rp).norm());

    Ok((res1, res2))
}

/// One adaptive collision: measure the current direction, switch direction on
/// outcome +1, keep it on −1.
pub fn adaptive_step(t: &mut TrajectoryState, params: &ModelParams) -> Result<()> {
    let (n1, n2) = adaptive_directions(params);
    let Payload::Adaptive { rho, dir_index } = &mut t.payload else {
        return Err(Error::InvalidState("trajectory payload does not match scenario".into()));
    };
    let n = if *dir_index == 1 { n1 } else { n2 };
    let obs = SpinObservable::new(n)?;
    let joint = kron_states(rho, &env_state(params))?;
    let evolved = build_q(params).apply(&joint)?;
    let u: f64 = t.rng.random();
    let (outcome, _, cond) = measure_subenv(&evolved, &obs, u)?;
    *rho = cond;
    if outcome == 1 {
        *dir_index = 3 - *dir_index;
    }
    t.step += 1;
    Ok(())
}

// ---------------------------------------------------------------------------
// Nonlocal scenario: target state and control gates

/// The pure system⊗control target state as a Fano matrix: system marginal
/// r_ss, control marginal along +z, correlation block chosen so the total
/// state is pure. The inverse-tangent branch for the correlation angle is the
/// one that keeps the matrix positive semidefinite (the branch shifted by π
/// produces a negative eigenvalue and is rejected here).
pub fn theta_star(params: &ModelParams) -> Result<ThetaRep> {
    if !params.is_vacuum() {
        return Err(Error::Domain("the pure joint target is a vacuum construction".into()));
    }
    let ss = steady_state(params)?;
    if ss.z == 0.0 {
        return Err(Error::Domain("steady state has z = 0; correlation angle undefined".into()));
    }
    let alpha = ss.norm().acos();
    let beta = (ss.y / ss.z).atan();
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let mut m = [[0.0f64; 4]; 4];
    m[0][0] = 1.0;
    // control marginal (0, 0, cos α)
    m[0][3] = ca;
    // system marginal r_ss
    m[1][0] = ss.x;
    m[2][0] = ss.y;
    m[3][0] = ss.z;
    // correlation block
    m[1][2] = sa;
    m[2][1] = -sa * cb;
    m[2][3] = -sb;
    m[3][1] = sa * sb;
    m[3][3] = -cb;
    let theta = ThetaRep { m };
    let state = theta.to_state()?;
    if (state.purity() - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidState(format!(
            "joint target purity {} is not 1",
            state.purity()
        )));
    }
    Ok(theta)
}

/// System⊗control steady state of the continuous-time two-qubit generator,
/// as a Fano matrix in the drive-to-damping ratio c = ω/γ.
pub fn continuum_joint_steady_state(params: &ModelParams) -> ThetaRep {
    let cq = params.c_ratio();
    let s16 = (16.0 * cq * cq + 1.0).sqrt();
    let d = 8.0 * cq * cq + 1.0;
    let m = [
        [1.0, 0.0, 0.0, s16 / d],
        [0.0, 0.0, 8.0 * cq * cq / d, 0.0],
        [4.0 * cq / d, -8.0 * cq * cq / (d * s16), 0.0, 4.0 * cq / s16],
        [-1.0 / d, -32.0 * cq.powi(3) / (d * s16), 0.0, -1.0 / s16],
    ];
    ThetaRep { m }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateProvenance {
    SchmidtConstructed,
    ClosedForm,
}

/// Two-qubit gate on control ⊗ subenvironment, applied after every collision.
#[derive(Clone, Debug)]
pub struct ControlGate {
    t: QOperator,
    provenance: GateProvenance,
}

impl ControlGate {
    pub fn operator(&self) -> &QOperator {
        &self.t
    }

    pub fn provenance(&self) -> GateProvenance {
        self.provenance
    }
}

/// Pure-state vector of a rank-one density matrix, with a deterministic
/// global phase (first non-negligible amplitude real positive).
fn dominant_eigenvector(rho: &DMatrix<C64>) -> DVector<C64> {
    let eig = nalgebra::SymmetricEigen::new(rho.clone());
    let mut best = 0;
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let mut v: DVector<C64> = eig.eigenvectors.column(best).into_owned();
    if let Some(first) = v.iter().find(|z| z.norm() > 1e-12).copied() {
        let phase = first / first.norm();
        v = v.map(|z| z / phase);
    }
    v.unscale(v.norm())
}

/// Indices of the control⊗subenvironment basis {|11⟩,|10⟩,|01⟩,|00⟩}.
const CA_10: usize = 1; // |1_C 0_A⟩
const CA_00: usize = 3; // |0_C 0_A⟩
const CA_01: usize = 2; // |0_C 1_A⟩
const CA_11: usize = 0; // |1_C 1_A⟩

/// Build the control⊗subenvironment gate from the Schmidt decomposition of
/// the post-collision pure state: the two control⊗subenvironment Schmidt
/// vectors are mapped onto {|1_C⟩, |0_C⟩} ⊗ |0_A⟩, which detaches the
/// subenvironment in its ground state. The two free phases and the pairing
/// of Schmidt vectors to control basis states are fixed by maximizing the
/// overlap of the detached system⊗control state with the pure target, making
/// the target an exact fixed point of collision + gate + discard.
pub fn construct_t_schmidt(params: &ModelParams) -> Result<ControlGate> {
    let theta = theta_star(params)?;
    let rho_star = theta.to_density();
    let psi_star = dominant_eigenvector(&rho_star);

    // |ψ'⟩ = Q_SA (|ψ*⟩_SC ⊗ |0_A⟩) on S ⊗ C ⊗ A
    let mut psi0 = DVector::<C64>::zeros(8);
    for i in 0..4 {
        psi0[i * 2 + 1] = psi_star[i]; // ⊗ |0_A⟩ (index 1 of the A qubit)
    }
    let q8 = embed_two_qubit(build_q(params).matrix(), 3, 0, 2);
    let psi_prime = QState::pure(&q8 * psi0)?;

    let sd = schmidt(&psi_prime, 2, 4)?;
    if sd.coefficients.len() > 2 && sd.coefficients[2] > 1e-10 {
        return Err(Error::InvalidState("post-collision Schmidt rank exceeds 2".into()));
    }

    // amplitude the target assigns to (left Schmidt vector) ⊗ |c⟩
    let overlap = |k: usize, control_idx: usize| -> C64 {
        let mut acc = C64::default();
        for i in 0..2 {
            acc += (sd.left[k][i] * psi_star[i * 2 + control_idx].conj()).conj();
        }
        acc * sd.coefficients[k]
    };

    // candidate pairings of (λ₁, λ₂) onto control basis vectors {|1⟩, |0⟩}
    let pairings = [[0usize, 1usize], [1, 0]]; // control indices for (λ₁, λ₂)
    let mut best: Option<(f64, [usize; 2], [C64; 2])> = None;
    for pairing in pairings {
        let mut fidelity = 0.0;
        let mut phases = [cr(1.0); 2];
        for k in 0..2 {
            let a = overlap(k, pairing[k]);
            let n = a.norm();
            if n > 1e-14 {
                phases[k] = a.conj() / n;
            }
            fidelity += n;
        }
        if best.as_ref().map_or(true, |(f, _, _)| fidelity > *f) {
            best = Some((fidelity, pairing, phases));
        }
    }
    let (_, pairing, phases) = best.unwrap();

    // complete {w₁, w₂} to an orthonormal basis with canonical seeds
    let mut basis: Vec<DVector<C64>> = vec![sd.right[0].clone(), sd.right[1].clone()];
    for seed in 0..4 {
        if basis.len() == 4 {
            break;
        }
        let mut w = DVector::<C64>::zeros(4);
        w[seed] = cr(1.0);
        for b in &basis {
            let olap = b.dotc(&w);
            w -= b * olap;
        }
        let n = w.norm();
        if n > 1e-8 {
            basis.push(w.unscale(n));
        }
    }
    if basis.len() != 4 {
        return Err(Error::InvalidState("failed to complete the gate basis".into()));
    }

    let target_idx = |control_idx: usize| if control_idx == 0 { CA_10 } else { CA_00 };
    let mut t = DMatrix::<C64>::zeros(4, 4);
    for k in 0..2 {
        let row = target_idx(pairing[k]);
        for j in 0..4 {
            t[(row, j)] += phases[k] * basis[k][j].conj();
        }
    }
    for (k, row) in [(2usize, CA_01), (3usize, CA_11)] {
        for j in 0..4 {
            t[(row, j)] += basis[k][j].conj();
        }
    }
    let t = QOperator::new(t)?;
    if !t.is_unitary() {
        return Err(Error::InvalidOperator("constructed gate failed the unitarity check".into()));
    }
    Ok(ControlGate { t, provenance: GateProvenance::SchmidtConstructed })
}

/// Closed-form control⊗subenvironment gate T = exp(−i f S₂) exp(−i g S₁)
/// with fixed 4×4 generators in the drive strength, damping rate and R₃₃.
pub fn closed_form_t(params: &ModelParams) -> Result<ControlGate> {
    let r = params.r33();
    let q = 2.0 * r * params.omega / params.gamma;
    let i = c(0.0, 1.0);
    let z = cr(0.0);
    let s1 = QOperator::from_rows(
        4,
        &[
            z, -i * q, z, -i * (0.5 * (r - 1.0)),
            i * q, z, i * (0.5 * (r + 1.0)), z,
            z, -i * (0.5 * (r + 1.0)), z, i * q,
            i * (0.5 * (r - 1.0)), z, -i * q, z,
        ],
    )?;
    let s2 = QOperator::from_rows(
        4,
        &[
            z, z, i * r, z,
            z, z, z, i,
            -i * r, z, z, z,
            z, -i, z, z,
        ],
    )?;
    let t1 = expm_hermitian(&s1, params.g())?;
    let t2 = expm_hermitian(&s2, params.f())?;
    Ok(ControlGate { t: t2.mul(&t1)?, provenance: GateProvenance::ClosedForm })
}

/// The two generators of the closed-form gate, exposed for direct checks.
pub fn closed_form_generators(params: &ModelParams) -> Result<(QOperator, QOperator)> {
    let r = params.r33();
    let q = 2.0 * r * params.omega / params.gamma;
    let i = c(0.0, 1.0);
    let z = cr(0.0);
    let s1 = QOperator::from_rows(
        4,
        &[
            z, -i * q, z, -i * (0.5 * (r - 1.0)),
            i * q, z, i * (0.5 * (r + 1.0)), z,
            z, -i * (0.5 * (r + 1.0)), z, i * q,
            i * (0.5 * (r - 1.0)), z, -i * q, z,
        ],
    )?;
    let s2 = QOperator::from_rows(
        4,
        &[
            z, z, i * r, z,
            z, z, z, i,
            -i * r, z, z, z,
            z, -i, z, z,
        ],
    )?;
    Ok((s1, s2))
}

/// Combined one-collision propagator on system ⊗ control ⊗ subenvironment:
/// collide (S,A), then apply the control gate on (C,A).
pub(crate) fn nonlocal_propagator(params: &ModelParams, gate: &ControlGate) -> DMatrix<C64> {
    let q8 = embed_two_qubit(build_q(params).matrix(), 3, 0, 2);
    let t8 = embed_two_qubit(gate.operator().matrix(), 3, 1, 2);
    t8 * q8
}

pub(crate) fn nonlocal_step_density(
    rho_sc: &DMatrix<C64>,
    propagator: &DMatrix<C64>,
    eta: f64,
) -> DMatrix<C64> {
    // ρ_SC ⊗ ρ_A, with the fresh subenvironment least significant
    let mut rho8 = DMatrix::<C64>::zeros(8, 8);
    let pop_excited = 0.5 * (1.0 + eta);
    let pop_ground = 0.5 * (1.0 - eta);
    for i in 0..4 {
        for j in 0..4 {
            rho8[(2 * i, 2 * j)] = rho_sc[(i, j)] * cr(pop_excited);
            rho8[(2 * i + 1, 2 * j + 1)] = rho_sc[(i, j)] * cr(pop_ground);
        }
    }
    let evolved = propagator * rho8 * propagator.adjoint();
    let mut out = DMatrix::<C64>::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            out[(i, j)] = evolved[(2 * i, 2 * j)] + evolved[(2 * i + 1, 2 * j + 1)];
        }
    }
    // the channel preserves trace exactly; undo rounding drift so long
    // trajectories stay valid states
    let tr = out.diagonal().sum().re;
    out.scale_mut(1.0 / tr);
    out
}

/// One application of the nonlocal collision channel to a system⊗control
/// state: collide system with a fresh vacuum subenvironment, apply the
/// control gate, discard the subenvironment.
pub fn nonlocal_collision_map(
    rho_sc: &QState,
    params: &ModelParams,
    gate: &ControlGate,
) -> Result<QState> {
    if !params.is_vacuum() {
        return Err(Error::Domain("the nonlocal scenario requires a vacuum environment".into()));
    }
    if rho_sc.dim() != 4 {
        return Err(Error::DimMismatch(format!("joint dim {}", rho_sc.dim())));
    }
    let prop = nonlocal_propagator(params, gate);
    QState::mixed(nonlocal_step_density(&rho_sc.density(), &prop, params.eta))
}

/// One nonlocal collision on a trajectory. No measurement happens until the
/// very end of the trajectory.
pub fn nonlocal_step(
    t: &mut TrajectoryState,
    params: &ModelParams,
    gate: &ControlGate,
) -> Result<()> {
    if !params.is_vacuum() {
        return Err(Error::Domain("the nonlocal scenario requires a vacuum environment".into()));
    }
    let Payload::Nonlocal { rho_sc } = &mut t.payload else {
        return Err(Error::InvalidState("trajectory payload does not match scenario".into()));
    };
    let prop = nonlocal_propagator(params, gate);
    let next = nonlocal_step_density(&rho_sc.density(), &prop, params.eta);
    *rho_sc = QState::mixed(next)?;
    t.step += 1;
    Ok(())
}

/// How much amplitude the gate leaves in the excited-subenvironment sector
/// when applied right after a collision from the pure joint target: exactly
/// zero for a perfect construction.
pub fn gate_decoupling_residual(params: &ModelParams, gate: &ControlGate) -> Result<f64> {
    let theta = theta_star(params)?;
    let psi_star = dominant_eigenvector(&theta.to_density());
    let mut psi0 = DVector::<C64>::zeros(8);
    for i in 0..4 {
        psi0[i * 2 + 1] = psi_star[i];
    }
    let q8 = embed_two_qubit(build_q(params).matrix(), 3, 0, 2);
    let t8 = embed_two_qubit(gate.operator().matrix(), 3, 1, 2);
    let out = t8 * (q8 * psi0);
    let mut excited = 0.0f64;
    for i in 0..4 {
        excited += out[2 * i].norm_sqr();
    }
    Ok(excited.sqrt())
}

/// Two-qubit generator on system ⊗ control whose steady state matches the
/// continuum limit of the nonlocal trajectory.
pub fn two_qubit_gksl(rho_sc: &QState, params: &ModelParams) -> Result<DMatrix<C64>> {
    if rho_sc.dim() != 4 {
        return Err(Error::DimMismatch(format!("joint dim {}", rho_sc.dim())));
    }
    let om = params.omega;
    let ga = params.gamma;
    let r33 = params.r33();
    let id = DMatrix::<C64>::identity(2, 2);
    let sx = sigma_x().into_matrix();
    let sy = sigma_y().into_matrix();
    let sz = sigma_z().into_matrix();
    let sm = sigma_minus().into_matrix();

    let h = id.kronecker(&sy).scale(-om)
        + sx.kronecker(&sz).scale(om * r33)
        + sx.kronecker(&id).scale(om)
        + sx.kronecker(&sx).scale(0.25 * r33 * ga)
        + sy.kronecker(&sy).scale(0.25 * ga);
    let l = id.kronecker(&sz).scale(-2.0 * r33 * om / ga.sqrt())
        + id.kronecker(&sx).scale(-0.5 * r33 * ga.sqrt())
        + id.kronecker(&sy).scale(0.5 * ga.sqrt()) * c(0.0, 1.0)
        + sm.kronecker(&id).scale(ga.sqrt()) * c(0.0, -1.0);

    let rho = rho_sc.density();
    let commutator = (&h * &rho - &rho * &h) * c(0.0, -1.0);
    let ld = l.adjoint();
    let ll = &ld * &l;
    let dissipator = &l * &rho * &ld - (&rho * &ll + &ll * &rho).scale(0.5);
    Ok(commutator + dissipator)
}

/// Effective environment observable realized by gating each subenvironment to
/// the control (gate i after collision i) and finally measuring the control
/// effect `c_effect`: an operator on the N subenvironments alone.
pub fn effective_nonlocal_povm(
    gates: &[ControlGate],
    c_effect: &DMatrix<C64>,
    n: usize,
) -> Result<DMatrix<C64>> {
    if n == 0 || n > 3 {
        return Err(Error::Domain(format!("supported for 1..=3 collisions, got {n}")));
    }
    if gates.len() != n {
        return Err(Error::DimMismatch(format!("{} gates for {n} collisions", gates.len())));
    }
    if c_effect.shape() != (2, 2) {
        return Err(Error::DimMismatch("control effect must be 2x2".into()));
    }
    // control ⊗ A₁ ⊗ … ⊗ A_N, control most significant
    let n_qubits = n + 1;
    let dim = 1usize << n_qubits;
    let mut total = DMatrix::<C64>::identity(dim, dim);
    for (i, gate) in gates.iter().enumerate() {
        let emb = embed_two_qubit(gate.operator().matrix(), n_qubits, 0, i + 1);
        total = emb * total;
    }
    let env_dim = 1usize << n;
    let effect_full = c_effect.kronecker(&DMatrix::<C64>::identity(env_dim, env_dim));
    let m = total.adjoint() * effect_full * total;
    // ⟨0_C| · |0_C⟩ block: the control ground state is basis index 1, so the
    // block offset is env_dim
    let mut a = DMatrix::<C64>::zeros(env_dim, env_dim);
    for i in 0..env_dim {
        for j in 0..env_dim {
            a[(i, j)] = m[(env_dim + i, env_dim + j)];
        }
    }
    Ok(a)
}

/// The dichotomic ensemble steered onto the system by measuring the control
/// qubit along `m`: two (probability, Bloch vector) pairs whose weighted
/// average is the system marginal.
pub fn steered_ensembles_from_control(
    rho_sc: &QState,
    m: &BlochVec,
) -> Result<[(f64, BlochVec); 2]> {
    if rho_sc.dim() != 4 {
        return Err(Error::DimMismatch(format!("joint dim {}", rho_sc.dim())));
    }
    let obs = SpinObservable::new(*m)?;
    let rho = rho_sc.density();
    let steer = |sign: i8| -> (f64, BlochVec) {
        let e = obs.effect(sign);
        // Tr_C[ρ (1 ⊗ E)]
        let mut out = DMatrix::<C64>::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = C64::default();
                for a in 0..2 {
                    for b in 0..2 {
                        acc += rho[(2 * i + a, 2 * j + b)] * e[(b, a)];
                    }
                }
                out[(i, j)] = acc;
            }
        }
        let p = out.diagonal().sum().re;
        if p < 1e-15 {
            return (0.0, BlochVec::zero());
        }
        (p, BlochVec::from_density(&out.unscale(p)))
    };
    Ok([steer(1), steer(-1)])
}

// ---------------------------------------------------------------------------
// Fast trajectory engine
//
// A collision followed by a projective subenvironment measurement acts on
// the system as one of two completely positive maps, linear in ρ. In the
// homogeneous Bloch parameterization v = (1, r) each map is one 4×4 real
// matrix sending v to (p, p·r'), so a trajectory step is a matrix-vector
// product, a uniform draw and a renormalization. The kernels are derived
// numerically from the same collision unitary and effects as the reference
// path, which keeps the two paths identical to round-off.

#[derive(Clone, Copy, Debug)]
pub(crate) struct MeasureKernel {
    plus: [[f64; 4]; 4],
    minus: [[f64; 4]; 4],
}

impl MeasureKernel {
    pub(crate) fn build(params: &ModelParams, direction: &BlochVec) -> Result<Self> {
        let obs = SpinObservable::new(*direction)?;
        let q = build_q(params);
        let env = env_state(params).density();
        let paulis = [
            DMatrix::<C64>::identity(2, 2),
            sigma_x().into_matrix(),
            sigma_y().into_matrix(),
            sigma_z().into_matrix(),
        ];
        let mut kernels = [[[0.0f64; 4]; 4]; 2];
        for (s, kernel) in [(1i8, 0usize), (-1i8, 1usize)] {
            let e = obs.effect(s);
            for mu in 0..4 {
                let rho_mu = paulis[mu].scale(0.5);
                let joint = rho_mu.kronecker(&env);
                let evolved = q.matrix() * joint * q.matrix().adjoint();
                // unnormalized conditional: Tr_A[ρ' (1 ⊗ E)]
                let mut cond = DMatrix::<C64>::zeros(2, 2);
                for i in 0..2 {
                    for j in 0..2 {
                        let mut acc = C64::default();
                        for a in 0..2 {
                            for b in 0..2 {
                                acc += evolved[(2 * i + a, 2 * j + b)] * e[(b, a)];
                            }
                        }
                        cond[(i, j)] = acc;
                    }
                }
                for nu in 0..4 {
                    kernels[kernel][nu][mu] = (&cond * &paulis[nu]).diagonal().sum().re;
                }
            }
        }
        Ok(Self { plus: kernels[0], minus: kernels[1] })
    }

    #[inline]
    fn matvec(m: &[[f64; 4]; 4], v: &[f64; 4]) -> [f64; 4] {
        let mut out = [0.0f64; 4];
        for (o, row) in out.iter_mut().zip(m.iter()) {
            *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
        }
        out
    }

    /// Outcome probability of +1 given the current homogeneous Bloch state.
    #[cfg(test)]
    pub(crate) fn p_plus(&self, v: &[f64; 4]) -> f64 {
        let row = &self.plus[0];
        row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3]
    }

    /// One collision + measurement; `u` uniform in [0,1). Returns the outcome
    /// and updates `v` in place (renormalized so v[0] = 1).
    #[inline]
    pub(crate) fn step(&self, v: &mut [f64; 4], u: f64) -> i8 {
        let wp = Self::matvec(&self.plus, v);
        let (outcome, w) = if u < wp[0] {
            (1i8, wp)
        } else {
            (-1i8, Self::matvec(&self.minus, v))
        };
        let inv = 1.0 / w[0];
        v[0] = 1.0;
        v[1] = w[1] * inv;
        v[2] = w[2] * inv;
        v[3] = w[3] * inv;
        outcome
    }

    /// The outcome-averaged (unconditioned) collision map.
    pub(crate) fn unconditioned(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = self.plus[i][j] + self.minus[i][j];
            }
        }
        m
    }
}

/// Endpoint of one trajectory: final conditional Bloch vector and purity.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Endpoint {
    pub bloch: BlochVec,
    pub purity: f64,
}

const START_BLOCH: [f64; 4] = [1.0, 0.0, 0.0, -1.0]; // system starts in |0⟩

/// Run one trajectory of `n_steps` collisions and return its endpoint. This
/// is the engine behind ensemble generation; it consumes exactly one uniform
/// draw per measurement, identically to the reference step functions.
pub fn run_trajectory(
    spec: &ScenarioSpec,
    params: &ModelParams,
    n_steps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Endpoint> {
    match spec {
        ScenarioSpec::NonAdaptive(obs) => {
            let kernel = MeasureKernel::build(params, &obs.direction())?;
            let mut v = START_BLOCH;
            for _ in 0..n_steps {
                kernel.step(&mut v, rng.random());
            }
            Ok(endpoint_from_homogeneous(&v))
        }
        ScenarioSpec::Adaptive => {
            let (n1, n2) = adaptive_directions(params);
            let kernels = [
                MeasureKernel::build(params, &n1)?,
                MeasureKernel::build(params, &n2)?,
            ];
            let mut v = START_BLOCH;
            let mut dir = 0usize;
            for _ in 0..n_steps {
                if kernels[dir].step(&mut v, rng.random()) == 1 {
                    dir = 1 - dir;
                }
            }
            Ok(endpoint_from_homogeneous(&v))
        }
        ScenarioSpec::Nonlocal { control_direction } => {
            if !params.is_vacuum() {
                return Err(Error::Domain(
                    "the nonlocal scenario requires a vacuum environment".into(),
                ));
            }
            let gate = construct_t_schmidt(params)?;
            let prop = nonlocal_propagator(params, &gate);
            let mut rho_sc = kron_states(
                &QState::ground(),
                &QState::ground(),
            )?
            .density();
            for _ in 0..n_steps {
                rho_sc = nonlocal_step_density(&rho_sc, &prop, params.eta);
            }
            let joint = QState::mixed(rho_sc)?;
            let pair = steered_ensembles_from_control(&joint, &control_direction.direction())?;
            let u: f64 = rng.random();
            let chosen = if u < pair[0].0 { pair[0].1 } else { pair[1].1 };
            Ok(Endpoint { bloch: chosen, purity: 0.5 * (1.0 + chosen.dot(&chosen)) })
        }
    }
}

fn endpoint_from_homogeneous(v: &[f64; 4]) -> Endpoint {
    let bloch = BlochVec::new(v[1], v[2], v[3]);
    Endpoint { bloch, purity: 0.5 * (1.0 + bloch.dot(&bloch)) }
}

/// Unconditioned system Bloch vector after `n_steps` collisions from |0⟩.
pub fn unconditioned_bloch(params: &ModelParams, n_steps: u64) -> Result<BlochVec> {
    let kernel = MeasureKernel::build(params, &BlochVec::z_axis())?;
    let m = kernel.unconditioned();
    let mut v = START_BLOCH;
    for _ in 0..n_steps {
        let mut out = [0.0f64; 4];
        for (o, row) in out.iter_mut().zip(m.iter()) {
            *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
        }
        v = out;
    }
    Ok(BlochVec::new(v[1], v[2], v[3]))
}
