//! Coefficient profiles of the transmitting-and-reflecting surface, and the
//! surface half of the alternating design loop.
//!
//! Each element splits the incident wave into a transmitted part `theta_t,n`
//! and a reflected part `theta_r,n`. Lossless hardware conserves energy per
//! element, `|theta_t,n|^2 + |theta_r,n|^2 = 1`. In the coupled phase-shift
//! model the circuit additionally forces the two phases into quadrature,
//! `cos(arg theta_t,n - arg theta_r,n) = 0`.
//!
//! At a fixed waveform every constraint sees the coefficients through rank
//! one quadratic forms, so the surface subproblem is solved by semidefinite
//! relaxation: lift each coefficient vector to a Hermitian matrix, solve the
//! relaxed program, and recover a unit-energy profile by Gaussian
//! randomization. The independent model relaxes over `theta_t theta_t^H` and
//! `theta_r theta_r^H` directly. The coupled model splits in two: a
//! homogenized relaxation pulls the lifted coefficients towards a
//! hardware-feasible incumbent, and an exact per-element alternating step
//! projects back onto quadrature phases with a unit energy split.

use crate::channel::ChannelSet;
use crate::config::SystemConfig;
use crate::conic::{BlockId, ConicSolution, ProgramBuilder, SolveStatus, SolverSettings};
use crate::linalg::{cn_sample, frob_norm, hermitize, psd_factor, sup_norm, sup_norm_vec, CMat, CVec, RVec};
use crate::waveform::Waveform;
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use thiserror::Error;

/// Default number of randomization draws used by the surface solvers.
pub const RANDOMIZE_TRIALS: usize = 100;

#[derive(Debug, Error)]
pub enum StarsError {
    #[error("element {index} leaks energy: |t|^2 + |r|^2 = {total}")]
    EnergyDefect { index: usize, total: f64 },
    #[error("element {index} violates phase quadrature: cos(dphi) = {cosine}")]
    CouplingDefect { index: usize, cosine: f64 },
    #[error("rate targets are unattainable under the current waveform")]
    Infeasible,
    #[error("a half split needs an even element count, got {0}")]
    UnevenSplit(usize),
    #[error("surface subproblem failed: {0}")]
    Numerical(String),
}

/// Which phase relation the surface hardware enforces between the
/// transmitted and reflected coefficient of an element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseCoupling {
    /// Both phases are free.
    Independent,
    /// Phases locked in quadrature by the shared reactive circuit.
    Coupled,
}

/// One transmission and one reflection coefficient per element.
#[derive(Clone, Debug)]
pub struct StarsProfile {
    pub theta_t: CVec,
    pub theta_r: CVec,
    pub model: PhaseCoupling,
}

impl StarsProfile {
    pub fn n(&self) -> usize {
        self.theta_t.len()
    }

    /// Uniformly random phases with an even energy split. Coupled profiles
    /// get a random quadrature sign per element, so the result is feasible
    /// for either model.
    pub fn random<R: Rng>(n: usize, model: PhaseCoupling, rng: &mut R) -> StarsProfile {
        let amp = 0.5_f64.sqrt();
        let mut theta_t = CVec::zeros(n);
        let mut theta_r = CVec::zeros(n);
        for i in 0..n {
            let phase_t = rng.gen_range(0.0..2.0 * PI);
            let phase_r = match model {
                PhaseCoupling::Independent => rng.gen_range(0.0..2.0 * PI),
                PhaseCoupling::Coupled => {
                    let sign = if rng.gen_range(0..2) == 0 { 1.0 } else { -1.0 };
                    phase_t + sign * FRAC_PI_2
                }
            };
            theta_t[i] = Complex64::from_polar(amp, phase_t);
            theta_r[i] = Complex64::from_polar(amp, phase_r);
        }
        StarsProfile {
            theta_t,
            theta_r,
            model,
        }
    }

    /// Largest per-element deviation from unit energy.
    pub fn energy_defect(&self) -> f64 {
        (0..self.n())
            .map(|i| (self.theta_t[i].norm_sqr() + self.theta_r[i].norm_sqr() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest per-element deviation from phase quadrature. An element with
    /// a dead side has no phase relation to violate and is skipped: a zero
    /// coefficient is compatible with any coupling.
    pub fn coupling_defect(&self) -> f64 {
        (0..self.n())
            .filter(|&i| self.theta_t[i].norm() > 1e-12 && self.theta_r[i].norm() > 1e-12)
            .map(|i| (self.theta_t[i].arg() - self.theta_r[i].arg()).cos().abs())
            .fold(0.0, f64::max)
    }

    /// Verifies the hardware invariants of the profile's own model.
    pub fn check(&self) -> Result<(), StarsError> {
        for i in 0..self.n() {
            let total = self.theta_t[i].norm_sqr() + self.theta_r[i].norm_sqr();
            if (total - 1.0).abs() > 1e-8 {
                return Err(StarsError::EnergyDefect { index: i, total });
            }
        }
        if self.model == PhaseCoupling::Coupled {
            for i in 0..self.n() {
                if self.theta_t[i].norm() <= 1e-12 || self.theta_r[i].norm() <= 1e-12 {
                    continue;
                }
                let cosine = (self.theta_t[i].arg() - self.theta_r[i].arg()).cos();
                if cosine.abs() > 1e-8 {
                    return Err(StarsError::CouplingDefect { index: i, cosine });
                }
            }
        }
        Ok(())
    }
}

/// How the per-element energy split is constrained in the surface design.
#[derive(Clone, Debug)]
pub enum AmplitudeConstraint {
    /// Every element may split its energy freely between the two sides.
    Free,
    /// Frozen split: `true` sends all of an element's energy to the
    /// transmission side, `false` to the reflection side. This is the
    /// conventional one-sided surface, kept as a baseline.
    FixedSplit(Vec<bool>),
}

impl AmplitudeConstraint {
    /// The first half of the elements transmit, the second half reflect.
    pub fn half_split(n: usize) -> Result<AmplitudeConstraint, StarsError> {
        if n % 2 != 0 {
            return Err(StarsError::UnevenSplit(n));
        }
        let mut mask = vec![true; n];
        mask[n / 2..].fill(false);
        Ok(AmplitudeConstraint::FixedSplit(mask))
    }

    /// Elements whose coefficient on the given side is a design variable.
    fn live(&self, transmit: bool, n: usize) -> Vec<usize> {
        match self {
            AmplitudeConstraint::Free => (0..n).collect(),
            AmplitudeConstraint::FixedSplit(mask) => {
                assert_eq!(mask.len(), n, "split mask must cover every element");
                (0..n).filter(|&i| mask[i] == transmit).collect()
            }
        }
    }
}

/// The quadratic fit half of the augmented objective: the surface block
/// pulls the reflected covariance towards `f_target + rho * upsilon`.
#[derive(Clone, Copy)]
pub struct FitPenalty<'a> {
    /// Surrogate the waveform block certified its bound at.
    pub f_target: &'a CMat,
    /// Scaled dual of the surrogate consistency constraint.
    pub upsilon: &'a CMat,
    /// Penalty parameter; the fit distances are reported unweighted.
    pub rho: f64,
}

/// Proximity data of the relaxed coupled subproblem: the lifted
/// coefficients are pulled towards the hardware-feasible incumbent shifted
/// by the scaled duals of the consensus constraint.
#[derive(Clone, Copy)]
pub struct CouplingPenalty<'a> {
    pub tilde_t: &'a CVec,
    pub tilde_r: &'a CVec,
    pub lambda_t: &'a CVec,
    pub lambda_r: &'a CVec,
}

/// Result of one surface block solve.
#[derive(Debug, Clone)]
pub struct ThetaBlockSolution {
    /// Unit-energy profile recovered from the relaxation.
    pub profile: StarsProfile,
    /// Objective of the relaxed program, a lower bound on any profile's.
    pub sdp_objective: f64,
    /// The same functional evaluated at the recovered profile.
    pub extracted_objective: f64,
    /// How many randomized candidates met every rate target.
    pub feasible_candidates: usize,
    /// Whether extraction fell back to the dominant eigenvector pair
    /// because no randomized candidate was feasible.
    pub fell_back: bool,
}

/// One feasible profile drawn by the randomization step.
#[derive(Debug, Clone)]
pub struct RandomCandidate {
    pub theta_t: CVec,
    pub theta_r: CVec,
    pub objective: f64,
}

/// What the randomization step found.
#[derive(Debug, Clone)]
pub struct RandomizeOutcome {
    /// Best feasible candidate, if any trial passed the rate targets.
    pub best: Option<RandomCandidate>,
    /// Number of trials that passed.
    pub feasible: usize,
}

/// Per-user rate functionals as quadratic forms in the transmission
/// coefficients: `|h_k^H Theta_t G p_i|^2 = Re(theta_t^H C theta_t)` for a
/// constant matrix `C` per user pair, and likewise for the sensing stream,
/// so rate targets become linear rows on the lifted matrix
/// `theta_t theta_t^H`.
pub struct SinrQuadratics {
    phi_conj: Vec<Vec<CMat>>,
    psi_conj: Vec<CMat>,
    gamma_bar: Vec<f64>,
    noise: f64,
}

impl SinrQuadratics {
    pub fn new(channels: &ChannelSet, waveform: &Waveform, cfg: &SystemConfig) -> SinrQuadratics {
        let k_total = channels.h.len();
        assert_eq!(cfg.gamma_bar.len(), k_total, "one rate target per user");
        let n = channels.g.nrows();
        let phi_conj = (0..k_total)
            .map(|k| {
                waveform
                    .p
                    .iter()
                    .map(|p| {
                        let gp = &channels.g * p;
                        let w = CVec::from_fn(n, |i, _| channels.h[k][i].conj() * gp[i]);
                        (&w * w.adjoint()).conjugate()
                    })
                    .collect()
            })
            .collect();
        let psi_conj = (0..k_total)
            .map(|k| {
                let m = CMat::from_fn(n, channels.g.ncols(), |i, j| {
                    channels.h[k][i].conj() * channels.g[(i, j)]
                });
                (&m * &waveform.r_s * m.adjoint()).conjugate()
            })
            .collect();
        SinrQuadratics {
            phi_conj,
            psi_conj,
            gamma_bar: cfg.gamma_bar.clone(),
            noise: cfg.noise_comm,
        }
    }

    /// Rates of a concrete transmission profile under this waveform.
    pub fn sinr(&self, theta_t: &CVec) -> RVec {
        let quad = |c: &CMat| (theta_t.adjoint() * c * theta_t)[(0, 0)].re;
        let mut out = RVec::zeros(self.gamma_bar.len());
        for k in 0..self.gamma_bar.len() {
            let mut desired = 0.0;
            let mut interference = 0.0;
            for (i, phi) in self.phi_conj[k].iter().enumerate() {
                let pow = quad(phi);
                if i == k {
                    desired = pow;
                } else {
                    interference += pow;
                }
            }
            let sense = quad(&self.psi_conj[k]).max(0.0);
            out[k] = desired / (interference + sense + self.noise);
        }
        out
    }

    /// Whether every positive rate target is met, with a hair of slack for
    /// candidates sitting on the relaxation boundary.
    pub fn feasible(&self, theta_t: &CVec) -> bool {
        let rates = self.sinr(theta_t);
        (0..self.gamma_bar.len()).all(|k| rates[k] >= self.gamma_bar[k] * (1.0 - 1e-9))
    }

    /// Rate targets as linear rows on a lifted block. `prep` maps each
    /// coefficient matrix into the block's own coordinates (padding for a
    /// homogenized block, restriction for a masked one). Users with a zero
    /// target contribute no row, matching the waveform subproblem.
    fn add_rows(&self, pb: &mut ProgramBuilder, q_t: BlockId, prep: &dyn Fn(&CMat) -> CMat) {
        for k in 0..self.gamma_bar.len() {
            let target = self.gamma_bar[k];
            if target <= 0.0 {
                continue;
            }
            assert!(
                k < self.phi_conj[k].len(),
                "user {k} has a rate target but no beamformer"
            );
            let mut row = pb.re_trace_product(q_t, &prep(&self.phi_conj[k][k])) * (1.0 / target);
            for (i, phi) in self.phi_conj[k].iter().enumerate() {
                if i != k {
                    row = row - pb.re_trace_product(q_t, &prep(phi));
                }
            }
            row = row - pb.re_trace_product(q_t, &prep(&self.psi_conj[k]));
            pb.add_ineq_ge(row, self.noise);
        }
    }
}

/// Scaled eigenvector factor of a Hermitian PSD matrix: vectors
/// `sqrt(lambda_j) v_j` over the eigenvalues above `1e-10` of the largest,
/// so that `sum_j v_j v_j^H` reconstructs the matrix. This is the factor
/// the randomization step samples from.
pub fn eig_rank_factor(a: &CMat) -> Vec<CVec> {
    let l = psd_factor(a, 1e-10);
    (0..l.ncols()).map(|j| l.column(j).into_owned()).collect()
}

/// Strips the homogenization slot of a lifted sample: rotates the leading
/// entries by the conjugate phase of the last one and drops it, making the
/// result invariant to the global phase of the input. A vanishing slot
/// applies no rotation; its magnitude is ignored either way.
pub fn dehomogenize(v: &CVec) -> CVec {
    let n = v.len() - 1;
    let rot = unit_phase(v[n]).conj();
    CVec::from_fn(n, |i, _| v[i] * rot)
}

/// `z / |z|`, with the convention that zero keeps phase one.
fn unit_phase(z: Complex64) -> Complex64 {
    let r = z.norm();
    if r > 0.0 {
        z / r
    } else {
        Complex64::new(1.0, 0.0)
    }
}

/// Per-element amplitudes implied by the relaxation diagonals: element `j`
/// keeps the energy split `[Q_t]_jj : [Q_r]_jj`, renormalized to a unit
/// total. A dead pair of diagonals falls back to the even split.
fn split_amplitudes(q_t: &CMat, q_r: &CMat, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut amp_t = Vec::with_capacity(n);
    let mut amp_r = Vec::with_capacity(n);
    for j in 0..n {
        let dt = q_t[(j, j)].re.max(0.0);
        let dr = q_r[(j, j)].re.max(0.0);
        let total = dt + dr;
        if total > 0.0 {
            amp_t.push((dt / total).sqrt());
            amp_r.push((dr / total).sqrt());
        } else {
            amp_t.push(0.5_f64.sqrt());
            amp_r.push(0.5_f64.sqrt());
        }
    }
    (amp_t, amp_r)
}

/// One randomization draw: a Gaussian combination of the factor vectors,
/// dehomogenized when the block is lifted, with per-element amplitudes
/// overridden by the relaxation's own energy split so every candidate is
/// exactly unit-energy.
fn renormalized_sample<R: Rng>(
    factor: &[CVec],
    amps: &[f64],
    rows: usize,
    n: usize,
    rng: &mut R,
) -> CVec {
    let mut x = CVec::zeros(rows);
    for col in factor {
        x += col * cn_sample(rng);
    }
    let x = if rows == n + 1 { dehomogenize(&x) } else { x };
    CVec::from_fn(n, |j, _| unit_phase(x[j]) * amps[j])
}

/// Deterministic fallback when no randomized candidate is feasible: the
/// leading eigenvector of the block, renormalized the same way.
fn dominant_sample(factor: &[CVec], amps: &[f64], rows: usize, n: usize) -> CVec {
    let lead = factor
        .iter()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))
        .cloned()
        .unwrap_or_else(|| CVec::zeros(rows));
    let x = if rows == n + 1 { dehomogenize(&lead) } else { lead };
    CVec::from_fn(n, |j, _| unit_phase(x[j]) * amps[j])
}

/// Gaussian randomization over a pair of lifted blocks: draws candidate
/// coefficient vectors whose phases come from samples of the relaxation
/// and whose amplitudes come from its diagonals, keeps the candidates that
/// meet every rate target, and returns the one with the least objective.
///
/// The blocks may be `n` by `n` or homogenized (`n + 1` rows); homogenized
/// samples are dehomogenized before renormalization. `feasible` counts the
/// passing trials; `best` is `None` when there were none, in which case
/// the caller picks its own fallback.
pub fn gaussian_randomize<R: Rng>(
    q_t: &CMat,
    q_r: &CMat,
    n: usize,
    sinr: &SinrQuadratics,
    objective: impl Fn(&CVec, &CVec) -> f64,
    trials: usize,
    rng: &mut R,
) -> RandomizeOutcome {
    let (amp_t, amp_r) = split_amplitudes(q_t, q_r, n);
    let factor_t = eig_rank_factor(q_t);
    let factor_r = eig_rank_factor(q_r);
    let mut best: Option<RandomCandidate> = None;
    let mut feasible = 0usize;
    for _ in 0..trials {
        let theta_t = renormalized_sample(&factor_t, &amp_t, q_t.nrows(), n, rng);
        let theta_r = renormalized_sample(&factor_r, &amp_r, q_r.nrows(), n, rng);
        if !sinr.feasible(&theta_t) {
            continue;
        }
        feasible += 1;
        let value = objective(&theta_t, &theta_r);
        if best.as_ref().map_or(true, |b| value < b.objective) {
            best = Some(RandomCandidate {
                theta_t,
                theta_r,
                objective: value,
            });
        }
    }
    RandomizeOutcome { best, feasible }
}

/// Squared distance between the fit target and the reflected covariance a
/// profile would produce, `|| f_bar - r_bar .* (theta_r theta_r^H) ||_F^2`.
fn fit_gap(f_bar: &CMat, r_bar: &CMat, theta_r: &CVec) -> f64 {
    let e = CMat::from_fn(f_bar.nrows(), f_bar.ncols(), |i, j| {
        f_bar[(i, j)] - r_bar[(i, j)] * theta_r[i] * theta_r[j].conj()
    });
    frob_norm(&e).powi(2)
}

fn accept(sol: &ConicSolution) -> Result<(), StarsError> {
    match sol.status {
        SolveStatus::Optimal => Ok(()),
        SolveStatus::Infeasible => Err(StarsError::Infeasible),
        _ => Err(StarsError::Numerical(sol.raw.message.clone())),
    }
}

/// Column selector `E` with `E[live[j], j] = 1`: congruence by it embeds a
/// block over the live elements into full surface coordinates, leaving the
/// dead rows structurally zero.
fn embedding(n: usize, live: &[usize]) -> CMat {
    let mut e = CMat::zeros(n, live.len());
    for (j, &i) in live.iter().enumerate() {
        e[(i, j)] = Complex64::new(1.0, 0.0);
    }
    e
}

/// Scatters a solved block back to full coordinates; dead rows stay zero.
fn expand(small: &CMat, live: &[usize], n: usize) -> CMat {
    let mut full = CMat::zeros(n, n);
    for (a, &i) in live.iter().enumerate() {
        for (b, &j) in live.iter().enumerate() {
            full[(i, j)] = small[(a, b)];
        }
    }
    full
}

/// Zero-pads a matrix into the top-left corner of a larger square one.
fn padded(a: &CMat, dim: usize) -> CMat {
    let mut out = CMat::zeros(dim, dim);
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out
}

/// `Xi = [[I, u], [u^H, 0]]`: `Re tr(Xi Q)` linearizes `||theta + u||^2`
/// over the homogenized lift of `theta`, up to the constant `||u||^2`.
fn proximity_coeff(u: &CVec) -> CMat {
    let n = u.len();
    let mut xi = CMat::identity(n + 1, n + 1);
    xi[(n, n)] = Complex64::new(0.0, 0.0);
    for i in 0..n {
        xi[(i, n)] = u[i];
        xi[(n, i)] = u[i].conj();
    }
    xi
}

/// Surface block of the alternating optimizer under the independent phase
/// model. At a fixed waveform, minimizes the fit distance between
/// `f_target + rho * upsilon` and the reflected covariance over
/// unit-energy profiles meeting every rate target: a semidefinite
/// relaxation of the two lifted coefficient blocks, then Gaussian
/// randomization.
///
/// The reflected covariance collapses to an entrywise product: with
/// `r_bar = G R_x G^H`, the surrogate is `r_bar .* (theta_r theta_r^H)`,
/// affine in the lifted reflection block. `sdp_objective` is the relaxed
/// fit distance (a lower bound), `extracted_objective` the distance at the
/// recovered profile; neither carries the `1/(2 rho)` penalty weight.
pub fn solve_theta_independent<R: Rng>(
    channels: &ChannelSet,
    waveform: &Waveform,
    fit: &FitPenalty,
    amplitudes: &AmplitudeConstraint,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<ThetaBlockSolution, StarsError> {
    if !(fit.rho.is_finite() && fit.rho > 0.0) {
        return Err(StarsError::Numerical(format!(
            "penalty parameter must be positive, got {}",
            fit.rho
        )));
    }
    let n = channels.g.nrows();
    let r_bar = hermitize(&(&channels.g * &waveform.r_x * channels.g.adjoint()));
    let f_bar = fit.f_target + fit.upsilon * Complex64::new(fit.rho, 0.0);
    let f_scale = sup_norm(&f_bar).max(sup_norm(&r_bar)).max(1e-300);
    let sinr = SinrQuadratics::new(channels, waveform, cfg);

    let live_t = amplitudes.live(true, n);
    let live_r = amplitudes.live(false, n);
    assert!(
        !live_t.is_empty() && !live_r.is_empty(),
        "a split must leave both sides populated"
    );
    let mut pb = ProgramBuilder::new();
    let q_t = pb.hermitian_psd(live_t.len());
    let q_r = pb.hermitian_psd(live_r.len());

    let full_r = if live_r.len() == n {
        pb.matrix_expr(q_r)
    } else {
        pb.matrix_expr(q_r).congruence(&embedding(n, &live_r))
    };
    let residual = full_r
        .hadamard(&r_bar)
        .shift(&(-&f_bar))
        .scale(1.0 / f_scale);
    pb.epigraph_frobenius(&residual, 1.0);

    let restrict_t = |c: &CMat| {
        if live_t.len() == n {
            c.clone()
        } else {
            let e = embedding(n, &live_t);
            e.adjoint() * c * &e
        }
    };
    sinr.add_rows(&mut pb, q_t, &restrict_t);

    for i in 0..n {
        let t_pos = live_t.iter().position(|&x| x == i);
        let r_pos = live_r.iter().position(|&x| x == i);
        let row = match (t_pos, r_pos) {
            (Some(a), Some(b)) => pb.entry_re(q_t, a, a) + pb.entry_re(q_r, b, b),
            (Some(a), None) => pb.entry_re(q_t, a, a),
            (None, Some(b)) => pb.entry_re(q_r, b, b),
            (None, None) => unreachable!("every element is live on at least one side"),
        };
        pb.add_eq(row, 1.0);
    }

    let sol = pb.solve(&SolverSettings::default());
    accept(&sol)?;
    let q_t_full = expand(&sol.hermitian(q_t), &live_t, n);
    let q_r_full = expand(&sol.hermitian(q_r), &live_r, n);
    let sdp_objective = sol.objective * f_scale * f_scale;

    let objective = |_: &CVec, theta_r: &CVec| fit_gap(&f_bar, &r_bar, theta_r);
    let outcome = gaussian_randomize(
        &q_t_full,
        &q_r_full,
        n,
        &sinr,
        &objective,
        RANDOMIZE_TRIALS,
        rng,
    );
    let feasible_candidates = outcome.feasible;
    let (theta_t, theta_r, extracted_objective, fell_back) = match outcome.best {
        Some(c) => (c.theta_t, c.theta_r, c.objective, false),
        None => {
            let (amp_t, amp_r) = split_amplitudes(&q_t_full, &q_r_full, n);
            let t = dominant_sample(&eig_rank_factor(&q_t_full), &amp_t, n, n);
            let r = dominant_sample(&eig_rank_factor(&q_r_full), &amp_r, n, n);
            let value = objective(&t, &r);
            (t, r, value, true)
        }
    };
    Ok(ThetaBlockSolution {
        profile: StarsProfile {
            theta_t,
            theta_r,
            model: PhaseCoupling::Independent,
        },
        sdp_objective,
        extracted_objective,
        feasible_candidates,
        fell_back,
    })
}

/// Relaxed surface block for the coupled phase model. On top of the fit of
/// the independent block, the objective pulls each coefficient vector
/// towards `tilde + rho * lambda`, the hardware-feasible incumbent shifted
/// by the scaled consensus duals. The lifted blocks are homogenized with a
/// unit corner so the proximity term, linear in the coefficients, fits the
/// relaxation; samples are dehomogenized by their slot's phase before
/// renormalization. The quadrature constraint itself lives in the
/// incumbent's own subproblem, so the recovered profile is labeled
/// independent.
///
/// Both reported objectives include the fit distance plus the squared
/// proximity distances, again without the `1/(2 rho)` weight.
pub fn solve_theta_coupled_relaxed<R: Rng>(
    channels: &ChannelSet,
    waveform: &Waveform,
    fit: &FitPenalty,
    coupling: &CouplingPenalty,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<ThetaBlockSolution, StarsError> {
    if !(fit.rho.is_finite() && fit.rho > 0.0) {
        return Err(StarsError::Numerical(format!(
            "penalty parameter must be positive, got {}",
            fit.rho
        )));
    }
    let n = channels.g.nrows();
    let r_bar = hermitize(&(&channels.g * &waveform.r_x * channels.g.adjoint()));
    let f_bar = fit.f_target + fit.upsilon * Complex64::new(fit.rho, 0.0);
    let f_scale = sup_norm(&f_bar).max(sup_norm(&r_bar)).max(1e-300);
    let rho = Complex64::new(fit.rho, 0.0);
    let upsilon_t = -(coupling.tilde_t + coupling.lambda_t * rho);
    let upsilon_r = -(coupling.tilde_r + coupling.lambda_r * rho);
    // The two objective halves live on different scales; normalize by the
    // larger so the solver's stopping rules see entries near unity.
    let p_scale = 1.0 + sup_norm_vec(&upsilon_t).max(sup_norm_vec(&upsilon_r));
    let obj_scale = (f_scale * f_scale).max(p_scale);
    let sinr = SinrQuadratics::new(channels, waveform, cfg);

    let mut pb = ProgramBuilder::new();
    let q_t = pb.hermitian_psd(n + 1);
    let q_r = pb.hermitian_psd(n + 1);

    let residual = pb
        .matrix_expr(q_r)
        .hadamard(&padded(&r_bar, n + 1))
        .shift(&(-padded(&f_bar, n + 1)))
        .scale(1.0 / f_scale);
    pb.epigraph_frobenius(&residual, f_scale * f_scale / obj_scale);
    let prox_t = pb.re_trace_product(q_t, &proximity_coeff(&upsilon_t)) * (1.0 / obj_scale);
    pb.add_objective(prox_t);
    let prox_r = pb.re_trace_product(q_r, &proximity_coeff(&upsilon_r)) * (1.0 / obj_scale);
    pb.add_objective(prox_r);

    let pad_coeff = |c: &CMat| padded(c, n + 1);
    sinr.add_rows(&mut pb, q_t, &pad_coeff);

    for i in 0..n {
        let row = pb.entry_re(q_t, i, i) + pb.entry_re(q_r, i, i);
        pb.add_eq(row, 1.0);
    }
    let corner_t = pb.entry_re(q_t, n, n);
    pb.add_eq(corner_t, 1.0);
    let corner_r = pb.entry_re(q_r, n, n);
    pb.add_eq(corner_r, 1.0);

    let sol = pb.solve(&SolverSettings::default());
    accept(&sol)?;
    let q_t_hat = sol.hermitian(q_t);
    let q_r_hat = sol.hermitian(q_r);
    let constant = upsilon_t.norm_squared() + upsilon_r.norm_squared();
    let sdp_objective = sol.objective * obj_scale + constant;

    let objective = |theta_t: &CVec, theta_r: &CVec| {
        fit_gap(&f_bar, &r_bar, theta_r)
            + (theta_t + &upsilon_t).norm_squared()
            + (theta_r + &upsilon_r).norm_squared()
    };
    let outcome = gaussian_randomize(
        &q_t_hat,
        &q_r_hat,
        n,
        &sinr,
        &objective,
        RANDOMIZE_TRIALS,
        rng,
    );
    let feasible_candidates = outcome.feasible;
    let (theta_t, theta_r, extracted_objective, fell_back) = match outcome.best {
        Some(c) => (c.theta_t, c.theta_r, c.objective, false),
        None => {
            let (amp_t, amp_r) = split_amplitudes(&q_t_hat, &q_r_hat, n);
            let t = dominant_sample(&eig_rank_factor(&q_t_hat), &amp_t, n + 1, n);
            let r = dominant_sample(&eig_rank_factor(&q_r_hat), &amp_r, n + 1, n);
            let value = objective(&t, &r);
            (t, r, value, true)
        }
    };
    Ok(ThetaBlockSolution {
        profile: StarsProfile {
            theta_t,
            theta_r,
            model: PhaseCoupling::Independent,
        },
        sdp_objective,
        extracted_objective,
        feasible_candidates,
        fell_back,
    })
}

/// Exact phase step of the per-element coupled subproblem: minimizes
/// `Re(u q_t) + Re(v q_r)` over unit-modulus `q_t` with `q_r = ±i q_t`.
/// The two quadrature branches fold into `psi = u ± i v`; the winning
/// branch maximizes `|psi|` (a tie keeps the positive one) and the phase
/// closes as `q_t = -conj(psi) / |psi|`.
pub fn optimal_phases_coupled(u: Complex64, v: Complex64) -> (Complex64, Complex64) {
    let i = Complex64::i();
    let psi_pos = u + i * v;
    let psi_neg = u - i * v;
    let (psi, sign) = if psi_neg.norm() > psi_pos.norm() {
        (psi_neg, -1.0)
    } else {
        (psi_pos, 1.0)
    };
    let q_t = if psi.norm() > 0.0 {
        -psi.conj() / psi.norm()
    } else {
        Complex64::new(-1.0, 0.0)
    };
    (q_t, i * sign * q_t)
}

/// Exact amplitude step of the per-element coupled subproblem: minimizes
/// `a sin(omega) + b cos(omega)` over the first quadrant and returns
/// `(sin omega, cos omega)`, the two amplitudes. Writing the objective as
/// `r sin(omega + psi)` puts the free minimizer at `-pi/2 - psi`; the
/// branches below keep it when it falls inside the quadrant and otherwise
/// pick the better endpoint. A zero gradient keeps the reflection side.
pub fn optimal_amplitudes(a: f64, b: f64) -> (f64, f64) {
    let r = a.hypot(b);
    if r <= 0.0 {
        return (0.0, 1.0);
    }
    let sgn = if b < 0.0 { -1.0 } else { 1.0 };
    let psi = sgn * (a / r).clamp(-1.0, 1.0).acos();
    let omega = if psi < -FRAC_PI_2 {
        -FRAC_PI_2 - psi
    } else if psi < FRAC_PI_4 {
        0.0
    } else {
        FRAC_PI_2
    };
    (omega.sin(), omega.cos())
}

/// Exact coordinate minimizer of the consensus penalty over the coupled
/// feasible set: the profile with quadrature phases and a unit energy
/// split per element that is nearest to `theta - rho * lambda`, found by
/// alternating the closed-form phase and amplitude steps, which the
/// penalty's separability makes exact per element. Amplitudes start at the
/// incumbent's own split (an even split where both sides vanish); phases
/// are set by the first half-sweep. The loop stops once a full sweep
/// improves the objective by less than `1e-9`.
pub fn solve_tilde_theta(
    theta_t: &CVec,
    theta_r: &CVec,
    lambda_t: &CVec,
    lambda_r: &CVec,
    rho: f64,
) -> StarsProfile {
    let n = theta_t.len();
    let rho_c = Complex64::new(rho, 0.0);
    let upsilon_t = lambda_t * rho_c - theta_t;
    let upsilon_r = lambda_r * rho_c - theta_r;

    let mut beta_t = vec![0.0; n];
    let mut beta_r = vec![0.0; n];
    for j in 0..n {
        let (bt, br) = (theta_t[j].norm(), theta_r[j].norm());
        let total = bt.hypot(br);
        if total > 0.0 {
            beta_t[j] = bt / total;
            beta_r[j] = br / total;
        } else {
            beta_t[j] = 0.5_f64.sqrt();
            beta_r[j] = 0.5_f64.sqrt();
        }
    }
    let mut q_t = vec![Complex64::new(1.0, 0.0); n];
    let mut q_r = vec![Complex64::new(1.0, 0.0); n];

    let objective = |bt: &[f64], br: &[f64], qt: &[Complex64], qr: &[Complex64]| -> f64 {
        (0..n)
            .map(|j| {
                (upsilon_t[j].conj() * qt[j]).re * bt[j] + (upsilon_r[j].conj() * qr[j]).re * br[j]
            })
            .sum()
    };

    let mut prev = f64::INFINITY;
    for _ in 0..200 {
        for j in 0..n {
            let u = upsilon_t[j].conj() * beta_t[j];
            let v = upsilon_r[j].conj() * beta_r[j];
            let (mut qt, mut qr) = optimal_phases_coupled(u, v);
            // A dead side leaves its own phase undetermined by this step;
            // flipping its sign stays optimal and within quadrature, so
            // pick the sign that helps the following amplitude step.
            if beta_t[j] == 0.0 && (upsilon_t[j].conj() * qt).re > 0.0 {
                qt = -qt;
            }
            if beta_r[j] == 0.0 && (upsilon_r[j].conj() * qr).re > 0.0 {
                qr = -qr;
            }
            q_t[j] = qt;
            q_r[j] = qr;
        }
        let mid = objective(&beta_t, &beta_r, &q_t, &q_r);
        debug_assert!(mid <= prev + 1e-12 * (1.0 + prev.abs()));

        for j in 0..n {
            let a = (upsilon_t[j].conj() * q_t[j]).re;
            let b = (upsilon_r[j].conj() * q_r[j]).re;
            let (bt, br) = optimal_amplitudes(a, b);
            beta_t[j] = bt;
            beta_r[j] = br;
        }
        let cur = objective(&beta_t, &beta_r, &q_t, &q_r);
        debug_assert!(cur <= mid + 1e-12 * (1.0 + mid.abs()));

        if prev - cur < 1e-9 {
            break;
        }
        prev = cur;
    }

    StarsProfile {
        theta_t: CVec::from_fn(n, |j, _| q_t[j] * beta_t[j]),
        theta_r: CVec::from_fn(n, |j, _| q_r[j] * beta_r[j]),
        model: PhaseCoupling::Coupled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::gen_channels;
    use crate::config::{db_to_linear, default_user_distances};
    use crate::fim::{comm_sinr, effective_channel, reflected_covariance};
    use crate::geometry::ArrayGeometry;
    use crate::linalg::{cn_matrix, cn_vector};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn tiny(k: usize) -> SystemConfig {
        let mut cfg = SystemConfig::desk();
        cfg.m = 4;
        cfg.n = 6;
        cfg.n_s = 3;
        cfg.k = k;
        cfg.gamma_bar = vec![db_to_linear(10.0); k];
        cfg.d_ru = default_user_distances(k);
        cfg
    }

    fn scene(cfg: &SystemConfig, seed: u64) -> (ChannelSet, StarsProfile) {
        let geom = ArrayGeometry::standard(cfg.n, cfg.n_s, cfg.wavelength).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = gen_channels(cfg, &geom, &mut rng).unwrap();
        let stars = StarsProfile::random(cfg.n, PhaseCoupling::Independent, &mut rng);
        (channels, stars)
    }

    /// Zero-forcing beamformers meeting each rate target with headroom,
    /// plus an isotropic sensing stream absorbing half the leftover power.
    fn zf_waveform(
        channels: &ChannelSet,
        stars: &StarsProfile,
        cfg: &SystemConfig,
        headroom: f64,
    ) -> Waveform {
        let u: Vec<CVec> = (0..cfg.k)
            .map(|k| effective_channel(&channels.g, &stars.theta_t, &channels.h[k]))
            .collect();
        let mut u_mat = CMat::zeros(cfg.m, cfg.k);
        for (k, uk) in u.iter().enumerate() {
            u_mat.set_column(k, uk);
        }
        let gram = u_mat.adjoint() * &u_mat;
        let b_mat = &u_mat * gram.try_inverse().unwrap();
        let per_user: Vec<f64> = (0..cfg.k)
            .map(|k| cfg.gamma_bar[k] * headroom * b_mat.column(k).norm_squared())
            .collect();
        let s0: f64 = per_user.iter().map(|c| c * cfg.noise_comm).sum();
        let s1: f64 = per_user
            .iter()
            .zip(&u)
            .map(|(c, uk)| c * uk.norm_squared())
            .sum();
        assert!(s0 < cfg.power, "rate targets alone exceed the budget");
        let beta = (cfg.power - s0) / (2.0 * cfg.m as f64 + s1);
        let p: Vec<CVec> = (0..cfg.k)
            .map(|k| {
                let need =
                    cfg.gamma_bar[k] * headroom * (beta * u[k].norm_squared() + cfg.noise_comm);
                b_mat.column(k).into_owned() * Complex64::new(need.sqrt(), 0.0)
            })
            .collect();
        let r_s = CMat::identity(cfg.m, cfg.m) * Complex64::new(beta, 0.0);
        Waveform::assemble(p, r_s)
    }

    fn empty_sinr() -> SinrQuadratics {
        SinrQuadratics {
            phi_conj: vec![],
            psi_conj: vec![],
            gamma_bar: vec![],
            noise: 1.0,
        }
    }

    #[test]
    fn random_profiles_satisfy_their_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in [PhaseCoupling::Independent, PhaseCoupling::Coupled] {
            let p = StarsProfile::random(16, model, &mut rng);
            p.check().unwrap();
            assert!(p.energy_defect() < 1e-12);
            if model == PhaseCoupling::Coupled {
                assert!(p.coupling_defect() < 1e-12);
            }
        }
    }

    #[test]
    fn check_flags_energy_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = StarsProfile::random(4, PhaseCoupling::Independent, &mut rng);
        p.theta_t[2] *= Complex64::new(1.5, 0.0);
        assert!(matches!(
            p.check(),
            Err(StarsError::EnergyDefect { index: 2, .. })
        ));
    }

    #[test]
    fn check_flags_broken_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = StarsProfile::random(4, PhaseCoupling::Coupled, &mut rng);
        p.theta_r[1] = p.theta_t[1];
        assert!(matches!(
            p.check(),
            Err(StarsError::CouplingDefect { index: 1, .. })
        ));
    }

    #[test]
    fn quadrature_check_skips_dead_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut p = StarsProfile::random(4, PhaseCoupling::Coupled, &mut rng);
        // Move all of one element's energy to the reflection side: the
        // transmission phase becomes meaningless and must not be checked.
        p.theta_t[2] = Complex64::new(0.0, 0.0);
        p.theta_r[2] = Complex64::from_polar(1.0, 0.4);
        p.check().unwrap();
        assert!(p.coupling_defect() < 1e-12);
    }

    #[test]
    fn rank_factor_reconstructs_psd_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut a = CMat::zeros(5, 5);
        for _ in 0..3 {
            let v = cn_vector(5, &mut rng);
            a += &v * v.adjoint();
        }
        let a = hermitize(&a);
        let factor = eig_rank_factor(&a);
        assert_eq!(factor.len(), 3);
        let mut back = CMat::zeros(5, 5);
        for v in &factor {
            back += v * v.adjoint();
        }
        assert!(sup_norm(&(&back - &a)) <= 1e-8 * sup_norm(&a));
    }

    #[test]
    fn quadratic_sinr_matches_the_direct_form() {
        let cfg = tiny(2);
        let (channels, stars) = scene(&cfg, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let p: Vec<CVec> = (0..cfg.k).map(|_| cn_vector(cfg.m, &mut rng)).collect();
        let raw = cn_matrix(cfg.m, cfg.m, &mut rng);
        let wf = Waveform::assemble(p, &raw * raw.adjoint());
        let sq = SinrQuadratics::new(&channels, &wf, &cfg);
        let direct = comm_sinr(&channels, &stars.theta_t, &wf, cfg.noise_comm);
        let quad = sq.sinr(&stars.theta_t);
        for k in 0..cfg.k {
            assert_relative_eq!(quad[k], direct[k], max_relative = 1e-9);
            assert!(quad[k] > 0.0);
        }
    }

    #[test]
    fn independent_block_recovers_a_planted_reflection_pattern() {
        let mut cfg = tiny(0);
        cfg.n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let channels = ChannelSet {
            g: cn_matrix(cfg.n, cfg.m, &mut rng),
            h: vec![],
            alpha: Complex64::new(1.0, 0.0),
        };
        let target = StarsProfile::random(cfg.n, PhaseCoupling::Independent, &mut rng);
        let raw = cn_matrix(cfg.m, cfg.m, &mut rng);
        let wf = Waveform::assemble(vec![], &raw * raw.adjoint());
        let f_target = reflected_covariance(&target.theta_r, &channels.g, &wf.r_x);
        let zero = CMat::zeros(cfg.n, cfg.n);
        let fit = FitPenalty {
            f_target: &f_target,
            upsilon: &zero,
            rho: 1.0,
        };
        let sol = solve_theta_independent(
            &channels,
            &wf,
            &fit,
            &AmplitudeConstraint::Free,
            &cfg,
            &mut rng,
        )
        .unwrap();
        let scale = frob_norm(&f_target).powi(2);
        assert!(
            sol.sdp_objective <= 1e-6 * scale,
            "relaxation misses the planted exact fit: {} vs {scale}",
            sol.sdp_objective
        );
        assert!(
            sol.extracted_objective <= 1e-5 * scale,
            "extraction lost the planted pattern: {} vs {scale}",
            sol.extracted_objective
        );
        assert!(!sol.fell_back);
        assert_eq!(sol.feasible_candidates, RANDOMIZE_TRIALS);
        sol.profile.check().unwrap();
        // The recovered reflection pattern matches up to one global phase.
        let align = sol.profile.theta_r.dotc(&target.theta_r).norm();
        assert!(align >= target.theta_r.norm_squared() * (1.0 - 1e-3));
    }

    #[test]
    fn independent_block_dominates_its_incumbent() {
        let mut cfg = SystemConfig::desk();
        cfg.gamma_bar = vec![db_to_linear(0.0); cfg.k];
        let (channels, stars) = scene(&cfg, 45);
        let wf = zf_waveform(&channels, &stars, &cfg, 1.5);
        let f_target = reflected_covariance(&stars.theta_r, &channels.g, &wf.r_x)
            * Complex64::new(1.3, 0.0);
        let zero = CMat::zeros(cfg.n, cfg.n);
        let fit = FitPenalty {
            f_target: &f_target,
            upsilon: &zero,
            rho: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let sol = solve_theta_independent(
            &channels,
            &wf,
            &fit,
            &AmplitudeConstraint::Free,
            &cfg,
            &mut rng,
        )
        .unwrap();

        // The incumbent profile is feasible for the relaxation, so the
        // relaxed optimum cannot be worse than its fit; the recovered
        // profile in turn cannot beat the relaxed bound.
        let r_bar = hermitize(&(&channels.g * &wf.r_x * channels.g.adjoint()));
        let incumbent = fit_gap(&f_target, &r_bar, &stars.theta_r);
        assert!(
            sol.sdp_objective <= incumbent * (1.0 + 1e-7),
            "relaxation above a feasible point: {} vs {incumbent}",
            sol.sdp_objective
        );
        assert!(sol.extracted_objective >= sol.sdp_objective * (1.0 - 1e-6) - 1e-9 * incumbent);
        assert!(!sol.fell_back);
        sol.profile.check().unwrap();
        let rates = comm_sinr(&channels, &sol.profile.theta_t, &wf, cfg.noise_comm);
        for k in 0..cfg.k {
            assert!(
                rates[k] >= cfg.gamma_bar[k] * (1.0 - 1e-9),
                "user {k} rate {} below target {}",
                rates[k],
                cfg.gamma_bar[k]
            );
        }
    }

    #[test]
    fn randomization_is_exact_on_rank_one_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let target = StarsProfile::random(6, PhaseCoupling::Independent, &mut rng);
        let q_t = &target.theta_t * target.theta_t.adjoint();
        let q_r = &target.theta_r * target.theta_r.adjoint();
        let seen: RefCell<Vec<(CVec, CVec)>> = RefCell::new(vec![]);
        let outcome = gaussian_randomize(
            &q_t,
            &q_r,
            6,
            &empty_sinr(),
            |t: &CVec, r: &CVec| {
                seen.borrow_mut().push((t.clone(), r.clone()));
                0.0
            },
            25,
            &mut rng,
        );
        assert_eq!(outcome.feasible, 25);
        assert!(outcome.best.is_some());
        // Every candidate reproduces the planted profile up to one global
        // phase per side: amplitudes are read off the diagonals and phases
        // off the only eigenvector.
        for (t, r) in seen.borrow().iter() {
            let align_t = t.dotc(&target.theta_t).norm();
            assert_relative_eq!(
                align_t,
                target.theta_t.norm_squared(),
                max_relative = 1e-9
            );
            let align_r = r.dotc(&target.theta_r).norm();
            assert_relative_eq!(
                align_r,
                target.theta_r.norm_squared(),
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn randomization_reports_when_nothing_is_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let profile = StarsProfile::random(3, PhaseCoupling::Independent, &mut rng);
        let q_t = &profile.theta_t * profile.theta_t.adjoint();
        let q_r = &profile.theta_r * profile.theta_r.adjoint();
        let sinr = SinrQuadratics {
            phi_conj: vec![vec![CMat::identity(3, 3) * Complex64::new(1e-3, 0.0)]],
            psi_conj: vec![CMat::zeros(3, 3)],
            gamma_bar: vec![1e6],
            noise: 1.0,
        };
        let outcome = gaussian_randomize(&q_t, &q_r, 3, &sinr, |_: &CVec, _: &CVec| 0.0, 40, &mut rng);
        assert!(outcome.best.is_none());
        assert_eq!(outcome.feasible, 0);
    }

    #[test]
    fn randomized_candidates_conserve_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        for round in 0..5 {
            let n = 5;
            let a = cn_matrix(n, n, &mut rng);
            let b = cn_matrix(n, n, &mut rng);
            let raw_t = &a * a.adjoint();
            let raw_r = &b * b.adjoint();
            // Joint diagonal normalization puts the pair on the energy rows
            // an actual relaxation solution would satisfy.
            let d = CMat::from_fn(n, n, |i, j| {
                if i == j {
                    Complex64::new(
                        1.0 / (raw_t[(i, i)].re + raw_r[(i, i)].re).sqrt(),
                        0.0,
                    )
                } else {
                    Complex64::new(0.0, 0.0)
                }
            });
            let q_t = &d * raw_t * &d;
            let q_r = &d * raw_r * &d;
            let worst = RefCell::new(0.0f64);
            gaussian_randomize(
                &q_t,
                &q_r,
                n,
                &empty_sinr(),
                |t: &CVec, r: &CVec| {
                    let defect = (0..n)
                        .map(|j| (t[j].norm_sqr() + r[j].norm_sqr() - 1.0).abs())
                        .fold(0.0, f64::max);
                    let mut w = worst.borrow_mut();
                    *w = w.max(defect);
                    0.0
                },
                20,
                &mut rng,
            );
            assert!(
                *worst.borrow() <= 1e-12,
                "round {round}: energy defect {}",
                worst.borrow()
            );
        }
    }

    #[test]
    fn coupled_phase_step_closed_forms() {
        let i = Complex64::i();
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);

        let (qt, qr) = optimal_phases_coupled(one, i);
        assert_eq!(qt, -one);
        assert_eq!(qr, i);
        assert_eq!((one * qt).re + (i * qr).re, -2.0);

        // A tie between the branches keeps the positive one.
        let (qt, qr) = optimal_phases_coupled(one, zero);
        assert_eq!(qt, -one);
        assert_eq!(qr, -i);
        assert_eq!((one * qt).re, -1.0);

        let (qt, qr) = optimal_phases_coupled(zero, zero);
        assert_eq!(qt, -one);
        assert_eq!(qr, -i);
    }

    #[test]
    fn coupled_phase_step_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..20 {
            let u = cn_sample(&mut rng);
            let v = cn_sample(&mut rng);
            let (qt, qr) = optimal_phases_coupled(u, v);
            assert_relative_eq!(qt.norm(), 1.0, epsilon = 1e-12);
            let on_pos = (qr - Complex64::i() * qt).norm();
            let on_neg = (qr + Complex64::i() * qt).norm();
            assert!(on_pos == 0.0 || on_neg == 0.0, "quadrature broken");

            let closed = (u * qt).re + (v * qr).re;
            let mut best = f64::INFINITY;
            for step in 0..10_000 {
                let c = Complex64::from_polar(1.0, 2.0 * PI * step as f64 / 10_000.0);
                for sign in [1.0, -1.0] {
                    best = best.min((u * c).re + (v * Complex64::i() * sign * c).re);
                }
            }
            let scale = u.norm() + v.norm();
            assert!(closed <= best + 1e-9, "{closed} vs grid {best}");
            assert!(closed >= best - 1e-6 * scale, "{closed} vs grid {best}");
        }
    }

    #[test]
    fn amplitude_step_closed_forms() {
        // Interior optimum: the free minimizer lands inside the quadrant.
        let (bt, br) = optimal_amplitudes(-1.0, -1.0);
        assert_relative_eq!(bt, 0.5_f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(br, 0.5_f64.sqrt(), epsilon = 1e-12);

        // Pure transmission pull parks everything on that side.
        let (bt, br) = optimal_amplitudes(-1.0, 0.0);
        assert_eq!(bt, 1.0);
        assert!(br.abs() <= 1e-12);

        // A nonnegative gradient still picks the better endpoint.
        let (bt, br) = optimal_amplitudes(1.0, 1.0);
        assert_eq!(bt, 1.0);
        assert!(br.abs() <= 1e-12);

        assert_eq!(optimal_amplitudes(0.0, 0.0), (0.0, 1.0));
    }

    #[test]
    fn amplitude_step_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..20 {
            let a = rng.gen_range(-2.0..2.0);
            let b = rng.gen_range(-2.0..2.0);
            let (bt, br) = optimal_amplitudes(a, b);
            assert!(bt >= 0.0 && br >= 0.0);
            assert_relative_eq!(bt * bt + br * br, 1.0, epsilon = 1e-12);

            let closed = a * bt + b * br;
            let mut best = f64::INFINITY;
            for step in 0..=10_000 {
                let omega = FRAC_PI_2 * step as f64 / 10_000.0;
                best = best.min(a * omega.sin() + b * omega.cos());
            }
            let scale = a.abs() + b.abs();
            assert!(closed <= best + 1e-9, "{closed} vs grid {best}");
            assert!(closed >= best - 1e-7 * scale, "{closed} vs grid {best}");
        }
    }

    #[test]
    fn tilde_projection_is_identity_on_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let p = StarsProfile::random(8, PhaseCoupling::Coupled, &mut rng);
        let zero = CVec::zeros(8);
        let out = solve_tilde_theta(&p.theta_t, &p.theta_r, &zero, &zero, 0.7);
        out.check().unwrap();
        assert!(sup_norm_vec(&(&out.theta_t - &p.theta_t)) <= 1e-9);
        assert!(sup_norm_vec(&(&out.theta_r - &p.theta_r)) <= 1e-9);
    }

    #[test]
    fn tilde_objective_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let n = 6;
        let inc = StarsProfile::random(n, PhaseCoupling::Independent, &mut rng);
        let lam_t = cn_vector(n, &mut rng);
        let lam_r = cn_vector(n, &mut rng);
        let rho = 0.3;
        let out = solve_tilde_theta(&inc.theta_t, &inc.theta_r, &lam_t, &lam_r, rho);
        out.check().unwrap();

        // The penalty splits into the swept linear part plus constants:
        // unit element energy makes the quadratic term exactly `n`.
        let rc = Complex64::new(rho, 0.0);
        let upsilon_t = &lam_t * rc - &inc.theta_t;
        let upsilon_r = &lam_r * rc - &inc.theta_r;
        let direct = (&out.theta_t + &upsilon_t).norm_squared()
            + (&out.theta_r + &upsilon_r).norm_squared();
        let cross: f64 = (0..n)
            .map(|j| {
                (upsilon_t[j].conj() * out.theta_t[j]).re
                    + (upsilon_r[j].conj() * out.theta_r[j]).re
            })
            .sum();
        let identity =
            2.0 * cross + n as f64 + upsilon_t.norm_squared() + upsilon_r.norm_squared();
        assert_relative_eq!(direct, identity, max_relative = 1e-9);
    }

    #[test]
    fn tilde_block_matches_per_element_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let n = 4;
        let inc = StarsProfile::random(n, PhaseCoupling::Independent, &mut rng);
        let lam_t = cn_vector(n, &mut rng);
        let lam_r = cn_vector(n, &mut rng);
        let rho = 0.5;
        let out = solve_tilde_theta(&inc.theta_t, &inc.theta_r, &lam_t, &lam_r, rho);
        out.check().unwrap();

        let rc = Complex64::new(rho, 0.0);
        let upsilon_t = &lam_t * rc - &inc.theta_t;
        let upsilon_r = &lam_r * rc - &inc.theta_r;
        for j in 0..n {
            let mine = (upsilon_t[j].conj() * out.theta_t[j]).re
                + (upsilon_r[j].conj() * out.theta_r[j]).re;
            let mut best = f64::INFINITY;
            for pstep in 0..720 {
                let qt = Complex64::from_polar(1.0, 2.0 * PI * pstep as f64 / 720.0);
                for sign in [1.0, -1.0] {
                    let qr = Complex64::i() * sign * qt;
                    for astep in 0..=720 {
                        let omega = FRAC_PI_2 * astep as f64 / 720.0;
                        let val = (upsilon_t[j].conj() * qt).re * omega.sin()
                            + (upsilon_r[j].conj() * qr).re * omega.cos();
                        best = best.min(val);
                    }
                }
            }
            let scale = upsilon_t[j].norm() + upsilon_r[j].norm() + 1e-12;
            assert!(
                mine <= best + 1e-4 * scale,
                "element {j} stalled: {mine} vs grid {best}"
            );
        }
    }

    #[test]
    fn coupled_relaxation_is_consistent_at_zero_duals() {
        let cfg = tiny(0);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let channels = ChannelSet {
            g: cn_matrix(cfg.n, cfg.m, &mut rng),
            h: vec![],
            alpha: Complex64::new(1.0, 0.0),
        };
        let target = StarsProfile::random(cfg.n, PhaseCoupling::Coupled, &mut rng);
        let raw = cn_matrix(cfg.m, cfg.m, &mut rng);
        let wf = Waveform::assemble(vec![], &raw * raw.adjoint());
        let f_target = reflected_covariance(&target.theta_r, &channels.g, &wf.r_x);
        let zero_m = CMat::zeros(cfg.n, cfg.n);
        let zero_v = CVec::zeros(cfg.n);
        let fit = FitPenalty {
            f_target: &f_target,
            upsilon: &zero_m,
            rho: 1.0,
        };
        let coupling = CouplingPenalty {
            tilde_t: &target.theta_t,
            tilde_r: &target.theta_r,
            lambda_t: &zero_v,
            lambda_r: &zero_v,
        };
        let sol =
            solve_theta_coupled_relaxed(&channels, &wf, &fit, &coupling, &cfg, &mut rng).unwrap();

        // The incumbent itself has zero fit gap and zero proximity, so the
        // relaxation bottoms out and extraction reproduces the incumbent,
        // this time with no global phase freedom: dehomogenization pins it.
        let scale = frob_norm(&f_target).powi(2) + cfg.n as f64;
        assert!(
            sol.sdp_objective.abs() <= 1e-6 * scale,
            "relaxed objective {} did not vanish",
            sol.sdp_objective
        );
        assert!(
            sol.extracted_objective <= 1e-5 * scale,
            "extraction lost the incumbent: {}",
            sol.extracted_objective
        );
        assert!(!sol.fell_back);
        assert_eq!(sol.profile.model, PhaseCoupling::Independent);
        sol.profile.check().unwrap();
        assert!(sup_norm_vec(&(&sol.profile.theta_t - &target.theta_t)) <= 1e-2);
        assert!(sup_norm_vec(&(&sol.profile.theta_r - &target.theta_r)) <= 1e-2);
    }

    #[test]
    fn coupled_relaxation_dominates_a_feasible_incumbent() {
        let cfg = tiny(0);
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let channels = ChannelSet {
            g: cn_matrix(cfg.n, cfg.m, &mut rng),
            h: vec![],
            alpha: Complex64::new(1.0, 0.0),
        };
        let tilde = StarsProfile::random(cfg.n, PhaseCoupling::Coupled, &mut rng);
        let raw = cn_matrix(cfg.m, cfg.m, &mut rng);
        let wf = Waveform::assemble(vec![], &raw * raw.adjoint());
        let f_target = reflected_covariance(&tilde.theta_r, &channels.g, &wf.r_x)
            * Complex64::new(1.4, 0.0);
        let lam_t = cn_vector(cfg.n, &mut rng) * Complex64::new(0.2, 0.0);
        let lam_r = cn_vector(cfg.n, &mut rng) * Complex64::new(0.2, 0.0);
        let zero_m = CMat::zeros(cfg.n, cfg.n);
        let rho = 0.8;
        let fit = FitPenalty {
            f_target: &f_target,
            upsilon: &zero_m,
            rho,
        };
        let coupling = CouplingPenalty {
            tilde_t: &tilde.theta_t,
            tilde_r: &tilde.theta_r,
            lambda_t: &lam_t,
            lambda_r: &lam_r,
        };
        let sol =
            solve_theta_coupled_relaxed(&channels, &wf, &fit, &coupling, &cfg, &mut rng).unwrap();

        // The incumbent is a feasible rank-one point of the relaxation with
        // proximity exactly `rho^2 ||lambda||^2`, so the relaxed optimum
        // cannot exceed its value, and the extraction cannot undercut the
        // relaxed bound.
        let r_bar = hermitize(&(&channels.g * &wf.r_x * channels.g.adjoint()));
        let incumbent = fit_gap(&f_target, &r_bar, &tilde.theta_r)
            + rho * rho * (lam_t.norm_squared() + lam_r.norm_squared());
        assert!(
            sol.sdp_objective <= incumbent * (1.0 + 1e-7) + 1e-9,
            "relaxation above a feasible point: {} vs {incumbent}",
            sol.sdp_objective
        );
        assert!(sol.extracted_objective >= sol.sdp_objective * (1.0 - 1e-6) - 1e-9 * incumbent);
        assert!(!sol.fell_back);
        sol.profile.check().unwrap();
    }

    #[test]
    fn fixed_split_freezes_amplitudes() {
        let mut cfg = tiny(1);
        cfg.gamma_bar = vec![db_to_linear(-20.0)];
        let (channels, _) = scene(&cfg, 56);
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let amplitudes = AmplitudeConstraint::half_split(cfg.n).unwrap();

        // A masked incumbent to serve the user through: the first half
        // transmits at full amplitude, the second half reflects.
        let mut inc_t = CVec::zeros(cfg.n);
        let mut inc_r = CVec::zeros(cfg.n);
        for i in 0..cfg.n {
            let phase = Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI));
            if i < cfg.n / 2 {
                inc_t[i] = phase;
            } else {
                inc_r[i] = phase;
            }
        }
        let inc = StarsProfile {
            theta_t: inc_t,
            theta_r: inc_r,
            model: PhaseCoupling::Independent,
        };
        let wf = zf_waveform(&channels, &inc, &cfg, 2.0);
        let f_target = reflected_covariance(&inc.theta_r, &channels.g, &wf.r_x)
            * Complex64::new(1.2, 0.0);
        let zero = CMat::zeros(cfg.n, cfg.n);
        let fit = FitPenalty {
            f_target: &f_target,
            upsilon: &zero,
            rho: 1.0,
        };
        let sol =
            solve_theta_independent(&channels, &wf, &fit, &amplitudes, &cfg, &mut rng).unwrap();
        assert!(!sol.fell_back);
        sol.profile.check().unwrap();
        // Dead sides come out exactly zero (they are never variables), and
        // live sides exactly unit after the diagonal renormalization.
        for i in 0..cfg.n {
            let t = sol.profile.theta_t[i];
            let r = sol.profile.theta_r[i];
            if i < cfg.n / 2 {
                assert_eq!(r.norm_sqr(), 0.0);
                assert_relative_eq!(t.norm(), 1.0, epsilon = 1e-12);
            } else {
                assert_eq!(t.norm_sqr(), 0.0);
                assert_relative_eq!(r.norm(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn half_split_requires_even_elements() {
        assert!(matches!(
            AmplitudeConstraint::half_split(5),
            Err(StarsError::UnevenSplit(5))
        ));
        assert!(matches!(
            AmplitudeConstraint::half_split(6),
            Ok(AmplitudeConstraint::FixedSplit(m)) if m.len() == 6 && m[0] && !m[5]
        ));
    }

    #[test]
    fn dehomogenization_cancels_the_global_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let theta = cn_vector(5, &mut rng);
        let rot = Complex64::from_polar(1.0, 2.1);
        let mut lifted = CVec::zeros(6);
        for i in 0..5 {
            lifted[i] = theta[i] * rot;
        }
        // Only the slot's phase matters, not its magnitude.
        lifted[5] = rot * Complex64::new(0.7, 0.0);
        let back = dehomogenize(&lifted);
        assert!(sup_norm_vec(&(&back - &theta)) <= 1e-12);

        // A dead slot applies no rotation at all.
        lifted[5] = Complex64::new(0.0, 0.0);
        let raw = dehomogenize(&lifted);
        for i in 0..5 {
            assert_eq!(raw[i], lifted[i]);
        }
    }
}
