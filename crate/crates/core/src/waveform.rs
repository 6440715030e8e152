//! Transmit waveform design at fixed surface coefficients.
//!
//! One block of the alternating optimizer: a semidefinite relaxation over
//! the bound epigraph `U`, the reflected-covariance surrogate `F`, the
//! transmit covariance `R_x`, and one rank-relaxed block per served user,
//! followed by the exact rank-one recovery of the per-user beamformers and
//! of the dedicated sensing covariance.

use crate::channel::ChannelSet;
use crate::config::SystemConfig;
use crate::conic::{
    BlockId, ConicSolution, LinExpr, ProgramBuilder, SolveStatus, SolverSettings, SymMatExpr,
};
use crate::fim::{derivative_bundle, effective_channel, reflected_covariance, DerivativeBundle};
use crate::geometry::ArrayGeometry;
use crate::linalg::{clip_psd, hermitize, min_eig_hermitian, sup_norm, CMat, CVec, RMat, C64};
use crate::stars::StarsProfile;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WaveformError {
    #[error("rate targets are unattainable under the current surface coefficients")]
    Infeasible,
    #[error("waveform subproblem failed: {0}")]
    Numerical(String),
    #[error("user {0} was allocated power but has no effective channel")]
    Unservable(usize),
    #[error("transmit covariance fails to dominate the beamformers by {0:.2e}")]
    Inconsistent(f64),
    #[error("waveform invariant violated: {0}")]
    Invalid(String),
}

/// Communication beamformers plus the dedicated sensing covariance.
#[derive(Debug, Clone)]
pub struct Waveform {
    /// Per-user transmit beamformers, one length-M vector each.
    pub p: Vec<CVec>,
    /// Covariance of the dedicated sensing stream.
    pub r_s: CMat,
    /// Covariance of the superposed transmit signal.
    pub r_x: CMat,
}

impl Waveform {
    /// Builds a waveform from its parts, deriving the transmit covariance.
    pub fn assemble(p: Vec<CVec>, r_s: CMat) -> Waveform {
        let mut r_x = r_s.clone();
        for pk in &p {
            r_x += pk * pk.adjoint();
        }
        Waveform {
            p,
            r_s: hermitize(&r_s),
            r_x: hermitize(&r_x),
        }
    }

    /// Total radiated power `tr(R_x)`.
    pub fn power(&self) -> f64 {
        self.r_x.trace().re
    }

    /// Verifies the covariance split and the power budget.
    pub fn check(&self, budget: f64) -> Result<(), WaveformError> {
        let mut sum = self.r_s.clone();
        for pk in &self.p {
            sum += pk * pk.adjoint();
        }
        let scale = sup_norm(&self.r_x).max(1.0);
        let defect = sup_norm(&(&self.r_x - &sum));
        if defect > 1e-8 * scale {
            return Err(WaveformError::Invalid(format!(
                "covariance split defect {defect:.2e}"
            )));
        }
        if self.power() > budget + 1e-8 {
            return Err(WaveformError::Invalid(format!(
                "power {} exceeds budget {budget}",
                self.power()
            )));
        }
        let floor = min_eig_hermitian(&self.r_s);
        if floor < -1e-9 * scale {
            return Err(WaveformError::Invalid(format!(
                "sensing covariance indefinite, min eigenvalue {floor:.2e}"
            )));
        }
        Ok(())
    }
}

/// Result of one waveform block solve.
#[derive(Debug, Clone)]
pub struct WaveformBlockSolution {
    /// Gain-compensated angle information certified by the epigraph.
    pub u: RMat,
    /// Reflected-covariance surrogate the bound was evaluated at.
    pub f: CMat,
    pub waveform: Waveform,
    /// Bound epigraph plus penalty value at the optimum.
    pub objective: f64,
}

/// Trace coefficients that express every entry of the angle/gain
/// information matrix as a linear functional `Re tr(C X)` or `Im tr(C X)`
/// of one Hermitian matrix variable.
struct InformationCoeffs {
    c_hh: CMat,
    c_hv: CMat,
    c_vv: CMat,
    c_bh: CMat,
    c_bv: CMat,
    c_bb: CMat,
    c_phi: f64,
    c_mix: f64,
    alpha: C64,
}

impl InformationCoeffs {
    /// Coefficients in the space of the reflected covariance itself.
    fn new(bundle: &DerivativeBundle, alpha: C64, snapshots: usize, noise: f64) -> Self {
        let l = snapshots as f64;
        InformationCoeffs {
            c_hh: bundle.db_h.adjoint() * &bundle.db_h,
            c_hv: bundle.db_v.adjoint() * &bundle.db_h,
            c_vv: bundle.db_v.adjoint() * &bundle.db_v,
            c_bh: bundle.db_h.adjoint() * &bundle.b_mat,
            c_bv: bundle.db_v.adjoint() * &bundle.b_mat,
            c_bb: bundle.b_mat.adjoint() * &bundle.b_mat,
            c_phi: 2.0 * alpha.norm_sqr() * l / noise,
            c_mix: 2.0 * l / noise,
            alpha,
        }
    }

    /// Rewrites the functionals for `F = A X A^H`, so they act on `X`
    /// directly: `tr(C F) = tr((A^H C A) X)`.
    fn through(&self, a: &CMat) -> Self {
        let push = |c: &CMat| a.adjoint() * c * a;
        InformationCoeffs {
            c_hh: push(&self.c_hh),
            c_hv: push(&self.c_hv),
            c_vv: push(&self.c_vv),
            c_bh: push(&self.c_bh),
            c_bv: push(&self.c_bv),
            c_bb: push(&self.c_bb),
            ..*self
        }
    }

    /// Absorbs a variable rescaling `F = s * X` into the coefficients.
    fn scaled(&self, s: f64) -> Self {
        let z = Complex64::new(s, 0.0);
        InformationCoeffs {
            c_hh: &self.c_hh * z,
            c_hv: &self.c_hv * z,
            c_vv: &self.c_vv * z,
            c_bh: &self.c_bh * z,
            c_bv: &self.c_bv * z,
            c_bb: &self.c_bb * z,
            ..*self
        }
    }

    /// Column scale that balances the gain block against the angle block.
    ///
    /// The information matrix in the raw parameters `(phi_h, phi_v, Re
    /// alpha, Im alpha)` is badly scaled: the gain rows miss the factor
    /// `|alpha| * (array aperture)` the angle rows carry. A congruence by
    /// `diag(1, 1, s, s)` preserves the inequality exactly and is absorbed
    /// here so the solver sees entries of comparable magnitude.
    fn gain_balance(&self) -> f64 {
        let aperture = (self.c_hh.trace().re + self.c_vv.trace().re) / (2.0 * self.c_bb.trace().re);
        let s = self.alpha.norm() * aperture.sqrt();
        if s.is_finite() && s > 0.0 {
            s
        } else {
            1.0
        }
    }

    /// Constrains `[[J_phi - U, J_mix], [J_mix', J_alpha]] >= 0` with every
    /// information entry affine in the matrix block `x`.
    fn add_bound_lmi(&self, pb: &mut ProgramBuilder, x: BlockId, u: BlockId) {
        let s = self.gain_balance();
        let (ar, ai) = (self.alpha.re, self.alpha.im);
        let mut lmi = SymMatExpr::zeros(4);
        lmi.set(
            0,
            0,
            pb.re_trace_product(x, &self.c_hh) * self.c_phi - pb.entry_re(u, 0, 0),
        );
        lmi.set(
            0,
            1,
            pb.re_trace_product(x, &self.c_hv) * self.c_phi - pb.entry_re(u, 0, 1),
        );
        lmi.set(
            1,
            1,
            pb.re_trace_product(x, &self.c_vv) * self.c_phi - pb.entry_re(u, 1, 1),
        );
        // Mixed block: row p holds c_mix * (Re(conj(alpha) w_p), -Im(conj(alpha) w_p))
        // with w_p = tr(C_p X), each expanded over Re/Im trace functionals.
        let mix = |re: LinExpr, im: LinExpr| {
            let col_re = (re.clone() * ar + im.clone() * ai) * (self.c_mix * s);
            let col_im = (re * ai - im * ar) * (self.c_mix * s);
            (col_re, col_im)
        };
        let (m02, m03) = mix(
            pb.re_trace_product(x, &self.c_bh),
            pb.im_trace_product(x, &self.c_bh),
        );
        let (m12, m13) = mix(
            pb.re_trace_product(x, &self.c_bv),
            pb.im_trace_product(x, &self.c_bv),
        );
        lmi.set(0, 2, m02);
        lmi.set(0, 3, m03);
        lmi.set(1, 2, m12);
        lmi.set(1, 3, m13);
        let gain = pb.re_trace_product(x, &self.c_bb) * (self.c_mix * s * s);
        lmi.set(2, 2, gain.clone());
        lmi.set(3, 3, gain);
        pb.add_lmi_sym(lmi);
    }
}

/// `diag(theta) * g`: each surface row scaled by its coefficient.
fn coefficient_rows(theta: &CVec, g: &CMat) -> CMat {
    CMat::from_fn(g.nrows(), g.ncols(), |i, j| theta[i] * g[(i, j)])
}

/// Declares `R_x` and the per-user blocks and adds the constraints shared
/// by every waveform subproblem: rate targets, the power budget, and the
/// dominance of `R_x` over the beamformer blocks. Users with a zero rate
/// target get no block and no constraint.
fn transmit_variables(
    pb: &mut ProgramBuilder,
    channels: &ChannelSet,
    stars: &StarsProfile,
    cfg: &SystemConfig,
) -> (BlockId, Vec<(usize, BlockId)>) {
    let rx = pb.hermitian_psd(cfg.m);
    let served: Vec<(usize, BlockId)> = cfg
        .gamma_bar
        .iter()
        .enumerate()
        .filter(|&(_, &g)| g > 0.0)
        .map(|(k, _)| (k, pb.hermitian_psd(cfg.m)))
        .collect();

    pb.add_ineq_ge(-pb.trace_expr(rx), -cfg.power);
    for &(k, blk) in &served {
        let u_k = effective_channel(&channels.g, &stars.theta_t, &channels.h[k]);
        let outer = &u_k * u_k.adjoint();
        let lhs = pb.re_trace_product(blk, &outer) * (1.0 + 1.0 / cfg.gamma_bar[k])
            - pb.re_trace_product(rx, &outer);
        pb.add_ineq_ge(lhs, cfg.noise_comm);
    }
    if !served.is_empty() {
        let mut slack = pb.matrix_expr(rx);
        for &(_, blk) in &served {
            slack = slack.sub_expr(&pb.matrix_expr(blk));
        }
        pb.add_lmi_herm(slack);
    }
    (rx, served)
}

fn accept(sol: &ConicSolution) -> Result<(), WaveformError> {
    match sol.status {
        SolveStatus::Optimal => Ok(()),
        SolveStatus::Infeasible => Err(WaveformError::Infeasible),
        _ => Err(WaveformError::Numerical(sol.raw.message.clone())),
    }
}

fn recover_from_solution(
    sol: &ConicSolution,
    rx: BlockId,
    served: &[(usize, BlockId)],
    channels: &ChannelSet,
    stars: &StarsProfile,
    cfg: &SystemConfig,
) -> Result<Waveform, WaveformError> {
    let r_x = sol.hermitian(rx);
    let mut blocks = vec![CMat::zeros(cfg.m, cfg.m); cfg.k];
    for &(k, blk) in served {
        blocks[k] = sol.hermitian(blk);
    }
    let effective: Vec<CVec> = (0..cfg.k)
        .map(|k| effective_channel(&channels.g, &stars.theta_t, &channels.h[k]))
        .collect();
    let p = recover_beamformers(&blocks, &effective)?;
    let r_s = recover_sensing_cov(&r_x, &p)?;
    Ok(Waveform { p, r_s, r_x })
}

/// One waveform block of the alternating optimizer.
///
/// At fixed surface coefficients, minimizes the bound epigraph `tr(U^-1)`
/// plus the penalty `(1/2 rho) ||F - Theta_r G R_x G^H Theta_r^H + rho
/// Upsilon||_F^2` over `(U, F, R_x, {P_k})` subject to the per-user rate
/// targets, the power budget, and the information inequality, then
/// extracts rank-one beamformers. `f_prev` only sets the numerical scale
/// on which `F` is normalized inside the solver.
pub fn solve_waveform_block(
    channels: &ChannelSet,
    geom: &ArrayGeometry,
    stars: &StarsProfile,
    f_prev: &CMat,
    upsilon: &CMat,
    rho: f64,
    cfg: &SystemConfig,
) -> Result<WaveformBlockSolution, WaveformError> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(WaveformError::Numerical(format!(
            "penalty parameter must be positive, got {rho}"
        )));
    }
    let bundle = derivative_bundle(geom, cfg.phi_h, cfg.phi_v);
    let coeffs = InformationCoeffs::new(&bundle, channels.alpha, cfg.snapshots, cfg.noise_sense);
    let a_r = coefficient_rows(&stars.theta_r, &channels.g);

    // Natural magnitude of F: the larger of the incumbent and an isotropic
    // full-power design. The variable is solved in units of this scale so
    // its parameters sit near unity next to the watt-scale covariances.
    let iso = CMat::identity(cfg.m, cfg.m) * Complex64::new(cfg.power / cfg.m as f64, 0.0);
    let t_ref = reflected_covariance(&stars.theta_r, &channels.g, &iso);
    let f_scale = sup_norm(f_prev).max(sup_norm(&t_ref)).max(1e-300);

    let mut pb = ProgramBuilder::new();
    let u = pb.symmetric_psd(2);
    let f = pb.hermitian_free(geom.n());
    let (rx, served) = transmit_variables(&mut pb, channels, stars, cfg);

    pb.epigraph_trace_inverse(u, 1.0);
    coeffs.scaled(f_scale).add_bound_lmi(&mut pb, f, u);
    let surrogate = pb.matrix_expr(rx).congruence(&a_r).scale(1.0 / f_scale);
    let offset = upsilon * Complex64::new(rho / f_scale, 0.0);
    let residual = pb.matrix_expr(f).sub_expr(&surrogate).shift(&offset);
    pb.epigraph_frobenius(&residual, f_scale * f_scale / (2.0 * rho));

    let sol = pb.solve(&SolverSettings::default());
    accept(&sol)?;
    let waveform = recover_from_solution(&sol, rx, &served, channels, stars, cfg)?;
    Ok(WaveformBlockSolution {
        u: sol.symmetric(u),
        f: sol.hermitian(f) * Complex64::new(f_scale, 0.0),
        waveform,
        objective: sol.objective,
    })
}

/// Waveform design with the surrogate eliminated: `F` is substituted by
/// `Theta_r G R_x G^H Theta_r^H`, so the bound is exact and no penalty is
/// needed. This is the whole optimizer when the surface coefficients are
/// not design variables.
pub fn solve_waveform_fixed_stars(
    channels: &ChannelSet,
    geom: &ArrayGeometry,
    stars: &StarsProfile,
    cfg: &SystemConfig,
) -> Result<WaveformBlockSolution, WaveformError> {
    let bundle = derivative_bundle(geom, cfg.phi_h, cfg.phi_v);
    let a_r = coefficient_rows(&stars.theta_r, &channels.g);
    let coeffs = InformationCoeffs::new(&bundle, channels.alpha, cfg.snapshots, cfg.noise_sense)
        .through(&a_r);

    let mut pb = ProgramBuilder::new();
    let u = pb.symmetric_psd(2);
    let (rx, served) = transmit_variables(&mut pb, channels, stars, cfg);
    pb.epigraph_trace_inverse(u, 1.0);
    coeffs.add_bound_lmi(&mut pb, rx, u);

    let sol = pb.solve(&SolverSettings::default());
    accept(&sol)?;
    let waveform = recover_from_solution(&sol, rx, &served, channels, stars, cfg)?;
    let f = reflected_covariance(&stars.theta_r, &channels.g, &waveform.r_x);
    Ok(WaveformBlockSolution {
        u: sol.symmetric(u),
        f,
        waveform,
        objective: sol.objective,
    })
}

/// Exact rank-one extraction from the relaxed per-user blocks:
/// `p_k = P_k u_k / sqrt(u_k^H P_k u_k)`.
///
/// The construction keeps every user's rate and the total power of each
/// block, so the relaxation is tight. A block with no power yields a zero
/// beamformer; a block whose power is invisible to the user's channel is
/// an error, since no scaling of it can serve that user.
pub fn recover_beamformers(
    blocks: &[CMat],
    effective: &[CVec],
) -> Result<Vec<CVec>, WaveformError> {
    assert_eq!(blocks.len(), effective.len());
    let mut out = Vec::with_capacity(blocks.len());
    for (k, (blk, u_k)) in blocks.iter().zip(effective).enumerate() {
        let power = blk.trace().re;
        if power <= 0.0 {
            out.push(CVec::zeros(u_k.len()));
            continue;
        }
        let bu = blk * u_k;
        let quad = u_k.dotc(&bu).re;
        if quad <= 1e-12 * power * u_k.norm_squared() {
            return Err(WaveformError::Unservable(k));
        }
        let p_k = bu / Complex64::new(quad.sqrt(), 0.0);
        debug_assert!(p_k.norm_squared() <= power + 1e-8 * power.max(1.0));
        out.push(p_k);
    }
    Ok(out)
}

/// Splits the sensing covariance out of the transmit covariance:
/// `R_s = R_x - sum_k p_k p_k^H`, projected back onto the PSD cone.
pub fn recover_sensing_cov(r_x: &CMat, p: &[CVec]) -> Result<CMat, WaveformError> {
    let mut diff = r_x.clone();
    for pk in p {
        diff -= pk * pk.adjoint();
    }
    let diff = hermitize(&diff);
    let floor = min_eig_hermitian(&diff);
    if floor < -1e-8 * sup_norm(r_x).max(1.0) {
        return Err(WaveformError::Inconsistent(-floor));
    }
    Ok(clip_psd(&diff))
}
