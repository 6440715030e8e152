//! Fisher information and Cramer-Rao bound for the two target angles.
//!
//! The echo seen by the sensors is `alpha * B(phi) * Theta_r * G * X` plus
//! white noise, with `B(phi) = b(phi) a(phi)^T`. All information about the
//! design enters through the reflected sample covariance
//! `F = Theta_r G R_x G^H Theta_r^H`, which is why the optimizer can treat
//! `F` as a decision variable. This module evaluates the information matrix
//! both from `F` and directly from a design, inverts the Schur complement to
//! get the angle bound, and provides an independent finite-difference oracle
//! used by the validation suites.

use crate::channel::ChannelSet;
use crate::geometry::{steering_sensor, steering_stars, ArrayGeometry};
use crate::linalg::{
    hermitian_defect, hermitize, sup_norm, trace_prod, CMat, CVec, RMat, RVec, C64,
};
use crate::waveform::Waveform;
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FimError {
    #[error("reflected covariance is not Hermitian (defect {0:.3e})")]
    NonHermitian(f64),
    #[error("target gain carries no information; the echo power is zero")]
    Unidentifiable,
    #[error("angle information matrix is singular or ill conditioned (cond {0:.3e})")]
    IllConditioned(f64),
}

/// `B` and its two angle derivatives, evaluated at the target direction.
#[derive(Debug, Clone)]
pub struct DerivativeBundle {
    /// `b a^T`, sensors x elements.
    pub b_mat: CMat,
    /// Derivative with respect to azimuth.
    pub db_h: CMat,
    /// Derivative with respect to elevation.
    pub db_v: CMat,
}

/// The three blocks of the 4x4 information matrix for
/// `(phi_h, phi_v, Re alpha, Im alpha)`.
#[derive(Debug, Clone)]
pub struct FimComponents {
    pub j_phi: RMat,
    pub j_phi_alpha: RMat,
    pub j_alpha: RMat,
}

#[derive(Debug, Clone)]
pub struct CrbReport {
    /// 2x2 bound on the angle estimates, radians squared.
    pub crb: RMat,
    /// `sqrt(tr(crb))` in degrees, the scalar figure of merit.
    pub root_crb_deg: f64,
}

/// Evaluate `B = b a^T` and its angle derivatives.
///
/// Writing `s = 2 pi / lambda`, the product rule gives
/// `dB/dphi_h = j s sin(phi_h) cos(phi_v) (diag(x_s) B + B diag(x_e))` and
/// `dB/dphi_v = j s cos(phi_h) sin(phi_v) (diag(x_s) B + B diag(x_e))
///             - j s cos(phi_v) B diag(z_e)`,
/// with `x_s` the sensor X coordinates and `x_e`, `z_e` the element
/// coordinates.
pub fn derivative_bundle(geom: &ArrayGeometry, phi_h: f64, phi_v: f64) -> DerivativeBundle {
    let a = steering_stars(geom, phi_h, phi_v);
    let b = steering_sensor(geom, phi_h, phi_v);
    let n = geom.n();
    let n_s = geom.n_s();
    let mut b_mat = CMat::zeros(n_s, n);
    for s in 0..n_s {
        for e in 0..n {
            b_mat[(s, e)] = b[s] * a[e];
        }
    }
    let scale = 2.0 * PI / geom.wavelength;
    let j = Complex64::new(0.0, 1.0);
    let c_h = j * scale * phi_h.sin() * phi_v.cos();
    let c_v1 = j * scale * phi_h.cos() * phi_v.sin();
    let c_v2 = j * scale * phi_v.cos();
    let mut db_h = CMat::zeros(n_s, n);
    let mut db_v = CMat::zeros(n_s, n);
    for s in 0..n_s {
        for e in 0..n {
            let sum_coord = geom.sensor_x[s] + geom.stars_x[e];
            db_h[(s, e)] = c_h * sum_coord * b_mat[(s, e)];
            db_v[(s, e)] = (c_v1 * sum_coord - c_v2 * geom.stars_z[e]) * b_mat[(s, e)];
        }
    }
    DerivativeBundle { b_mat, db_h, db_v }
}

/// `tr(P F Q^H)` for sensors x elements matrices `P`, `Q` and elements x
/// elements `F`.
fn sandwich_trace(p: &CMat, f: &CMat, q: &CMat) -> C64 {
    let pf = p * f;
    trace_prod(&pf, &q.adjoint())
}

/// Information blocks as a function of the reflected covariance `F`.
///
/// `F` must be Hermitian up to a small defect; it is symmetrized before use
/// so that round-off from upstream solvers does not leak into the bound.
pub fn fim_from_f(
    bundle: &DerivativeBundle,
    f: &CMat,
    alpha: C64,
    snapshots: usize,
    noise: f64,
) -> Result<FimComponents, FimError> {
    let defect = hermitian_defect(f);
    let scale = sup_norm(f).max(1e-300);
    if defect > 1e-8 * scale.max(1.0) {
        return Err(FimError::NonHermitian(defect));
    }
    let f = hermitize(f);
    let l = snapshots as f64;
    let c_phi = 2.0 * alpha.norm_sqr() * l / noise;
    let c_mix = 2.0 * l / noise;

    let t_hh = sandwich_trace(&bundle.db_h, &f, &bundle.db_h);
    let t_hv = sandwich_trace(&bundle.db_h, &f, &bundle.db_v);
    let t_vv = sandwich_trace(&bundle.db_v, &f, &bundle.db_v);
    let j_phi = RMat::from_row_slice(
        2,
        2,
        &[
            c_phi * t_hh.re,
            c_phi * t_hv.re,
            c_phi * t_hv.re,
            c_phi * t_vv.re,
        ],
    );

    let s_h = alpha.conj() * sandwich_trace(&bundle.b_mat, &f, &bundle.db_h);
    let s_v = alpha.conj() * sandwich_trace(&bundle.b_mat, &f, &bundle.db_v);
    // Columns correspond to (Re alpha, Im alpha); the second column carries
    // the factor j, and Re(j w) = -Im(w).
    let j_phi_alpha = RMat::from_row_slice(
        2,
        2,
        &[
            c_mix * s_h.re,
            -c_mix * s_h.im,
            c_mix * s_v.re,
            -c_mix * s_v.im,
        ],
    );

    let t_bb = sandwich_trace(&bundle.b_mat, &f, &bundle.b_mat).re;
    let j_alpha = RMat::identity(2, 2) * (c_mix * t_bb);

    Ok(FimComponents {
        j_phi,
        j_phi_alpha,
        j_alpha,
    })
}

/// Reflected covariance of a concrete design.
pub fn reflected_covariance(theta_r: &CVec, g: &CMat, r_x: &CMat) -> CMat {
    let n = theta_r.len();
    let mut tg = CMat::zeros(n, g.ncols());
    for i in 0..n {
        for j in 0..g.ncols() {
            tg[(i, j)] = theta_r[i] * g[(i, j)];
        }
    }
    let inner = &tg * r_x * tg.adjoint();
    hermitize(&inner)
}

/// Information blocks of a concrete design `(theta_r, R_x)`.
pub fn fim_direct(
    bundle: &DerivativeBundle,
    theta_r: &CVec,
    g: &CMat,
    r_x: &CMat,
    alpha: C64,
    snapshots: usize,
    noise: f64,
) -> Result<FimComponents, FimError> {
    let f = reflected_covariance(theta_r, g, r_x);
    fim_from_f(bundle, &f, alpha, snapshots, noise)
}

/// Invert the gain-compensated angle information.
///
/// The bound on the angles is the inverse of the Schur complement
/// `J_phi - J_mix J_alpha^{-1} J_mix^T`. `J_alpha` is a scalar multiple of
/// the identity, so a vanishing echo power shows up as an unidentifiable
/// gain before any inversion is attempted.
pub fn crb(j: &FimComponents) -> Result<CrbReport, FimError> {
    let c = j.j_alpha[(0, 0)];
    if !(c.is_finite() && c > 1e-300) {
        return Err(FimError::Unidentifiable);
    }
    let mix = &j.j_phi_alpha * j.j_phi_alpha.transpose() / c;
    let s = &j.j_phi - mix;
    let a = s[(0, 0)];
    let b = 0.5 * (s[(0, 1)] + s[(1, 0)]);
    let d = s[(1, 1)];
    let mean = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let lo = mean - disc;
    let hi = mean + disc;
    if !lo.is_finite() || lo <= 0.0 || hi / lo > 1e12 {
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(FimError::IllConditioned(cond));
    }
    let det = a * d - b * b;
    let crb = RMat::from_row_slice(2, 2, &[d / det, -b / det, -b / det, a / det]);
    let root_crb_deg = (crb[(0, 0)] + crb[(1, 1)]).sqrt() * 180.0 / PI;
    Ok(CrbReport { crb, root_crb_deg })
}

/// Convenience wrapper: information and bound of a design in one call.
pub fn crb_of_design(
    bundle: &DerivativeBundle,
    theta_r: &CVec,
    g: &CMat,
    r_x: &CMat,
    alpha: C64,
    snapshots: usize,
    noise: f64,
) -> Result<CrbReport, FimError> {
    crb(&fim_direct(
        bundle, theta_r, g, r_x, alpha, snapshots, noise,
    )?)
}

/// Per-user SINR of a concrete transmit design through the refraction side.
pub fn comm_sinr(channels: &ChannelSet, theta_t: &CVec, waveform: &Waveform, noise: f64) -> RVec {
    let k_total = channels.h.len();
    let mut out = RVec::zeros(k_total);
    for k in 0..k_total {
        let u = effective_channel(&channels.g, theta_t, &channels.h[k]);
        let mut desired = 0.0;
        let mut interference = 0.0;
        for (i, p) in waveform.p.iter().enumerate() {
            let pow = u.dotc(p).norm_sqr();
            if i == k {
                desired = pow;
            } else {
                interference += pow;
            }
        }
        let sense = (u.adjoint() * &waveform.r_s * &u)[(0, 0)].re;
        out[k] = desired / (interference + sense.max(0.0) + noise);
    }
    out
}

/// `u_k = G^H Theta_t^H h_k`, the effective downlink channel of one user.
pub fn effective_channel(g: &CMat, theta_t: &CVec, h: &CVec) -> CVec {
    let n = theta_t.len();
    let mut th = CVec::zeros(n);
    for i in 0..n {
        th[i] = theta_t[i].conj() * h[i];
    }
    g.adjoint() * th
}

/// Independent check of the information matrix: differentiate the stacked
/// noiseless echo `u(xi) = vec(alpha B(phi) Theta_r G X)` numerically in the
/// angles (central differences, step `delta`) and analytically in the gain,
/// then form `(2 / noise) Re(d_l^H d_p)`. Returns the full 4x4 matrix in the
/// order `(phi_h, phi_v, Re alpha, Im alpha)`.
#[allow(clippy::too_many_arguments)]
pub fn fim_point_oracle(
    geom: &ArrayGeometry,
    phi_h: f64,
    phi_v: f64,
    theta_r: &CVec,
    g: &CMat,
    x: &CMat,
    alpha: C64,
    noise: f64,
    delta: f64,
) -> RMat {
    let tgx = {
        let n = theta_r.len();
        let mut tg = CMat::zeros(n, g.ncols());
        for i in 0..n {
            for j in 0..g.ncols() {
                tg[(i, j)] = theta_r[i] * g[(i, j)];
            }
        }
        tg * x
    };
    let stack = |ph: f64, pv: f64, gain: C64| -> CVec {
        let a = steering_stars(geom, ph, pv);
        let b = steering_sensor(geom, ph, pv);
        let n_s = b.len();
        let l = tgx.ncols();
        let mut out = CVec::zeros(n_s * l);
        // vec() of the sensors x snapshots echo, column-major.
        for col in 0..l {
            let mut acc = Complex64::new(0.0, 0.0);
            for e in 0..a.len() {
                acc += a[e] * tgx[(e, col)];
            }
            for s in 0..n_s {
                out[col * n_s + s] = gain * b[s] * acc;
            }
        }
        out
    };
    let d_h = (stack(phi_h + delta, phi_v, alpha) - stack(phi_h - delta, phi_v, alpha))
        / Complex64::new(2.0 * delta, 0.0);
    let d_v = (stack(phi_h, phi_v + delta, alpha) - stack(phi_h, phi_v - delta, alpha))
        / Complex64::new(2.0 * delta, 0.0);
    let unit = stack(phi_h, phi_v, Complex64::new(1.0, 0.0));
    let d_re = unit.clone();
    let d_im = unit * Complex64::new(0.0, 1.0);
    let ds = [d_h, d_v, d_re, d_im];
    let mut j = RMat::zeros(4, 4);
    for l in 0..4 {
        for p in 0..4 {
            j[(l, p)] = 2.0 / noise * ds[l].dotc(&ds[p]).re;
        }
    }
    j
}

/// Assemble the analytic blocks into the same 4x4 layout as the oracle.
pub fn fim_full_matrix(j: &FimComponents) -> RMat {
    let mut m = RMat::zeros(4, 4);
    for r in 0..2 {
        for c in 0..2 {
            m[(r, c)] = j.j_phi[(r, c)];
            m[(r, 2 + c)] = j.j_phi_alpha[(r, c)];
            m[(2 + c, r)] = j.j_phi_alpha[(r, c)];
            m[(2 + r, 2 + c)] = j.j_alpha[(r, c)];
        }
    }
    m
}
