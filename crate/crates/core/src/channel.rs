//! Channel generation for the base-station / surface / user geometry.
//!
//! Both hops are Rician with distance path loss: a deterministic
//! line-of-sight component built from steering vectors plus an i.i.d.
//! complex Gaussian scattered component. The target return is a single
//! complex gain whose magnitude follows the two-way surface-target path.

use crate::config::SystemConfig;
use crate::geometry::{steering_stars, steering_ula, ArrayGeometry};
use crate::linalg::{cn_matrix, cn_vector, CMat, CVec, C64};
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;

/// Fixed site layout: direction of the base station as seen from the
/// surface, and of the surface as seen from the base-station array axis.
const BS_AZIMUTH: f64 = PI / 3.0;
const BS_ELEVATION: f64 = 0.0;
const BS_VIEW_ANGLE: f64 = PI / 4.0;

/// Azimuth of user `k` on the transmission side, spread over the open
/// interval (0, pi) at zero elevation.
fn user_azimuth(k: usize, total: usize) -> f64 {
    PI * (k + 1) as f64 / (total + 1) as f64
}

/// One realization of every random quantity the optimizer consumes.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    /// Base station to surface channel, elements x antennas.
    pub g: CMat,
    /// Per-user surface to user channels.
    pub h: Vec<CVec>,
    /// Complex gain of the two-way target return.
    pub alpha: C64,
}

/// Deterministic line-of-sight part of the base-station hop (unit gain).
pub fn g_los(cfg: &SystemConfig, geom: &ArrayGeometry) -> CMat {
    let a_surface = steering_stars(geom, BS_AZIMUTH, BS_ELEVATION);
    let a_bs = steering_ula(cfg.m, BS_VIEW_ANGLE);
    let mut g = CMat::zeros(geom.n(), cfg.m);
    for i in 0..geom.n() {
        for j in 0..cfg.m {
            g[(i, j)] = a_surface[i] * a_bs[j];
        }
    }
    g
}

/// Deterministic line-of-sight part of user `k`'s hop (unit gain).
pub fn h_los(cfg: &SystemConfig, geom: &ArrayGeometry, k: usize) -> CVec {
    steering_stars(geom, user_azimuth(k, cfg.k), 0.0)
}

/// Draw a channel realization. The random stream is consumed in a fixed
/// order (scattered part of G column-major, then each user in index order,
/// then the target phase), which is what makes runs reproducible from the
/// seed alone.
pub fn gen_channels<R: Rng>(
    cfg: &SystemConfig,
    geom: &ArrayGeometry,
    rng: &mut R,
) -> Result<ChannelSet, crate::config::ConfigError> {
    cfg.validate()?;
    let los_w = (cfg.rician / (1.0 + cfg.rician)).sqrt();
    let nlos_w = (1.0 / (1.0 + cfg.rician)).sqrt();

    let g_gain = (cfg.pathloss_ref / cfg.d_br.powf(cfg.pathloss_exp_br)).sqrt();
    let g_scatter = cn_matrix(geom.n(), cfg.m, rng);
    let mut g = g_los(cfg, geom);
    for i in 0..geom.n() {
        for j in 0..cfg.m {
            g[(i, j)] =
                Complex64::new(g_gain, 0.0) * (g[(i, j)] * los_w + g_scatter[(i, j)] * nlos_w);
        }
    }

    let mut h = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let gain = (cfg.pathloss_ref / cfg.d_ru[k].powf(cfg.pathloss_exp_ru)).sqrt();
        let los = h_los(cfg, geom, k);
        let scatter = cn_vector(geom.n(), rng);
        let mut hk = CVec::zeros(geom.n());
        for i in 0..geom.n() {
            hk[i] = Complex64::new(gain, 0.0) * (los[i] * los_w + scatter[i] * nlos_w);
        }
        h.push(hk);
    }

    let magnitude = cfg.pathloss_ref / (cfg.d_rt * cfg.d_rt);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let alpha = Complex64::from_polar(magnitude, phase);

    Ok(ChannelSet { g, h, alpha })
}
