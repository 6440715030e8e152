//! Array geometry and steering vectors.
//!
//! The surface is a uniform planar array in the (X, Z) plane and the sensor
//! array is a uniform linear array on the X axis, both centered at the
//! origin with half-wavelength spacing. Directions are parameterized by
//! azimuth `phi_h` in [0, pi] and elevation `phi_v` in [-pi/2, pi/2].

use crate::linalg::{CVec, RVec};
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("element count must be positive")]
    EmptyArray,
    #[error("wavelength must be positive")]
    BadWavelength,
}

/// Element coordinates of the surface (X and Z) and of the sensor line (X),
/// in meters.
#[derive(Debug, Clone)]
pub struct ArrayGeometry {
    pub stars_x: RVec,
    pub stars_z: RVec,
    pub sensor_x: RVec,
    pub wavelength: f64,
}

/// Factor `n` as `n_x * n_z` with `n_x >= n_z` and the two as close as
/// possible, so the panel stays roughly square.
pub fn most_square_grid(n: usize) -> (usize, usize) {
    assert!(n > 0);
    let mut n_z = (n as f64).sqrt().floor() as usize;
    while n_z > 1 && !n.is_multiple_of(n_z) {
        n_z -= 1;
    }
    let n_z = n_z.max(1);
    (n / n_z, n_z)
}

fn centered_line(count: usize, spacing: f64) -> Vec<f64> {
    let mid = (count as f64 - 1.0) / 2.0;
    (0..count).map(|i| (i as f64 - mid) * spacing).collect()
}

impl ArrayGeometry {
    /// Standard layout: `n` surface elements on the most-square grid, `n_s`
    /// sensors on the X axis, half-wavelength spacing everywhere.
    pub fn standard(n: usize, n_s: usize, wavelength: f64) -> Result<Self, GeometryError> {
        if n == 0 || n_s == 0 {
            return Err(GeometryError::EmptyArray);
        }
        if !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(GeometryError::BadWavelength);
        }
        let (n_x, n_z) = most_square_grid(n);
        let spacing = wavelength / 2.0;
        let xs = centered_line(n_x, spacing);
        let zs = centered_line(n_z, spacing);
        let mut stars_x = Vec::with_capacity(n);
        let mut stars_z = Vec::with_capacity(n);
        // Column-major over the grid: z index fastest.
        for x in &xs {
            for z in &zs {
                stars_x.push(*x);
                stars_z.push(*z);
            }
        }
        Ok(ArrayGeometry {
            stars_x: RVec::from_vec(stars_x),
            stars_z: RVec::from_vec(stars_z),
            sensor_x: RVec::from_vec(centered_line(n_s, spacing)),
            wavelength,
        })
    }

    /// Explicit coordinates, for tests and nonstandard layouts.
    pub fn explicit(
        stars_x: Vec<f64>,
        stars_z: Vec<f64>,
        sensor_x: Vec<f64>,
        wavelength: f64,
    ) -> Result<Self, GeometryError> {
        if stars_x.is_empty() || sensor_x.is_empty() || stars_x.len() != stars_z.len() {
            return Err(GeometryError::EmptyArray);
        }
        if !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(GeometryError::BadWavelength);
        }
        Ok(ArrayGeometry {
            stars_x: RVec::from_vec(stars_x),
            stars_z: RVec::from_vec(stars_z),
            sensor_x: RVec::from_vec(sensor_x),
            wavelength,
        })
    }

    pub fn n(&self) -> usize {
        self.stars_x.len()
    }

    pub fn n_s(&self) -> usize {
        self.sensor_x.len()
    }
}

/// Unit propagation vector for a direction:
/// `[cos(phi_h) cos(phi_v), sin(phi_h) cos(phi_v), sin(phi_v)]`.
pub fn wavenumber(phi_h: f64, phi_v: f64) -> [f64; 3] {
    [
        phi_h.cos() * phi_v.cos(),
        phi_h.sin() * phi_v.cos(),
        phi_v.sin(),
    ]
}

/// Steering vector for arbitrary element positions: `exp(-j 2 pi / lambda * r . k)`.
pub fn steering_general(coords: &[[f64; 3]], phi_h: f64, phi_v: f64, wavelength: f64) -> CVec {
    let k = wavenumber(phi_h, phi_v);
    let scale = 2.0 * PI / wavelength;
    CVec::from_iterator(
        coords.len(),
        coords.iter().map(|r| {
            let phase = -scale * (r[0] * k[0] + r[1] * k[1] + r[2] * k[2]);
            Complex64::from_polar(1.0, phase)
        }),
    )
}

/// Surface steering vector. With elements in the (X, Z) plane the phase
/// reduces to `-(2 pi / lambda)(x cos(phi_h) cos(phi_v) + z sin(phi_v))`.
pub fn steering_stars(geom: &ArrayGeometry, phi_h: f64, phi_v: f64) -> CVec {
    let scale = 2.0 * PI / geom.wavelength;
    let chv = phi_h.cos() * phi_v.cos();
    let sv = phi_v.sin();
    CVec::from_iterator(
        geom.n(),
        (0..geom.n()).map(|i| {
            let phase = -scale * (geom.stars_x[i] * chv + geom.stars_z[i] * sv);
            Complex64::from_polar(1.0, phase)
        }),
    )
}

/// Sensor steering vector. Elements on the X axis see only the
/// `x cos(phi_h) cos(phi_v)` term.
pub fn steering_sensor(geom: &ArrayGeometry, phi_h: f64, phi_v: f64) -> CVec {
    let scale = 2.0 * PI / geom.wavelength;
    let chv = phi_h.cos() * phi_v.cos();
    CVec::from_iterator(
        geom.n_s(),
        (0..geom.n_s()).map(|i| Complex64::from_polar(1.0, -scale * geom.sensor_x[i] * chv)),
    )
}

/// Steering vector of a half-wavelength uniform linear array with `m`
/// centered elements, seen from angle `psi` off the array axis. Used for the
/// base-station side of the line-of-sight channel.
pub fn steering_ula(m: usize, psi: f64) -> CVec {
    let mid = (m as f64 - 1.0) / 2.0;
    CVec::from_iterator(
        m,
        (0..m).map(|i| Complex64::from_polar(1.0, -PI * (i as f64 - mid) * psi.cos())),
    )
}
