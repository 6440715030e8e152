//! System configuration: array sizes, powers, link budget, target geometry.
//!
//! Files use engineering units (dBm, dB, degrees, meters). Parsing converts
//! everything to linear watts and radians exactly once, so the rest of the
//! crate never sees a decibel.

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Fully parsed system description in linear units (watts, meters, radians).
#[derive(Debug, Clone)]
pub struct SystemConfig {
    /// Base-station transmit antennas.
    pub m: usize,
    /// Surface elements.
    pub n: usize,
    /// Sensor elements mounted at the surface.
    pub n_s: usize,
    /// Communication users.
    pub k: usize,
    /// Transmit power budget in watts.
    pub power: f64,
    /// Per-user receiver noise power in watts.
    pub noise_comm: f64,
    /// Per-sensor noise power in watts.
    pub noise_sense: f64,
    /// Snapshots per coherent processing block.
    pub snapshots: usize,
    /// Per-user SINR thresholds, linear.
    pub gamma_bar: Vec<f64>,
    /// Base station to surface distance in meters.
    pub d_br: f64,
    /// Surface to target distance in meters.
    pub d_rt: f64,
    /// Surface to user distances in meters.
    pub d_ru: Vec<f64>,
    /// Path-loss exponents for the two hops.
    pub pathloss_exp_br: f64,
    pub pathloss_exp_ru: f64,
    /// Linear path-loss gain at the 1 m reference distance.
    pub pathloss_ref: f64,
    /// Rician factor, linear.
    pub rician: f64,
    /// Target azimuth in radians, within [0, pi].
    pub phi_h: f64,
    /// Target elevation in radians, within [-pi/2, pi/2].
    pub phi_v: f64,
    /// Carrier wavelength in meters. Element spacing is half of this, which
    /// makes the steering phases independent of the absolute value; it still
    /// fixes the physical scale of the element coordinates.
    pub wavelength: f64,
    /// Base seed for every random draw derived from this configuration.
    pub seed: u64,
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn deg_to_rad(deg: f64) -> f64 {
    deg * std::f64::consts::PI / 180.0
}

pub fn rad_to_deg(rad: f64) -> f64 {
    rad * 180.0 / std::f64::consts::PI
}

/// On-disk schema. Scalars may be given per user or once for all users.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    m: usize,
    n: usize,
    n_s: usize,
    k: usize,
    power_dbm: f64,
    noise_comm_dbm: f64,
    noise_sense_dbm: f64,
    snapshots: usize,
    gamma_bar_db: GammaBar,
    d_br: f64,
    d_rt: f64,
    d_ru: Option<Vec<f64>>,
    pathloss_exp_br: f64,
    pathloss_exp_ru: f64,
    pathloss_ref_db: f64,
    rician_db: f64,
    target_azimuth_deg: f64,
    target_elevation_deg: f64,
    wavelength: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum GammaBar {
    Shared(f64),
    PerUser(Vec<f64>),
}

/// User distances spread evenly over [20, 50] m, the default cell layout.
pub fn default_user_distances(k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| {
            if k == 1 {
                35.0
            } else {
                20.0 + 30.0 * i as f64 / (k - 1) as f64
            }
        })
        .collect()
}

impl SystemConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        let gamma_bar = match raw.gamma_bar_db {
            GammaBar::Shared(db) => vec![db_to_linear(db); raw.k],
            GammaBar::PerUser(v) => v.into_iter().map(db_to_linear).collect(),
        };
        let cfg = SystemConfig {
            m: raw.m,
            n: raw.n,
            n_s: raw.n_s,
            k: raw.k,
            power: dbm_to_watts(raw.power_dbm),
            noise_comm: dbm_to_watts(raw.noise_comm_dbm),
            noise_sense: dbm_to_watts(raw.noise_sense_dbm),
            snapshots: raw.snapshots,
            gamma_bar,
            d_br: raw.d_br,
            d_rt: raw.d_rt,
            d_ru: raw.d_ru.unwrap_or_else(|| default_user_distances(raw.k)),
            pathloss_exp_br: raw.pathloss_exp_br,
            pathloss_exp_ru: raw.pathloss_exp_ru,
            pathloss_ref: db_to_linear(-raw.pathloss_ref_db),
            rician: db_to_linear(raw.rician_db),
            phi_h: deg_to_rad(raw.target_azimuth_deg),
            phi_v: deg_to_rad(raw.target_elevation_deg),
            wavelength: raw.wavelength.unwrap_or(0.1),
            seed: raw.seed.unwrap_or(1),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.m == 0 || self.n == 0 || self.n_s == 0 {
            return fail("antenna, element, and sensor counts must be positive".into());
        }
        if self.snapshots == 0 {
            return fail("snapshot count must be positive".into());
        }
        if self.gamma_bar.len() != self.k {
            return fail(format!(
                "gamma_bar has {} entries for {} users",
                self.gamma_bar.len(),
                self.k
            ));
        }
        if self.d_ru.len() != self.k {
            return fail(format!(
                "d_ru has {} entries for {} users",
                self.d_ru.len(),
                self.k
            ));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.d_br) || !positive(self.d_rt) || !self.d_ru.iter().all(|&d| positive(d)) {
            return fail("all link distances must be positive".into());
        }
        if self.gamma_bar.iter().any(|&g| g < 0.0) {
            return fail("SINR thresholds must be nonnegative".into());
        }
        if !positive(self.power) || !positive(self.noise_comm) || !positive(self.noise_sense) {
            return fail("powers must be positive".into());
        }
        if !positive(self.pathloss_ref) || !(self.rician.is_finite() && self.rician >= 0.0) {
            return fail("path-loss reference and Rician factor must be positive".into());
        }
        if !positive(self.wavelength) {
            return fail("wavelength must be positive".into());
        }
        let pi = std::f64::consts::PI;
        if !(0.0..=pi).contains(&self.phi_h) {
            return fail("target azimuth must lie in [0, 180] degrees".into());
        }
        if !(-pi / 2.0..=pi / 2.0).contains(&self.phi_v) {
            return fail("target elevation must lie in [-90, 90] degrees".into());
        }
        Ok(())
    }

    /// Small instance sized so the full pipeline runs in seconds on a laptop.
    pub fn desk() -> Self {
        let k = 2;
        SystemConfig {
            m: 6,
            n: 8,
            n_s: 4,
            k,
            power: dbm_to_watts(30.0),
            noise_comm: dbm_to_watts(-110.0),
            noise_sense: dbm_to_watts(-110.0),
            snapshots: 100,
            gamma_bar: vec![db_to_linear(10.0); k],
            d_br: 40.0,
            d_rt: 30.0,
            d_ru: default_user_distances(k),
            pathloss_exp_br: 2.0,
            pathloss_exp_ru: 2.0,
            pathloss_ref: db_to_linear(-30.0),
            rician: db_to_linear(3.0),
            phi_h: deg_to_rad(120.0),
            phi_v: deg_to_rad(30.0),
            wavelength: 0.1,
            seed: 1,
        }
    }

    /// Benchmark instance matching the published measurement campaign.
    pub fn benchmark() -> Self {
        let k = 4;
        SystemConfig {
            m: 10,
            n: 10,
            n_s: 5,
            k,
            gamma_bar: vec![db_to_linear(10.0); k],
            d_ru: default_user_distances(k),
            ..Self::desk()
        }
    }

    pub fn with_gamma_bar_db(mut self, db: f64) -> Self {
        self.gamma_bar = vec![db_to_linear(db); self.k];
        self
    }

    pub fn with_elements(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_sensors(mut self, n_s: usize) -> Self {
        self.n_s = n_s;
        self
    }
}
