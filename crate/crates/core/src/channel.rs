//! Synthetic FDD multipath channels and uplink pilot transmission.
//!
//! Each user sees `paths` propagation paths. A path has an angle of departure
//! and a length shared by both link directions, plus one complex gain per
//! direction. The channel of user `k` at carrier `f` is
//!
//! ```text
//! h_k(f) = sum_l alpha_l(f) * exp(-j 2 pi f d_l / c) * a(theta_l)
//! ```
//!
//! with `a(.)` the ULA response from [`array_response`].

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cmul, hermitian, ComplexMatrix};
use crate::rng::{Domain, StreamRng};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// How the per-path gains of the two link directions relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainCoupling {
    /// Uplink and downlink gains are drawn independently.
    #[default]
    Independent,
    /// The downlink reuses the uplink gain of each path.
    Shared,
}

/// Physical and dimensional parameters. Powers and noise are linear watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Base-station antennas `M`.
    pub antennas: usize,
    /// Single-antenna users `K`.
    pub users: usize,
    /// Uplink pilot length `L`.
    pub pilot_length: usize,
    pub f_ul: f64,
    pub f_dl: f64,
    pub d_over_lambda: f64,
    /// Propagation paths per user.
    pub paths: usize,
    /// Downlink receiver noise power.
    pub noise_dl: f64,
    /// Uplink pilot noise power per receive antenna.
    pub noise_ul: f64,
    /// Downlink transmit power budget.
    pub power_dl: f64,
    /// Uplink per-user pilot power.
    pub power_ul: f64,
    pub rng_seed: u64,
    #[serde(default = "default_distance_range")]
    pub distance_range: (f64, f64),
    #[serde(default)]
    pub gain_coupling: GainCoupling,
}

fn default_distance_range() -> (f64, f64) {
    (5.0, 50.0)
}

/// `10^((dbm - 30) / 10)`.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            antennas: 16,
            users: 4,
            pilot_length: 4,
            f_ul: 2.4e9,
            f_dl: 2.5e9,
            d_over_lambda: 0.5,
            paths: 5,
            noise_dl: dbm_to_watts(-85.0),
            noise_ul: dbm_to_watts(-85.0),
            power_dl: dbm_to_watts(5.0),
            power_ul: dbm_to_watts(-10.0),
            rng_seed: 0,
            distance_range: default_distance_range(),
            gain_coupling: GainCoupling::Independent,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.users == 0 {
            return fail("users must be at least 1".into());
        }
        if self.antennas < self.users {
            return fail(format!(
                "antennas ({}) must be >= users ({})",
                self.antennas, self.users
            ));
        }
        if self.pilot_length < self.users {
            return fail(format!(
                "pilot_length ({}) must be >= users ({})",
                self.pilot_length, self.users
            ));
        }
        if self.paths == 0 {
            return fail("paths must be at least 1".into());
        }
        for (name, value) in [
            ("noise_dl", self.noise_dl),
            ("noise_ul", self.noise_ul),
            ("power_dl", self.power_dl),
            ("power_ul", self.power_ul),
            ("f_ul", self.f_ul),
            ("f_dl", self.f_dl),
            ("d_over_lambda", self.d_over_lambda),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {value}"));
            }
        }
        let (lo, hi) = self.distance_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return fail(format!(
                "distance_range ({lo}, {hi}) is not an ordered nonnegative range"
            ));
        }
        Ok(())
    }

    /// Same configuration with a different user count.
    pub fn with_users(&self, users: usize) -> Self {
        let mut cfg = self.clone();
        cfg.users = users;
        cfg.pilot_length = cfg.pilot_length.max(users);
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathInfo {
    pub gain_ul: Complex64,
    pub gain_dl: Complex64,
    pub angle: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// Uplink channel, `M x K`, column `k` is `h_UL,k`.
    pub h_ul: ComplexMatrix,
    /// Downlink channel, `M x K`, column `k` is `h_DL,k`.
    pub h_dl: ComplexMatrix,
    /// Per-user path geometry. Empty for samples loaded from disk.
    pub paths: Vec<Vec<PathInfo>>,
    /// Received pilots `Y_p`, `M x L`, once simulated.
    pub pilots_rx: Option<ComplexMatrix>,
}

impl ChannelSample {
    /// `H_DL` in row-per-user form (`K x M`, row `k` is `h_DL,k^H`).
    pub fn downlink_rows(&self) -> ComplexMatrix {
        hermitian(&self.h_dl)
    }

    pub fn uplink_rows(&self) -> ComplexMatrix {
        hermitian(&self.h_ul)
    }
}

/// ULA response: entry `m` is `exp(j 2 pi d_over_lambda m sin(theta))`.
pub fn array_response(theta: f64, antennas: usize, d_over_lambda: f64) -> ComplexMatrix {
    let phase_step = 2.0 * PI * d_over_lambda * theta.sin();
    ComplexMatrix::from_fn(antennas, 1, |m, _| {
        if m == 0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::from_polar(1.0, phase_step * m as f64)
        }
    })
}

/// Channel vector of one user from its paths at carrier `freq`.
///
/// `select_gain` picks which link direction's gain to use.
pub fn channel_from_paths(
    paths: &[PathInfo],
    freq: f64,
    antennas: usize,
    d_over_lambda: f64,
    select_gain: impl Fn(&PathInfo) -> Complex64,
) -> Vec<Complex64> {
    let mut h = vec![Complex64::new(0.0, 0.0); antennas];
    for p in paths {
        let delay = p.distance / SPEED_OF_LIGHT;
        let coeff = select_gain(p) * Complex64::from_polar(1.0, -2.0 * PI * freq * delay);
        let a = array_response(p.angle, antennas, d_over_lambda);
        for (m, hm) in h.iter_mut().enumerate() {
            *hm += coeff * a.get(m, 0);
        }
    }
    h
}

/// Draws sample `index` of the stream defined by `cfg.rng_seed`.
///
/// Geometry and gains of user `k`, path `l` come from their own streams, so
/// a sample only depends on `(cfg, index)`.
pub fn generate_sample(cfg: &SystemConfig, index: u64) -> ChannelSample {
    let (m, k_users) = (cfg.antennas, cfg.users);
    let gain_scale = 1.0 / (cfg.paths as f64).sqrt();
    let (d_lo, d_hi) = cfg.distance_range;
    let mut h_ul = ComplexMatrix::zeros(m, k_users);
    let mut h_dl = ComplexMatrix::zeros(m, k_users);
    let mut all_paths = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let paths: Vec<PathInfo> = (0..cfg.paths)
            .map(|l| {
                let mut geo = StreamRng::for_key(cfg.rng_seed, Domain::PathGeometry, index, k, l);
                let angle = geo.uniform_open(-FRAC_PI_2, FRAC_PI_2);
                let distance = geo.uniform(d_lo, d_hi);
                let gain_ul =
                    StreamRng::for_key(cfg.rng_seed, Domain::UplinkGain, index, k, l).complex_normal() * gain_scale;
                let gain_dl = match cfg.gain_coupling {
                    GainCoupling::Shared => gain_ul,
                    GainCoupling::Independent => {
                        StreamRng::for_key(cfg.rng_seed, Domain::DownlinkGain, index, k, l).complex_normal()
                            * gain_scale
                    }
                };
                PathInfo {
                    gain_ul,
                    gain_dl,
                    angle,
                    distance,
                }
            })
            .collect();
        let ul = channel_from_paths(&paths, cfg.f_ul, m, cfg.d_over_lambda, |p| p.gain_ul);
        let dl = channel_from_paths(&paths, cfg.f_dl, m, cfg.d_over_lambda, |p| p.gain_dl);
        for row in 0..m {
            h_ul.set(row, k, ul[row]);
            h_dl.set(row, k, dl[row]);
        }
        all_paths.push(paths);
    }
    ChannelSample {
        h_ul,
        h_dl,
        paths: all_paths,
        pilots_rx: None,
    }
}

/// Samples `start..start + count`.
pub fn generate_batch(cfg: &SystemConfig, start: u64, count: usize) -> Vec<ChannelSample> {
    (0..count as u64).map(|i| generate_sample(cfg, start + i)).collect()
}

/// Pilot matrix `K x L` with DFT rows scaled so that `P P^H = P_UL L I`.
pub fn default_pilots(cfg: &SystemConfig) -> ComplexMatrix {
    let (k, l) = (cfg.users, cfg.pilot_length);
    let amp = cfg.power_ul.sqrt();
    ComplexMatrix::from_fn(k, l, |row, col| {
        let turns = ((row * col) % l) as f64 / l as f64;
        Complex64::from_polar(amp, -2.0 * PI * turns)
    })
}

/// Checks `‖p_k‖² ≤ P_UL L` for every user row.
pub fn check_pilot_power(pilots: &ComplexMatrix, cfg: &SystemConfig) -> Result<()> {
    let budget = cfg.power_ul * cfg.pilot_length as f64;
    for user in 0..pilots.rows() {
        let power = pilots.row(user).fro_norm_sq();
        if power > budget * (1.0 + 1e-9) {
            return Err(Error::PilotPower { user, power, budget });
        }
    }
    Ok(())
}

/// Simulates `Y_p = H_UL P + N` with `N ~ CN(0, noise_ul)` i.i.d., stores it in
/// the sample and returns it. Noise comes from the stream of `index`.
pub fn transmit_pilots(
    sample: &mut ChannelSample,
    pilots: &ComplexMatrix,
    cfg: &SystemConfig,
    index: u64,
) -> Result<ComplexMatrix> {
    check_pilot_power(pilots, cfg)?;
    let mut y = cmul(&sample.h_ul, pilots)?;
    if cfg.noise_ul > 0.0 {
        let mut rng = StreamRng::for_key(cfg.rng_seed, Domain::PilotNoise, index, 0, 0);
        let std = cfg.noise_ul.sqrt();
        for i in 0..y.rows() {
            for j in 0..y.cols() {
                let z = y.get(i, j) + rng.complex_normal() * std;
                y.set(i, j, z);
            }
        }
    }
    sample.pilots_rx = Some(y.clone());
    Ok(y)
}

/// Generates `count` samples with received pilots under `pilots`.
pub fn generate_with_pilots(
    cfg: &SystemConfig,
    pilots: &ComplexMatrix,
    start: u64,
    count: usize,
) -> Result<Vec<ChannelSample>> {
    (0..count as u64)
        .map(|i| {
            let index = start + i;
            let mut s = generate_sample(cfg, index);
            transmit_pilots(&mut s, pilots, cfg, index)?;
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::fro_norm;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn broadside_is_all_ones() {
        let a = array_response(0.0, 7, 0.5);
        for m in 0..7 {
            assert_eq!(a.get(m, 0), c(1.0, 0.0));
        }
        assert_eq!(array_response(1.1, 1, 0.5).get(0, 0), c(1.0, 0.0));
    }

    #[test]
    fn thirty_degrees_quarter_turns() {
        let a = array_response(PI / 6.0, 4, 0.5);
        let expected = [c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0), c(0.0, -1.0)];
        for (m, e) in expected.iter().enumerate() {
            assert!((a.get(m, 0) - e).norm() < 1e-12, "m={m}");
        }
    }

    #[test]
    fn single_path_degenerate_case() {
        let path = PathInfo {
            gain_ul: c(1.0, 0.0),
            gain_dl: c(1.0, 0.0),
            angle: 0.3,
            distance: 0.0,
        };
        let h = channel_from_paths(&[path], 2.4e9, 6, 0.5, |p| p.gain_ul);
        let a = array_response(0.3, 6, 0.5);
        for m in 0..6 {
            assert_eq!(h[m], a.get(m, 0));
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let cfg = SystemConfig::default();
        assert_eq!(generate_sample(&cfg, 11), generate_sample(&cfg, 11));
        assert_ne!(generate_sample(&cfg, 11), generate_sample(&cfg, 12));
    }

    #[test]
    fn reconstruction_from_paths() {
        let cfg = SystemConfig::default();
        let s = generate_sample(&cfg, 3);
        for k in 0..cfg.users {
            let ul = channel_from_paths(&s.paths[k], cfg.f_ul, cfg.antennas, cfg.d_over_lambda, |p| p.gain_ul);
            let dl = channel_from_paths(&s.paths[k], cfg.f_dl, cfg.antennas, cfg.d_over_lambda, |p| p.gain_dl);
            for m in 0..cfg.antennas {
                assert!((ul[m] - s.h_ul.get(m, k)).norm() < 1e-10);
                assert!((dl[m] - s.h_dl.get(m, k)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn shared_gains_same_frequency_is_reciprocal() {
        let cfg = SystemConfig {
            f_dl: 2.4e9,
            gain_coupling: GainCoupling::Shared,
            ..SystemConfig::default()
        };
        let s = generate_sample(&cfg, 0);
        assert_eq!(s.h_ul, s.h_dl);
    }

    #[test]
    fn angles_inside_open_interval() {
        let cfg = SystemConfig::default();
        for i in 0..50 {
            for user in generate_sample(&cfg, i).paths {
                for p in user {
                    assert!(p.angle > -FRAC_PI_2 && p.angle < FRAC_PI_2);
                    assert!(p.distance >= 5.0 && p.distance <= 50.0);
                }
            }
        }
    }

    #[test]
    fn mean_channel_energy_is_antenna_count() {
        let cfg = SystemConfig {
            users: 1,
            pilot_length: 1,
            ..SystemConfig::default()
        };
        let n = 10_000;
        let mean: f64 = (0..n).map(|i| generate_sample(&cfg, i).h_dl.fro_norm_sq()).sum::<f64>() / n as f64;
        let m = cfg.antennas as f64;
        assert!((mean - m).abs() < 0.03 * m, "mean {mean}");
    }

    #[test]
    fn default_pilots_are_orthogonal_with_full_power() {
        let cfg = SystemConfig {
            users: 1,
            pilot_length: 1,
            power_ul: 0.3,
            ..SystemConfig::default()
        };
        let p = default_pilots(&cfg);
        assert!((p.get(0, 0) - c(0.3f64.sqrt(), 0.0)).norm() < 1e-15);

        let cfg = SystemConfig::default();
        let p = default_pilots(&cfg);
        let gram = cmul(&p, &hermitian(&p)).unwrap();
        let expected = ComplexMatrix::identity(4).scale(cfg.power_ul * 4.0);
        assert!(gram.max_abs_diff(&expected) < 1e-10 * cfg.power_ul);
        check_pilot_power(&p, &cfg).unwrap();
    }

    #[test]
    fn pilot_power_violation_names_user() {
        let cfg = SystemConfig::default();
        let mut p = default_pilots(&cfg);
        p.set(2, 0, c(1.0, 0.0));
        match check_pilot_power(&p, &cfg) {
            Err(Error::PilotPower { user, .. }) => assert_eq!(user, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noiseless_pilots_are_exact_product() {
        let cfg = SystemConfig {
            noise_ul: 0.0,
            ..SystemConfig::default()
        };
        let p = default_pilots(&cfg);
        let mut s = generate_sample(&cfg, 0);
        let y = transmit_pilots(&mut s, &p, &cfg, 0).unwrap();
        assert_eq!(y, cmul(&s.h_ul, &p).unwrap());
        assert_eq!(s.pilots_rx.as_ref(), Some(&y));
    }

    #[test]
    fn scaled_identity_pilots_expose_channel_columns() {
        let cfg = SystemConfig {
            noise_ul: 1e-12,
            ..SystemConfig::default()
        };
        let amp = cfg.power_ul.sqrt();
        let p = ComplexMatrix::identity(4).scale(amp);
        let mut s = generate_sample(&cfg, 1);
        let y = transmit_pilots(&mut s, &p, &cfg, 1).unwrap();
        let diff = fro_norm(&y.sub(&s.h_ul.scale(amp)).unwrap());
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn pilot_noise_variance() {
        let cfg = SystemConfig {
            users: 1,
            pilot_length: 1,
            antennas: 1,
            noise_ul: 0.7,
            ..SystemConfig::default()
        };
        let p = default_pilots(&cfg);
        let n = 10_000;
        let mut acc = 0.0;
        for i in 0..n {
            let mut s = generate_sample(&cfg, i);
            let clean = cmul(&s.h_ul, &p).unwrap();
            let y = transmit_pilots(&mut s, &p, &cfg, i).unwrap();
            acc += y.sub(&clean).unwrap().fro_norm_sq();
        }
        let var = acc / n as f64;
        assert!((var - 0.7).abs() < 0.05 * 0.7, "{var}");
    }

    #[test]
    fn dbm_conversion() {
        let w = dbm_to_watts(-85.0);
        assert!((w - 10f64.powf(-11.5)).abs() <= 1e-15 * w);
        let w = dbm_to_watts(5.0);
        assert!((w - 10f64.powf(-2.5)).abs() <= 1e-15 * w);
        assert!((watts_to_dbm(dbm_to_watts(-10.0)) + 10.0).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_dimensions() {
        let mut cfg = SystemConfig::default();
        cfg.users = 20;
        assert!(cfg.validate().is_err());
        let mut cfg = SystemConfig::default();
        cfg.pilot_length = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = SystemConfig::default();
        cfg.noise_dl = 0.0;
        assert!(cfg.validate().is_err());
        SystemConfig::default().validate().unwrap();
    }
}
