//! Synthetic wind and solar fleets with known spatial and temporal
//! structure.
//!
//! Wind: each site follows a unit-variance AR(2) latent process whose
//! innovations are spatially correlated with `corr(i, j) = ρ^|i−j|`; output
//! is `sigmoid(gain·x + offset_k)`.
//!
//! Solar: a clear-sky envelope `sin(π(h−sunrise)/daylight)^exponent` during
//! daylight (exactly zero at night) multiplied by a cloud factor
//! `floor + (1−floor)·sigmoid(gain·x + offset_k)` driven by the same kind of
//! latent process.

use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_fleet, FleetKind, SiteSeries};
use crate::error::{Error, Result};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub rho: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub gain: f64,
    pub offset: f64,
    /// Offsets run linearly from `offset − spread/2` to `offset + spread/2`
    /// across sites.
    pub offset_spread: f64,
    pub base_capacity_mw: f64,
    pub capacity_step_mw: f64,
    pub step_minutes: u32,
    pub start: NaiveDateTime,
    pub burn_in: usize,
    pub sunrise_hour: f64,
    pub sunset_hour: f64,
    pub envelope_exponent: f64,
    pub cloud_floor: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            rho: 0.9,
            phi1: 1.2,
            phi2: -0.35,
            gain: 1.5,
            offset: -0.3,
            offset_spread: 0.4,
            base_capacity_mw: 100.0,
            capacity_step_mw: 25.0,
            step_minutes: 60,
            start: NaiveDate::from_ymd_opt(2024, 1, 1)
                .expect("valid date")
                .and_hms_opt(0, 0, 0)
                .expect("valid time"),
            burn_in: 200,
            sunrise_hour: 6.0,
            sunset_hour: 18.0,
            envelope_exponent: 1.2,
            cloud_floor: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub kind: FleetKind,
    pub sites: Vec<String>,
    pub rho: f64,
    pub ar_coefficients: [f64; 2],
    /// Correlation of the latent Gaussian processes.
    pub latent_correlation: Vec<Vec<f64>>,
    /// Correlation of the per-unit outputs (wind only).
    pub correlation: Option<Vec<Vec<f64>>>,
    /// Clear-sky envelope for each step of the day (solar only).
    pub envelope: Option<Vec<f64>>,
    /// Steps of the day at which solar output is exactly zero.
    pub night_steps: Option<Vec<usize>>,
}

impl GroundTruth {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(GROUND_TRUTH_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(GROUND_TRUTH_FILE);
        let text = serde_json::to_string_pretty(self).expect("ground truth serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFleet {
    pub kind: FleetKind,
    pub series: Vec<SiteSeries>,
    pub ground_truth: GroundTruth,
}

impl SynthFleet {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_fleet(dir, self.kind, &self.series)?;
        self.ground_truth.write(dir)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn validate(k: usize, p: &SynthParams) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(m.into()));
    if k == 0 {
        return bad("site count must be at least 1");
    }
    if !(p.rho > -1.0 && p.rho < 1.0) {
        return bad("rho must lie in (-1, 1)");
    }
    // AR(2) stationarity triangle.
    if !(p.phi2.abs() < 1.0 && p.phi1 + p.phi2 < 1.0 && p.phi2 - p.phi1 < 1.0) {
        return bad("AR(2) coefficients are not stationary");
    }
    if p.step_minutes == 0 || 1440 % p.step_minutes != 0 {
        return bad("step_minutes must divide a day");
    }
    if !(0.0..=1.0).contains(&p.cloud_floor) {
        return bad("cloud_floor must lie in [0, 1]");
    }
    if !(0.0 <= p.sunrise_hour && p.sunrise_hour < p.sunset_hour && p.sunset_hour <= 24.0) {
        return bad("need 0 <= sunrise_hour < sunset_hour <= 24");
    }
    Ok(())
}

pub fn latent_correlation(k: usize, rho: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| rho.powi((i as i32 - j as i32).abs())).collect())
        .collect()
}

fn cholesky(c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = c.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[i][m] * l[j][m]).sum();
            if i == j {
                l[i][j] = (c[i][i] - s).max(0.0).sqrt();
            } else {
                l[i][j] = if l[j][j] > 0.0 { (c[i][j] - s) / l[j][j] } else { 0.0 };
            }
        }
    }
    l
}

/// Stationary variance of `x_t = φ1 x_{t−1} + φ2 x_{t−2} + e_t`, `Var e = 1`.
pub fn ar2_variance(phi1: f64, phi2: f64) -> f64 {
    (1.0 - phi2) / ((1.0 + phi2) * ((1.0 - phi2).powi(2) - phi1 * phi1))
}

/// `[K][steps]` unit-variance latent paths with spatially correlated
/// innovations.
fn latent_paths(k: usize, steps: usize, p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let chol = cholesky(&latent_correlation(k, p.rho));
    let scale = ar2_variance(p.phi1, p.phi2).sqrt();
    let mut out = vec![Vec::with_capacity(steps); k];
    let mut x1 = vec![0.0; k];
    let mut x2 = vec![0.0; k];
    for t in 0..steps + p.burn_in {
        let xi: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        for i in 0..k {
            let e: f64 = (0..=i).map(|j| chol[i][j] * xi[j]).sum();
            let x = p.phi1 * x1[i] + p.phi2 * x2[i] + e;
            x2[i] = x1[i];
            x1[i] = x;
            if t >= p.burn_in {
                out[i].push(x / scale);
            }
        }
    }
    out
}

fn site_offsets(k: usize, p: &SynthParams) -> Vec<f64> {
    (0..k)
        .map(|i| {
            let frac = if k > 1 { i as f64 / (k - 1) as f64 - 0.5 } else { 0.0 };
            p.offset + p.offset_spread * frac
        })
        .collect()
}

pub fn steps_per_day(step_minutes: u32) -> usize {
    (1440 / step_minutes) as usize
}

/// Clear-sky envelope for every step of the day.
pub fn solar_envelope(p: &SynthParams) -> Vec<f64> {
    let n = steps_per_day(p.step_minutes);
    let daylight = p.sunset_hour - p.sunrise_hour;
    (0..n)
        .map(|s| {
            let h = s as f64 * p.step_minutes as f64 / 60.0;
            if h > p.sunrise_hour && h < p.sunset_hour {
                (std::f64::consts::PI * (h - p.sunrise_hour) / daylight)
                    .sin()
                    .max(0.0)
                    .powf(p.envelope_exponent)
            } else {
                0.0
            }
        })
        .collect()
}

const QUAD_HALF_WIDTH: f64 = 8.0;
const QUAD_POINTS: usize = 401;

/// Correlation of `f(X)` and `g(Y)` for a standard bivariate normal with
/// correlation `r`, by trapezoid quadrature on a square grid.
pub fn transformed_correlation(r: f64, f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64) -> f64 {
    let h = 2.0 * QUAD_HALF_WIDTH / (QUAD_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..QUAD_POINTS).map(|i| -QUAD_HALF_WIDTH + i as f64 * h).collect();
    let w = |i: usize| if i == 0 || i == QUAD_POINTS - 1 { 0.5 } else { 1.0 };
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let moments = |t: &dyn Fn(f64) -> f64| {
        let (mut m1, mut m2) = (0.0, 0.0);
        for (i, &x) in grid.iter().enumerate() {
            let v = t(x);
            let d = w(i) * h * phi(x);
            m1 += d * v;
            m2 += d * v * v;
        }
        (m1, m2 - m1 * m1)
    };
    let (mf, vf) = moments(&f);
    let (mg, vg) = moments(&g);
    let s = (1.0 - r * r).sqrt();
    let norm = 1.0 / (2.0 * std::f64::consts::PI * s);
    let fx: Vec<f64> = grid.iter().map(|&x| f(x) - mf).collect();
    let gy: Vec<f64> = grid.iter().map(|&y| g(y) - mg).collect();
    let mut cov = 0.0;
    for (i, &x) in grid.iter().enumerate() {
        for (j, &y) in grid.iter().enumerate() {
            let q = (x * x - 2.0 * r * x * y + y * y) / (2.0 * s * s);
            cov += w(i) * w(j) * h * h * norm * (-q).exp() * fx[i] * gy[j];
        }
    }
    cov / (vf * vg).sqrt()
}

pub fn synth_fleet(kind: FleetKind, k: usize, steps: usize, seed: u64, p: &SynthParams) -> Result<SynthFleet> {
    validate(k, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = latent_paths(k, steps, p, &mut rng);
    let offsets = site_offsets(k, p);
    let envelope = solar_envelope(p);
    let per_day = envelope.len();
    let timestamps: Vec<NaiveDateTime> = (0..steps)
        .map(|t| p.start + Duration::minutes(t as i64 * p.step_minutes as i64))
        .collect();
    let lc = latent_correlation(k, p.rho);
    let series = (0..k)
        .map(|i| {
            let capacity = p.base_capacity_mw + p.capacity_step_mw * i as f64;
            let power = latent[i]
                .iter()
                .enumerate()
                .map(|(t, &x)| {
                    let pu = match kind {
                        FleetKind::Wind => sigmoid(p.gain * x + offsets[i]),
                        FleetKind::Solar => {
                            let cloud = p.cloud_floor + (1.0 - p.cloud_floor) * sigmoid(p.gain * x + offsets[i]);
                            envelope[t % per_day] * cloud
                        }
                    };
                    pu * capacity
                })
                .collect();
            SiteSeries {
                site_id: format!("site_{i:02}"),
                capacity_mw: capacity,
                step_minutes: p.step_minutes,
                timestamps: timestamps.clone(),
                power_mw: power,
            }
        })
        .collect::<Vec<_>>();

    let correlation = match kind {
        FleetKind::Wind => Some(
            (0..k)
                .map(|i| {
                    (0..k)
                        .map(|j| {
                            if i == j {
                                1.0
                            } else {
                                let (oi, oj) = (offsets[i], offsets[j]);
                                transformed_correlation(
                                    lc[i][j],
                                    |x| sigmoid(p.gain * x + oi),
                                    |y| sigmoid(p.gain * y + oj),
                                )
                            }
                        })
                        .collect()
                })
                .collect(),
        ),
        FleetKind::Solar => None,
    };
    let (envelope, night_steps) = match kind {
        FleetKind::Wind => (None, None),
        FleetKind::Solar => {
            let night = envelope
                .iter()
                .enumerate()
                .filter(|(_, &e)| e == 0.0)
                .map(|(s, _)| s)
                .collect();
            (Some(envelope), Some(night))
        }
    };
    Ok(SynthFleet {
        kind,
        ground_truth: GroundTruth {
            kind,
            sites: series.iter().map(|s| s.site_id.clone()).collect(),
            rho: p.rho,
            ar_coefficients: [p.phi1, p.phi2],
            latent_correlation: lc,
            correlation,
            envelope,
            night_steps,
        },
        series,
    })
}
