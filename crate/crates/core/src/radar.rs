//! Staring radar: field-of-view gating, probabilistic detection, spherical
//! measurement noise, false alarms and conversion back to Cartesian.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::Environment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    pub position: [f64; 3],
    /// [azimuth span, elevation span] in degrees.
    pub field_of_view: [f64; 2],
    /// [azimuth, elevation] of the boresight in degrees.
    pub boresight: [f64; 2],
    pub max_range: f64,
    pub range_sigma: f64,
    /// Cross-range 1-sigma at `reference_range`, meters.
    pub cross_range_sigma_at_ref: f64,
    pub reference_range: f64,
    pub detection_probability: f64,
    /// Per cell, per look.
    pub false_alarm_rate: f64,
    pub cells_per_look: u64,
    pub center_frequency: f64,
    pub bandwidth: f64,
    /// dBsm; carried as metadata.
    pub reference_rcs: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        RadarConfig {
            position: [0.0; 3],
            field_of_view: [90.0, 90.0],
            boresight: [0.0, 0.0],
            max_range: 2500.0,
            range_sigma: 1.0,
            cross_range_sigma_at_ref: 1.0,
            reference_range: 2500.0,
            detection_probability: 0.95,
            false_alarm_rate: 1e-6,
            cells_per_look: 1_000_000,
            center_frequency: 24.55e9,
            bandwidth: 45e6,
            reference_rcs: 0.0,
        }
    }
}

impl RadarConfig {
    /// Radar at the geo-fence centroid, 5 m above ground, looking toward the
    /// centre of the environment.
    pub fn for_environment(env: &Environment) -> Self {
        let g = env.geofence.center();
        let c = env.bounds.center();
        let azimuth = (c[1] - g[1]).atan2(c[0] - g[0]).to_degrees();
        RadarConfig {
            position: [g[0], g[1], 5.0],
            boresight: [azimuth, 0.0],
            ..Default::default()
        }
    }

    /// Angular 1-sigma in radians for both angle channels.
    pub fn angle_sigma(&self) -> f64 {
        self.cross_range_sigma_at_ref / self.reference_range
    }

    /// Copy with every noise channel switched off.
    pub fn noiseless(&self) -> Self {
        RadarConfig {
            range_sigma: 0.0,
            cross_range_sigma_at_ref: 0.0,
            ..self.clone()
        }
    }

    /// Exact spherical coordinates `(range, azimuth, elevation)` of a point.
    pub fn spherical(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let d = [
            p[0] - self.position[0],
            p[1] - self.position[1],
            p[2] - self.position[2],
        ];
        let horizontal = d[0].hypot(d[1]);
        let range = horizontal.hypot(d[2]);
        (range, d[1].atan2(d[0]), d[2].atan2(horizontal))
    }

    pub fn in_field_of_view(&self, p: [f64; 3]) -> bool {
        let (range, az, el) = self.spherical(p);
        if !(range > 0.0 && range <= self.max_range) {
            return false;
        }
        let d_az = wrap_angle(az - self.boresight[0].to_radians()).abs();
        let d_el = (el - self.boresight[1].to_radians()).abs();
        d_az <= 0.5 * self.field_of_view[0].to_radians() && d_el <= 0.5 * self.field_of_view[1].to_radians()
    }
}

/// Wraps to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    } else if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarDetection {
    pub timestamp: f64,
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
    /// Ground-truth tag for tests and diagnostics; trackers ignore it.
    pub is_false_alarm: bool,
}

/// Cartesian measurement with its covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianMeasurement {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

/// One look at a target. The detection draw and the three noise draws are
/// always consumed once the target is in view, so the detect / miss outcome
/// does not depend on the noise level.
pub fn detect<R: Rng + ?Sized>(
    cfg: &RadarConfig,
    timestamp: f64,
    true_position: [f64; 3],
    rng: &mut R,
) -> Option<RadarDetection> {
    if !cfg.in_field_of_view(true_position) {
        return None;
    }
    let (range, az, el) = cfg.spherical(true_position);
    let detected = rng.random::<f64>() < cfg.detection_probability;
    let noise: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
    if !detected {
        return None;
    }
    let sigma_angle = cfg.angle_sigma();
    let measured_range = (range + cfg.range_sigma * noise[0]).clamp(1e-3, cfg.max_range);
    Some(RadarDetection {
        timestamp,
        range: measured_range,
        azimuth: wrap_angle(az + sigma_angle * noise[1]),
        elevation: el + sigma_angle * noise[2],
        is_false_alarm: false,
    })
}

/// False alarms for one look: a Binomial(cells, rate) count, each uniform in
/// range, azimuth and elevation over the field of view.
pub fn false_alarms<R: Rng + ?Sized>(cfg: &RadarConfig, timestamp: f64, rng: &mut R) -> Vec<RadarDetection> {
    if cfg.false_alarm_rate <= 0.0 || cfg.cells_per_look == 0 {
        return Vec::new();
    }
    let count = Binomial::new(cfg.cells_per_look, cfg.false_alarm_rate)
        .map(|b| b.sample(rng))
        .unwrap_or(0);
    let half_az = 0.5 * cfg.field_of_view[0].to_radians();
    let half_el = 0.5 * cfg.field_of_view[1].to_radians();
    let (az0, el0) = (cfg.boresight[0].to_radians(), cfg.boresight[1].to_radians());
    (0..count)
        .map(|_| {
            let range = cfg.max_range * (1.0 - rng.random::<f64>());
            RadarDetection {
                timestamp,
                range,
                azimuth: wrap_angle(az0 + rng.random_range(-half_az..=half_az)),
                elevation: el0 + rng.random_range(-half_el..=half_el),
                is_false_alarm: true,
            }
        })
        .collect()
}

/// Everything the radar reports for one look, target first (if detected).
pub fn look<R: Rng + ?Sized>(
    cfg: &RadarConfig,
    timestamp: f64,
    true_position: [f64; 3],
    rng: &mut R,
) -> Vec<RadarDetection> {
    let mut out: Vec<RadarDetection> = detect(cfg, timestamp, true_position, rng).into_iter().collect();
    out.extend(false_alarms(cfg, timestamp, rng));
    out
}

/// Spherical to Cartesian (radar position added) with first-order covariance
/// propagation of `diag(range_sigma^2, angle_sigma^2, angle_sigma^2)`.
pub fn to_cartesian(det: &RadarDetection, cfg: &RadarConfig) -> CartesianMeasurement {
    let (r, az, el) = (det.range, det.azimuth, det.elevation);
    let (sa, ca) = az.sin_cos();
    let (se, ce) = el.sin_cos();
    let position = Vector3::new(
        cfg.position[0] + r * ce * ca,
        cfg.position[1] + r * ce * sa,
        cfg.position[2] + r * se,
    );
    let jacobian = Matrix3::new(
        ce * ca,
        -r * ce * sa,
        -r * se * ca,
        ce * sa,
        r * ce * ca,
        -r * se * sa,
        se,
        0.0,
        r * ce,
    );
    let sa2 = cfg.angle_sigma().powi(2);
    let spherical_cov = Matrix3::from_diagonal(&Vector3::new(cfg.range_sigma.powi(2), sa2, sa2));
    let cov = jacobian * spherical_cov * jacobian.transpose();
    CartesianMeasurement {
        timestamp: det.timestamp,
        position,
        covariance: 0.5 * (cov + cov.transpose()),
    }
}

/// CSV export: `t,range,azimuth,elevation,false_alarm`.
pub fn detections_to_csv(detections: &[RadarDetection]) -> String {
    let mut out = String::from("t,range,azimuth,elevation,false_alarm\n");
    for d in detections {
        out.push_str(&format!(
            "{:?},{:?},{:?},{:?},{}\n",
            d.timestamp, d.range, d.azimuth, d.elevation, d.is_false_alarm as u8
        ));
    }
    out
}

pub fn detections_from_csv(text: &str) -> Result<Vec<RadarDetection>, crate::Error> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<f64, crate::Error> {
            record
                .get(i)
                .ok_or_else(|| crate::Error::Format(format!("missing column {i}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| crate::Error::Format(e.to_string()))
        };
        out.push(RadarDetection {
            timestamp: field(0)?,
            range: field(1)?,
            azimuth: field(2)?,
            elevation: field(3)?,
            is_false_alarm: field(4)? != 0.0,
        });
    }
    Ok(out)
}
