//! Kinematic state, flight-mode transition matrices and trajectory synthesis.
//!
//! The state is ordered per axis: `[x, vx, ax, y, vy, ay, z, vz, az]`.
//! Turning modes carry the turn rate in a tenth slot.

use nalgebra::{DMatrix, SMatrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{first_entry_time, GeometryError, Region};
use crate::intent::IntentLabel;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Vector9 = SMatrix<f64, 9, 1>;

/// Below this |rate| the turning-mode matrices switch to their analytic limit.
pub const SMALL_TURN_RATE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("need at least 3 samples to synthesize a trajectory, got {0}")]
    TooFewSamples(usize),
    #[error("sample rate must be positive, got {0}")]
    BadSampleRate(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlightState {
    pub t: f64,
    pub s: [f64; 9],
}

impl FlightState {
    pub fn new(t: f64, s: [f64; 9]) -> Self {
        FlightState { t, s }
    }

    pub fn from_kinematics(t: f64, p: [f64; 3], v: [f64; 3], a: [f64; 3]) -> Self {
        let mut s = [0.0; 9];
        for axis in 0..3 {
            s[3 * axis] = p[axis];
            s[3 * axis + 1] = v[axis];
            s[3 * axis + 2] = a[axis];
        }
        FlightState { t, s }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.s[0], self.s[3], self.s[6]]
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.s[1], self.s[4], self.s[7]]
    }

    pub fn acceleration(&self) -> [f64; 3] {
        [self.s[2], self.s[5], self.s[8]]
    }

    pub fn vector(&self) -> Vector9 {
        Vector9::from_column_slice(&self.s)
    }

    pub fn speed(&self) -> f64 {
        let v = self.velocity();
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    pub fn horizontal_speed(&self) -> f64 {
        self.s[1].hypot(self.s[4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlightMode {
    Cv,
    Ca,
    Hct,
    #[serde(rename = "ct3d")]
    Ct3d,
}

impl FlightMode {
    pub fn is_turning(self) -> bool {
        matches!(self, FlightMode::Hct | FlightMode::Ct3d)
    }

    pub fn name(self) -> &'static str {
        match self {
            FlightMode::Cv => "CV",
            FlightMode::Ca => "CA",
            FlightMode::Hct => "HCT",
            FlightMode::Ct3d => "3DCT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeModel {
    pub mode: FlightMode,
    /// rad/s; ignored by CV and CA.
    pub turn_rate: f64,
    /// Sampling period T in seconds.
    pub period: f64,
    /// White acceleration (CV, HCT) or white jerk (CA, 3DCT) intensity.
    pub process_noise: f64,
    /// Intensity of the random walk on the turn-rate slot.
    pub turn_rate_noise: f64,
}

impl ModeModel {
    pub fn cv(period: f64) -> Self {
        ModeModel {
            mode: FlightMode::Cv,
            turn_rate: 0.0,
            period,
            process_noise: 0.05,
            turn_rate_noise: 0.0,
        }
    }

    pub fn ca(period: f64) -> Self {
        ModeModel {
            mode: FlightMode::Ca,
            turn_rate: 0.0,
            period,
            process_noise: 0.1,
            turn_rate_noise: 0.0,
        }
    }

    pub fn hct(turn_rate: f64, period: f64) -> Self {
        ModeModel {
            mode: FlightMode::Hct,
            turn_rate,
            period,
            process_noise: 0.05,
            turn_rate_noise: 0.01,
        }
    }

    pub fn ct3d(turn_rate: f64, period: f64) -> Self {
        ModeModel {
            mode: FlightMode::Ct3d,
            turn_rate,
            period,
            process_noise: 0.1,
            turn_rate_noise: 0.01,
        }
    }

    pub fn with_noise(mut self, process_noise: f64) -> Self {
        self.process_noise = process_noise;
        self
    }

    pub fn state_dim(&self) -> usize {
        if self.mode.is_turning() {
            10
        } else {
            9
        }
    }

    /// Transition over the full mode state (9 or 10 components).
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        transition_matrix(self)
    }

    /// Transition restricted to the 9 kinematic components.
    pub fn kinematic_transition(&self) -> Matrix9 {
        kinematic_transition(self)
    }

    pub fn kinematic_noise(&self) -> Matrix9 {
        process_noise(self)
    }
}

fn a_cv(t: f64) -> [[f64; 3]; 3] {
    [[1.0, t, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]
}

fn a_ca(t: f64) -> [[f64; 3]; 3] {
    [[1.0, t, 0.5 * t * t], [0.0, 1.0, t], [0.0, 0.0, 1.0]]
}

/// Per-axis 3D coordinated-turn block. Uses `1 - cos x = 2 sin^2(x/2)` to
/// keep the small-rate entries accurate.
fn a_ct3d(rate: f64, t: f64) -> [[f64; 3]; 3] {
    if rate.abs() < SMALL_TURN_RATE {
        return a_ca(t);
    }
    let wt = rate * t;
    let (s, c) = wt.sin_cos();
    let half = (0.5 * wt).sin();
    [
        [1.0, s / rate, 2.0 * half * half / (rate * rate)],
        [0.0, c, s / rate],
        [0.0, -rate * s, c],
    ]
}

/// Horizontal coordinated turn over `(x, vx, ax, y, vy, ay)`. Velocities
/// rotate by `rate * t`; accelerations are the centripetal values implied by
/// the rotated velocity and do not feed back (zero acceleration columns).
fn a_hct(rate: f64, t: f64) -> [[f64; 6]; 6] {
    let (p_same, p_cross, c, s, w) = if rate.abs() < SMALL_TURN_RATE {
        (t, 0.0, 1.0, 0.0, 0.0)
    } else {
        let wt = rate * t;
        let (s, c) = wt.sin_cos();
        let half = (0.5 * wt).sin();
        (s / rate, 2.0 * half * half / rate, c, s, rate)
    };
    [
        [1.0, p_same, 0.0, 0.0, -p_cross, 0.0],
        [0.0, c, 0.0, 0.0, -s, 0.0],
        [0.0, -w * s, 0.0, 0.0, -w * c, 0.0],
        [0.0, p_cross, 0.0, 1.0, p_same, 0.0],
        [0.0, s, 0.0, 0.0, c, 0.0],
        [0.0, w * c, 0.0, 0.0, -w * s, 0.0],
    ]
}

fn put_block3(m: &mut Matrix9, axis: usize, block: &[[f64; 3]; 3]) {
    for (r, row) in block.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m[(3 * axis + r, 3 * axis + c)] = *v;
        }
    }
}

pub fn kinematic_transition(model: &ModeModel) -> Matrix9 {
    let t = model.period;
    let mut m = Matrix9::zeros();
    match model.mode {
        FlightMode::Cv => (0..3).for_each(|axis| put_block3(&mut m, axis, &a_cv(t))),
        FlightMode::Ca => (0..3).for_each(|axis| put_block3(&mut m, axis, &a_ca(t))),
        FlightMode::Ct3d => {
            let block = a_ct3d(model.turn_rate, t);
            (0..3).for_each(|axis| put_block3(&mut m, axis, &block));
        }
        FlightMode::Hct => {
            let block = a_hct(model.turn_rate, t);
            for (r, row) in block.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    m[(r, c)] = *v;
                }
            }
            put_block3(&mut m, 2, &a_cv(t));
        }
    }
    m
}

/// Full transition matrix: 9x9 for CV/CA, 10x10 (with the turn-rate slot
/// carried through unchanged) for HCT/3DCT.
pub fn transition_matrix(model: &ModeModel) -> DMatrix<f64> {
    let k = kinematic_transition(model);
    let n = model.state_dim();
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (9, 9)).copy_from(&k);
    if n == 10 {
        m[(9, 9)] = 1.0;
    }
    m
}

fn q_white_acceleration(q: f64, t: f64) -> [[f64; 3]; 3] {
    [
        [q * t.powi(3) / 3.0, q * t * t / 2.0, 0.0],
        [q * t * t / 2.0, q * t, 0.0],
        [0.0, 0.0, q / t],
    ]
}

fn q_white_jerk(q: f64, t: f64) -> [[f64; 3]; 3] {
    [
        [q * t.powi(5) / 20.0, q * t.powi(4) / 8.0, q * t.powi(3) / 6.0],
        [q * t.powi(4) / 8.0, q * t.powi(3) / 3.0, q * t * t / 2.0],
        [q * t.powi(3) / 6.0, q * t * t / 2.0, q * t],
    ]
}

/// Process-noise covariance over the kinematic components.
///
/// CV and HCT use a continuous white-acceleration model on (position,
/// velocity) with the acceleration slot treated as white with variance q/T;
/// CA and 3DCT use a continuous white-jerk model.
pub fn process_noise(model: &ModeModel) -> Matrix9 {
    let (q, t) = (model.process_noise, model.period);
    let block = match model.mode {
        FlightMode::Cv | FlightMode::Hct => q_white_acceleration(q, t),
        FlightMode::Ca | FlightMode::Ct3d => q_white_jerk(q, t),
    };
    let mut m = Matrix9::zeros();
    (0..3).for_each(|axis| put_block3(&mut m, axis, &block));
    m
}

/// Lower-triangular factor of a 3x3 PSD block (used to draw correlated
/// noise). Zero pivots yield zero columns.
fn psd_factor3(b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut sum = b[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][j] = if sum > 0.0 { sum.sqrt() } else { 0.0 };
            } else {
                l[i][j] = if l[j][j] > 0.0 { sum / l[j][j] } else { 0.0 };
            }
        }
    }
    l
}

/// One noisy step `s_k = F s_{k-1} + w`. The turn-rate slot follows a random
/// walk for turning modes and is passed through untouched otherwise. The
/// matrix is built from `model.turn_rate`.
pub fn propagate<R: Rng + ?Sized>(
    state: &FlightState,
    turn_rate: f64,
    model: &ModeModel,
    rng: &mut R,
) -> (FlightState, f64) {
    let f = kinematic_transition(model);
    let mut next = f * state.vector();
    if model.process_noise > 0.0 {
        let (q, t) = (model.process_noise, model.period);
        let block = match model.mode {
            FlightMode::Cv | FlightMode::Hct => q_white_acceleration(q, t),
            FlightMode::Ca | FlightMode::Ct3d => q_white_jerk(q, t),
        };
        let l = psd_factor3(&block);
        for axis in 0..3 {
            let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            for r in 0..3 {
                next[3 * axis + r] += (0..=r).map(|c| l[r][c] * e[c]).sum::<f64>();
            }
        }
    }
    let mut rate = turn_rate;
    if model.mode.is_turning() && model.turn_rate_noise > 0.0 {
        let e: f64 = StandardNormal.sample(rng);
        rate += (model.turn_rate_noise * model.period).sqrt() * e;
    }
    let mut s = [0.0; 9];
    s.copy_from_slice(next.as_slice());
    (FlightState::new(state.t + model.period, s), rate)
}

/// Timestamped positions at a uniform period (planner output).
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPath {
    pub dt: f64,
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    /// Arc-length coordinate of every sample along the source polyline.
    pub arc_lengths: Vec<f64>,
}

impl TimedPath {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub intent: IntentLabel,
    pub dt: f64,
    pub states: Vec<FlightState>,
    pub turn_rates: Vec<f64>,
    /// Seconds from launch until the first sample inside the geo-fence;
    /// `f64::INFINITY` if it never enters.
    #[serde(with = "crate::serde_inf")]
    pub intrusion_time: f64,
    pub environment_id: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.states.last().map(|s| s.t).unwrap_or(0.0)
    }

    pub fn intrudes(&self) -> bool {
        self.intrusion_time.is_finite()
    }

    /// Position truncated to `dim` components.
    pub fn position(&self, k: usize, dim: usize) -> Vec<f64> {
        self.states[k].position()[..dim].to_vec()
    }
}

/// Symmetric moving average with the half-width shrunk at the ends so the
/// window stays centred (affine data passes through unchanged).
fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let slice = &values[i - h..=i + h];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Horizontal turn rate from planar velocity and acceleration.
pub fn horizontal_turn_rate(v: [f64; 3], a: [f64; 3]) -> f64 {
    let speed_sq = v[0] * v[0] + v[1] * v[1];
    if speed_sq < 0.01 {
        0.0
    } else {
        (v[0] * a[1] - v[1] * a[0]) / speed_sq
    }
}

/// Builds full kinematic ground truth from timed planner positions.
///
/// Positions are kept as sampled. Velocities and accelerations come from
/// central differences of the moving-average-smoothed positions (one-sided
/// at the ends).
pub fn synthesize_trajectory(
    path: &TimedPath,
    id: u64,
    intent: IntentLabel,
    smoothing_window: usize,
    geofence: &Region,
    environment_id: &str,
) -> Result<Trajectory, DynamicsError> {
    let n = path.len();
    if n < 3 {
        return Err(DynamicsError::TooFewSamples(n));
    }
    if !(path.dt > 0.0) {
        return Err(DynamicsError::BadSampleRate(1.0 / path.dt));
    }
    let dt = path.dt;
    let dim = path.positions[0].len();
    let mut states: Vec<FlightState> = (0..n)
        .map(|k| {
            let mut p = [0.0; 3];
            p[..dim].copy_from_slice(&path.positions[k]);
            FlightState::from_kinematics(k as f64 * dt, p, [0.0; 3], [0.0; 3])
        })
        .collect();
    for axis in 0..dim {
        let raw: Vec<f64> = path.positions.iter().map(|p| p[axis]).collect();
        let p = smooth(&raw, smoothing_window.max(1));
        for k in 0..n {
            let v = if k == 0 {
                (p[1] - p[0]) / dt
            } else if k == n - 1 {
                (p[n - 1] - p[n - 2]) / dt
            } else {
                (p[k + 1] - p[k - 1]) / (2.0 * dt)
            };
            let kc = k.clamp(1, n - 2);
            let a = (p[kc + 1] - 2.0 * p[kc] + p[kc - 1]) / (dt * dt);
            states[k].s[3 * axis + 1] = v;
            states[k].s[3 * axis + 2] = a;
        }
    }
    let turn_rates = states
        .iter()
        .map(|s| horizontal_turn_rate(s.velocity(), s.acceleration()))
        .collect();
    let intrusion_time = first_entry_time(
        path.positions
            .iter()
            .enumerate()
            .map(|(k, p)| (k as f64 * dt, &p[..geofence.dim()])),
        geofence,
    )?;
    Ok(Trajectory {
        id,
        intent,
        dt,
        states,
        turn_rates,
        intrusion_time,
        environment_id: environment_id.to_string(),
    })
}
