//! Kalman and IMM filtering of converted radar measurements, single-target
//! track management and windowed feature extraction.

use nalgebra::{Cholesky, DMatrix, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{FlightMode, FlightState, Matrix9, ModeModel, Vector9};
use crate::intent::IntentLabel;
use crate::radar::{to_cartesian, CartesianMeasurement, RadarConfig, RadarDetection};

type Matrix3x9 = SMatrix<f64, 3, 9>;
type Matrix9x3 = SMatrix<f64, 9, 3>;

/// 99.7% quantile of the chi-square distribution with 3 degrees of freedom.
pub const GATE_3DOF_997: f64 = 13.9314;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("innovation covariance is not positive definite at t = {0}")]
    NumericalFailure(f64),
    #[error("measurement at t = {measurement} does not follow track time {track} by one period")]
    TimestampMismatch { track: f64, measurement: f64 },
    #[error("mode bank is empty or inconsistent: {0}")]
    InvalidBank(String),
}

/// Position-extraction measurement matrix.
fn measurement_matrix() -> Matrix3x9 {
    let mut h = Matrix3x9::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 3)] = 1.0;
    h[(2, 6)] = 1.0;
    h
}

fn symmetrize(p: &Matrix9) -> Matrix9 {
    (p + p.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub mean: Vector9,
    pub covariance: Matrix9,
    pub timestamp: f64,
    /// Normalized innovation squared of the last update (0 after a pure
    /// prediction).
    pub innovation_stats: f64,
}

impl TrackState {
    pub fn new(mean: Vector9, covariance: Matrix9, timestamp: f64) -> Self {
        TrackState {
            mean,
            covariance: symmetrize(&covariance),
            timestamp,
            innovation_stats: 0.0,
        }
    }

    pub fn flight_state(&self) -> FlightState {
        let mut s = [0.0; 9];
        s.copy_from_slice(self.mean.as_slice());
        FlightState::new(self.timestamp, s)
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.mean[0], self.mean[3], self.mean[6])
    }
}

/// Innovation of a predicted track against a measurement.
struct Innovation {
    residual: Vector3<f64>,
    cov_chol: Cholesky<f64, nalgebra::U3>,
    nis: f64,
    log_likelihood: f64,
}

fn innovation(pred: &TrackState, meas: &CartesianMeasurement) -> Result<Innovation, TrackingError> {
    let h = measurement_matrix();
    let residual = meas.position - h * pred.mean;
    let s = h * pred.covariance * h.transpose() + meas.covariance;
    let s = (s + s.transpose()) * 0.5;
    let cov_chol = Cholesky::new(s).ok_or(TrackingError::NumericalFailure(meas.timestamp))?;
    let nis = residual.dot(&cov_chol.solve(&residual));
    let log_det: f64 = 2.0 * cov_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_likelihood = -0.5 * (nis + log_det + 3.0 * (2.0 * std::f64::consts::PI).ln());
    Ok(Innovation {
        residual,
        cov_chol,
        nis,
        log_likelihood,
    })
}

/// Time update only.
pub fn kf_predict(track: &TrackState, model: &ModeModel) -> TrackState {
    let f = model.kinematic_transition();
    let q = model.kinematic_noise();
    TrackState {
        mean: f * track.mean,
        covariance: symmetrize(&(f * track.covariance * f.transpose() + q)),
        timestamp: track.timestamp + model.period,
        innovation_stats: 0.0,
    }
}

/// Measurement update with the Joseph-form covariance. Returns the updated
/// track and the Gaussian log-likelihood of the measurement.
fn kf_update(pred: &TrackState, meas: &CartesianMeasurement) -> Result<(TrackState, f64), TrackingError> {
    let h = measurement_matrix();
    let inn = innovation(pred, meas)?;
    // K = P H^T S^-1, computed as (S^-1 H P)^T since S is symmetric.
    let pht: Matrix9x3 = pred.covariance * h.transpose();
    let k: Matrix9x3 = inn.cov_chol.solve(&pht.transpose()).transpose();
    let i_kh = Matrix9::identity() - k * h;
    let cov = i_kh * pred.covariance * i_kh.transpose() + k * meas.covariance * k.transpose();
    Ok((
        TrackState {
            mean: pred.mean + k * inn.residual,
            covariance: symmetrize(&cov),
            timestamp: pred.timestamp,
            innovation_stats: inn.nis,
        },
        inn.log_likelihood,
    ))
}

fn check_timing(track_t: f64, period: f64, meas_t: f64) -> Result<(), TrackingError> {
    let expected = track_t + period;
    if (meas_t - expected).abs() > 1e-6 * period.max(1.0) {
        return Err(TrackingError::TimestampMismatch {
            track: track_t,
            measurement: meas_t,
        });
    }
    Ok(())
}

/// One predict/update cycle of a single mode-matched filter.
pub fn kf_step(
    track: &TrackState,
    model: &ModeModel,
    measurement: &CartesianMeasurement,
) -> Result<TrackState, TrackingError> {
    check_timing(track.timestamp, model.period, measurement.timestamp)?;
    kf_update(&kf_predict(track, model), measurement).map(|(t, _)| t)
}

/// Normalized innovation squared of a measurement against the one-step
/// prediction of `track` under `model`.
pub fn predicted_nis(
    track: &TrackState,
    model: &ModeModel,
    measurement: &CartesianMeasurement,
) -> Result<f64, TrackingError> {
    innovation(&kf_predict(track, model), measurement).map(|i| i.nis)
}

/// Fixed-rate mode bank and Markov switching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub turn_rate: f64,
    pub self_transition: f64,
    pub q_cv: f64,
    pub q_ca: f64,
    pub q_turn: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            turn_rate: 0.2,
            self_transition: 0.99,
            q_cv: 0.05,
            q_ca: 0.1,
            q_turn: 0.05,
        }
    }
}

impl BankConfig {
    /// `{CV, CA, HCT(+w), HCT(-w)}` in 2D. In 3D the coordinated-turn block
    /// depends on the rate only through its square, so a single `3DCT(W)`
    /// filter covers both turn directions: `{CV, CA, 3DCT(W)}`.
    pub fn bank(&self, dimensionality: usize, period: f64) -> Vec<ModeModel> {
        let mut bank = vec![
            ModeModel::cv(period).with_noise(self.q_cv),
            ModeModel::ca(period).with_noise(self.q_ca),
        ];
        if dimensionality == 3 {
            bank.push(ModeModel::ct3d(self.turn_rate, period).with_noise(self.q_ca));
        } else {
            bank.push(ModeModel::hct(self.turn_rate, period).with_noise(self.q_turn));
            bank.push(ModeModel::hct(-self.turn_rate, period).with_noise(self.q_turn));
        }
        bank
    }

    /// Self-transition on the diagonal, the remainder spread uniformly.
    pub fn transition_matrix(&self, modes: usize) -> DMatrix<f64> {
        if modes == 1 {
            return DMatrix::from_element(1, 1, 1.0);
        }
        let off = (1.0 - self.self_transition) / (modes - 1) as f64;
        DMatrix::from_fn(modes, modes, |i, j| if i == j { self.self_transition } else { off })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImmState {
    pub per_mode: Vec<TrackState>,
    pub mode_probabilities: Vec<f64>,
    /// Row `i` holds the switching probabilities out of mode `i`.
    pub transition_matrix: DMatrix<f64>,
    pub mode_bank: Vec<ModeModel>,
    /// Set when every mode likelihood underflowed on the last update and
    /// uniform likelihoods were used instead.
    pub likelihood_fallback: bool,
}

impl ImmState {
    /// Every mode starts from the same track with the given prior.
    pub fn new(
        initial: TrackState,
        mode_bank: Vec<ModeModel>,
        transition_matrix: DMatrix<f64>,
        mode_probabilities: Vec<f64>,
    ) -> Result<Self, TrackingError> {
        let m = mode_bank.len();
        if m == 0 {
            return Err(TrackingError::InvalidBank("empty".into()));
        }
        if transition_matrix.shape() != (m, m) || mode_probabilities.len() != m {
            return Err(TrackingError::InvalidBank("shape mismatch".into()));
        }
        for row in transition_matrix.row_iter() {
            if (row.sum() - 1.0).abs() > 1e-12 || row.iter().any(|p| *p < 0.0) {
                return Err(TrackingError::InvalidBank(
                    "transition rows must be distributions".into(),
                ));
            }
        }
        let period = mode_bank[0].period;
        if mode_bank.iter().any(|mm| mm.period != period) {
            return Err(TrackingError::InvalidBank("modes disagree on the period".into()));
        }
        Ok(ImmState {
            per_mode: vec![initial; m],
            mode_probabilities,
            transition_matrix,
            mode_bank,
            likelihood_fallback: false,
        })
    }

    pub fn with_uniform_prior(
        initial: TrackState,
        mode_bank: Vec<ModeModel>,
        transition_matrix: DMatrix<f64>,
    ) -> Result<Self, TrackingError> {
        let m = mode_bank.len();
        Self::new(initial, mode_bank, transition_matrix, vec![1.0 / m as f64; m])
    }

    pub fn period(&self) -> f64 {
        self.mode_bank[0].period
    }

    pub fn timestamp(&self) -> f64 {
        self.per_mode[0].timestamp
    }

    /// Interaction step: mixed initial conditions per mode and the predicted
    /// mode probabilities `c_j`.
    fn mix(&self) -> (Vec<TrackState>, Vec<f64>) {
        let m = self.per_mode.len();
        let pi = &self.transition_matrix;
        let mu = &self.mode_probabilities;
        let c: Vec<f64> = (0..m).map(|j| (0..m).map(|i| pi[(i, j)] * mu[i]).sum()).collect();
        let mixed = (0..m)
            .map(|j| {
                let w: Vec<f64> = (0..m)
                    .map(|i| if c[j] > 0.0 { pi[(i, j)] * mu[i] / c[j] } else { 0.0 })
                    .collect();
                let mut mean = Vector9::zeros();
                for i in 0..m {
                    mean += self.per_mode[i].mean * w[i];
                }
                let mut cov = Matrix9::zeros();
                for i in 0..m {
                    let d = self.per_mode[i].mean - mean;
                    cov += (self.per_mode[i].covariance + d * d.transpose()) * w[i];
                }
                TrackState {
                    mean,
                    covariance: cov,
                    timestamp: self.per_mode[j].timestamp,
                    innovation_stats: self.per_mode[j].innovation_stats,
                }
            })
            .collect();
        (mixed, c)
    }
}

/// Full IMM cycle: mixing, mode-matched filtering, likelihood weighting and
/// normalization.
pub fn imm_step(imm: &ImmState, measurement: &CartesianMeasurement) -> Result<ImmState, TrackingError> {
    check_timing(imm.timestamp(), imm.period(), measurement.timestamp)?;
    let (mixed, c) = imm.mix();
    let mut per_mode = Vec::with_capacity(mixed.len());
    let mut log_l = Vec::with_capacity(mixed.len());
    for (track, model) in mixed.iter().zip(&imm.mode_bank) {
        let (updated, ll) = kf_update(&kf_predict(track, model), measurement)?;
        per_mode.push(updated);
        log_l.push(ll);
    }
    let (mode_probabilities, likelihood_fallback) = reweight(&c, &log_l);
    Ok(ImmState {
        per_mode,
        mode_probabilities,
        transition_matrix: imm.transition_matrix.clone(),
        mode_bank: imm.mode_bank.clone(),
        likelihood_fallback,
    })
}

/// Mixing and prediction with no measurement (missed detection).
pub fn imm_predict(imm: &ImmState) -> ImmState {
    let (mixed, c) = imm.mix();
    let per_mode = mixed
        .iter()
        .zip(&imm.mode_bank)
        .map(|(t, m)| kf_predict(t, m))
        .collect();
    let total: f64 = c.iter().sum();
    ImmState {
        per_mode,
        mode_probabilities: c.iter().map(|p| p / total).collect(),
        transition_matrix: imm.transition_matrix.clone(),
        mode_bank: imm.mode_bank.clone(),
        likelihood_fallback: false,
    }
}

/// Posterior mode probabilities from prior weights and log-likelihoods.
fn reweight(prior: &[f64], log_l: &[f64]) -> (Vec<f64>, bool) {
    let max = log_l
        .iter()
        .zip(prior)
        .filter(|(_, p)| **p > 0.0)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut fallback = !max.is_finite();
    let mut w: Vec<f64> = if fallback {
        prior.to_vec()
    } else {
        prior.iter().zip(log_l).map(|(p, l)| p * (l - max).exp()).collect()
    };
    let mut total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        fallback = true;
        w = prior.to_vec();
        total = w.iter().sum();
    }
    let mut probs: Vec<f64> = w.iter().map(|x| x / total).collect();
    // Absorb the rounding residue into the largest entry.
    let residue = 1.0 - probs.iter().sum::<f64>();
    let k = (0..probs.len())
        .max_by(|a, b| probs[*a].total_cmp(&probs[*b]))
        .unwrap_or(0);
    probs[k] = (probs[k] + residue).max(0.0);
    (probs, fallback)
}

/// Probability-weighted combination of the mode estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedEstimate {
    pub state: FlightState,
    pub covariance: Matrix9,
    /// Signed turn-rate estimate in rad/s.
    pub turn_rate: f64,
    pub mode_probabilities: Vec<f64>,
}

pub fn combined_estimate(imm: &ImmState) -> CombinedEstimate {
    let mu = &imm.mode_probabilities;
    let mut mean = Vector9::zeros();
    for (t, p) in imm.per_mode.iter().zip(mu) {
        mean += t.mean * *p;
    }
    let mut cov = Matrix9::zeros();
    for (t, p) in imm.per_mode.iter().zip(mu) {
        let d = t.mean - mean;
        cov += (t.covariance + d * d.transpose()) * *p;
    }
    let mut turn_rate = 0.0;
    for ((t, model), p) in imm.per_mode.iter().zip(&imm.mode_bank).zip(mu) {
        turn_rate += p * match model.mode {
            FlightMode::Hct => model.turn_rate,
            FlightMode::Ct3d => {
                let m = &t.mean;
                let cross = m[1] * m[5] - m[4] * m[2];
                model.turn_rate.abs() * if cross < 0.0 { -1.0 } else { 1.0 }
            }
            FlightMode::Cv | FlightMode::Ca => 0.0,
        };
    }
    let mut s = [0.0; 9];
    s.copy_from_slice(mean.as_slice());
    CombinedEstimate {
        state: FlightState::new(imm.timestamp(), s),
        covariance: symmetrize(&cov),
        turn_rate,
        mode_probabilities: mu.clone(),
    }
}

/// One tracker output per radar look once a track exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub t: f64,
    pub state: [f64; 9],
    pub turn_rate: f64,
    pub mode_probabilities: Vec<f64>,
    /// Whether a detection was associated on this look.
    pub updated: bool,
}

impl TrackPoint {
    fn from_estimate(est: &CombinedEstimate, updated: bool) -> Self {
        TrackPoint {
            t: est.state.t,
            state: est.state.s,
            turn_rate: est.turn_rate,
            mode_probabilities: est.mode_probabilities.clone(),
            updated,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.state[0], self.state[3], self.state[6]]
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.state[1], self.state[4], self.state[7]]
    }

    pub fn acceleration(&self) -> [f64; 3] {
        [self.state[2], self.state[5], self.state[8]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub bank: BankConfig,
    pub dimensionality: usize,
    pub period: f64,
    pub gate: f64,
    /// Largest speed implied by a detection pair that may start a track.
    pub init_max_speed: f64,
    pub init_covariance_scale: f64,
    /// Prior 1-sigma of the acceleration at track start.
    pub init_accel_sigma: f64,
    /// Consecutive looks with detections but no gated one before a
    /// replacement track is started alongside the coasting one.
    pub reacquire_after: usize,
    /// Consecutive looks without an associated detection after which the
    /// track is terminated.
    pub drop_after: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            bank: BankConfig::default(),
            dimensionality: 2,
            period: 0.1,
            gate: GATE_3DOF_997,
            init_max_speed: 50.0,
            init_covariance_scale: 10.0,
            init_accel_sigma: 3.0,
            reacquire_after: 5,
            drop_after: 20,
        }
    }
}

/// Single-target IMM tracker driven look by look.
///
/// A track starts from a two-point pair and is reported only once a third
/// detection falls inside its gate. Misses are prediction-only steps; after
/// `drop_after` of them in a row the track is terminated and nothing is
/// reported until a new one is confirmed.
#[derive(Debug, Clone)]
pub struct ImmTracker {
    pub config: TrackerConfig,
    pub radar: RadarConfig,
    imm: Option<ImmState>,
    /// Two-point start awaiting its confirming detection.
    tentative: Option<ImmState>,
    /// Detections of the previous look, candidates for two-point start.
    candidates: Vec<CartesianMeasurement>,
    rejected_streak: usize,
    missed: usize,
}

impl ImmTracker {
    pub fn new(config: TrackerConfig, radar: RadarConfig) -> Self {
        ImmTracker {
            config,
            radar,
            imm: None,
            tentative: None,
            candidates: Vec::new(),
            rejected_streak: 0,
            missed: 0,
        }
    }

    pub fn state(&self) -> Option<&ImmState> {
        self.imm.as_ref()
    }

    /// Two-point differencing start with inflated covariance.
    pub fn initial_track(&self, first: &CartesianMeasurement, second: &CartesianMeasurement) -> TrackState {
        let dt = second.timestamp - first.timestamp;
        let v = (second.position - first.position) / dt;
        let mut mean = Vector9::zeros();
        let mut cov = Matrix9::zeros();
        let r1 = &first.covariance;
        let r2 = &second.covariance;
        let accel_var = self.config.init_accel_sigma.powi(2);
        for a in 0..3 {
            mean[3 * a] = second.position[a];
            mean[3 * a + 1] = v[a];
            for b in 0..3 {
                cov[(3 * a, 3 * b)] = r2[(a, b)];
                cov[(3 * a, 3 * b + 1)] = r2[(a, b)] / dt;
                cov[(3 * a + 1, 3 * b)] = r2[(a, b)] / dt;
                cov[(3 * a + 1, 3 * b + 1)] = (r1[(a, b)] + r2[(a, b)]) / (dt * dt);
            }
            cov[(3 * a + 2, 3 * a + 2)] = accel_var;
        }
        TrackState::new(mean, cov * self.config.init_covariance_scale, second.timestamp)
    }

    /// Slowest previous-to-current detection pair under `init_max_speed`.
    fn start_from_candidates(&self, measurements: &[CartesianMeasurement]) -> Result<Option<ImmState>, TrackingError> {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, a) in self.candidates.iter().enumerate() {
            for (j, b) in measurements.iter().enumerate() {
                let dt = b.timestamp - a.timestamp;
                if dt <= 0.0 {
                    continue;
                }
                let speed = (b.position - a.position).norm() / dt;
                if speed <= self.config.init_max_speed && best.is_none_or(|(s, _, _)| speed < s) {
                    best = Some((speed, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else {
            return Ok(None);
        };
        let track = self.initial_track(&self.candidates[i], &measurements[j]);
        let bank = self.config.bank.bank(self.config.dimensionality, self.config.period);
        let pi = self.config.bank.transition_matrix(bank.len());
        Ok(Some(ImmState::with_uniform_prior(track, bank, pi)?))
    }

    /// Index of the gated measurement with the smallest NIS over the bank.
    fn associate(&self, imm: &ImmState, measurements: &[CartesianMeasurement]) -> Result<Option<usize>, TrackingError> {
        let mut chosen: Option<(f64, usize)> = None;
        for (k, m) in measurements.iter().enumerate() {
            let mut min_nis = f64::INFINITY;
            for (track, model) in imm.per_mode.iter().zip(&imm.mode_bank) {
                min_nis = min_nis.min(predicted_nis(track, model, m)?);
            }
            if min_nis <= self.config.gate && chosen.is_none_or(|(n, _)| min_nis < n) {
                chosen = Some((min_nis, k));
            }
        }
        Ok(chosen.map(|(_, k)| k))
    }

    /// Processes one look. Returns the combined estimate while a confirmed
    /// track exists.
    pub fn step(&mut self, t: f64, detections: &[RadarDetection]) -> Result<Option<TrackPoint>, TrackingError> {
        let measurements: Vec<CartesianMeasurement> = detections
            .iter()
            .map(|d| CartesianMeasurement {
                timestamp: t,
                ..to_cartesian(d, &self.radar)
            })
            .collect();

        if let Some(tentative) = self.tentative.take() {
            if let Some(k) = self.associate(&tentative, &measurements)? {
                let mut confirmed = imm_step(&tentative, &measurements[k])?;
                confirmed.per_mode.iter_mut().for_each(|s| s.timestamp = t);
                self.imm = Some(confirmed);
                self.rejected_streak = 0;
                self.missed = 0;
                self.candidates = measurements;
                let est = combined_estimate(self.imm.as_ref().expect("just confirmed"));
                return Ok(Some(TrackPoint::from_estimate(&est, true)));
            }
        }

        let Some(imm) = self.imm.as_ref() else {
            self.tentative = self.start_from_candidates(&measurements)?;
            self.candidates = measurements;
            return Ok(None);
        };

        let next = match self.associate(imm, &measurements)? {
            Some(k) => {
                self.rejected_streak = 0;
                self.missed = 0;
                Some(imm_step(imm, &measurements[k])?)
            }
            None => {
                if !measurements.is_empty() {
                    self.rejected_streak += 1;
                }
                self.missed += 1;
                None
            }
        };
        let updated = next.is_some();
        let mut next = next.unwrap_or_else(|| imm_predict(imm));
        next.per_mode.iter_mut().for_each(|s| s.timestamp = t);

        if self.missed >= self.config.drop_after {
            self.imm = None;
            self.rejected_streak = 0;
            self.missed = 0;
            self.tentative = self.start_from_candidates(&measurements)?;
            self.candidates = measurements;
            return Ok(None);
        }
        if !updated && self.rejected_streak >= self.config.reacquire_after {
            self.tentative = self.start_from_candidates(&measurements)?;
        }
        self.imm = Some(next);
        self.candidates = measurements;
        let est = combined_estimate(self.imm.as_ref().expect("track exists"));
        Ok(Some(TrackPoint::from_estimate(&est, updated)))
    }

    /// Runs over a sequence of looks `(t, detections)`.
    pub fn run<'a, I>(&mut self, looks: I) -> Result<Vec<TrackPoint>, TrackingError>
    where
        I: IntoIterator<Item = (f64, &'a [RadarDetection])>,
    {
        let mut out = Vec::new();
        for (t, dets) in looks {
            if let Some(p) = self.step(t, dets)? {
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Groups detections into looks by timestamp, keeping empty looks on the
/// `period` grid from `t0` to `t_end`.
pub fn group_looks(
    detections: &[RadarDetection],
    t0: f64,
    period: f64,
    looks: usize,
) -> Vec<(f64, Vec<RadarDetection>)> {
    let mut out: Vec<(f64, Vec<RadarDetection>)> = (0..looks).map(|k| (t0 + k as f64 * period, Vec::new())).collect();
    for d in detections {
        let k = ((d.timestamp - t0) / period).round();
        if k >= 0.0 && (k as usize) < looks {
            out[k as usize].1.push(*d);
        }
    }
    out
}

/// Track points as CSV: `t,x,vx,ax,y,vy,ay,z,vz,az,turn_rate,updated,p0..`.
pub fn track_to_csv(points: &[TrackPoint]) -> String {
    let modes = points.first().map(|p| p.mode_probabilities.len()).unwrap_or(0);
    let mut out = String::from("t,x,vx,ax,y,vy,ay,z,vz,az,turn_rate,updated");
    for m in 0..modes {
        out.push_str(&format!(",p{m}"));
    }
    out.push('\n');
    for p in points {
        out.push_str(&format!("{:?}", p.t));
        for v in p.state.iter().chain(std::iter::once(&p.turn_rate)) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{}", p.updated as u8));
        for v in &p.mode_probabilities {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn track_from_csv(text: &str) -> Result<Vec<TrackPoint>, crate::Error> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let values = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| crate::Error::Format(e.to_string()))?;
        if values.len() < 12 {
            return Err(crate::Error::Format(format!("track row has {} columns", values.len())));
        }
        let mut state = [0.0; 9];
        state.copy_from_slice(&values[1..10]);
        out.push(TrackPoint {
            t: values[0],
            state,
            turn_rate: values[10],
            updated: values[11] != 0.0,
            mode_probabilities: values[12..].to_vec(),
        });
    }
    Ok(out)
}

/// Per-step classifier features of a track point: `(vx, vy, ax, ay, w)` in
/// 2D and `(vx, vy, vz, ax, ay, az, w)` in 3D.
pub fn point_features(p: &TrackPoint, dimensionality: usize) -> Vec<f64> {
    let (v, a) = (p.velocity(), p.acceleration());
    if dimensionality == 3 {
        vec![v[0], v[1], v[2], a[0], a[1], a[2], p.turn_rate]
    } else {
        vec![v[0], v[1], a[0], a[1], p.turn_rate]
    }
}

pub fn feature_width(dimensionality: usize) -> usize {
    if dimensionality == 3 {
        7
    } else {
        5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    /// `rows x width` values, row-major.
    pub features: Vec<f64>,
    pub rows: usize,
    pub width: usize,
    pub intent: IntentLabel,
    pub intrusion_flag: bool,
    /// Trajectory intrusion time; infinite if it never enters.
    #[serde(with = "crate::serde_inf")]
    pub intrusion_time: f64,
    pub window_start_time: f64,
    pub window_end_time: f64,
    pub trajectory_id: u64,
}

impl FeatureWindow {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.width..(r + 1) * self.width]
    }
}

pub fn window_stride(window: usize, overlap: f64) -> usize {
    ((window as f64 * (1.0 - overlap)).round() as usize).max(1)
}

pub fn window_count(len: usize, window: usize, overlap: f64) -> usize {
    if window == 0 || len < window {
        0
    } else {
        (len - window) / window_stride(window, overlap) + 1
    }
}

/// Metadata attached to every window cut from one trajectory's track.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLabel {
    pub trajectory_id: u64,
    pub intent: IntentLabel,
    pub intrusion_time: f64,
}

/// Splits a track where reporting stopped: any step longer than 1.5 times
/// the track's shortest step starts a new segment.
pub fn track_segments(points: &[TrackPoint]) -> Vec<&[TrackPoint]> {
    let step = points
        .windows(2)
        .map(|p| p[1].t - p[0].t)
        .filter(|dt| *dt > 0.0)
        .fold(f64::INFINITY, f64::min);
    let mut segments = Vec::new();
    let mut start = 0;
    for k in 1..points.len() {
        if points[k].t - points[k - 1].t > 1.5 * step {
            segments.push(&points[start..k]);
            start = k;
        }
    }
    if start < points.len() {
        segments.push(&points[start..]);
    }
    segments
}

/// Sliding windows of `window` consecutive track points. Windows never
/// span a gap between track segments.
pub fn extract_features(
    points: &[TrackPoint],
    dimensionality: usize,
    window: usize,
    overlap: f64,
    label: &WindowLabel,
) -> Vec<FeatureWindow> {
    let width = feature_width(dimensionality);
    let stride = window_stride(window, overlap);
    let mut out = Vec::new();
    for segment in track_segments(points) {
        let rows: Vec<Vec<f64>> = segment.iter().map(|p| point_features(p, dimensionality)).collect();
        out.extend((0..window_count(segment.len(), window, overlap)).map(|w| {
            let start = w * stride;
            FeatureWindow {
                features: rows[start..start + window].concat(),
                rows: window,
                width,
                intent: label.intent.clone(),
                intrusion_flag: label.intrusion_time.is_finite(),
                intrusion_time: label.intrusion_time,
                window_start_time: segment[start].t,
                window_end_time: segment[start + window - 1].t,
                trajectory_id: label.trajectory_id,
            }
        }));
    }
    out
}

/// Converted measurement with the radar covariance; used by tests and the
/// benches to feed filters directly from truth.
pub fn measurement_at(cfg: &RadarConfig, t: f64, det: &RadarDetection) -> CartesianMeasurement {
    CartesianMeasurement {
        timestamp: t,
        ..to_cartesian(det, cfg)
    }
}

pub fn identity_measurement(t: f64, position: [f64; 3], sigma: f64) -> CartesianMeasurement {
    CartesianMeasurement {
        timestamp: t,
        position: Vector3::from(position),
        covariance: Matrix3::identity() * sigma * sigma,
    }
}
