//! End-to-end orchestration: dataset generation, persistence, stratified
//! trajectory-level splits, class balancing, per-split training and report
//! aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    self, argmax, expected_misclassification_cost, intrusion_cost_metric, Classifier, History, TrainConfig,
};
use crate::dynamics::{synthesize_trajectory, Trajectory};
use crate::env::Environment;
use crate::intent::{IntentLabel, IntentLibrary, LibraryLayout};
use crate::planner::{chain_waypoints, time_parameterize, PlannerParams};
use crate::radar::{detections_from_csv, detections_to_csv, look, RadarConfig, RadarDetection};
use crate::tracking::{
    extract_features, group_looks, point_features, track_from_csv, track_to_csv, window_stride, FeatureWindow,
    ImmTracker, TrackPoint, TrackerConfig, WindowLabel,
};
use crate::{Error, Result};

/// Version tag of the dataset manifest.
pub const DATASET_FORMAT: &str = "uav-intent-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Window length W in track steps.
    pub window: usize,
    pub overlap: f64,
    /// Evenly spaced subset of each training trajectory's windows; `None`
    /// keeps all of them. Validation always uses every window.
    pub max_train_windows_per_trajectory: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window: 150,
            overlap: 0.9,
            max_train_windows_per_trajectory: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub n_splits: usize,
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_splits: 10,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub name: String,
    pub master_seed: u64,
    pub dimensionality: usize,
    /// Scale applied to the built-in environment, library and planner.
    pub scale: f64,
    pub sample_rate: f64,
    pub smoothing_window: usize,
    /// Trajectories to generate per intent name.
    pub counts: BTreeMap<String, usize>,
    pub harmless_legs: usize,
    pub environment: Option<Environment>,
    pub library: Option<IntentLibrary>,
    pub planner: Option<PlannerParams>,
    pub radar: Option<RadarConfig>,
    pub tracker: TrackerConfig,
    pub features: FeatureConfig,
    pub training: TrainConfig,
    pub splits: SplitConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            name: "desk".into(),
            master_seed: 2024,
            dimensionality: 2,
            scale: 10.0,
            sample_rate: 10.0,
            smoothing_window: 5,
            counts: BTreeMap::from([
                (IntentLabel::direct_attack().0, 20),
                (IntentLabel::harmless().0, 20),
                (IntentLabel::surveillance().0, 20),
            ]),
            harmless_legs: 3,
            environment: None,
            library: None,
            planner: None,
            radar: None,
            tracker: TrackerConfig::default(),
            features: FeatureConfig::default(),
            training: TrainConfig::default(),
            splits: SplitConfig::default(),
        }
    }
}

/// Config pieces with every default filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub environment: Environment,
    pub library: IntentLibrary,
    pub planner: PlannerParams,
    pub radar: RadarConfig,
    pub tracker: TrackerConfig,
}

impl PipelineConfig {
    /// Raw dataset sizes of the reference 2D experiment.
    pub fn reference_2d() -> Self {
        PipelineConfig {
            name: "reference-2d".into(),
            counts: BTreeMap::from([
                (IntentLabel::direct_attack().0, 156),
                (IntentLabel::harmless().0, 162),
                (IntentLabel::surveillance().0, 162),
            ]),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.counts.is_empty() || self.counts.values().any(|c| *c == 0) {
            return bad("every configured intent needs a positive trajectory count".into());
        }
        if self.dimensionality != 2 && self.dimensionality != 3 {
            return bad(format!("dimensionality {} is not 2 or 3", self.dimensionality));
        }
        if !(self.scale > 0.0) || !(self.sample_rate > 0.0) {
            return bad("scale and sample rate must be positive".into());
        }
        if self.splits.n_splits == 0 {
            return bad("n_splits must be at least 1".into());
        }
        let f = self.splits.validation_fraction;
        if !(f > 0.0 && f < 1.0) {
            return bad(format!("validation fraction {f} outside (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.features.overlap) || self.features.window == 0 {
            return bad("window must be positive and overlap in [0, 1)".into());
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let environment = match &self.environment {
            Some(e) => e.clone(),
            None => Environment::example(self.dimensionality)?.scaled(self.scale),
        };
        environment.validate()?;
        let library = match &self.library {
            Some(l) => l.clone(),
            None => IntentLibrary::builtin(LibraryLayout {
                dimensionality: self.dimensionality,
                scale: self.scale,
                harmless_legs: self.harmless_legs,
            }),
        };
        let planner = self
            .planner
            .clone()
            .unwrap_or_else(|| PlannerParams::default().scaled(self.scale));
        let radar = self
            .radar
            .clone()
            .unwrap_or_else(|| RadarConfig::for_environment(&environment));
        let tracker = TrackerConfig {
            dimensionality: self.dimensionality,
            period: 1.0 / self.sample_rate,
            ..self.tracker.clone()
        };
        for name in self.counts.keys() {
            library.intent(&IntentLabel::new(name.as_str()))?;
        }
        Ok(Resolved {
            environment,
            library,
            planner,
            radar,
            tracker,
        })
    }

    /// Intents with a configured count, in sorted order.
    pub fn classes(&self) -> Vec<IntentLabel> {
        self.counts.keys().map(|k| IntentLabel::new(k.as_str())).collect()
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trajectory_seed(master: u64, id: u64) -> u64 {
    splitmix64(master ^ id)
}

fn stream_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ stream).wrapping_add(index))
}

const SPLIT_STREAM: u64 = 0x5EED_5011;
const BALANCE_STREAM: u64 = 0x5EED_BA1A;
const TRAIN_STREAM: u64 = 0x5EED_7EA1;

/// Ids are `intent_ordinal * ID_BLOCK + index`, so changing one intent's
/// count leaves the other intents' trajectories unchanged.
pub const ID_BLOCK: u64 = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub trajectory: Trajectory,
    pub cros_index: usize,
    pub speed: f64,
    pub detections: Vec<RadarDetection>,
    pub track: Vec<TrackPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTrajectory {
    pub id: u64,
    pub intent: IntentLabel,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<TrajectoryRecord>,
    pub skipped: Vec<SkippedTrajectory>,
}

impl Dataset {
    pub fn count(&self, intent: &IntentLabel) -> usize {
        self.records.iter().filter(|r| &r.trajectory.intent == intent).count()
    }

    /// Fraction of each intent's trajectories that enter the geo-fence.
    pub fn intrusion_frequencies(&self) -> BTreeMap<IntentLabel, f64> {
        let mut tally: BTreeMap<IntentLabel, (usize, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = tally.entry(r.trajectory.intent.clone()).or_default();
            e.0 += 1;
            e.1 += r.trajectory.intrudes() as usize;
        }
        tally.into_iter().map(|(k, (n, h))| (k, h as f64 / n as f64)).collect()
    }
}

/// Runs the tracker over every look of a trajectory-length detection stream.
pub fn track_detections(
    detections: &[RadarDetection],
    looks: usize,
    tracker: &TrackerConfig,
    radar: &RadarConfig,
) -> Result<Vec<TrackPoint>> {
    let grouped = group_looks(detections, 0.0, tracker.period, looks);
    let mut imm = ImmTracker::new(tracker.clone(), radar.clone());
    Ok(imm.run(grouped.iter().map(|(t, d)| (*t, d.as_slice())))?)
}

/// Generates one trajectory record from its id and derived seed.
pub fn generate_trajectory(
    cfg: &PipelineConfig,
    resolved: &Resolved,
    intent: &IntentLabel,
    id: u64,
) -> Result<TrajectoryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed(cfg.master_seed, id));
    let env = &resolved.environment;
    let definition = resolved.library.intent(intent)?;
    let wps = resolved.library.sample_waypoints(definition, env, &mut rng)?;
    let path = chain_waypoints(&wps, env, &resolved.planner, &mut rng)?;
    let speed = definition.motion.sample_speed(&mut rng);
    let timed = time_parameterize(&path, speed, cfg.sample_rate)?;
    let trajectory = synthesize_trajectory(
        &timed,
        id,
        intent.clone(),
        cfg.smoothing_window,
        &env.geofence,
        &cfg.name,
    )?;
    let detections: Vec<RadarDetection> = trajectory
        .states
        .iter()
        .flat_map(|s| look(&resolved.radar, s.t, s.position(), &mut rng))
        .collect();
    let track = track_detections(&detections, trajectory.len(), &resolved.tracker, &resolved.radar)?;
    Ok(TrajectoryRecord {
        trajectory,
        cros_index: wps.cros_index,
        speed,
        detections,
        track,
    })
}

/// Generates every configured trajectory. Planning and tracking failures
/// skip the trajectory with a logged reason; an intent left with no
/// trajectories fails the run.
pub fn generate_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let resolved = cfg.resolve()?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (ordinal, (name, count)) in cfg.counts.iter().enumerate() {
        let intent = IntentLabel::new(name.as_str());
        let before = records.len();
        for k in 0..*count {
            let id = ordinal as u64 * ID_BLOCK + k as u64;
            match generate_trajectory(cfg, &resolved, &intent, id) {
                Ok(r) => records.push(r),
                Err(e @ (Error::Planning(_) | Error::Tracking(_) | Error::Dynamics(_))) => {
                    log::warn!("trajectory {id} ({intent}) skipped: {e}");
                    skipped.push(SkippedTrajectory {
                        id,
                        intent: intent.clone(),
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        if records.len() == before {
            return Err(Error::Format(format!("intent {intent} produced no trajectories")));
        }
        log::info!("{intent}: {} trajectories", records.len() - before);
    }
    Ok(Dataset { records, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    id: u64,
    intent: IntentLabel,
    cros_index: usize,
    speed: f64,
    samples: usize,
    track_points: usize,
    #[serde(with = "crate::serde_inf")]
    intrusion_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: PipelineConfig,
    trajectories: Vec<ManifestEntry>,
    skipped: Vec<SkippedTrajectory>,
}

fn feature_header(dimensionality: usize) -> Vec<&'static str> {
    if dimensionality == 3 {
        vec!["t", "vx", "vy", "vz", "ax", "ay", "az", "turn_rate"]
    } else {
        vec!["t", "vx", "vy", "ax", "ay", "turn_rate"]
    }
}

/// Per-step feature rows of a track.
pub fn features_to_csv(track: &[TrackPoint], dimensionality: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(feature_header(dimensionality))?;
    for p in track {
        let mut row = vec![p.t.to_string()];
        row.extend(point_features(p, dimensionality).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))
}

/// Writes the dataset under `dir`: `manifest.json`, `trajectories.jsonl`,
/// `detections/<id>.csv`, `tracks/<id>.csv`, `features/<id>.csv` and
/// `windows.csv` for the configured window length and overlap.
pub fn write_dataset(dir: &FsPath, cfg: &PipelineConfig, dataset: &Dataset) -> Result<()> {
    for sub in ["detections", "tracks", "features"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        config: cfg.clone(),
        trajectories: dataset
            .records
            .iter()
            .map(|r| ManifestEntry {
                id: r.trajectory.id,
                intent: r.trajectory.intent.clone(),
                cros_index: r.cros_index,
                speed: r.speed,
                samples: r.trajectory.len(),
                track_points: r.track.len(),
                intrusion_time: r.trajectory.intrusion_time,
            })
            .collect(),
        skipped: dataset.skipped.clone(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    let mut lines = String::new();
    for r in &dataset.records {
        lines += &serde_json::to_string(&r.trajectory)?;
        lines.push('\n');
    }
    fs::write(dir.join("trajectories.jsonl"), lines)?;
    for r in &dataset.records {
        let id = r.trajectory.id;
        fs::write(
            dir.join(format!("detections/{id}.csv")),
            detections_to_csv(&r.detections),
        )?;
        fs::write(dir.join(format!("tracks/{id}.csv")), track_to_csv(&r.track))?;
        fs::write(
            dir.join(format!("features/{id}.csv")),
            features_to_csv(&r.track, cfg.dimensionality)?,
        )?;
    }
    write_windows_index(&dir.join("windows.csv"), cfg, dataset)
}

fn write_windows_index(path: &FsPath, cfg: &PipelineConfig, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "trajectory_id",
        "intent",
        "start_time",
        "end_time",
        "intrusion_flag",
        "intrusion_time",
    ])?;
    for win in dataset_windows(dataset, cfg.dimensionality, cfg.features.window, cfg.features.overlap)
        .values()
        .flatten()
    {
        w.write_record([
            win.trajectory_id.to_string(),
            win.intent.to_string(),
            win.window_start_time.to_string(),
            win.window_end_time.to_string(),
            win.intrusion_flag.to_string(),
            win.intrusion_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset written by [`write_dataset`] with its config.
pub fn read_dataset(dir: &FsPath) -> Result<(PipelineConfig, Dataset)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format {}", manifest.format)));
    }
    let text = fs::read_to_string(dir.join("trajectories.jsonl"))?;
    let mut trajectories: BTreeMap<u64, Trajectory> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let t: Trajectory = serde_json::from_str(line)?;
        trajectories.insert(t.id, t);
    }
    let mut records = Vec::with_capacity(manifest.trajectories.len());
    for entry in &manifest.trajectories {
        let trajectory = trajectories
            .remove(&entry.id)
            .ok_or_else(|| Error::Format(format!("trajectory {} missing from trajectories.jsonl", entry.id)))?;
        let detections = detections_from_csv(&fs::read_to_string(dir.join(format!("detections/{}.csv", entry.id)))?)?;
        let track = track_from_csv(&fs::read_to_string(dir.join(format!("tracks/{}.csv", entry.id)))?)?;
        records.push(TrajectoryRecord {
            trajectory,
            cros_index: entry.cros_index,
            speed: entry.speed,
            detections,
            track,
        });
    }
    Ok((
        manifest.config,
        Dataset {
            records,
            skipped: manifest.skipped,
        },
    ))
}

/// Re-runs the tracker on every record's stored detections.
pub fn retrack(dataset: &mut Dataset, cfg: &PipelineConfig) -> Result<()> {
    let resolved = cfg.resolve()?;
    for r in &mut dataset.records {
        r.track = track_detections(&r.detections, r.trajectory.len(), &resolved.tracker, &resolved.radar)?;
    }
    Ok(())
}

pub fn record_windows(r: &TrajectoryRecord, dimensionality: usize, window: usize, overlap: f64) -> Vec<FeatureWindow> {
    let label = WindowLabel {
        trajectory_id: r.trajectory.id,
        intent: r.trajectory.intent.clone(),
        intrusion_time: r.trajectory.intrusion_time,
    };
    extract_features(&r.track, dimensionality, window, overlap, &label)
}

/// Windows of every record keyed by trajectory id.
pub fn dataset_windows(
    dataset: &Dataset,
    dimensionality: usize,
    window: usize,
    overlap: f64,
) -> BTreeMap<u64, Vec<FeatureWindow>> {
    dataset
        .records
        .iter()
        .map(|r| (r.trajectory.id, record_windows(r, dimensionality, window, overlap)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
}

/// Independent stratified splits at trajectory granularity: each class
/// contributes `round(n * fraction)` (at least one) trajectories to
/// validation and at least one to training.
pub fn split_dataset(
    items: &[(u64, IntentLabel)],
    n_splits: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<Vec<Split>> {
    let mut by_class: BTreeMap<&IntentLabel, Vec<u64>> = BTreeMap::new();
    for (id, intent) in items {
        by_class.entry(intent).or_default().push(*id);
    }
    for (class, ids) in &by_class {
        if ids.len() < 2 {
            return Err(Error::Format(format!(
                "intent {class} has {} trajectories; at least 2 are needed to split",
                ids.len()
            )));
        }
    }
    (0..n_splits)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, SPLIT_STREAM, s as u64));
            let mut split = Split {
                train: Vec::new(),
                validation: Vec::new(),
            };
            for ids in by_class.values() {
                let mut ids = ids.clone();
                ids.sort_unstable();
                ids.shuffle(&mut rng);
                let n_val = ((ids.len() as f64 * validation_fraction).round() as usize).clamp(1, ids.len() - 1);
                split.validation.extend_from_slice(&ids[..n_val]);
                split.train.extend_from_slice(&ids[n_val..]);
            }
            split.train.sort_unstable();
            split.validation.sort_unstable();
            Ok(split)
        })
        .collect()
}

/// Downsamples every class to the smallest class's window count. Kept
/// windows stay in their input order.
pub fn balance<'a>(windows: &[&'a FeatureWindow], seed: u64) -> Vec<&'a FeatureWindow> {
    let mut by_class: BTreeMap<&IntentLabel, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_class.entry(&w.intent).or_default().push(i);
    }
    let Some(min) = by_class.values().map(Vec::len).min() else {
        return Vec::new();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, BALANCE_STREAM, 0));
    let mut keep: Vec<usize> = Vec::with_capacity(min * by_class.len());
    for idx in by_class.values() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..min]);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| windows[i]).collect()
}

/// Evenly spaced subset of at most `cap` windows.
pub fn thin<T>(items: &[T], cap: Option<usize>) -> Vec<&T> {
    match cap {
        Some(cap) if items.len() > cap && cap > 0 => (0..cap).map(|i| &items[i * items.len() / cap]).collect(),
        _ => items.iter().collect(),
    }
}

/// Anything that maps windows to posteriors over the trainer's classes.
pub trait Predictor {
    fn classes(&self) -> &[IntentLabel];
    fn predict(&self, windows: &[&FeatureWindow]) -> Result<Vec<Vec<f64>>>;
}

impl Predictor for Classifier {
    fn classes(&self) -> &[IntentLabel] {
        &self.classes
    }

    fn predict(&self, windows: &[&FeatureWindow]) -> Result<Vec<Vec<f64>>> {
        Ok(Classifier::predict(self, windows)?)
    }
}

pub trait Trainer {
    type Model: Predictor;
    fn train(
        &self,
        train: &[&FeatureWindow],
        validation: &[&FeatureWindow],
        classes: &[IntentLabel],
        seed: u64,
    ) -> Result<(Self::Model, History)>;
}

/// Trains the convolutional-recurrent network.
#[derive(Debug, Clone)]
pub struct NetworkTrainer(pub TrainConfig);

impl Trainer for NetworkTrainer {
    type Model = Classifier;

    fn train(
        &self,
        train: &[&FeatureWindow],
        validation: &[&FeatureWindow],
        classes: &[IntentLabel],
        seed: u64,
    ) -> Result<(Classifier, History)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(classifier::train(
            train,
            validation,
            Some(classes.to_vec()),
            &self.0,
            &mut rng,
        )?)
    }
}

/// Harness self-test stub that reads the answer off the window label.
#[derive(Debug, Clone, Default)]
pub struct OracleTrainer;

#[derive(Debug, Clone)]
pub struct OracleModel(pub Vec<IntentLabel>);

impl Predictor for OracleModel {
    fn classes(&self) -> &[IntentLabel] {
        &self.0
    }

    fn predict(&self, windows: &[&FeatureWindow]) -> Result<Vec<Vec<f64>>> {
        Ok(windows
            .iter()
            .map(|w| self.0.iter().map(|c| (c == &w.intent) as u8 as f64).collect())
            .collect())
    }
}

impl Trainer for OracleTrainer {
    type Model = OracleModel;

    fn train(
        &self,
        _: &[&FeatureWindow],
        _: &[&FeatureWindow],
        classes: &[IntentLabel],
        _: u64,
    ) -> Result<(OracleModel, History)> {
        Ok((OracleModel(classes.to_vec()), History::default()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    pub accuracy: f64,
    pub train_windows: usize,
    pub validation_windows: usize,
    pub validation_trajectories: Vec<u64>,
    /// `[true][predicted]` window counts.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub master_seed: u64,
    pub dimensionality: usize,
    pub window: usize,
    pub overlap: f64,
    pub classes: Vec<IntentLabel>,
    pub trajectories: BTreeMap<IntentLabel, usize>,
    pub splits: Vec<SplitResult>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over splits (0 for a single split).
    pub std_accuracy: f64,
    /// Summed over splits, `[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub expected_misclassification_cost: f64,
    /// Intrusion frequency per intent over the whole dataset.
    pub intrusion_frequency: BTreeMap<IntentLabel, f64>,
    pub intrusion_cost: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    if values.iter().all(|v| *v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub struct ExperimentOutcome<M> {
    pub report: ExperimentReport,
    pub splits: Vec<Split>,
    pub models: Vec<M>,
    pub histories: Vec<History>,
}

/// Trains and evaluates one model per split with the configured window
/// length, balancing each training set by downsampling.
pub fn run_experiment<T: Trainer>(
    cfg: &PipelineConfig,
    dataset: &Dataset,
    trainer: &T,
) -> Result<ExperimentOutcome<T::Model>> {
    cfg.validate()?;
    let classes = cfg.classes();
    let windows = dataset_windows(dataset, cfg.dimensionality, cfg.features.window, cfg.features.overlap);
    let items: Vec<(u64, IntentLabel)> = dataset
        .records
        .iter()
        .filter(|r| !windows[&r.trajectory.id].is_empty())
        .map(|r| (r.trajectory.id, r.trajectory.intent.clone()))
        .collect();
    let splits = split_dataset(
        &items,
        cfg.splits.n_splits,
        cfg.splits.validation_fraction,
        cfg.master_seed,
    )?;
    let class_of = |label: &IntentLabel| {
        classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Format(format!("intent {label} is not a configured class")))
    };

    let mut results = Vec::new();
    let mut models = Vec::new();
    let mut histories = Vec::new();
    for (s, split) in splits.iter().enumerate() {
        let train: Vec<&FeatureWindow> = split
            .train
            .iter()
            .flat_map(|id| thin(&windows[id], cfg.features.max_train_windows_per_trajectory))
            .collect();
        let train = balance(&train, stream_seed(cfg.master_seed, BALANCE_STREAM, s as u64));
        let validation: Vec<&FeatureWindow> = split.validation.iter().flat_map(|id| &windows[id]).collect();
        let seed = stream_seed(cfg.master_seed, TRAIN_STREAM, s as u64);
        let (model, history) = trainer
            .train(&train, &validation, &classes, seed)
            .map_err(|e| match e {
                Error::Classifier(c) => Error::Format(format!("split {s}: {c}")),
                other => other,
            })?;
        let probs = model.predict(&validation)?;
        let mut confusion = vec![vec![0u64; classes.len()]; classes.len()];
        for (w, p) in validation.iter().zip(&probs) {
            confusion[class_of(&w.intent)?][argmax(p)] += 1;
        }
        let hits: u64 = (0..classes.len()).map(|k| confusion[k][k]).sum();
        let accuracy = if validation.is_empty() {
            0.0
        } else {
            hits as f64 / validation.len() as f64
        };
        log::info!(
            "split {s}: accuracy {accuracy:.4} ({} train / {} validation windows)",
            train.len(),
            validation.len()
        );
        results.push(SplitResult {
            split: s,
            accuracy,
            train_windows: train.len(),
            validation_windows: validation.len(),
            validation_trajectories: split.validation.clone(),
            confusion,
        });
        models.push(model);
        histories.push(history);
    }

    let accuracies: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accuracies);
    let mut confusion = vec![vec![0u64; classes.len()]; classes.len()];
    for r in &results {
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                confusion[i][j] += c;
            }
        }
    }
    let loss = &cfg.training.loss;
    let flags: Vec<(usize, bool)> = dataset
        .records
        .iter()
        .map(|r| Ok((class_of(&r.trajectory.intent)?, r.trajectory.intrudes())))
        .collect::<Result<_>>()?;
    let report = ExperimentReport {
        name: cfg.name.clone(),
        master_seed: cfg.master_seed,
        dimensionality: cfg.dimensionality,
        window: cfg.features.window,
        overlap: cfg.features.overlap,
        trajectories: classes.iter().map(|c| (c.clone(), dataset.count(c))).collect(),
        classes: classes.clone(),
        splits: results,
        accuracies,
        mean_accuracy,
        std_accuracy,
        expected_misclassification_cost: expected_misclassification_cost(&confusion, &loss.costs(classes.len())),
        confusion,
        intrusion_frequency: dataset.intrusion_frequencies(),
        intrusion_cost: intrusion_cost_metric(&flags, &loss.intrusion_costs(classes.len())),
    };
    Ok(ExperimentOutcome {
        report,
        splits,
        models,
        histories,
    })
}

/// Tracks a replayed detection stream and returns the posterior at every
/// completed window. A stream shorter than one window gives no rows.
pub fn infer_stream(
    model: &Classifier,
    detections: &[RadarDetection],
    cfg: &PipelineConfig,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let resolved = cfg.resolve()?;
    let period = resolved.tracker.period;
    let last = detections.iter().map(|d| d.timestamp).fold(f64::NEG_INFINITY, f64::max);
    if !last.is_finite() {
        log::warn!("empty detection stream");
        return Ok(Vec::new());
    }
    let looks = (last / period).round() as usize + 1;
    let track = track_detections(detections, looks, &resolved.tracker, &resolved.radar)?;
    if track.len() < model.architecture.window {
        log::warn!(
            "track of {} points is shorter than the {}-step window",
            track.len(),
            model.architecture.window
        );
    }
    let stride = window_stride(model.architecture.window, cfg.features.overlap);
    Ok(model.posterior_evolution(&track, cfg.dimensionality, stride)?)
}

pub fn posterior_to_csv(series: &[(f64, Vec<f64>)], classes: &[IntentLabel]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["tau".to_string()];
    header.extend(classes.iter().map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for (tau, p) in series {
        let mut row = vec![tau.to_string()];
        row.extend(p.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))
}

/// Writes `report.json`, per-split training histories and, for the first
/// held-out Direct Attack trajectory of each split, its posterior evolution.
pub fn write_report(
    dir: &FsPath,
    cfg: &PipelineConfig,
    dataset: &Dataset,
    outcome: &ExperimentOutcome<Classifier>,
    emit_plots: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)? + "\n",
    )?;
    if !emit_plots {
        return Ok(());
    }
    let by_id: BTreeMap<u64, &TrajectoryRecord> = dataset.records.iter().map(|r| (r.trajectory.id, r)).collect();
    for (s, (history, model)) in outcome.histories.iter().zip(&outcome.models).enumerate() {
        let mut buf = Vec::new();
        history.to_csv(&mut buf)?;
        fs::write(dir.join(format!("history_split{s}.csv")), buf)?;
        let attack = outcome.splits[s]
            .validation
            .iter()
            .filter_map(|id| by_id.get(id))
            .find(|r| r.trajectory.intent == IntentLabel::direct_attack());
        if let Some(r) = attack {
            let stride = window_stride(model.architecture.window, cfg.features.overlap);
            let series = model.posterior_evolution(&r.track, cfg.dimensionality, stride)?;
            fs::write(
                dir.join(format!("posterior_split{s}_{}.csv", r.trajectory.id)),
                posterior_to_csv(&series, &model.classes)?,
            )?;
        }
    }
    Ok(())
}

/// Distinct trajectory ids that appear on both sides of a split.
pub fn leaked_ids(split: &Split) -> BTreeSet<u64> {
    let train: BTreeSet<u64> = split.train.iter().copied().collect();
    split
        .validation
        .iter()
        .copied()
        .filter(|id| train.contains(id))
        .collect()
}
