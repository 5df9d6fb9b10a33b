//! Intent definitions: named critical regions, critical region ordered sets
//! (CROS) and the motion parameters that go with each intent.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Trajectory;
use crate::env::{Environment, Region};

/// Name of the region that stands for the geo-fence inside a library.
pub const GEOFENCE_REGION: &str = "G";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntentLabel(pub String);

impl IntentLabel {
    pub fn new(name: impl Into<String>) -> Self {
        IntentLabel(name.into())
    }
    pub fn direct_attack() -> Self {
        Self::new("direct_attack")
    }
    pub fn surveillance() -> Self {
        Self::new("surveillance")
    }
    pub fn criminal_harmful() -> Self {
        Self::new("criminal_harmful")
    }
    pub fn harmless() -> Self {
        Self::new("harmless")
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for IntentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntentError {
    #[error("unknown intent {0}")]
    UnknownIntent(String),
    #[error("intent {intent} references unknown region {region}")]
    UnknownRegion { intent: String, region: String },
    #[error("region {region} is not inside the environment bounds")]
    RegionOutsideEnvironment { region: String },
    #[error("intent {0} has no CROS alternatives")]
    NoAlternatives(String),
}

/// Ordered list of critical regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cros {
    pub regions: Vec<String>,
    #[serde(default)]
    pub delta_w: f64,
}

impl Cros {
    pub fn new<S: AsRef<str>>(regions: &[S]) -> Self {
        Cros {
            regions: regions.iter().map(|s| s.as_ref().to_string()).collect(),
            delta_w: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// [min, max] speed in m/s.
    pub speed_range: [f64; 2],
    pub sample_rate: f64,
    /// Waypoint-pass tolerance in meters.
    pub epsilon: f64,
    pub delta_m: f64,
}

impl MotionParams {
    pub fn new(min_speed: f64, max_speed: f64) -> Self {
        MotionParams {
            speed_range: [min_speed, max_speed],
            sample_rate: 10.0,
            epsilon: 2.0,
            delta_m: 0.05,
        }
    }

    pub fn is_valid(&self) -> bool {
        let [lo, hi] = self.speed_range;
        0.0 < lo && lo < hi && self.sample_rate > 0.0 && self.epsilon > 0.0
    }

    pub fn sample_speed<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.speed_range[0]..self.speed_range[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub id: IntentLabel,
    pub cros_alternatives: Vec<Cros>,
    pub motion: MotionParams,
}

impl Intent {
    /// Number of critical waypoints of the longest alternative.
    pub fn index_set_size(&self) -> usize {
        self.cros_alternatives.iter().map(Cros::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaypointSequence {
    pub intent: IntentLabel,
    /// Index into the intent's CROS alternatives.
    pub cros_index: usize,
    pub regions: Vec<String>,
    pub waypoints: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RegionsOverlap { a: String, b: String },
    OutsideBounds { region: String },
    ObstacleOverlap { region: String, obstacle: usize },
    EmptyCros { intent: String, alternative: usize },
    NoAlternatives { intent: String },
    UnknownRegion { intent: String, region: String },
    DimensionMismatch { region: String },
    InvalidMotion { intent: String },
    GeofenceMismatch,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A set of named critical regions (the geo-fence included, under `G`) and
/// the intents defined over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentLibrary {
    pub regions: BTreeMap<String, Region>,
    pub intents: Vec<Intent>,
}

/// Layout knobs for [`IntentLibrary::builtin`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibraryLayout {
    pub dimensionality: usize,
    /// Uniform scale applied to every region.
    pub scale: f64,
    /// Number of legs the harmless pattern flies between D1 and D2.
    pub harmless_legs: usize,
}

impl Default for LibraryLayout {
    fn default() -> Self {
        LibraryLayout {
            dimensionality: 2,
            scale: 1.0,
            harmless_legs: 3,
        }
    }
}

fn default_regions_2d() -> BTreeMap<String, Region> {
    let boxed = |x0: f64, x1: f64, y0: f64, y1: f64| Region {
        min: vec![x0, y0],
        max: vec![x1, y1],
    };
    BTreeMap::from([
        ("D1".to_string(), boxed(40.0, 60.0, 40.0, 60.0)),
        ("D2".to_string(), boxed(55.0, 70.0, 75.0, 100.0)),
        ("D3".to_string(), boxed(75.0, 100.0, 55.0, 70.0)),
        ("D4".to_string(), boxed(40.0, 60.0, 5.0, 25.0)),
        (GEOFENCE_REGION.to_string(), boxed(75.0, 100.0, 75.0, 100.0)),
    ])
}

/// Altitude band of each default 3D region.
fn altitude_band(name: &str) -> (f64, f64) {
    match name {
        GEOFENCE_REGION => (0.0, 30.0),
        "D2" | "D3" => (15.0, 40.0),
        _ => (10.0, 50.0),
    }
}

impl IntentLibrary {
    /// Four-intent library: direct attack, surveillance, criminal-harmful and
    /// harmless, over regions D1..D4 flanking the geo-fence.
    pub fn builtin(layout: LibraryLayout) -> Self {
        let mut regions = default_regions_2d();
        if layout.dimensionality == 3 {
            for (name, region) in regions.iter_mut() {
                let (lo, hi) = altitude_band(name);
                region.min.push(lo);
                region.max.push(hi);
            }
        }
        for region in regions.values_mut() {
            *region = region.scaled(layout.scale);
        }

        let harmless_pattern = |first: &str, second: &str| {
            let names: Vec<&str> = (0..=layout.harmless_legs.max(1))
                .map(|i| if i % 2 == 0 { first } else { second })
                .collect();
            Cros::new(&names)
        };

        let intents = vec![
            Intent {
                id: IntentLabel::direct_attack(),
                cros_alternatives: vec![
                    Cros::new(&["D1", "D2", GEOFENCE_REGION]),
                    Cros::new(&["D4", "D3", GEOFENCE_REGION]),
                ],
                motion: MotionParams::new(15.0, 25.0),
            },
            Intent {
                id: IntentLabel::surveillance(),
                cros_alternatives: vec![Cros::new(&["D1", "D2", "D3"]), Cros::new(&["D4", "D3", "D2"])],
                motion: MotionParams::new(5.0, 15.0),
            },
            Intent {
                id: IntentLabel::criminal_harmful(),
                cros_alternatives: vec![
                    Cros::new(&["D1", "D2", "D1"]),
                    Cros::new(&["D4", "D3", "D4"]),
                    Cros::new(&["D1", "D2", "D4"]),
                    Cros::new(&["D4", "D3", "D1"]),
                ],
                motion: MotionParams::new(5.0, 15.0),
            },
            Intent {
                id: IntentLabel::harmless(),
                cros_alternatives: vec![harmless_pattern("D1", "D2"), harmless_pattern("D2", "D1")],
                motion: MotionParams::new(5.0, 12.0),
            },
        ];
        IntentLibrary { regions, intents }
    }

    pub fn builtin_2d() -> Self {
        Self::builtin(LibraryLayout::default())
    }

    pub fn intent(&self, id: &IntentLabel) -> Result<&Intent, IntentError> {
        self.intents
            .iter()
            .find(|i| &i.id == id)
            .ok_or_else(|| IntentError::UnknownIntent(id.0.clone()))
    }

    pub fn region(&self, intent: &Intent, name: &str) -> Result<&Region, IntentError> {
        self.regions.get(name).ok_or_else(|| IntentError::UnknownRegion {
            intent: intent.id.0.clone(),
            region: name.to_string(),
        })
    }

    /// Checks one intent against the environment. Region-set checks
    /// (pairwise disjointness, containment, obstacle clearance) cover every
    /// region the intent references.
    pub fn validate_intent(&self, intent: &Intent, env: &Environment) -> ValidationReport {
        let mut report = ValidationReport::default();
        let id = intent.id.0.clone();
        if !intent.motion.is_valid() {
            report.violations.push(Violation::InvalidMotion { intent: id.clone() });
        }
        if intent.cros_alternatives.is_empty() {
            report.violations.push(Violation::NoAlternatives { intent: id.clone() });
        }
        let mut used: Vec<&str> = Vec::new();
        for (k, cros) in intent.cros_alternatives.iter().enumerate() {
            if cros.is_empty() {
                report.violations.push(Violation::EmptyCros {
                    intent: id.clone(),
                    alternative: k,
                });
            }
            for name in &cros.regions {
                if !self.regions.contains_key(name) {
                    report.violations.push(Violation::UnknownRegion {
                        intent: id.clone(),
                        region: name.clone(),
                    });
                } else if !used.contains(&name.as_str()) {
                    used.push(name);
                }
            }
        }
        self.check_regions(&used, env, &mut report);
        report
    }

    fn check_regions(&self, names: &[&str], env: &Environment, report: &mut ValidationReport) {
        for (i, a) in names.iter().enumerate() {
            let ra = &self.regions[*a];
            if ra.dim() != env.dimensionality {
                report
                    .violations
                    .push(Violation::DimensionMismatch { region: a.to_string() });
                continue;
            }
            if !env.bounds.contains_region(ra) {
                report
                    .violations
                    .push(Violation::OutsideBounds { region: a.to_string() });
            }
            for (k, obstacle) in env.obstacles.iter().enumerate() {
                if ra.overlaps(obstacle) {
                    report.violations.push(Violation::ObstacleOverlap {
                        region: a.to_string(),
                        obstacle: k,
                    });
                }
            }
            for b in &names[i + 1..] {
                if ra.overlaps(&self.regions[*b]) {
                    report.violations.push(Violation::RegionsOverlap {
                        a: a.to_string(),
                        b: b.to_string(),
                    });
                }
            }
        }
    }

    /// Validates every intent and the full region set.
    pub fn validate(&self, env: &Environment) -> ValidationReport {
        let mut report = ValidationReport::default();
        for intent in &self.intents {
            report.violations.extend(self.validate_intent(intent, env).violations);
        }
        let names: Vec<&str> = self.regions.keys().map(String::as_str).collect();
        let mut all = ValidationReport::default();
        self.check_regions(&names, env, &mut all);
        for v in all.violations {
            if !report.violations.contains(&v) {
                report.violations.push(v);
            }
        }
        if let Some(g) = self.regions.get(GEOFENCE_REGION) {
            if g != &env.geofence {
                report.violations.push(Violation::GeofenceMismatch);
            }
        }
        report
    }

    /// Picks a CROS alternative uniformly, then one waypoint uniformly inside
    /// each of its regions.
    pub fn sample_waypoints<R: Rng + ?Sized>(
        &self,
        intent: &Intent,
        env: &Environment,
        rng: &mut R,
    ) -> Result<WaypointSequence, IntentError> {
        if intent.cros_alternatives.is_empty() {
            return Err(IntentError::NoAlternatives(intent.id.0.clone()));
        }
        let cros_index = rng.random_range(0..intent.cros_alternatives.len());
        let cros = &intent.cros_alternatives[cros_index];
        let mut waypoints = Vec::with_capacity(cros.len());
        for name in &cros.regions {
            let region = self.region(intent, name)?;
            if region.dim() != env.dimensionality || !env.bounds.contains_region(region) {
                return Err(IntentError::RegionOutsideEnvironment { region: name.clone() });
            }
            let point = region
                .min
                .iter()
                .zip(&region.max)
                .map(|(lo, hi)| rng.random_range(*lo..*hi))
                .collect();
            waypoints.push(point);
        }
        Ok(WaypointSequence {
            intent: intent.id.clone(),
            cros_index,
            regions: cros.regions.clone(),
            waypoints,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, crate::Error> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String, crate::Error> {
        Ok(toml::to_string(self)?)
    }
}

/// True when the trajectory passes within `epsilon` of every waypoint in
/// order: there are sample indices `k_1 <= k_2 <= ...` with
/// `|r_n - p(k_n)| < epsilon`.
pub fn check_well_defined(traj: &Trajectory, wps: &WaypointSequence, epsilon: f64) -> bool {
    if traj.is_empty() {
        return false;
    }
    let mut k = 0;
    'waypoints: for wp in &wps.waypoints {
        let dim = wp.len();
        while k < traj.len() {
            let p = traj.states[k].position();
            let dist = (0..dim).map(|i| (p[i] - wp[i]).powi(2)).sum::<f64>().sqrt();
            if dist < epsilon {
                continue 'waypoints;
            }
            k += 1;
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FlightState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(c: &Cros) -> Vec<&str> {
        c.regions.iter().map(String::as_str).collect()
    }

    #[test]
    fn builtin_library_alternatives() {
        let lib = IntentLibrary::builtin_2d();
        assert_eq!(lib.intents.len(), 4);
        let da = lib.intent(&IntentLabel::direct_attack()).unwrap();
        let alts: Vec<Vec<&str>> = da.cros_alternatives.iter().map(names).collect();
        assert!(alts.contains(&vec!["D1", "D2", "G"]));
        assert!(alts.contains(&vec!["D4", "D3", "G"]));
        assert!(alts.iter().all(|a| *a.last().unwrap() == "G"));

        let ch = lib.intent(&IntentLabel::criminal_harmful()).unwrap();
        let alts: Vec<Vec<&str>> = ch.cros_alternatives.iter().map(names).collect();
        assert!(alts.contains(&vec!["D1", "D2", "D1"]));
        assert!(alts.contains(&vec!["D4", "D3", "D4"]));

        let sv = lib.intent(&IntentLabel::surveillance()).unwrap();
        assert!(sv.cros_alternatives.iter().all(|c| c.len() == 3));

        let hl = lib.intent(&IntentLabel::harmless()).unwrap();
        for c in &hl.cros_alternatives {
            assert_eq!(c.len(), 4);
            assert!(c.regions.iter().all(|r| r == "D1" || r == "D2"));
        }
    }

    #[test]
    fn builtin_library_validates() {
        for (dim, env) in [(2, Environment::example_2d()), (3, Environment::example_3d())] {
            for scale in [1.0, 10.0] {
                let lib = IntentLibrary::builtin(LibraryLayout {
                    dimensionality: dim,
                    scale,
                    ..Default::default()
                });
                let report = lib.validate(&env.scaled(scale));
                assert!(report.is_valid(), "{dim}D x{scale}: {:?}", report.violations);
            }
        }
    }

    #[test]
    fn overlapping_regions_reported() {
        let mut lib = IntentLibrary::builtin_2d();
        lib.regions
            .insert("D2".into(), Region::new(vec![50.0, 50.0], vec![70.0, 100.0]).unwrap());
        let env = Environment::example_2d();
        let intent = lib.intent(&IntentLabel::direct_attack()).unwrap();
        let report = lib.validate_intent(intent, &env);
        assert!(report.violations.contains(&Violation::RegionsOverlap {
            a: "D1".into(),
            b: "D2".into()
        }));
    }

    #[test]
    fn region_past_bounds_reported() {
        let mut lib = IntentLibrary::builtin_2d();
        lib.regions
            .insert("D4".into(), Region::new(vec![90.0, 5.0], vec![110.0, 25.0]).unwrap());
        let env = Environment::example_2d();
        let report = lib.validate(&env);
        assert!(report
            .violations
            .contains(&Violation::OutsideBounds { region: "D4".into() }));
        let intent = lib.intent(&IntentLabel::direct_attack()).unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = (0..20)
            .map(|_| lib.sample_waypoints(&intent, &env, &mut rng))
            .find(|r| r.is_err())
            .unwrap();
        assert_eq!(err, Err(IntentError::RegionOutsideEnvironment { region: "D4".into() }));
    }

    #[test]
    fn empty_cros_reported() {
        let mut lib = IntentLibrary::builtin_2d();
        lib.intents[0].cros_alternatives.push(Cros::new::<&str>(&[]));
        let report = lib.validate(&Environment::example_2d());
        assert!(report.violations.contains(&Violation::EmptyCros {
            intent: "direct_attack".into(),
            alternative: 2
        }));
    }

    #[test]
    fn direct_attack_waypoints_end_in_geofence() {
        let lib = IntentLibrary::builtin_2d();
        let env = Environment::example_2d();
        let intent = lib.intent(&IntentLabel::direct_attack()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wps = lib.sample_waypoints(intent, &env, &mut rng).unwrap();
        assert_eq!(wps.waypoints.len(), 3);
        assert!(env.geofence.contains(wps.waypoints.last().unwrap()).unwrap());

        let again = lib
            .sample_waypoints(intent, &env, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap();
        assert_eq!(wps, again);
    }

    #[test]
    fn surveillance_membership_monte_carlo() {
        let lib = IntentLibrary::builtin_2d();
        let env = Environment::example_2d();
        let intent = lib.intent(&IntentLabel::surveillance()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = 0usize;
        let mut total = 0usize;
        for _ in 0..10_000 {
            let wps = lib.sample_waypoints(intent, &env, &mut rng).unwrap();
            for (name, wp) in wps.regions.iter().zip(&wps.waypoints) {
                total += 1;
                hits += lib.regions[name].contains(wp).unwrap() as usize;
            }
        }
        assert_eq!(hits, total);
    }

    fn traj_through(points: &[[f64; 2]]) -> Trajectory {
        Trajectory {
            id: 0,
            intent: IntentLabel::harmless(),
            dt: 0.1,
            states: points
                .iter()
                .enumerate()
                .map(|(k, p)| FlightState::from_kinematics(k as f64 * 0.1, [p[0], p[1], 0.0], [0.0; 3], [0.0; 3]))
                .collect(),
            turn_rates: vec![0.0; points.len()],
            intrusion_time: f64::INFINITY,
            environment_id: "test".into(),
        }
    }

    fn wps(points: &[[f64; 2]]) -> WaypointSequence {
        WaypointSequence {
            intent: IntentLabel::harmless(),
            cros_index: 0,
            regions: vec![],
            waypoints: points.iter().map(|p| p.to_vec()).collect(),
        }
    }

    #[test]
    fn well_defined_checks() {
        let line: Vec<[f64; 2]> = (0..=100).map(|k| [k as f64, 0.0]).collect();
        let traj = traj_through(&line);
        assert!(check_well_defined(
            &traj,
            &wps(&[[10.0, 0.5], [50.0, 1.0], [99.0, 0.0]]),
            2.0
        ));
        // Middle waypoint 5 m off the line.
        assert!(!check_well_defined(
            &traj,
            &wps(&[[10.0, 0.0], [50.0, 5.0], [99.0, 0.0]]),
            2.0
        ));
        // Order matters.
        assert!(!check_well_defined(&traj, &wps(&[[90.0, 0.0], [10.0, 0.0]]), 2.0));
        // Vacuous tolerance.
        let single = traj_through(&[[0.0, 0.0]]);
        assert!(check_well_defined(
            &single,
            &wps(&[[90.0, 0.0], [10.0, 0.0], [3.0, 3.0]]),
            1e9
        ));
    }

    #[test]
    fn library_toml_round_trip() {
        let lib = IntentLibrary::builtin(LibraryLayout {
            dimensionality: 3,
            scale: 2.0,
            harmless_legs: 5,
        });
        let text = lib.to_toml().unwrap();
        let back = IntentLibrary::from_toml(&text).unwrap();
        assert_eq!(back, lib);
    }
}
