//! Simulation and inference toolkit for UAV intent near a geo-fence.
//!
//! The crate covers the whole chain from environment and intent description
//! through trajectory synthesis, radar measurement, IMM tracking and feature
//! extraction to a convolutional-recurrent intent classifier.

pub mod classifier;
pub mod dynamics;
pub mod env;
pub mod intent;
pub mod pipeline;
pub mod planner;
pub mod radar;
pub mod tracking;

pub use classifier::{Classifier, ClassifierError, Label, LossConfig, LossKind, TrainConfig};
pub use dynamics::{FlightMode, FlightState, ModeModel, TimedPath, Trajectory};
pub use env::{Environment, GeometryError, Region};
pub use intent::{Intent, IntentLabel, IntentLibrary, WaypointSequence};
pub use pipeline::{Dataset, ExperimentReport, PipelineConfig};
pub use planner::{Path, PlannerParams, PlanningError};
pub use radar::{RadarConfig, RadarDetection};
pub use tracking::{FeatureWindow, ImmState, ImmTracker, TrackPoint, TrackState, TrackingError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] env::GeometryError),
    #[error(transparent)]
    Intent(#[from] intent::IntentError),
    #[error(transparent)]
    Planning(#[from] planner::PlanningError),
    #[error(transparent)]
    Tracking(#[from] tracking::TrackingError),
    #[error(transparent)]
    Classifier(#[from] classifier::ClassifierError),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config serialization error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed input: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Serde adapter for times that may be infinite: `f64::INFINITY` is written
/// as `null` and read back from it.
pub mod serde_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            s.serialize_f64(*value)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
