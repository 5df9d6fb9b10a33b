//! Environment geometry: axis-aligned regions, the geo-fence, obstacles and
//! the containment / collision / intrusion queries built on them.
//!
//! Every region is a closed axis-aligned box. Containment is inclusive on the
//! faces; overlap between two regions means their interiors intersect, so
//! boxes that only share a face (the geo-fence and the border strips of the
//! default layout) are considered disjoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate region: min {min:?} is not strictly below max {max:?}")]
    DegenerateRegion { min: Vec<f64>, max: Vec<f64> },
    #[error("unsupported dimensionality {0} (expected 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("environment invariant violated: {0}")]
    InvalidEnvironment(String),
    #[error("trajectory is empty")]
    EmptyTrajectory,
}

/// Closed axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Region {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self, GeometryError> {
        let region = Region { min, max };
        region.validate()?;
        Ok(region)
    }

    /// Square/cube `[lo, hi]^dim`.
    pub fn cube(lo: f64, hi: f64, dim: usize) -> Result<Self, GeometryError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.min.len() != self.max.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.min.len(),
                got: self.max.len(),
            });
        }
        if self.min.len() != 2 && self.min.len() != 3 {
            return Err(GeometryError::UnsupportedDimension(self.min.len()));
        }
        let ok = self
            .min
            .iter()
            .zip(&self.max)
            .all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo < hi);
        if !ok {
            return Err(GeometryError::DegenerateRegion {
                min: self.min.clone(),
                max: self.max.clone(),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Edge lengths per axis.
    pub fn extent(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(a, b)| b - a).collect()
    }

    pub fn contains(&self, point: &[f64]) -> Result<bool, GeometryError> {
        if point.len() != self.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim(),
                got: point.len(),
            });
        }
        Ok(self.contains_unchecked(point))
    }

    pub(crate) fn contains_unchecked(&self, point: &[f64]) -> bool {
        point
            .iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(p, (lo, hi))| *p >= *lo && *p <= *hi)
    }

    /// True when `other` lies inside `self` (faces may touch).
    pub fn contains_region(&self, other: &Region) -> bool {
        self.dim() == other.dim()
            && other
                .min
                .iter()
                .zip(&other.max)
                .zip(self.min.iter().zip(&self.max))
                .all(|((olo, ohi), (lo, hi))| olo >= lo && ohi <= hi)
    }

    /// True when the interiors intersect. Shared faces do not count.
    pub fn overlaps(&self, other: &Region) -> bool {
        self.dim() == other.dim()
            && self
                .min
                .iter()
                .zip(&self.max)
                .zip(other.min.iter().zip(&other.max))
                .all(|((alo, ahi), (blo, bhi))| alo < bhi && blo < ahi)
    }

    /// Uniform scaling about the origin.
    pub fn scaled(&self, factor: f64) -> Region {
        Region {
            min: self.min.iter().map(|v| v * factor).collect(),
            max: self.max.iter().map(|v| v * factor).collect(),
        }
    }

    /// Exact slab test of the closed segment `p1 -> p2` against the box.
    pub fn intersects_segment(&self, p1: &[f64], p2: &[f64]) -> bool {
        let mut t_lo = 0.0_f64;
        let mut t_hi = 1.0_f64;
        for axis in 0..self.dim() {
            let origin = p1[axis];
            let delta = p2[axis] - origin;
            let (lo, hi) = (self.min[axis], self.max[axis]);
            if delta == 0.0 {
                if origin < lo || origin > hi {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / delta;
            let mut t0 = (lo - origin) * inv;
            let mut t1 = (hi - origin) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_lo = t_lo.max(t0);
            t_hi = t_hi.min(t1);
            if t_lo > t_hi {
                return false;
            }
        }
        true
    }
}

pub fn contains(region: &Region, point: &[f64]) -> Result<bool, GeometryError> {
    region.contains(point)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub bounds: Region,
    pub geofence: Region,
    #[serde(default)]
    pub obstacles: Vec<Region>,
    pub dimensionality: usize,
}

impl Environment {
    pub fn new(bounds: Region, geofence: Region, obstacles: Vec<Region>) -> Result<Self, GeometryError> {
        let env = Environment {
            dimensionality: bounds.dim(),
            bounds,
            geofence,
            obstacles,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.dimensionality != 2 && self.dimensionality != 3 {
            return Err(GeometryError::UnsupportedDimension(self.dimensionality));
        }
        for region in std::iter::once(&self.bounds)
            .chain(std::iter::once(&self.geofence))
            .chain(&self.obstacles)
        {
            region.validate()?;
            if region.dim() != self.dimensionality {
                return Err(GeometryError::DimensionMismatch {
                    expected: self.dimensionality,
                    got: region.dim(),
                });
            }
        }
        if !self.bounds.contains_region(&self.geofence) {
            return Err(GeometryError::InvalidEnvironment(
                "geofence is not inside the bounds".into(),
            ));
        }
        for (i, obstacle) in self.obstacles.iter().enumerate() {
            if !self.bounds.contains_region(obstacle) {
                return Err(GeometryError::InvalidEnvironment(format!(
                    "obstacle {i} is not inside the bounds"
                )));
            }
            if obstacle.overlaps(&self.geofence) {
                return Err(GeometryError::InvalidEnvironment(format!(
                    "obstacle {i} overlaps the geofence"
                )));
            }
        }
        Ok(())
    }

    /// The bounded 2D layout: bounds `[0,105]^2`, geo-fence `[75,100]^2`, a
    /// central obstacle `[20,30]^2` and two border strips along the top and
    /// right edges.
    pub fn example_2d() -> Self {
        Environment {
            bounds: Region::cube(0.0, 105.0, 2).unwrap(),
            geofence: Region::cube(75.0, 100.0, 2).unwrap(),
            obstacles: vec![
                Region::cube(20.0, 30.0, 2).unwrap(),
                Region::new(vec![0.0, 100.0], vec![105.0, 105.0]).unwrap(),
                Region::new(vec![100.0, 0.0], vec![105.0, 105.0]).unwrap(),
            ],
            dimensionality: 2,
        }
    }

    /// 3D extension of [`Environment::example_2d`]: the same footprint with a
    /// 60 m ceiling, a 30 m tall geo-fence and full-height obstacles.
    pub fn example_3d() -> Self {
        Environment {
            bounds: Region::new(vec![0.0, 0.0, 0.0], vec![105.0, 105.0, 60.0]).unwrap(),
            geofence: Region::new(vec![75.0, 75.0, 0.0], vec![100.0, 100.0, 30.0]).unwrap(),
            obstacles: vec![
                Region::new(vec![20.0, 20.0, 0.0], vec![30.0, 30.0, 60.0]).unwrap(),
                Region::new(vec![0.0, 100.0, 0.0], vec![105.0, 105.0, 60.0]).unwrap(),
                Region::new(vec![100.0, 0.0, 0.0], vec![105.0, 105.0, 60.0]).unwrap(),
            ],
            dimensionality: 3,
        }
    }

    pub fn example(dimensionality: usize) -> Result<Self, GeometryError> {
        match dimensionality {
            2 => Ok(Self::example_2d()),
            3 => Ok(Self::example_3d()),
            d => Err(GeometryError::UnsupportedDimension(d)),
        }
    }

    pub fn scaled(&self, factor: f64) -> Environment {
        Environment {
            bounds: self.bounds.scaled(factor),
            geofence: self.geofence.scaled(factor),
            obstacles: self.obstacles.iter().map(|o| o.scaled(factor)).collect(),
            dimensionality: self.dimensionality,
        }
    }

    pub fn in_obstacle(&self, point: &[f64]) -> bool {
        self.obstacles.iter().any(|o| o.contains_unchecked(point))
    }

    /// Point inside the bounds and outside every obstacle.
    pub fn is_free(&self, point: &[f64]) -> bool {
        point.len() == self.dimensionality && self.bounds.contains_unchecked(point) && !self.in_obstacle(point)
    }

    pub fn from_toml(text: &str) -> Result<Self, crate::Error> {
        let env: Environment = toml::from_str(text)?;
        env.validate()?;
        Ok(env)
    }

    pub fn to_toml(&self) -> Result<String, crate::Error> {
        Ok(toml::to_string(self)?)
    }
}

/// True when the segment touches any obstacle.
pub fn segment_collides(p1: &[f64], p2: &[f64], env: &Environment) -> bool {
    env.obstacles.iter().any(|o| o.intersects_segment(p1, p2))
}

/// First sample time at which `positions` lies inside the geo-fence, or
/// `f64::INFINITY` when the trajectory never enters it.
pub fn first_entry_time<'a, I>(samples: I, geofence: &Region) -> Result<f64, GeometryError>
where
    I: IntoIterator<Item = (f64, &'a [f64])>,
{
    let mut any = false;
    for (t, p) in samples {
        any = true;
        if geofence.contains(&p[..geofence.dim()])? {
            return Ok(t);
        }
    }
    if any {
        Ok(f64::INFINITY)
    } else {
        Err(GeometryError::EmptyTrajectory)
    }
}

/// Intrusion time of a trajectory into the geo-fence (`f64::INFINITY` if it
/// never enters).
pub fn intrusion_time(traj: &Trajectory, geofence: &Region) -> Result<f64, GeometryError> {
    let dim = geofence.dim();
    let positions: Vec<(f64, [f64; 3])> = traj.states.iter().map(|s| (s.t, s.position())).collect();
    first_entry_time(positions.iter().map(|(t, p)| (*t, &p[..dim])), geofence)
}
