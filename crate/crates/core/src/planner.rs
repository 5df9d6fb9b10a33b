//! RRT* path finding between critical waypoints, waypoint chaining and
//! constant-speed time parameterization.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::TimedPath;
use crate::env::{segment_collides, Environment};
use crate::intent::WaypointSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanningError {
    #[error("no path found after {iterations} iterations")]
    NoPath { iterations: usize },
    #[error("leg {leg}: no path found after {iterations} iterations")]
    LegFailed { leg: usize, iterations: usize },
    #[error("endpoint {0:?} is outside the free space")]
    EndpointBlocked(Vec<f64>),
    #[error("waypoint sequence is empty")]
    NoWaypoints,
    #[error("invalid planner parameters: {0}")]
    InvalidParams(&'static str),
    #[error("invalid time parameterization: {0}")]
    InvalidTiming(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerParams {
    pub step_size: f64,
    pub rewire_radius: f64,
    pub goal_bias: f64,
    pub max_iterations: usize,
    pub goal_tolerance: f64,
    /// Iterations spent improving the tree after the first solution, capped by
    /// `max_iterations`. `None` keeps sampling until `max_iterations`.
    #[serde(default)]
    pub refine_iterations: Option<usize>,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            step_size: 3.0,
            rewire_radius: 8.0,
            goal_bias: 0.1,
            max_iterations: 5000,
            goal_tolerance: 1.0,
            refine_iterations: Some(2000),
        }
    }
}

impl PlannerParams {
    /// Lengths scaled by `factor` (for environments scaled the same way).
    pub fn scaled(&self, factor: f64) -> Self {
        PlannerParams {
            step_size: self.step_size * factor,
            rewire_radius: self.rewire_radius * factor,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PlanningError> {
        if !(self.step_size > 0.0) {
            return Err(PlanningError::InvalidParams("step_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return Err(PlanningError::InvalidParams("goal_bias must lie in [0, 1]"));
        }
        if !(self.goal_tolerance > 0.0) {
            return Err(PlanningError::InvalidParams("goal_tolerance must be positive"));
        }
        if !(self.rewire_radius >= 0.0) {
            return Err(PlanningError::InvalidParams("rewire_radius must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub vertices: Vec<Vec<f64>>,
    pub total_length: f64,
}

impl Path {
    pub fn from_vertices(vertices: Vec<Vec<f64>>) -> Self {
        let total_length = vertices.windows(2).map(|w| dist(&w[0], &w[1])).sum();
        Path { vertices, total_length }
    }

    /// Sum of segment lengths recomputed from the vertices.
    pub fn polyline_length(&self) -> f64 {
        self.vertices.windows(2).map(|w| dist(&w[0], &w[1])).sum()
    }

    pub fn is_collision_free(&self, env: &Environment) -> bool {
        self.vertices.windows(2).all(|w| !segment_collides(&w[0], &w[1], env))
    }

    /// Writes `index,x,y[,z]` rows.
    pub fn to_csv(&self) -> String {
        let dim = self.vertices.first().map(Vec::len).unwrap_or(2);
        let mut out = String::from(if dim == 3 { "index,x,y,z\n" } else { "index,x,y\n" });
        for (i, v) in self.vertices.iter().enumerate() {
            out.push_str(&i.to_string());
            for c in v {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Flat node storage for the search tree.
struct Tree {
    dim: usize,
    coords: Vec<f64>,
    parent: Vec<usize>,
    cost: Vec<f64>,
    children: Vec<Vec<usize>>,
}

impl Tree {
    fn new(root: &[f64]) -> Self {
        Tree {
            dim: root.len(),
            coords: root.to_vec(),
            parent: vec![0],
            cost: vec![0.0],
            children: vec![Vec::new()],
        }
    }

    fn len(&self) -> usize {
        self.parent.len()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    fn nearest(&self, q: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.len() {
            let d = dist_sq(self.point(i), q);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    fn near(&self, q: &[f64], radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        (0..self.len()).filter(|&i| dist_sq(self.point(i), q) <= r2).collect()
    }

    fn push(&mut self, p: &[f64], parent: usize, cost: f64) -> usize {
        let id = self.len();
        self.coords.extend_from_slice(p);
        self.parent.push(parent);
        self.cost.push(cost);
        self.children.push(Vec::new());
        self.children[parent].push(id);
        id
    }

    fn reparent(&mut self, node: usize, new_parent: usize, new_cost: f64) {
        let old = self.parent[node];
        self.children[old].retain(|&c| c != node);
        self.children[new_parent].push(node);
        self.parent[node] = new_parent;
        let delta = self.cost[node] - new_cost;
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            self.cost[n] -= delta;
            stack.extend(self.children[n].iter().copied());
        }
        self.cost[node] = new_cost;
    }

    fn branch(&self, mut node: usize) -> Vec<Vec<f64>> {
        let mut out = vec![self.point(node).to_vec()];
        while node != 0 {
            node = self.parent[node];
            out.push(self.point(node).to_vec());
        }
        out.reverse();
        out
    }
}

fn steer(from: &[f64], to: &[f64], step: f64) -> Vec<f64> {
    let d = dist(from, to);
    if d <= step {
        return to.to_vec();
    }
    let s = step / d;
    from.iter().zip(to).map(|(a, b)| a + s * (b - a)).collect()
}

/// RRT* from `start` to `goal`.
///
/// The goal is connected exactly once a tree vertex sees it within one step,
/// so a returned path ends at `goal` itself. After the first connection the
/// tree keeps growing and rewiring for `refine_iterations`, and the cheapest
/// goal connection under the final costs is returned.
pub fn plan_path<R: Rng + ?Sized>(
    start: &[f64],
    goal: &[f64],
    env: &Environment,
    params: &PlannerParams,
    rng: &mut R,
) -> Result<Path, PlanningError> {
    params.validate()?;
    for p in [start, goal] {
        if !env.is_free(p) {
            return Err(PlanningError::EndpointBlocked(p.to_vec()));
        }
    }
    if dist(start, goal) <= 1e-12 {
        return Ok(Path::from_vertices(vec![start.to_vec()]));
    }
    if !segment_collides(start, goal, env) && dist(start, goal) <= params.step_size {
        return Ok(Path::from_vertices(vec![start.to_vec(), goal.to_vec()]));
    }

    let dim = env.dimensionality;
    let mut tree = Tree::new(start);
    // Tree vertices known to reach the goal in one collision-free step.
    let mut goal_links: Vec<usize> = Vec::new();
    let mut first_hit: Option<usize> = None;

    for iteration in 0..params.max_iterations {
        if let (Some(hit), Some(extra)) = (first_hit, params.refine_iterations) {
            if iteration >= hit + extra {
                break;
            }
        }
        let sample: Vec<f64> = if rng.random::<f64>() < params.goal_bias {
            goal.to_vec()
        } else {
            (0..dim)
                .map(|a| rng.random_range(env.bounds.min[a]..env.bounds.max[a]))
                .collect()
        };
        let nearest = tree.nearest(&sample);
        let candidate = steer(tree.point(nearest), &sample, params.step_size);
        if !env.is_free(&candidate) || segment_collides(tree.point(nearest), &candidate, env) {
            continue;
        }

        let near = tree.near(&candidate, params.rewire_radius);
        let mut parent = nearest;
        let mut cost = tree.cost[nearest] + dist(tree.point(nearest), &candidate);
        for &n in &near {
            let c = tree.cost[n] + dist(tree.point(n), &candidate);
            if c < cost && !segment_collides(tree.point(n), &candidate, env) {
                parent = n;
                cost = c;
            }
        }
        let new = tree.push(&candidate, parent, cost);

        for &n in &near {
            if n == parent {
                continue;
            }
            let c = cost + dist(tree.point(n), &candidate);
            if c < tree.cost[n] && !segment_collides(&candidate, tree.point(n), env) {
                tree.reparent(n, new, c);
            }
        }

        let to_goal = dist(&candidate, goal);
        if to_goal <= params.step_size.max(params.goal_tolerance) && !segment_collides(&candidate, goal, env) {
            goal_links.push(new);
            first_hit.get_or_insert(iteration);
        }
    }

    let best = goal_links
        .iter()
        .copied()
        .map(|n| (n, tree.cost[n] + dist(tree.point(n), goal)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match best {
        Some((node, _)) => {
            let mut vertices = tree.branch(node);
            if dist(vertices.last().unwrap(), goal) > 0.0 {
                vertices.push(goal.to_vec());
            }
            Ok(Path::from_vertices(vertices))
        }
        None => Err(PlanningError::NoPath {
            iterations: params.max_iterations,
        }),
    }
}

/// Plans consecutive legs through every waypoint and joins them.
pub fn chain_waypoints<R: Rng + ?Sized>(
    wps: &WaypointSequence,
    env: &Environment,
    params: &PlannerParams,
    rng: &mut R,
) -> Result<Path, PlanningError> {
    chain_points(&wps.waypoints, env, params, rng)
}

pub fn chain_points<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    env: &Environment,
    params: &PlannerParams,
    rng: &mut R,
) -> Result<Path, PlanningError> {
    let first = points.first().ok_or(PlanningError::NoWaypoints)?;
    let mut vertices = vec![first.clone()];
    for (leg, pair) in points.windows(2).enumerate() {
        let path = plan_path(&pair[0], &pair[1], env, params, rng).map_err(|e| match e {
            PlanningError::NoPath { iterations } => PlanningError::LegFailed {
                leg: leg + 1,
                iterations,
            },
            other => other,
        })?;
        vertices.extend(path.vertices.into_iter().skip(1));
    }
    Ok(Path::from_vertices(vertices))
}

/// Samples the polyline at constant `speed` every `1 / sample_rate` seconds.
/// Sample `k` sits at arc length `min(k * speed * dt, L)`; the last sample is
/// the path end.
pub fn time_parameterize(path: &Path, speed: f64, sample_rate: f64) -> Result<TimedPath, PlanningError> {
    if !(sample_rate > 0.0) {
        return Err(PlanningError::InvalidTiming("sample_rate must be positive"));
    }
    if !(speed > 0.0) {
        return Err(PlanningError::InvalidTiming("speed must be positive"));
    }
    if path.vertices.is_empty() {
        return Err(PlanningError::InvalidTiming("path has no vertices"));
    }
    let dt = 1.0 / sample_rate;
    let step = speed * dt;
    let mut cumulative = Vec::with_capacity(path.vertices.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in path.vertices.windows(2) {
        acc += dist(&w[0], &w[1]);
        cumulative.push(acc);
    }
    let length = acc;
    let intervals = (length / step - 1e-9).ceil().max(0.0) as usize;
    let count = intervals + 1;

    let mut positions = Vec::with_capacity(count);
    let mut arc_lengths = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let s = if k == intervals {
            length
        } else {
            (k as f64 * step).min(length)
        };
        while seg + 1 < cumulative.len() - 1 && cumulative[seg + 1] < s {
            seg += 1;
        }
        let p = if path.vertices.len() == 1 {
            path.vertices[0].clone()
        } else {
            let (a, b) = (&path.vertices[seg], &path.vertices[seg + 1]);
            let seg_len = cumulative[seg + 1] - cumulative[seg];
            let u = if seg_len > 0.0 {
                ((s - cumulative[seg]) / seg_len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            a.iter().zip(b).map(|(x, y)| x + u * (y - x)).collect()
        };
        positions.push(p);
        arc_lengths.push(s);
    }
    Ok(TimedPath {
        dt,
        times: (0..count).map(|k| k as f64 * dt).collect(),
        positions,
        arc_lengths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::{IntentLabel, IntentLibrary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env() -> Environment {
        Environment::example_2d()
    }

    #[test]
    fn start_equals_goal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = plan_path(&[5.0, 5.0], &[5.0, 5.0], &env(), &PlannerParams::default(), &mut rng).unwrap();
        assert_eq!(p.vertices.len(), 1);
        assert_eq!(p.total_length, 0.0);
    }

    #[test]
    fn open_space_paths_are_near_straight() {
        let (a, b) = ([5.0, 5.0], [95.0, 5.0]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = plan_path(&a, &b, &env(), &PlannerParams::default(), &mut rng).unwrap();
            assert!(p.total_length <= 1.2 * 90.0, "seed {seed}: {}", p.total_length);
            assert_eq!(p.vertices.last().unwrap(), &b.to_vec());
            assert!(p.is_collision_free(&env()));
        }
    }

    #[test]
    fn detours_around_obstacle() {
        let (a, b) = ([5.0, 25.0], [45.0, 25.0]);
        assert!(segment_collides(&a, &b, &env()));
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = plan_path(&a, &b, &env(), &PlannerParams::default(), &mut rng).unwrap();
            assert!(p.is_collision_free(&env()));
            assert!(p.vertices.iter().all(|v| !env().in_obstacle(v)));
        }
    }

    #[test]
    fn blocked_endpoint_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = plan_path(&[25.0, 25.0], &[5.0, 5.0], &env(), &PlannerParams::default(), &mut rng);
        assert!(matches!(err, Err(PlanningError::EndpointBlocked(_))));
    }

    #[test]
    fn failure_reports_iterations() {
        let params = PlannerParams {
            max_iterations: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = plan_path(&[5.0, 5.0], &[95.0, 60.0], &env(), &params, &mut rng);
        assert_eq!(err, Err(PlanningError::NoPath { iterations: 3 }));
    }

    #[test]
    fn chained_direct_attack_ends_in_geofence() {
        let lib = IntentLibrary::builtin_2d();
        let intent = lib.intent(&IntentLabel::direct_attack()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wps = lib.sample_waypoints(intent, &env(), &mut rng).unwrap();
        let path = chain_waypoints(&wps, &env(), &PlannerParams::default(), &mut rng).unwrap();
        assert!(env().geofence.contains(path.vertices.last().unwrap()).unwrap());
        assert!(path.is_collision_free(&env()));
        for wp in &wps.waypoints {
            let closest = path.vertices.iter().map(|v| dist(v, wp)).fold(f64::INFINITY, f64::min);
            assert!(closest <= PlannerParams::default().goal_tolerance);
        }
    }

    #[test]
    fn single_waypoint_chain_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let path = chain_points(&[vec![10.0, 10.0]], &env(), &PlannerParams::default(), &mut rng).unwrap();
        assert_eq!(path.vertices, vec![vec![10.0, 10.0]]);
    }

    #[test]
    fn chain_failure_names_leg() {
        let params = PlannerParams {
            max_iterations: 50,
            ..Default::default()
        };
        let points = vec![vec![5.0, 5.0], vec![7.0, 5.0], vec![95.0, 60.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = chain_points(&points, &env(), &params, &mut rng);
        assert_eq!(err, Err(PlanningError::LegFailed { leg: 2, iterations: 50 }));
    }

    #[test]
    fn deterministic_given_seed() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            plan_path(&[5.0, 50.0], &[90.0, 40.0], &env(), &PlannerParams::default(), &mut rng).unwrap()
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn longer_search_never_worse() {
        let unlimited = |iters| PlannerParams {
            max_iterations: iters,
            refine_iterations: None,
            ..Default::default()
        };
        for seed in 0..5 {
            let run = |iters| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                plan_path(&[5.0, 25.0], &[60.0, 35.0], &env(), &unlimited(iters), &mut rng)
                    .unwrap()
                    .total_length
            };
            assert!(run(4000) <= run(1000));
        }
    }

    #[test]
    fn straight_path_timing() {
        let path = Path::from_vertices(vec![vec![0.0, 0.0], vec![100.0, 0.0]]);
        let timed = time_parameterize(&path, 10.0, 10.0).unwrap();
        assert_eq!(timed.len(), 101);
        for w in timed.positions.windows(2) {
            assert!((dist(&w[0], &w[1]) - 1.0).abs() < 1e-9);
        }
        assert_eq!(timed.positions.last().unwrap(), &vec![100.0, 0.0]);
    }

    #[test]
    fn sample_count_scales_inversely_with_speed() {
        let path = Path::from_vertices(vec![vec![0.0, 0.0], vec![60.0, 0.0], vec![60.0, 77.0]]);
        let fast = time_parameterize(&path, 25.0, 10.0).unwrap().len() as f64;
        let slow = time_parameterize(&path, 15.0, 10.0).unwrap().len() as f64;
        assert!(((fast - 1.0) * 25.0 - (slow - 1.0) * 15.0).abs() <= 25.0);
    }

    /// Arc-length coordinate of a point on the polyline (oracle independent
    /// of the interpolation loop).
    fn locate(path: &Path, p: &[f64]) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        let mut base = 0.0;
        for w in path.vertices.windows(2) {
            let len = dist(&w[0], &w[1]);
            let u = ((p[0] - w[0][0]) * (w[1][0] - w[0][0]) + (p[1] - w[0][1]) * (w[1][1] - w[0][1])) / (len * len);
            let u = u.clamp(0.0, 1.0);
            let q = [w[0][0] + u * (w[1][0] - w[0][0]), w[0][1] + u * (w[1][1] - w[0][1])];
            let d = dist(&q, p);
            if d < best.0 - 1e-12 {
                best = (d, base + u * len);
            }
            base += len;
        }
        best.1
    }

    #[test]
    fn corner_samples_preserve_arc_length() {
        let path = Path::from_vertices(vec![vec![0.0, 0.0], vec![10.35, 0.0], vec![10.35, 7.2]]);
        let timed = time_parameterize(&path, 2.0, 10.0).unwrap();
        let mut walked = 0.0;
        let mut prev = 0.0;
        for (p, s) in timed.positions.iter().zip(&timed.arc_lengths) {
            let located = locate(&path, p);
            assert!((located - s).abs() < 1e-9);
            walked += located - prev;
            prev = located;
        }
        assert!((walked - path.total_length).abs() < 1e-9);
        // The corner falls between two samples.
        let k = timed.arc_lengths.iter().position(|s| *s > 10.35).unwrap();
        assert!(timed.arc_lengths[k - 1] < 10.35);
    }

    #[test]
    fn zero_length_path_repeats_point() {
        let path = Path::from_vertices(vec![vec![3.0, 4.0]]);
        let timed = time_parameterize(&path, 5.0, 10.0).unwrap();
        assert_eq!(timed.positions, vec![vec![3.0, 4.0]]);
    }

    #[test]
    fn csv_export() {
        let path = Path::from_vertices(vec![vec![0.0, 0.0], vec![1.5, 2.0]]);
        assert_eq!(path.to_csv(), "index,x,y\n0,0,0\n1,1.5,2\n");
    }
}
