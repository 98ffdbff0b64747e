use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::sensors::{raycast, render_sensors, SensorConfig, SensorFrame};
use super::{derive_seed, pick_endpoints, randomize_textures, wrap_angle, Cell, World, CELL};

/// Forward speed in m/s.
pub const SPEED: f64 = 0.5;
/// Control period in seconds.
pub const STEP_DT: f64 = 0.1;
/// Turn rate at full steering, rad/s.
pub const OMEGA_MAX: f64 = 0.5;
/// Clearance beyond which a cell gets no cheaper to plan through, meters.
pub const CENTERING_RANGE: f64 = 2.0;
/// Heading error in degrees that maps to full steering.
pub const SATURATION: f64 = 15.0;
/// Pure-pursuit lookahead in meters.
pub const LOOKAHEAD: f64 = 2.0;

/// Cheapest 4-connected route over plannable cells. Cell cost falls with
/// clearance up to [`CENTERING_RANGE`], so routes follow the middle of
/// corridors and streets, where the geometry alone locates them.
pub fn plan_path(world: &World, start: Cell, goal: Cell) -> Option<Vec<Cell>> {
    if !world.plannable(start) || !world.plannable(goal) {
        return None;
    }
    let n = world.occupied.len();
    let mut dist = vec![u64::MAX; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    let (s, g) = (world.index(start), world.index(goal));
    dist[s] = 0;
    heap.push(Reverse((0u64, s)));
    while let Some(Reverse((d, i))) = heap.pop() {
        if i == g {
            break;
        }
        if d > dist[i] {
            continue;
        }
        let (x, y) = (i % world.width, i / world.width);
        let neighbors = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbors {
            if nx >= world.width || ny >= world.height {
                continue;
            }
            let c = Cell { x: nx, y: ny };
            if !world.plannable(c) {
                continue;
            }
            let j = world.index(c);
            // integer costs keep the search order exact
            let near_wall = (CENTERING_RANGE - world.clearance[j]).max(0.0);
            let nd = d + 100 + (150.0 * near_wall).round() as u64;
            if nd < dist[j] {
                dist[j] = nd;
                prev[j] = i;
                heap.push(Reverse((nd, j)));
            }
        }
    }
    if dist[g] == u64::MAX {
        return None;
    }
    let mut path = vec![goal];
    let mut i = g;
    while i != s {
        i = prev[i];
        path.push(Cell {
            x: i % world.width,
            y: i / world.width,
        });
    }
    path.reverse();
    Some(path)
}

fn nearest_index(world: &World, x: f64, y: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, &(px, py)) in world.waypoints.iter().enumerate() {
        let d = (px - x).hypot(py - y);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

fn visible(world: &World, x: f64, y: f64, tx: f64, ty: f64) -> bool {
    let d = (tx - x).hypot(ty - y);
    d < 1e-9 || raycast(world, x, y, (ty - y).atan2(tx - x), d).is_none()
}

/// Pure pursuit toward the furthest visible route point within the
/// lookahead. Steering is the heading error over [`SATURATION`], clamped,
/// positive to the left. With no visible route point it turns toward the
/// nearest one.
pub fn oracle_steering(world: &World, x: f64, y: f64, heading: f64) -> f64 {
    if world.waypoints.is_empty() {
        return 0.0;
    }
    let near = nearest_index(world, x, y);
    let mut target = None;
    for k in near..world.waypoints.len() {
        let (px, py) = world.waypoints[k];
        if (px - x).hypot(py - y) > LOOKAHEAD {
            break;
        }
        if visible(world, x, y, px, py) {
            target = Some((px, py));
        }
    }
    let (tx, ty) = target.unwrap_or(world.waypoints[near]);
    if (tx - x).hypot(ty - y) < 1e-9 {
        return 0.0;
    }
    let err = wrap_angle((ty - y).atan2(tx - x) - heading);
    (err / SATURATION.to_radians()).clamp(-1.0, 1.0)
}

/// Unicycle update at fixed speed. A move that would end inside an occupied
/// cell is cancelled (the robot still turns); the flag reports it.
pub fn step_pose(world: &World, x: f64, y: f64, heading: f64, steering: f64) -> ((f64, f64, f64), bool) {
    let th = wrap_angle(heading + steering.clamp(-1.0, 1.0) * OMEGA_MAX * STEP_DT);
    let (nx, ny) = (x + SPEED * STEP_DT * th.cos(), y + SPEED * STEP_DT * th.sin());
    if world.is_occupied(nx, ny) || world.clearance_at(nx, ny) < CELL {
        ((x, y, th), true)
    } else {
        ((nx, ny, th), false)
    }
}

fn route_length(path: &[Cell]) -> f64 {
    path.len().saturating_sub(1) as f64 * CELL
}

fn at_goal(world: &World, x: f64, y: f64) -> bool {
    let (gx, gy) = world.goal.center();
    (gx - x).hypot(gy - y) < 0.5
}

fn initial_heading(world: &World) -> f64 {
    let (sx, sy) = world.start.center();
    let (tx, ty) = world.waypoints[world.waypoints.len().min(7) - 1];
    if (tx - sx).hypot(ty - sy) < 1e-9 {
        0.0
    } else {
        (ty - sy).atan2(tx - sx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutResult {
    pub reached: bool,
    pub steps: usize,
    /// Step budget: `factor ×` the route length at full speed.
    pub budget: usize,
    pub collisions: usize,
}

/// Drives the expert in closed loop from start to goal.
pub fn rollout(world: &World, factor: f64) -> RolloutResult {
    let shortest = (route_length(&world.path) / (SPEED * STEP_DT)).ceil().max(1.0);
    let budget = (factor * shortest) as usize;
    let (mut x, mut y) = world.start.center();
    let mut th = initial_heading(world);
    let mut collisions = 0;
    for step in 0..budget {
        if at_goal(world, x, y) {
            return RolloutResult {
                reached: true,
                steps: step,
                budget,
                collisions,
            };
        }
        let s = oracle_steering(world, x, y, th);
        let (pose, hit) = step_pose(world, x, y, th, s);
        (x, y, th) = pose;
        collisions += hit as usize;
    }
    RolloutResult {
        reached: at_goal(world, x, y),
        steps: budget,
        budget,
        collisions,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub frames: usize,
    pub sensors: SensorConfig,
    /// Scale of the smoothed perturbation added to executed (not recorded)
    /// steering so that recovery states appear in the data.
    pub action_noise: f64,
    /// Simulation steps per recorded frame.
    pub stride: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            sensors: SensorConfig::default(),
            action_noise: 0.09,
            stride: 5,
        }
    }
}

/// One synchronized, labeled time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub step: usize,
    pub timestamp: f64,
    pub pose: (f64, f64, f64),
    pub sensors: SensorFrame,
    /// Expert steering in `[-1, 1]`, positive left.
    pub steering: f64,
    pub dr_flag: bool,
}

/// Heading jitter, in radians, applied when the expert is placed on a route.
pub const START_JITTER: f64 = 0.1;

/// Draws a fresh route and places the expert at its start. A turn-around
/// toward an arbitrary new goal is not something the sensors can explain,
/// so a reached goal ends the route instead.
fn respawn(world: &mut World, rng: &mut ChaCha8Rng) -> Result<(f64, f64, f64)> {
    let min = world.params().min_goal_distance;
    for _ in 0..100 {
        let Some((start, goal)) = pick_endpoints(world, rng, min) else {
            continue;
        };
        if let Some(path) = plan_path(world, start, goal) {
            world.set_path(start, goal, path);
            let (x, y) = start.center();
            return Ok((x, y, initial_heading(world) + rng.gen_range(-START_JITTER..START_JITTER)));
        }
    }
    Err(Error::Generation("no reachable follow-up route".into()))
}

/// Drives the expert through `world` and records `cfg.frames` frames. When
/// the goal is reached the expert restarts on a freshly drawn route.
/// With `dr`, textures are randomized once for the whole episode.
pub fn collect_episode(world: &World, cfg: &EpisodeConfig, dr: bool, seed: u64) -> Result<Vec<Frame>> {
    let mut world = if dr {
        randomize_textures(world, derive_seed(seed, 0xD0, 0))
    } else {
        world.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE9, 0));
    let (mut x, mut y) = world.start.center();
    let mut th = initial_heading(&world) + rng.gen_range(-START_JITTER..START_JITTER);
    let mut noise = 0.0;
    if cfg.stride == 0 {
        return Err(Error::Config("episode stride must be at least 1".into()));
    }
    let mut frames = Vec::with_capacity(cfg.frames);
    for tick in 0..cfg.frames * cfg.stride {
        if at_goal(&world, x, y) {
            (x, y, th) = respawn(&mut world, &mut rng)?;
        }
        let steering = oracle_steering(&world, x, y, th);
        if tick % cfg.stride == 0 {
            frames.push(Frame {
                step: tick / cfg.stride,
                timestamp: tick as f64 * STEP_DT,
                pose: (x, y, th),
                sensors: render_sensors(&world, &cfg.sensors, x, y, th)?,
                steering,
                dr_flag: dr,
            });
        }
        noise = 0.85 * noise + rng.gen_range(-1.0..1.0) * cfg.action_noise * 0.5;
        let (pose, _) = step_pose(&world, x, y, th, (steering + noise).clamp(-1.0, 1.0));
        (x, y, th) = pose;
    }
    Ok(frames)
}
