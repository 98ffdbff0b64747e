//! Procedural 2.5-D environments (collapsed house, collapsed city, natural
//! cave) with laser, depth and RGB sensors, domain randomization and a
//! scripted pure-pursuit expert that labels steering.
//!
//! Worlds are occupancy grids of 0.25 m cells. World coordinates are meters
//! with `x` along columns and `y` along rows; headings are counterclockwise
//! from `+x`, so positive steering turns left.

mod oracle;
mod sensors;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use oracle::{
    collect_episode, oracle_steering, plan_path, rollout, step_pose, EpisodeConfig, Frame, RolloutResult,
    LOOKAHEAD, OMEGA_MAX, SPEED, STEP_DT,
};
pub use sensors::{raycast, render_sensors, Camera, Hit, LaserConfig, SensorConfig, SensorFrame};

/// Side length of a grid cell in meters.
pub const CELL: f64 = 0.25;
/// Clearance below which a cell is closed to the planner.
pub const ROBOT_CLEARANCE: f64 = 0.45;

/// Hue painted near left turns; excluded from the randomization palette.
/// Heading change over ±2 m of route, in degrees, above which the floor
/// along the route is painted.
pub const MARKER_BEND: f64 = 8.0;
/// Heading change above which the walls around the bend are painted too.
pub const MARKER_CORNER: f64 = 35.0;
pub const MARKER_LEFT: [u8; 3] = [255, 0, 255];
/// Hue painted near right turns; excluded from the randomization palette.
pub const MARKER_RIGHT: [u8; 3] = [0, 255, 255];

/// Splitmix64 mix of a seed with stream indices, so per-episode and
/// per-frame streams do not depend on generation order.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let mut r = a % t;
    if r <= -std::f64::consts::PI {
        r += t;
    } else if r > std::f64::consts::PI {
        r -= t;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Archetype {
    House,
    City,
    Cave,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::House, Archetype::City, Archetype::Cave];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::House => "house",
            Archetype::City => "city",
            Archetype::Cave => "cave",
        }
    }

    pub fn params(self) -> ArchetypeParams {
        match self {
            Archetype::House => ArchetypeParams {
                size_m: 20.0,
                obstacles: 26,
                wall_height: 2.0,
                light: 1.0,
                sky: [70, 70, 80],
                wall: [196, 176, 140],
                floor: [[118, 96, 72], [104, 84, 62]],
                min_goal_distance: 8.0,
            },
            Archetype::City => ArchetypeParams {
                size_m: 55.0,
                obstacles: 55,
                wall_height: 4.0,
                light: 1.0,
                sky: [150, 170, 190],
                wall: [150, 150, 146],
                floor: [[92, 92, 88], [80, 80, 78]],
                min_goal_distance: 20.0,
            },
            Archetype::Cave => ArchetypeParams {
                size_m: 63.0,
                obstacles: 12,
                wall_height: 3.0,
                light: 0.3,
                sky: [20, 16, 12],
                wall: [140, 112, 84],
                floor: [[110, 92, 70], [96, 80, 60]],
                min_goal_distance: 20.0,
            },
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "house" => Ok(Archetype::House),
            "city" => Ok(Archetype::City),
            "cave" => Ok(Archetype::Cave),
            _ => Err(Error::Config(format!("unknown environment {s:?}"))),
        }
    }
}

/// Per-archetype generation constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchetypeParams {
    pub size_m: f64,
    /// Number of placed obstacle shapes.
    pub obstacles: usize,
    pub wall_height: f64,
    /// Ambient light factor applied to every RGB sample.
    pub light: f64,
    pub sky: [u8; 3],
    pub wall: [u8; 3],
    /// Two-tone floor checker.
    pub floor: [[u8; 3]; 2],
    pub min_goal_distance: f64,
}

impl ArchetypeParams {
    pub fn cells(&self) -> usize {
        (self.size_m / CELL).round() as usize
    }

    /// Obstacles per square meter.
    pub fn obstacle_density(&self) -> f64 {
        self.obstacles as f64 / (self.size_m * self.size_m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Circle { x: f64, y: f64, r: f64 },
    Rect { x: f64, y: f64, half_w: f64, half_h: f64, angle: f64 },
}

impl Shape {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Circle { x, y, r } => (px - x).powi(2) + (py - y).powi(2) <= r * r,
            Shape::Rect {
                x,
                y,
                half_w,
                half_h,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (px - x, py - y);
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                lx.abs() <= half_w && ly.abs() <= half_h
            }
        }
    }

    fn bound(&self) -> f64 {
        match *self {
            Shape::Circle { r, .. } => r,
            Shape::Rect { half_w, half_h, .. } => half_w.hypot(half_h),
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Circle { x, y, .. } | Shape::Rect { x, y, .. } => (x, y),
        }
    }
}

/// Grid cell index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn center(self) -> (f64, f64) {
        ((self.x as f64 + 0.5) * CELL, (self.y as f64 + 0.5) * CELL)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Turn {
    Left,
    Right,
}

impl Turn {
    pub fn color(self) -> [u8; 3] {
        match self {
            Turn::Left => MARKER_LEFT,
            Turn::Right => MARKER_RIGHT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub archetype: Archetype,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub occupied: Vec<bool>,
    /// Wall color for occupied cells, floor color for free ones.
    pub cell_color: Vec<[u8; 3]>,
    /// Turn cue painted over the cell color.
    pub markers: Vec<Option<Turn>>,
    pub obstacles: Vec<Shape>,
    /// `None` while the archetype default textures are in place.
    pub texture_seed: Option<u64>,
    /// Distance in meters from each cell center to the nearest occupied cell.
    pub clearance: Vec<f64>,
    pub start: Cell,
    pub goal: Cell,
    /// 4-connected free cells from `start` to `goal`.
    pub path: Vec<Cell>,
    /// Route cell centers smoothed over ±[`SMOOTHING`] cells; what the
    /// expert tracks, free of the staircase of the 4-connected cells.
    pub waypoints: Vec<(f64, f64)>,
}

impl World {
    pub fn params(&self) -> ArchetypeParams {
        self.archetype.params()
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn cell_at(&self, x: f64, y: f64) -> Option<Cell> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let (cx, cy) = ((x / CELL) as usize, (y / CELL) as usize);
        (cx < self.width && cy < self.height).then_some(Cell { x: cx, y: cy })
    }

    /// Points outside the grid count as occupied.
    pub fn is_occupied(&self, x: f64, y: f64) -> bool {
        self.cell_at(x, y).is_none_or(|c| self.occupied[self.index(c)])
    }

    pub fn clearance_at(&self, x: f64, y: f64) -> f64 {
        self.cell_at(x, y).map_or(0.0, |c| self.clearance[self.index(c)])
    }

    /// Replaces the route and repaints the turn cues along it.
    pub fn set_path(&mut self, start: Cell, goal: Cell, path: Vec<Cell>) {
        self.start = start;
        self.goal = goal;
        self.path = path;
        self.waypoints = smooth_route(&self.path);
        self.paint_markers();
    }

    fn paint_markers(&mut self) {
        self.markers.iter_mut().for_each(|m| *m = None);
        let span = 8usize;
        let n = self.path.len();
        if n < 2 * span + 1 {
            return;
        }
        let pts = self.waypoints.clone();
        let heading = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1).atan2(b.0 - a.0);
        // signed heading change across each path point
        let delta: Vec<f64> = (span..n - span)
            .map(|k| wrap_angle(heading(pts[k], pts[k + span]) - heading(pts[k - span], pts[k])))
            .collect();
        let bend = MARKER_BEND.to_radians();
        let corner = MARKER_CORNER.to_radians();
        let turn_of = |d: f64| if d > 0.0 { Turn::Left } else { Turn::Right };
        // floor discs along every bend
        for (i, &d) in delta.iter().enumerate() {
            if d.abs() >= bend {
                self.mark_disk(pts[i + span], 0.7, turn_of(d), false);
            }
        }
        // walls around the sharpest point of each corner
        let mut i = 0;
        while i < delta.len() {
            if delta[i].abs() < corner {
                i += 1;
                continue;
            }
            let run_end = (i..delta.len())
                .find(|&j| delta[j].abs() < corner || delta[j].signum() != delta[i].signum())
                .unwrap_or(delta.len());
            let peak = (i..run_end)
                .max_by(|&a, &b| delta[a].abs().total_cmp(&delta[b].abs()))
                .unwrap();
            self.mark_disk(pts[peak + span], 1.5, turn_of(delta[peak]), true);
            i = run_end;
        }
    }

    fn mark_disk(&mut self, (px, py): (f64, f64), radius: f64, turn: Turn, walls: bool) {
        let r = (radius / CELL).ceil() as i64;
        let (cx, cy) = ((px / CELL) as i64, (py / CELL) as i64);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                    continue;
                }
                let c = Cell {
                    x: x as usize,
                    y: y as usize,
                };
                let (ox, oy) = c.center();
                let i = self.index(c);
                if (ox - px).hypot(oy - py) <= radius && self.occupied[i] == walls {
                    self.markers[i] = Some(turn);
                }
            }
        }
    }

    /// Free cells with enough clearance for the robot.
    pub fn plannable(&self, c: Cell) -> bool {
        let i = self.index(c);
        !self.occupied[i] && self.clearance[i] >= ROBOT_CLEARANCE
    }

    pub fn obstacle_density(&self) -> f64 {
        let side = self.params().size_m;
        self.obstacles.len() as f64 / (side * side)
    }
}

/// Half-width, in cells, of the moving average applied to route cells.
pub const SMOOTHING: usize = 8;

/// Moving average of the cell centers with the window shrunk near the ends,
/// so the first and last points stay on the start and goal cells.
pub fn smooth_route(path: &[Cell]) -> Vec<(f64, f64)> {
    let n = path.len();
    (0..n)
        .map(|k| {
            let r = SMOOTHING.min(k).min(n - 1 - k);
            let (sx, sy) = path[k - r..=k + r]
                .iter()
                .map(|c| c.center())
                .fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
            let m = (2 * r + 1) as f64;
            (sx / m, sy / m)
        })
        .collect()
}

/// Exact Euclidean distance (meters) from every cell center to the nearest
/// occupied cell center.
pub fn distance_transform(occupied: &[bool], width: usize, height: usize) -> Vec<f64> {
    const INF: f64 = 1e18;
    let mut d2: Vec<f64> = occupied.iter().map(|&o| if o { 0.0 } else { INF }).collect();
    let mut f = vec![0.0; width.max(height)];
    let mut out = vec![0.0; width.max(height)];
    for x in 0..width {
        for y in 0..height {
            f[y] = d2[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height]);
        for y in 0..height {
            d2[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        edt_1d(&d2[y * width..(y + 1) * width], &mut out[..width]);
        d2[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    d2.into_iter().map(|v| if v >= INF { INF } else { v.sqrt() * CELL }).collect()
}

/// Lower envelope of parabolas (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates from the start
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

struct Builder {
    width: usize,
    height: usize,
    occupied: Vec<bool>,
    obstacles: Vec<Shape>,
}

impl Builder {
    fn new(cells: usize, filled: bool) -> Self {
        let mut b = Self {
            width: cells,
            height: cells,
            occupied: vec![filled; cells * cells],
            obstacles: Vec::new(),
        };
        b.border();
        b
    }

    fn border(&mut self) {
        let (w, h) = (self.width, self.height);
        for x in 0..w {
            self.occupied[x] = true;
            self.occupied[(h - 1) * w + x] = true;
        }
        for y in 0..h {
            self.occupied[y * w] = true;
            self.occupied[y * w + w - 1] = true;
        }
    }

    fn fill(&mut self, shape: &Shape, value: bool) {
        let (cx, cy) = shape.center();
        let r = shape.bound();
        let lo = |c: f64| (((c - r) / CELL).floor().max(0.0)) as usize;
        let hi = |c: f64, n: usize| ((((c + r) / CELL).ceil()) as usize).min(n - 1);
        for y in lo(cy)..=hi(cy, self.height) {
            for x in lo(cx)..=hi(cx, self.width) {
                let (px, py) = Cell { x, y }.center();
                if shape.contains(px, py) {
                    self.occupied[y * self.width + x] = value;
                }
            }
        }
    }

    fn place(&mut self, shape: Shape) {
        self.fill(&shape, true);
        self.obstacles.push(shape);
    }

    fn set(&mut self, x: usize, y: usize, v: bool) {
        if x < self.width && y < self.height {
            self.occupied[y * self.width + x] = v;
        }
    }
}

fn random_debris(rng: &mut ChaCha8Rng, x: f64, y: f64, scale: f64) -> Shape {
    if rng.gen_bool(0.5) {
        Shape::Circle {
            x,
            y,
            r: rng.gen_range(0.25..0.6) * scale,
        }
    } else {
        Shape::Rect {
            x,
            y,
            half_w: rng.gen_range(0.2..0.8) * scale,
            half_h: rng.gen_range(0.2..0.6) * scale,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        }
    }
}

fn build_house(rng: &mut ChaCha8Rng, p: &ArchetypeParams) -> Builder {
    let n = p.cells();
    let mut b = Builder::new(n, false);
    let door = 6; // 1.5 m
    // one full-height partition with two doorways, one half partition with one
    let wx = rng.gen_range(n * 2 / 5..n * 3 / 5);
    let doors = [rng.gen_range(2..n / 2 - door), rng.gen_range(n / 2..n - door - 2)];
    for y in 0..n {
        if !doors.iter().any(|&d| y >= d && y < d + door) {
            b.set(wx, y, true);
        }
    }
    let wy = rng.gen_range(n * 2 / 5..n * 3 / 5);
    let left = rng.gen_bool(0.5);
    let (x0, x1) = if left { (0, wx) } else { (wx, n) };
    let d = rng.gen_range(x0 + 2..x1 - door - 2);
    for x in x0..x1 {
        if !(x >= d && x < d + door) {
            b.set(x, wy, true);
        }
    }
    for _ in 0..p.obstacles {
        let x = rng.gen_range(1.0..p.size_m - 1.0);
        let y = rng.gen_range(1.0..p.size_m - 1.0);
        let s = random_debris(rng, x, y, 1.0);
        b.place(s);
    }
    b
}

fn build_city(rng: &mut ChaCha8Rng, p: &ArchetypeParams) -> Builder {
    let mut b = Builder::new(p.cells(), false);
    let blocks = 4;
    let pitch = p.size_m / blocks as f64;
    let street = 4.5;
    for i in 0..blocks {
        for j in 0..blocks {
            let x = (i as f64 + 0.5) * pitch + rng.gen_range(-0.6..0.6);
            let y = (j as f64 + 0.5) * pitch + rng.gen_range(-0.6..0.6);
            let half = (pitch - street) / 2.0;
            let shape = Shape::Rect {
                x,
                y,
                half_w: half - rng.gen_range(0.0..1.5),
                half_h: half - rng.gen_range(0.0..1.5),
                angle: rng.gen_range(-0.08..0.08),
            };
            b.place(shape);
        }
    }
    for _ in blocks * blocks..p.obstacles {
        let x = rng.gen_range(1.0..p.size_m - 1.0);
        let y = rng.gen_range(1.0..p.size_m - 1.0);
        let s = random_debris(rng, x, y, 1.3);
        b.place(s);
    }
    b
}

fn carve_worm(b: &mut Builder, rng: &mut ChaCha8Rng, size: f64, start: (f64, f64), heading: f64, steps: usize) -> Vec<(f64, f64)> {
    let (mut x, mut y, mut th) = (start.0, start.1, heading);
    let mut r: f64 = rng.gen_range(1.0..1.5);
    let mut trail = Vec::with_capacity(steps);
    let margin = 4.0;
    for _ in 0..steps {
        trail.push((x, y));
        let cell_r = (r / CELL).ceil() as i64;
        let (cx, cy) = ((x / CELL) as i64, (y / CELL) as i64);
        for gy in cy - cell_r..=cy + cell_r {
            for gx in cx - cell_r..=cx + cell_r {
                if gx < 1 || gy < 1 || gx >= b.width as i64 - 1 || gy >= b.height as i64 - 1 {
                    continue;
                }
                let (px, py) = Cell {
                    x: gx as usize,
                    y: gy as usize,
                }
                .center();
                if (px - x).hypot(py - y) <= r {
                    b.set(gx as usize, gy as usize, false);
                }
            }
        }
        th += rng.gen_range(-0.35..0.35);
        let c = size / 2.0;
        if x < margin || y < margin || x > size - margin || y > size - margin {
            let to_center = (c - y).atan2(c - x);
            th += 0.5 * wrap_angle(to_center - th);
        }
        r = (r + rng.gen_range(-0.12..0.12)).clamp(0.9, 1.7);
        x = (x + 0.5 * th.cos()).clamp(2.0, size - 2.0);
        y = (y + 0.5 * th.sin()).clamp(2.0, size - 2.0);
    }
    trail
}

fn build_cave(rng: &mut ChaCha8Rng, p: &ArchetypeParams) -> (Builder, Cell, Cell) {
    let mut b = Builder::new(p.cells(), true);
    let s = p.size_m;
    let start = (rng.gen_range(5.0..10.0), rng.gen_range(5.0..10.0));
    let heading = rng.gen_range(0.3..1.2);
    let main = carve_worm(&mut b, rng, s, start, heading, 520);
    for _ in 0..4 {
        let (bx, by) = main[rng.gen_range(40..main.len() - 40)];
        let len = rng.gen_range(30..90);
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        carve_worm(&mut b, rng, s, (bx, by), heading, len);
    }
    // keep every open cell near a wall
    let clear = distance_transform(&b.occupied, b.width, b.height);
    for (i, &c) in clear.iter().enumerate() {
        if c > 4.0 {
            b.occupied[i] = true;
        }
    }
    let cell = |(x, y): (f64, f64)| Cell {
        x: (x / CELL) as usize,
        y: (y / CELL) as usize,
    };
    let (sc, gc) = (cell(main[3]), cell(*main.last().unwrap()));
    let free: Vec<usize> = (0..b.occupied.len()).filter(|&i| !b.occupied[i]).collect();
    let mut placed = 0;
    let mut tries = 0;
    while placed < p.obstacles && tries < 10_000 {
        tries += 1;
        let i = free[rng.gen_range(0..free.len())];
        let c = Cell {
            x: i % b.width,
            y: i / b.width,
        };
        let (x, y) = c.center();
        let far = |o: Cell| {
            let (ox, oy) = o.center();
            (ox - x).hypot(oy - y) > 2.0
        };
        if far(sc) && far(gc) {
            b.place(Shape::Circle {
                x,
                y,
                r: rng.gen_range(0.2..0.45),
            });
            placed += 1;
        }
    }
    (b, sc, gc)
}

/// Default texture of the archetype: solid walls and a two-tone floor checker.
pub fn default_color(archetype: Archetype, occupied: bool, c: Cell) -> [u8; 3] {
    let p = archetype.params();
    if occupied {
        p.wall
    } else {
        p.floor[((c.x / 4) + (c.y / 4)) % 2]
    }
}

pub(super) fn pick_endpoints(world: &World, rng: &mut ChaCha8Rng, min_dist: f64) -> Option<(Cell, Cell)> {
    let cands: Vec<Cell> = (0..world.occupied.len())
        .map(|i| Cell {
            x: i % world.width,
            y: i / world.width,
        })
        .filter(|&c| world.plannable(c) && world.clearance[world.index(c)] >= 0.7)
        .collect();
    if cands.len() < 2 {
        return None;
    }
    for _ in 0..50 {
        let a = cands[rng.gen_range(0..cands.len())];
        let b = cands[rng.gen_range(0..cands.len())];
        let (ax, ay) = a.center();
        let (bx, by) = b.center();
        if (ax - bx).hypot(ay - by) >= min_dist {
            return Some((a, b));
        }
    }
    None
}

/// Builds a world of the given archetype. Deterministic in `(archetype, seed)`.
///
/// Layouts without a route between start and goal are regenerated from a
/// derived seed, up to 100 times.
pub fn generate_world(archetype: Archetype, seed: u64) -> Result<World> {
    let p = archetype.params();
    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt, 0x5EED));
        let (b, ends) = match archetype {
            Archetype::House => (build_house(&mut rng, &p), None),
            Archetype::City => (build_city(&mut rng, &p), None),
            Archetype::Cave => {
                let (b, s, g) = build_cave(&mut rng, &p);
                (b, Some((s, g)))
            }
        };
        let clearance = distance_transform(&b.occupied, b.width, b.height);
        let cell_color = (0..b.occupied.len())
            .map(|i| {
                let c = Cell {
                    x: i % b.width,
                    y: i / b.width,
                };
                default_color(archetype, b.occupied[i], c)
            })
            .collect();
        let mut world = World {
            archetype,
            seed,
            width: b.width,
            height: b.height,
            markers: vec![None; b.occupied.len()],
            occupied: b.occupied,
            cell_color,
            obstacles: b.obstacles,
            texture_seed: None,
            clearance,
            start: Cell { x: 0, y: 0 },
            goal: Cell { x: 0, y: 0 },
            path: Vec::new(),
            waypoints: Vec::new(),
        };
        let ends = match ends {
            Some((s, g)) if world.plannable(s) && world.plannable(g) => Some((s, g)),
            Some(_) => None,
            None => pick_endpoints(&world, &mut rng, p.min_goal_distance),
        };
        let Some((start, goal)) = ends else { continue };
        if let Some(path) = plan_path(&world, start, goal) {
            world.set_path(start, goal, path);
            return Ok(world);
        }
    }
    Err(Error::Generation(format!(
        "no start-to-goal route in {archetype} world after 100 attempts (seed {seed})"
    )))
}

/// Texture patterns drawn by [`randomize_textures`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
    Noise,
}

/// Random saturated color whose hue avoids both marker bands.
pub fn palette_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let hue = loop {
        let h: f64 = rng.gen_range(0.0..360.0);
        if !(150.0..210.0).contains(&h) && !(270.0..330.0).contains(&h) {
            break h;
        }
    };
    hsv(hue, rng.gen_range(0.15..0.9), rng.gen_range(0.3..1.0))
}

pub fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Redraws wall and floor textures from the randomization distribution.
/// Geometry, route and turn cues are untouched.
pub fn randomize_textures(world: &World, dr_seed: u64) -> World {
    let mut out = world.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(dr_seed);
    let patterns = [Pattern::Solid, Pattern::Stripes, Pattern::Checker, Pattern::Noise];
    let draw = |rng: &mut ChaCha8Rng| {
        let pattern = patterns[rng.gen_range(0..patterns.len())];
        let period = rng.gen_range(1..5usize);
        let colors = [palette_color(rng), palette_color(rng)];
        let vertical = rng.gen_bool(0.5);
        (pattern, period, colors, vertical)
    };
    let wall = draw(&mut rng);
    let floor = draw(&mut rng);
    for i in 0..out.occupied.len() {
        let c = Cell {
            x: i % out.width,
            y: i / out.width,
        };
        let (pattern, period, colors, vertical) = if out.occupied[i] { wall } else { floor };
        out.cell_color[i] = match pattern {
            Pattern::Solid => colors[0],
            Pattern::Stripes => colors[((if vertical { c.x } else { c.y }) / period) % 2],
            Pattern::Checker => colors[((c.x / period) + (c.y / period)) % 2],
            Pattern::Noise => palette_color(&mut rng),
        };
    }
    out.texture_seed = Some(dr_seed);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        for a in Archetype::ALL {
            let w1 = generate_world(a, 11).unwrap();
            let w2 = generate_world(a, 11).unwrap();
            assert_eq!(w1, w2);
            assert_ne!(generate_world(a, 12).unwrap().occupied, w1.occupied);
        }
    }

    #[test]
    fn route_invariants() {
        for a in Archetype::ALL {
            for seed in 0..4 {
                let w = generate_world(a, seed).unwrap();
                assert_eq!(w.path.first(), Some(&w.start));
                assert_eq!(w.path.last(), Some(&w.goal));
                for c in &w.path {
                    assert!(!w.occupied[w.index(*c)]);
                }
                for pair in w.path.windows(2) {
                    let d = pair[0].x.abs_diff(pair[1].x) + pair[0].y.abs_diff(pair[1].y);
                    assert_eq!(d, 1, "path is 4-connected");
                }
                assert_eq!(w.obstacles.len(), a.params().obstacles);
            }
        }
    }

    #[test]
    fn house_is_denser_than_city() {
        let (h, c) = (Archetype::House.params(), Archetype::City.params());
        assert!(h.obstacle_density() >= 3.0 * c.obstacle_density());
        assert_eq!(h.cells(), 80);
        assert_eq!(c.cells(), 220);
    }

    #[test]
    fn cave_cells_stay_near_walls() {
        for seed in 0..3 {
            let w = generate_world(Archetype::Cave, seed).unwrap();
            let reach = (6.0 / CELL) as i64;
            let occupied: Vec<(i64, i64)> = (0..w.occupied.len())
                .filter(|&i| w.occupied[i])
                .map(|i| ((i % w.width) as i64, (i / w.width) as i64))
                .collect();
            let mut grid = vec![false; w.occupied.len()];
            for &(x, y) in &occupied {
                grid[y as usize * w.width + x as usize] = true;
            }
            // brute-force search in a 6 m window around each free cell
            for i in (0..w.occupied.len()).filter(|&i| !w.occupied[i]) {
                let (x, y) = ((i % w.width) as i64, (i / w.width) as i64);
                let mut near = false;
                'search: for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w.width as i64 || ny >= w.height as i64 {
                            continue;
                        }
                        if grid[ny as usize * w.width + nx as usize] && (dx * dx + dy * dy) <= reach * reach {
                            near = true;
                            break 'search;
                        }
                    }
                }
                assert!(near, "cell {x},{y} is more than 6 m from a wall");
            }
        }
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (23, 17);
        let occ: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.08)).collect();
        let dt = distance_transform(&occ, w, h);
        for i in 0..w * h {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let want = (0..w * h)
                .filter(|&j| occ[j])
                .map(|j| ((j % w) as f64 - x).hypot((j / w) as f64 - y) * CELL)
                .fold(f64::INFINITY, f64::min);
            if want.is_finite() {
                assert!((dt[i] - want).abs() < 1e-9, "{i}: {} vs {want}", dt[i]);
            }
        }
    }

    #[test]
    fn randomization_only_changes_appearance() {
        let w = generate_world(Archetype::House, 5).unwrap();
        let a = randomize_textures(&w, 1);
        let b = randomize_textures(&w, 2);
        assert_eq!(a.occupied, w.occupied);
        assert_eq!(a.path, w.path);
        assert_eq!(a.markers, w.markers);
        let differ = a.cell_color.iter().zip(&b.cell_color).filter(|(x, y)| x != y).count();
        assert!(differ * 2 >= a.cell_color.len(), "{differ} of {}", a.cell_color.len());
        for i in 0..w.occupied.len() {
            let c = Cell {
                x: i % w.width,
                y: i / w.width,
            };
            assert_eq!(w.cell_color[i], default_color(w.archetype, w.occupied[i], c));
        }
    }

    #[test]
    fn palette_avoids_marker_hues() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let c = palette_color(&mut rng);
            assert_ne!(c, MARKER_LEFT);
            assert_ne!(c, MARKER_RIGHT);
            let [r, g, b] = c.map(|v| v as f64);
            let (max, min) = (r.max(g).max(b), r.min(g).min(b));
            if max - min < 1.0 {
                continue;
            }
            let hue = if max == r {
                60.0 * ((g - b) / (max - min)).rem_euclid(6.0)
            } else if max == g {
                60.0 * ((b - r) / (max - min) + 2.0)
            } else {
                60.0 * ((r - g) / (max - min) + 4.0)
            };
            // quantization can move the hue by a couple of degrees
            assert!((hue - 180.0).abs() > 25.0 && (hue - 300.0).abs() > 25.0, "{c:?} hue {hue}");
        }
    }

    #[test]
    fn markers_follow_turns() {
        let w = generate_world(Archetype::City, 2).unwrap();
        assert!(w.markers.iter().any(|m| m.is_some()));
    }

    #[test]
    fn seeds_mix() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(9, 4, 2), derive_seed(9, 4, 2));
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
    }
}
