use crate::cloudnet::PointCloud;
use crate::error::{Error, Result};
use crate::lasermap::LaserScan;
use crate::pnm::Image;

use super::{Cell, World, CELL};

/// Pinhole camera mounted on the robot, looking along the heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Mounting height above the floor in meters.
    pub mount_height: f64,
    /// Depth returns beyond this are dropped.
    pub max_depth: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            width: 80,
            height: 60,
            focal: 40.0,
            cx: 40.0,
            cy: 30.0,
            mount_height: 0.5,
            max_depth: 10.0,
        }
    }
}

impl Camera {
    /// Bearing of column `u` relative to the optical axis, left positive.
    pub fn column_bearing(&self, u: usize) -> f64 {
        (self.cx - u as f64).atan2(self.focal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaserConfig {
    pub beams: usize,
    pub max_range: f64,
}

impl Default for LaserConfig {
    fn default() -> Self {
        Self {
            beams: 181,
            max_range: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SensorConfig {
    pub camera: Camera,
    pub laser: LaserConfig,
}

/// One synchronized reading of all three sensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorFrame {
    pub rgb: Image,
    pub scan: LaserScan,
    /// One point per depth pixel in row-major order, invalid where there is no return.
    pub cloud: PointCloud,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub cell: Cell,
}

/// Walks the grid along a ray (DDA) and returns the first occupied cell
/// within `max_dist`.
pub fn raycast(world: &World, x: f64, y: f64, angle: f64, max_dist: f64) -> Option<Hit> {
    let (dx, dy) = (angle.cos(), angle.sin());
    let (mut cx, mut cy) = ((x / CELL).floor() as i64, (y / CELL).floor() as i64);
    let step_x = if dx > 0.0 { 1 } else { -1 };
    let step_y = if dy > 0.0 { 1 } else { -1 };
    let delta_x = if dx == 0.0 { f64::INFINITY } else { CELL / dx.abs() };
    let delta_y = if dy == 0.0 { f64::INFINITY } else { CELL / dy.abs() };
    let next = |c: i64, p: f64, d: f64, s: i64| {
        if d == 0.0 {
            f64::INFINITY
        } else {
            let edge = if s > 0 { (c + 1) as f64 * CELL } else { c as f64 * CELL };
            (edge - p) / d
        }
    };
    let mut t_x = next(cx, x, dx, step_x);
    let mut t_y = next(cy, y, dy, step_y);
    loop {
        let t = if t_x < t_y {
            cx += step_x;
            let t = t_x;
            t_x += delta_x;
            t
        } else {
            cy += step_y;
            let t = t_y;
            t_y += delta_y;
            t
        };
        if t > max_dist {
            return None;
        }
        if cx < 0 || cy < 0 || cx >= world.width as i64 || cy >= world.height as i64 {
            return None;
        }
        let cell = Cell {
            x: cx as usize,
            y: cy as usize,
        };
        if world.occupied[world.index(cell)] {
            return Some(Hit { distance: t, cell });
        }
    }
}

fn shade(color: [u8; 3], factor: f64) -> [u8; 3] {
    color.map(|c| (c as f64 * factor).round().clamp(0.0, 255.0) as u8)
}

fn attenuation(d: f64) -> f64 {
    1.0 / (1.0 + 0.12 * d)
}

fn surface_color(world: &World, c: Cell) -> [u8; 3] {
    let i = world.index(c);
    world.markers[i].map_or(world.cell_color[i], |t| t.color())
}

/// Renders RGB, laser scan and depth cloud from one pose.
pub fn render_sensors(world: &World, cfg: &SensorConfig, x: f64, y: f64, heading: f64) -> Result<SensorFrame> {
    if world.is_occupied(x, y) {
        return Err(Error::InvalidPose { x, y });
    }
    let p = world.params();
    let cam = &cfg.camera;

    let n = cfg.laser.beams;
    let max_range = cfg.laser.max_range;
    let ranges: Vec<f64> = (0..n)
        .map(|i| {
            // beam 0 points left, the last beam right
            let bearing = std::f64::consts::FRAC_PI_2 - i as f64 * std::f64::consts::PI / (n - 1) as f64;
            raycast(world, x, y, heading + bearing, max_range).map_or(max_range, |h| h.distance.min(max_range))
        })
        .collect();
    let scan = LaserScan::new(ranges, std::f64::consts::PI, max_range)?;

    let (w, h) = (cam.width, cam.height);
    let mut rgb = Image::new(w, h, 3);
    let mut points = vec![[f32::NAN; 3]; w * h];
    let (fx, fy) = (heading.cos(), heading.sin());
    let (rx, ry) = (heading.sin(), -heading.cos());
    let sky = shade(p.sky, p.light);
    for u in 0..w {
        let bearing = cam.column_bearing(u);
        let hit = raycast(world, x, y, heading + bearing, 4.0 * cam.max_depth);
        let (top, bottom, z) = match hit {
            Some(hit) => {
                let z = hit.distance * bearing.cos();
                let top = cam.cy + cam.focal * (cam.mount_height - p.wall_height) / z;
                let bottom = cam.cy + cam.focal * cam.mount_height / z;
                (top, bottom, z)
            }
            None => (cam.cy, cam.cy, f64::INFINITY),
        };
        for v in 0..h {
            let vf = v as f64;
            let px = &mut rgb.data[(v * w + u) * 3..(v * w + u) * 3 + 3];
            if let (Some(hit), true) = (hit, vf >= top && vf <= bottom) {
                let color = surface_color(world, hit.cell);
                px.copy_from_slice(&shade(color, p.light * attenuation(hit.distance)));
                if z <= cam.max_depth {
                    points[v * w + u] = [
                        ((u as f64 - cam.cx) * z / cam.focal) as f32,
                        ((vf - cam.cy) * z / cam.focal) as f32,
                        z as f32,
                    ];
                }
            } else if vf > cam.cy {
                // floor under the ray through this pixel
                let zf = cam.focal * cam.mount_height / (vf - cam.cy);
                let lateral = (u as f64 - cam.cx) * zf / cam.focal;
                let gx = x + zf * fx + lateral * rx;
                let gy = y + zf * fy + lateral * ry;
                let color = match world.cell_at(gx, gy) {
                    Some(c) => surface_color(world, c),
                    None => p.sky,
                };
                let dist = zf.hypot(lateral);
                px.copy_from_slice(&shade(color, 0.9 * p.light * attenuation(dist)));
            } else {
                px.copy_from_slice(&sky);
            }
        }
    }
    Ok(SensorFrame {
        rgb,
        scan,
        cloud: PointCloud::new(points),
    })
}
