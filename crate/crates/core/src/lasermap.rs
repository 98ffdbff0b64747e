//! Rasterizes a single 180° laser sweep into a binary distance-map image.
//!
//! Beam `i` at range `d` (in pixels) lands at
//!
//! ```text
//! x_i = x_0 + d·cos(π − φ·i)
//! y_i = y_0 − d·sin(φ·i)
//! ```
//!
//! with `(x_0, y_0)` the robot pixel and `φ` the angular increment. Beam 0
//! points left, the middle beam straight ahead (up in the image) and the last
//! beam right, so every return lies on or above the robot row.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm::Image;
use crate::tensor::{Real, Tensor};

/// One sweep of range readings, beam 0 leftmost.
#[derive(Clone, Debug, PartialEq)]
pub struct LaserScan {
    pub ranges: Vec<f64>,
    pub fov: f64,
    pub phi: f64,
    pub max_range: f64,
}

impl LaserScan {
    pub fn new(ranges: Vec<f64>, fov: f64, max_range: f64) -> Result<Self> {
        if ranges.len() < 2 {
            return Err(Error::Config(format!(
                "laser scan needs at least 2 beams, got {}",
                ranges.len()
            )));
        }
        if !(fov > 0.0 && max_range > 0.0) {
            return Err(Error::Config("laser fov and max_range must be positive".into()));
        }
        let phi = fov / (ranges.len() - 1) as f64;
        Ok(Self {
            ranges,
            fov,
            phi,
            max_range,
        })
    }

    /// A 180° sweep.
    pub fn front(ranges: Vec<f64>, max_range: f64) -> Result<Self> {
        Self::new(ranges, PI, max_range)
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// A beam carries a return when its range is finite, positive and short
    /// of `max_range`; a reading of exactly `max_range` is the no-return value.
    pub fn is_return(&self, i: usize) -> bool {
        let d = self.ranges[i];
        d.is_finite() && d > 0.0 && d < self.max_range
    }

    /// Text form: `N phi max_range` on the first line, the N ranges on the second.
    pub fn to_text(&self) -> String {
        let ranges: Vec<String> = self.ranges.iter().map(|r| r.to_string()).collect();
        format!(
            "{} {} {}\n{}\n",
            self.ranges.len(),
            self.phi,
            self.max_range,
            ranges.join(" ")
        )
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty scan file"))?
            .split_whitespace()
            .collect();
        if header.len() != 3 {
            return Err(Error::format(path, "scan header must be `N phi max_range`"));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::format(path, format!("bad number {s:?}")))
        };
        let n: usize = header[0]
            .parse()
            .map_err(|_| Error::format(path, "bad beam count"))?;
        let (phi, max_range) = (parse(header[1])?, parse(header[2])?);
        let ranges = lines
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(parse)
            .collect::<Result<Vec<f64>>>()?;
        if ranges.len() != n || n < 2 {
            return Err(Error::format(
                path,
                format!("expected {n} ranges, found {}", ranges.len()),
            ));
        }
        Ok(Self {
            fov: phi * (n - 1) as f64,
            ranges,
            phi,
            max_range,
        })
    }
}

/// Geometry of the distance-map raster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceMapConfig {
    pub height: usize,
    pub width: usize,
    /// Robot position `(x_0, y_0)` in pixels.
    pub origin: (f64, f64),
    pub meters_per_pixel: f64,
}

impl DistanceMapConfig {
    /// Robot at the bottom-center pixel.
    pub fn new(height: usize, width: usize, meters_per_pixel: f64) -> Self {
        Self {
            height,
            width,
            origin: ((width / 2) as f64, (height - 1) as f64),
            meters_per_pixel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (x0, y0) = self.origin;
        let inside = x0 >= 0.0 && y0 >= 0.0 && x0 < self.width as f64 && y0 < self.height as f64;
        if !inside || !(self.meters_per_pixel > 0.0) {
            return Err(Error::Config(format!("invalid distance map config {self:?}")));
        }
        Ok(())
    }
}

impl Default for DistanceMapConfig {
    /// 40×80 map covering 10 m ahead and to each side.
    fn default() -> Self {
        Self::new(40, 80, 0.25)
    }
}

/// Binary occupancy image, 1 = laser return.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl DistanceMap {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    /// PGM image with returns at 255.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.pixels.iter().map(|&p| if p != 0 { 255 } else { 0 }).collect(),
        }
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::Config("distance map must be single channel".into()));
        }
        Ok(Self {
            height: img.height,
            width: img.width,
            pixels: img.data.iter().map(|&p| u8::from(p >= 128)).collect(),
        })
    }
}

/// Beam bookkeeping from one rasterization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RasterStats {
    /// Beams with a return.
    pub returns: usize,
    /// Returns landing inside the image.
    pub drawn: usize,
    /// Returns landing outside the image.
    pub out_of_bounds: usize,
}

/// Pixel position `(x, y)` of a beam at range `d_px` pixels.
pub fn beam_point(origin: (f64, f64), phi: f64, i: usize, d_px: f64) -> (f64, f64) {
    let angle = phi * i as f64;
    (
        origin.0 + d_px * (PI - angle).cos(),
        origin.1 - d_px * angle.sin(),
    )
}

pub fn scan_to_distance_map(scan: &LaserScan, cfg: &DistanceMapConfig) -> (DistanceMap, RasterStats) {
    let mut map = DistanceMap {
        height: cfg.height,
        width: cfg.width,
        pixels: vec![0; cfg.height * cfg.width],
    };
    let mut stats = RasterStats::default();
    for i in 0..scan.len() {
        if !scan.is_return(i) {
            continue;
        }
        stats.returns += 1;
        let d = scan.ranges[i] / cfg.meters_per_pixel;
        let (x, y) = beam_point(cfg.origin, scan.phi, i, d);
        let (row, col) = (y.round(), x.round());
        if row >= 0.0 && col >= 0.0 && row < cfg.height as f64 && col < cfg.width as f64 {
            map.pixels[row as usize * cfg.width + col as usize] = 1;
            stats.drawn += 1;
        } else {
            stats.out_of_bounds += 1;
        }
    }
    (map, stats)
}

/// `[1, H, W]` tensor with values in {0, 1}.
pub fn distance_map_to_tensor<T: Real>(map: &DistanceMap) -> Tensor<T> {
    let data = map
        .pixels
        .iter()
        .map(|&p| if p != 0 { T::one() } else { T::zero() })
        .collect();
    Tensor::new(&[1, map.height, map.width], data).expect("map dimensions")
}
