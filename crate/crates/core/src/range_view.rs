//! Spherical projection and the 9-channel range residual image.
//!
//! Channel layout of [`RangeResidualImage`]:
//!
//! ```text
//! 0: r   1: x   2: y   3: z   4: remission
//! 5: d1  6: d2  7: d3          (residuals, d1 = most recent predecessor)
//! 8: mask (0 or 1)
//! ```

use std::fs;
use std::io;
use std::path::Path;

use crate::kitti_io::{LabelArray, Point, PointCloud, Pose};

/// Label written to pixels and points that carry no class.
pub const IGNORE_LABEL: u16 = u16::MAX;

pub const RRI_CHANNELS: usize = 9;
pub const MAX_PREDECESSORS: usize = 3;
pub const RANGE_CHANNEL: usize = 0;
pub const REMISSION_CHANNEL: usize = 4;
pub const FIRST_RESIDUAL_CHANNEL: usize = 5;
pub const MASK_CHANNEL: usize = 8;

const RRI_MAGIC: &[u8; 4] = b"RRI1";
const RRI_HEADER_BYTES: usize = 16;

#[derive(thiserror::Error, Debug)]
pub enum RangeViewError {
    #[error("degenerate projection config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label/point pairing mismatch: {labels} labels for {points} points")]
    Pairing { labels: usize, points: usize },
    #[error("at most {MAX_PREDECESSORS} predecessor scans are supported, got {0}")]
    TooManyPredecessors(usize),
    #[error("malformed range residual dump: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    /// Upward field of view in radians.
    pub fov_up: f64,
    /// Downward field of view in radians, stored positive.
    pub fov_down: f64,
    /// Optional upper bound applied to every residual value.
    pub residual_cap: Option<f64>,
}

impl Default for ProjectionConfig {
    /// HDL-64 geometry at 64 x 2048.
    fn default() -> Self {
        Self {
            height: 64,
            width: 2048,
            fov_up: 3f64.to_radians(),
            fov_down: 25f64.to_radians(),
            residual_cap: None,
        }
    }
}

impl ProjectionConfig {
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), RangeViewError> {
        if self.height == 0 || self.width == 0 {
            return Err(RangeViewError::Config(format!(
                "image size {}x{} is empty",
                self.height, self.width
            )));
        }
        if !(self.fov() > 0.0) || !self.fov_up.is_finite() || !self.fov_down.is_finite() {
            return Err(RangeViewError::Config(format!(
                "vertical field of view {} must be positive",
                self.fov()
            )));
        }
        if let Some(cap) = self.residual_cap {
            if !(cap > 0.0) {
                return Err(RangeViewError::Config(format!("residual cap {cap} must be positive")));
            }
        }
        Ok(())
    }

    /// Continuous image coordinates `(u, v)` of a point, or `None` at the origin.
    pub fn continuous_coords(&self, x: f64, y: f64, z: f64) -> Option<(f64, f64)> {
        let r = (x * x + y * y + z * z).sqrt();
        if r == 0.0 {
            return None;
        }
        let u = 0.5 * (1.0 - y.atan2(x) / std::f64::consts::PI) * self.width as f64;
        let v = (1.0 - ((z / r).asin() + self.fov_up) / self.fov()) * self.height as f64;
        Some((u, v))
    }

    /// Discrete pixel `(u, v)` = (column, row): floor, then clamp into the image.
    pub fn pixel_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize)> {
        let (u, v) = self.continuous_coords(x, y, z)?;
        let clamp = |c: f64, n: usize| (c.floor().max(0.0) as usize).min(n - 1);
        Some((clamp(u, self.width), clamp(v, self.height)))
    }
}

/// Single-scan range image.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    /// Range in meters, -1 for empty pixels.
    pub range: Vec<f32>,
    /// Channel-major x, y, z planes (3 x H x W).
    pub xyz: Vec<f32>,
    pub remission: Vec<f32>,
    pub mask: Vec<bool>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            range: vec![-1.0; n],
            xyz: vec![0.0; 3 * n],
            remission: vec![0.0; n],
            mask: vec![false; n],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn xyz_at(&self, pixel: usize) -> [f32; 3] {
        let n = self.pixels();
        [self.xyz[pixel], self.xyz[n + pixel], self.xyz[2 * n + pixel]]
    }
}

/// Bidirectional point/pixel association produced by projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelIndexMap {
    pub width: usize,
    /// `(u, v)` for every point; `None` for points at the origin.
    pub point_to_pixel: Vec<Option<(u32, u32)>>,
    /// Row-major index `v * W + u` -> winning (nearest) point.
    pub pixel_to_point: Vec<Option<u32>>,
}

impl PixelIndexMap {
    pub fn pixel_index(&self, point: usize) -> Option<usize> {
        self.point_to_pixel[point].map(|(u, v)| v as usize * self.width + u as usize)
    }
}

/// Projects a cloud. Collisions resolve to the smallest range; equal ranges
/// keep the lower point index.
pub fn spherical_project(
    cloud: &PointCloud,
    cfg: &ProjectionConfig,
) -> Result<(RangeImage, PixelIndexMap), RangeViewError> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut img = RangeImage::empty(h, w);
    let mut point_to_pixel = Vec::with_capacity(cloud.len());
    let mut pixel_to_point: Vec<Option<u32>> = vec![None; n];
    let mut best = vec![f64::INFINITY; n];

    for (i, p) in cloud.points.iter().enumerate() {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let Some((u, v)) = cfg.pixel_of(x, y, z) else {
            point_to_pixel.push(None);
            continue;
        };
        point_to_pixel.push(Some((u as u32, v as u32)));
        let pix = v * w + u;
        let r = p.range();
        if r < best[pix] {
            best[pix] = r;
            pixel_to_point[pix] = Some(i as u32);
        }
    }

    for (pix, winner) in pixel_to_point.iter().enumerate() {
        if let Some(i) = winner {
            let p = &cloud.points[*i as usize];
            img.range[pix] = best[pix] as f32;
            img.xyz[pix] = p.x;
            img.xyz[n + pix] = p.y;
            img.xyz[2 * n + pix] = p.z;
            img.remission[pix] = p.remission;
            img.mask[pix] = true;
        }
    }

    Ok((
        img,
        PixelIndexMap {
            width: w,
            point_to_pixel,
            pixel_to_point,
        },
    ))
}

/// Applies `rel` to every point; remission is carried over unchanged.
pub fn compensate_scan(cloud: &PointCloud, rel: &Pose) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let [x, y, z] = rel.apply([p.x as f64, p.y as f64, p.z as f64]);
            Point::new(x as f32, y as f32, z as f32, p.remission)
        })
        .collect();
    PointCloud::new(points)
}

/// `|r - r'| / r` where both pixels are valid, 0 elsewhere.
pub fn residual_channel(
    current: &RangeImage,
    prev_reprojected: &RangeImage,
) -> Result<Vec<f32>, RangeViewError> {
    residual_channel_capped(current, prev_reprojected, None)
}

pub fn residual_channel_capped(
    current: &RangeImage,
    prev_reprojected: &RangeImage,
    cap: Option<f64>,
) -> Result<Vec<f32>, RangeViewError> {
    if (current.height, current.width) != (prev_reprojected.height, prev_reprojected.width) {
        return Err(RangeViewError::Shape(format!(
            "residual between {}x{} and {}x{} images",
            current.height, current.width, prev_reprojected.height, prev_reprojected.width
        )));
    }
    let cap = cap.unwrap_or(f64::INFINITY);
    Ok((0..current.pixels())
        .map(|i| {
            if current.mask[i] && prev_reprojected.mask[i] {
                let r = current.range[i] as f64;
                let rp = prev_reprojected.range[i] as f64;
                ((r - rp).abs() / r).min(cap) as f32
            } else {
                0.0
            }
        })
        .collect())
}

/// Dense 9 x H x W network input.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeResidualImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RangeResidualImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; RRI_CHANNELS * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.channel(MASK_CHANNEL).iter().map(|&m| m != 0.0).collect()
    }

    /// `RRI1` header followed by the channels as little-endian float32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RRI_HEADER_BYTES + 4 * self.data.len());
        out.extend_from_slice(RRI_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RangeViewError> {
        if bytes.len() < RRI_HEADER_BYTES || &bytes[..4] != RRI_MAGIC {
            return Err(RangeViewError::Malformed("missing RRI1 header".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
        let (height, width) = (word(1), word(2));
        let expected = RRI_HEADER_BYTES + 4 * RRI_CHANNELS * height * width;
        if bytes.len() != expected {
            return Err(RangeViewError::Malformed(format!(
                "{}x{} image needs {expected} bytes, file has {}",
                height,
                width,
                bytes.len()
            )));
        }
        let data = bytes[RRI_HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { height, width, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), RangeViewError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self, RangeViewError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Builds the range residual image of `current` given up to three
/// predecessors, most recent first, each paired with the transform taking
/// it into the current frame.
pub fn assemble_residual_image(
    current: &PointCloud,
    prev: &[(PointCloud, Pose)],
    cfg: &ProjectionConfig,
) -> Result<(RangeResidualImage, PixelIndexMap), RangeViewError> {
    if prev.len() > MAX_PREDECESSORS {
        return Err(RangeViewError::TooManyPredecessors(prev.len()));
    }
    let (img, map) = spherical_project(current, cfg)?;
    let mut rri = RangeResidualImage::zeros(cfg.height, cfg.width);
    let n = cfg.pixels();

    rri.channel_mut(RANGE_CHANNEL).copy_from_slice(&img.range);
    rri.data[n..4 * n].copy_from_slice(&img.xyz);
    rri.channel_mut(REMISSION_CHANNEL).copy_from_slice(&img.remission);
    for (dst, &m) in rri.channel_mut(MASK_CHANNEL).iter_mut().zip(&img.mask) {
        *dst = if m { 1.0 } else { 0.0 };
    }

    for (k, (cloud, rel)) in prev.iter().enumerate() {
        let moved = compensate_scan(cloud, rel);
        let (reprojected, _) = spherical_project(&moved, cfg)?;
        let residual = residual_channel_capped(&img, &reprojected, cfg.residual_cap)?;
        rri.channel_mut(FIRST_RESIDUAL_CHANNEL + k).copy_from_slice(&residual);
    }
    Ok((rri, map))
}

/// Per-pixel semantic ids of the winning points; empty pixels get
/// [`IGNORE_LABEL`].
pub fn project_labels(
    labels: &LabelArray,
    map: &PixelIndexMap,
    cfg: &ProjectionConfig,
) -> Result<Vec<u16>, RangeViewError> {
    if labels.len() != map.point_to_pixel.len() {
        return Err(RangeViewError::Pairing {
            labels: labels.len(),
            points: map.point_to_pixel.len(),
        });
    }
    if map.pixel_to_point.len() != cfg.pixels() {
        return Err(RangeViewError::Shape(format!(
            "index map has {} pixels, config {}",
            map.pixel_to_point.len(),
            cfg.pixels()
        )));
    }
    Ok(map
        .pixel_to_point
        .iter()
        .map(|w| w.map_or(IGNORE_LABEL, |i| labels.semantic[i as usize]))
        .collect())
}

/// Per-channel standardization for channels 0-4; residual and mask
/// channels are passed through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub means: [f64; 5],
    pub stds: [f64; 5],
}

impl Default for Normalization {
    /// SemanticKITTI statistics for (range, x, y, z, remission).
    fn default() -> Self {
        Self {
            means: [12.12, 10.88, 0.23, -1.04, 0.21],
            stds: [12.32, 11.47, 6.91, 0.86, 0.16],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            means: [0.0; 5],
            stds: [1.0; 5],
        }
    }
}
