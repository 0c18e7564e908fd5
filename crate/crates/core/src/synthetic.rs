//! Deterministic ray-cast scans of a closed tunnel with a parked car and a
//! moving van, used for the bundled mini-sequence and for benchmarks.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kitti_io::{
    write_calibration, write_labels, write_point_cloud, write_poses, KittiError, LabelArray, Point, PointCloud, Pose,
};
use crate::range_view::ProjectionConfig;

pub const RAW_ROAD: u16 = 40;
pub const RAW_SIDEWALK: u16 = 48;
pub const RAW_BUILDING: u16 = 50;
/// Maps to ignore in both protocols.
pub const RAW_OTHER_STRUCTURE: u16 = 52;
pub const RAW_CAR: u16 = 10;
pub const RAW_MOVING_CAR: u16 = 252;

/// The sensor rides low: only shallow downward rays are in the image.
const FLOOR_Z: f64 = -0.6;
const CEILING_Z: f64 = 3.5;
const WALL_Y: f64 = 10.0;
const SIDEWALK_Y: f64 = 6.5;
const END_X: (f64, f64) = (-40.0, 120.0);
const MAX_RANGE: f64 = 200.0;

/// Sensor advance and yaw per scan.
pub const EGO_STEP: f64 = 0.25;
pub const EGO_YAW_STEP: f64 = 0.01;
/// World-frame advance of the van per scan.
pub const VAN_STEP: f64 = 0.9;

struct Hit {
    t: f64,
    raw: u16,
    instance: u16,
    remission: f32,
}

struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
    raw: u16,
    instance: u16,
    remission: f32,
}

impl Aabb {
    fn centered(c: [f64; 3], half: [f64; 3], raw: u16, instance: u16, remission: f32) -> Self {
        let (c, h) = (Vector3::from(c), Vector3::from(half));
        Self {
            min: c - h,
            max: c + h,
            raw,
            instance,
            remission,
        }
    }

    /// Slab test; entry distance when the ray starts outside.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut near, mut far) = ((self.min[a] - o[a]) / d[a], (self.max[a] - o[a]) / d[a]);
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        (t0 > 0.0).then_some(t0)
    }
}

fn boxes(scan: usize) -> [Aabb; 2] {
    [
        Aabb::centered([14.0, 3.2, FLOOR_Z + 0.73], [2.1, 0.9, 0.73], RAW_CAR, 1, 0.55),
        Aabb::centered([6.0 + VAN_STEP * scan as f64, -2.5, FLOOR_Z + 1.23], [2.6, 1.0, 1.23], RAW_MOVING_CAR, 2, 0.65),
    ]
}

/// Closest surface along a world-frame ray.
fn cast(o: &Vector3<f64>, d: &Vector3<f64>, scan: usize) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut offer = |t: f64, raw: u16, instance: u16, remission: f32| {
        if t > 1e-6 && t < MAX_RANGE && best.as_ref().is_none_or(|b| t < b.t) {
            best = Some(Hit {
                t,
                raw,
                instance,
                remission,
            });
        }
    };
    if d.z < 0.0 {
        let t = (FLOOR_Z - o.z) / d.z;
        let y = o.y + t * d.y;
        let raw = if y.abs() < SIDEWALK_Y { RAW_ROAD } else { RAW_SIDEWALK };
        offer(t, raw, 0, if raw == RAW_ROAD { 0.18 } else { 0.3 });
    }
    if d.z > 0.0 {
        offer((CEILING_Z - o.z) / d.z, RAW_OTHER_STRUCTURE, 0, 0.25);
    }
    if d.y != 0.0 {
        let wall = if d.y > 0.0 { WALL_Y } else { -WALL_Y };
        offer((wall - o.y) / d.y, RAW_BUILDING, 0, 0.42);
    }
    if d.x != 0.0 {
        let end = if d.x > 0.0 { END_X.1 } else { END_X.0 };
        offer((end - o.x) / d.x, RAW_BUILDING, 0, 0.4);
    }
    for b in boxes(scan) {
        if let Some(t) = b.intersect(o, d) {
            offer(t, b.raw, b.instance, b.remission);
        }
    }
    best
}

/// Lidar pose of scan `k` in the world frame.
pub fn sensor_pose(k: usize) -> Pose {
    Pose::translation(EGO_STEP * k as f64, 0.0, 0.0).compose(&Pose::rotation_z(EGO_YAW_STEP * k as f64))
}

/// A velodyne-to-camera extrinsic shaped like the KITTI one.
pub fn kitti_like_tr() -> Matrix4<f64> {
    Matrix4::new(
        0.0, -1.0, 0.0, -0.004, //
        0.0, 0.0, -1.0, -0.076, //
        1.0, 0.0, 0.0, -0.27, //
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Regular beam pattern: `beams` elevation rows by `azimuths` columns,
/// aimed at pixel centers of `cfg` and jittered by up to `jitter` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPattern {
    pub beams: usize,
    pub azimuths: usize,
    pub jitter: f64,
}

/// Scan `k` of the scene in its own sensor frame.
pub fn synthetic_scan(k: usize, pattern: &ScanPattern, cfg: &ProjectionConfig, seed: u64) -> (PointCloud, LabelArray) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    let pose = sensor_pose(k);
    let rot = pose.rotation();
    let origin = pose.translation_vector();
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut points = Vec::with_capacity(pattern.beams * pattern.azimuths);
    let (mut semantic, mut instance) = (Vec::new(), Vec::new());
    for b in 0..pattern.beams {
        for a in 0..pattern.azimuths {
            let row = (b as f64 + 0.5) * h / pattern.beams as f64 + rng.random_range(-pattern.jitter..=pattern.jitter);
            let col = (a as f64 + 0.5) * w / pattern.azimuths as f64 + rng.random_range(-pattern.jitter..=pattern.jitter);
            let pitch = (1.0 - row / h) * cfg.fov() - cfg.fov_up;
            let yaw = std::f64::consts::PI * (1.0 - 2.0 * col / w);
            let local = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin());
            let Some(hit) = cast(&origin, &(rot * local), k) else {
                continue;
            };
            let p = local * hit.t;
            let noise: f32 = rng.random_range(-0.03..=0.03);
            points.push(Point::new(p.x as f32, p.y as f32, p.z as f32, (hit.remission + noise).clamp(0.0, 1.0)));
            semantic.push(hit.raw);
            instance.push(hit.instance);
        }
    }
    (PointCloud::new(points), LabelArray { semantic, instance })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub clouds: Vec<PointCloud>,
    pub labels: Vec<LabelArray>,
    /// Lidar poses in the world frame.
    pub poses: Vec<Pose>,
    pub tr: Matrix4<f64>,
}

/// One ray per pixel of the mini configuration.
pub const MINI_PATTERN: ScanPattern = ScanPattern {
    beams: 64,
    azimuths: 64,
    jitter: 0.25,
};

pub const MINI_SCANS: usize = 4;

/// Pipeline config shipped next to the mini-sequence.
pub const MINI_CONFIG: &str = "\
# Mini-sequence: 64 x 64 range images and a narrow network.
projection.width = 64
seed = 7
network.mlp_hidden = 16
network.meta_channels = 16
network.widths = 16 32 64 128
network.context_channels = 16
network.fuse_channels = 16
";

pub fn synthetic_sequence(scans: usize, pattern: &ScanPattern, cfg: &ProjectionConfig, seed: u64) -> SyntheticSequence {
    let (clouds, labels) = (0..scans).map(|k| synthetic_scan(k, pattern, cfg, seed)).unzip();
    SyntheticSequence {
        clouds,
        labels,
        poses: (0..scans).map(sensor_pose).collect(),
        tr: kitti_like_tr(),
    }
}

/// Writes `velodyne/`, `labels/`, `poses.txt` and `calib.txt` under `dir`.
pub fn write_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<(), KittiError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| KittiError::Io { path, source }
    };
    for sub in ["velodyne", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
    }
    for (k, (cloud, labels)) in seq.clouds.iter().zip(&seq.labels).enumerate() {
        write_point_cloud(cloud, &dir.join(format!("velodyne/{k:06}.bin")))?;
        write_labels(labels, &dir.join(format!("labels/{k:06}.label")))?;
    }
    write_poses(&seq.poses, &seq.tr, &dir.join("poses.txt"))?;
    write_calibration(&seq.tr, &dir.join("calib.txt"))
}
