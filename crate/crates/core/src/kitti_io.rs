//! SemanticKITTI on-disk formats and pose algebra.
//!
//! ```text
//! velodyne/NNNNNN.bin   [x:f32 | y:f32 | z:f32 | remission:f32]*      (little-endian)
//! labels/NNNNNN.label   [semantic:u16 (low) | instance:u16 (high)]*   (little-endian u32)
//! poses.txt             12 reals per line, row-major 3x4, camera frame
//! calib.txt             `KEY: 12 reals`, only `Tr` is consumed
//! ```
//!
//! Poses are converted into the LiDAR frame at load time
//! (`P_lidar = Tr^-1 * P_cam * Tr`) so every downstream consumer works in a
//! single frame.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

const POINT_RECORD_BYTES: usize = 16;
const LABEL_RECORD_BYTES: usize = 4;
const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(thiserror::Error, Debug)]
pub enum KittiError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed file {path}: length {len} is not a multiple of {record} bytes")]
    Malformed {
        path: PathBuf,
        len: usize,
        record: usize,
    },
    #[error("calibration error in {path}: {reason}")]
    Calibration { path: PathBuf, reason: String },
    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> KittiError + '_ {
    move |source| KittiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A single LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub remission: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, remission: f32) -> Self {
        Self { x, y, z, remission }
    }

    /// Euclidean distance from the sensor origin, accumulated in f64.
    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Packed little-endian float32 quadruples, the `.bin` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * POINT_RECORD_BYTES);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.remission] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// What ingestion did to the raw records of one scan.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestReport {
    /// Number of records in the file.
    pub raw_count: usize,
    /// Index into the raw records for every kept point, in order.
    pub kept: Vec<usize>,
    /// Records whose remission was pulled into [0, 1].
    pub clamped: usize,
}

impl IngestReport {
    pub fn dropped(&self) -> usize {
        self.raw_count - self.kept.len()
    }
}

/// Decodes a `.bin` payload. Non-finite coordinates are dropped and
/// remission is clamped to [0, 1] (NaN remission becomes 0).
pub fn decode_point_cloud(bytes: &[u8]) -> Option<(PointCloud, IngestReport)> {
    if bytes.len() % POINT_RECORD_BYTES != 0 {
        return None;
    }
    let raw_count = bytes.len() / POINT_RECORD_BYTES;
    let mut points = Vec::with_capacity(raw_count);
    let mut report = IngestReport {
        raw_count,
        kept: Vec::with_capacity(raw_count),
        clamped: 0,
    };
    for (i, rec) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let (x, y, z, e) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            continue;
        }
        let clamped = if e.is_nan() { 0.0 } else { e.clamp(0.0, 1.0) };
        if clamped.to_bits() != e.to_bits() {
            report.clamped += 1;
        }
        points.push(Point::new(x, y, z, clamped));
        report.kept.push(i);
    }
    Some((PointCloud { points }, report))
}

pub fn read_point_cloud_with_report(path: &Path) -> Result<(PointCloud, IngestReport), KittiError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (cloud, report) = decode_point_cloud(&bytes).ok_or_else(|| KittiError::Malformed {
        path: path.to_path_buf(),
        len: bytes.len(),
        record: POINT_RECORD_BYTES,
    })?;
    if report.dropped() > 0 {
        log::warn!(
            "{}: dropped {} point(s) with non-finite coordinates",
            path.display(),
            report.dropped()
        );
    }
    Ok((cloud, report))
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud, KittiError> {
    read_point_cloud_with_report(path).map(|(c, _)| c)
}

pub fn write_point_cloud(cloud: &PointCloud, path: &Path) -> Result<(), KittiError> {
    fs::write(path, cloud.to_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelArray {
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
}

impl LabelArray {
    /// Semantic ids with zero instance ids, as emitted for predictions.
    pub fn from_semantic(semantic: Vec<u16>) -> Self {
        let instance = vec![0; semantic.len()];
        Self { semantic, instance }
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    /// Keeps only the records at `indices`, typically `IngestReport::kept`.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            semantic: indices.iter().map(|&i| self.semantic[i]).collect(),
            instance: indices.iter().map(|&i| self.instance[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * LABEL_RECORD_BYTES);
        for (&s, &i) in self.semantic.iter().zip(&self.instance) {
            let word = (s as u32) | ((i as u32) << 16);
            out.extend_from_slice(&word.to_le_bytes());
        }
        out
    }
}

pub fn decode_labels(bytes: &[u8]) -> Option<LabelArray> {
    if bytes.len() % LABEL_RECORD_BYTES != 0 {
        return None;
    }
    let (semantic, instance) = bytes
        .chunks_exact(LABEL_RECORD_BYTES)
        .map(|w| {
            let word = u32::from_le_bytes(w.try_into().unwrap());
            ((word & 0xFFFF) as u16, (word >> 16) as u16)
        })
        .unzip();
    Some(LabelArray { semantic, instance })
}

pub fn read_labels(path: &Path) -> Result<LabelArray, KittiError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_labels(&bytes).ok_or_else(|| KittiError::Malformed {
        path: path.to_path_buf(),
        len: bytes.len(),
        record: LABEL_RECORD_BYTES,
    })
}

/// Writes semantic ids only; the instance half of every word is zero.
pub fn write_predictions(labels: &LabelArray, path: &Path) -> Result<(), KittiError> {
    let out = LabelArray::from_semantic(labels.semantic.clone());
    fs::write(path, out.to_bytes()).map_err(io_err(path))
}

/// Writes semantic and instance ids, the ground-truth layout.
pub fn write_labels(labels: &LabelArray, path: &Path) -> Result<(), KittiError> {
    fs::write(path, labels.to_bytes()).map_err(io_err(path))
}

/// Homogeneous rigid transform. The rotation block is orthonormal with
/// positive determinant and the bottom row is `[0, 0, 0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, KittiError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(KittiError::InvalidPose("non-finite entry".into()));
        }
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(KittiError::InvalidPose(format!(
                "bottom row is {bottom}, expected [0 0 0 1]"
            )));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let dev = (r.transpose() * r - Matrix3::identity()).amax();
        if dev >= ORTHONORMAL_TOL {
            return Err(KittiError::InvalidPose(format!(
                "rotation block not orthonormal (|R^T R - I|inf = {dev:e})"
            )));
        }
        if r.determinant() <= 0.0 {
            return Err(KittiError::InvalidPose("rotation has non-positive determinant".into()));
        }
        Ok(Pose(m))
    }

    /// Row-major 3x4 `[R | t]`, the KITTI text layout.
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self, KittiError> {
        Self::from_matrix(extend_3x4(v))
    }

    pub fn from_rotation_translation(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, KittiError> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::from_matrix(m)
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = x;
        m[(1, 3)] = y;
        m[(2, 3)] = z;
        Pose(m)
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut m = Matrix4::identity();
        m[(0, 0)] = c;
        m[(0, 1)] = -s;
        m[(1, 0)] = s;
        m[(1, 1)] = c;
        Pose(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Rigid inverse `[R^T | -R^T t]`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation_vector());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose(m)
    }

    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose(self.0 * rhs.0)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let h = self.0 * Vector4::new(p[0], p[1], p[2], 1.0);
        [h[0], h[1], h[2]]
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }
}

fn extend_3x4(v: &[f64; 12]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = v[r * 4 + c];
        }
    }
    m
}

fn parse_reals(path: &Path, line_no: usize, tokens: &[&str]) -> Result<[f64; 12], KittiError> {
    if tokens.len() != 12 {
        return Err(KittiError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("expected 12 values, found {}", tokens.len()),
        });
    }
    let mut out = [0.0; 12];
    for (slot, tok) in out.iter_mut().zip(tokens) {
        *slot = tok.parse::<f64>().map_err(|_| KittiError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("non-numeric token {tok:?}"),
        })?;
    }
    Ok(out)
}

/// Reads the `Tr` (velodyne-to-camera) matrix from a `calib.txt` file.
pub fn read_calibration(calib_path: &Path) -> Result<Matrix4<f64>, KittiError> {
    let text = fs::read_to_string(calib_path).map_err(io_err(calib_path))?;
    for (i, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        if key.trim() == "Tr" {
            let tokens: Vec<&str> = rest.split_whitespace().collect();
            let tr = extend_3x4(&parse_reals(calib_path, i + 1, &tokens)?);
            if tr.try_inverse().is_none() {
                return Err(KittiError::Calibration {
                    path: calib_path.to_path_buf(),
                    reason: "Tr is singular".into(),
                });
            }
            return Ok(tr);
        }
    }
    Err(KittiError::Calibration {
        path: calib_path.to_path_buf(),
        reason: "no `Tr:` line".into(),
    })
}

/// Loads camera-frame poses and re-expresses them in the LiDAR frame.
pub fn read_poses(poses_path: &Path, calib_path: &Path) -> Result<Vec<Pose>, KittiError> {
    let tr = read_calibration(calib_path)?;
    let tr_inv = tr.try_inverse().expect("checked in read_calibration");
    let text = fs::read_to_string(poses_path).map_err(io_err(poses_path))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let cam = extend_3x4(&parse_reals(poses_path, i + 1, &tokens)?);
        let mut lidar = tr_inv * cam * tr;
        // Conjugation by a general 4x4 leaves round-off in the bottom row.
        lidar.fixed_view_mut::<1, 4>(3, 0).copy_from(&Vector4::new(0.0, 0.0, 0.0, 1.0).transpose());
        poses.push(Pose::from_matrix(lidar).map_err(|e| KittiError::Parse {
            path: poses_path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(poses)
}

/// Writes LiDAR-frame poses back to camera-frame `poses.txt` text
/// (`P_cam = Tr * P_lidar * Tr^-1`).
pub fn write_poses(poses: &[Pose], tr: &Matrix4<f64>, path: &Path) -> Result<(), KittiError> {
    let tr_inv = tr.try_inverse().ok_or_else(|| KittiError::Calibration {
        path: path.to_path_buf(),
        reason: "Tr is singular".into(),
    })?;
    let mut out = Vec::new();
    for p in poses {
        let cam = tr * p.matrix() * tr_inv;
        let row: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{:e}", cam[(r, c)]))
            .collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_calibration(tr: &Matrix4<f64>, path: &Path) -> Result<(), KittiError> {
    let row: Vec<String> = (0..3)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .map(|(r, c)| format!("{:e}", tr[(r, c)]))
        .collect();
    let zeros = "0 0 0 0 0 0 0 0 0 0 0 0";
    let text = format!("P0: {zeros}\nP1: {zeros}\nP2: {zeros}\nP3: {zeros}\nTr: {}\n", row.join(" "));
    fs::write(path, text).map_err(io_err(path))
}

/// Transform taking points of scan `k` into the frame of scan `l`:
/// `pose_l^-1 * pose_k`.
pub fn relative_transform(pose_k: &Pose, pose_l: &Pose) -> Pose {
    pose_l.inverse().compose(pose_k)
}
