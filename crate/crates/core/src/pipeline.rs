//! Sequence-level orchestration shared by the command-line tool and tests.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::CheckpointError;
use crate::config::{ConfigError, PipelineConfig};
use crate::evaluation::{remap_labels, ClassMapping, ConfusionMatrix, EvalError};
use crate::kitti_io::{
    read_labels, read_point_cloud_with_report, read_poses, relative_transform, IngestReport, KittiError,
    LabelArray, PointCloud, Pose,
};
use crate::losses::{total_loss, LossBreakdown, LossError};
use crate::net_blocks::{network_forward, NetworkParams};
use crate::postproc::{knn_refine, PostprocError};
use crate::range_view::{
    assemble_residual_image, project_labels, PixelIndexMap, RangeImage, RangeResidualImage, RangeViewError,
    IGNORE_LABEL, MASK_CHANNEL, RANGE_CHANNEL, REMISSION_CHANNEL,
};
use crate::tensor_ops::{softmax_channels, FeatureMap, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error(transparent)]
    RangeView(#[from] RangeViewError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Postproc(#[from] PostprocError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{0}")]
    Data(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| {
        KittiError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

/// Sorted file stems in `dir` with extension `ext`.
pub fn list_stems(dir: &Path, ext: &str) -> Result<Vec<String>, PipelineError> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// `dir/labels` when present, else `dir`.
pub fn label_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("labels");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

/// A SemanticKITTI-style sequence directory.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub root: PathBuf,
    pub scans: Vec<String>,
    /// Lidar-frame poses, one per scan.
    pub poses: Vec<Pose>,
}

impl Sequence {
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        for need in ["velodyne", "poses.txt", "calib.txt"] {
            if !root.join(need).exists() {
                return Err(PipelineError::Data(format!("{} is missing {need}", root.display())));
            }
        }
        let scans = list_stems(&root.join("velodyne"), "bin")?;
        if scans.is_empty() {
            return Err(PipelineError::Data(format!("{} has no scans", root.display())));
        }
        let poses = read_poses(&root.join("poses.txt"), &root.join("calib.txt"))?;
        if poses.len() < scans.len() {
            return Err(PipelineError::Data(format!(
                "{} scans but only {} poses",
                scans.len(),
                poses.len()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            scans,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn scan_path(&self, i: usize) -> PathBuf {
        self.root.join("velodyne").join(format!("{}.bin", self.scans[i]))
    }

    pub fn label_path(&self, i: usize) -> PathBuf {
        self.root.join("labels").join(format!("{}.label", self.scans[i]))
    }

    pub fn load_cloud(&self, i: usize) -> Result<(PointCloud, IngestReport), PipelineError> {
        Ok(read_point_cloud_with_report(&self.scan_path(i))?)
    }

    /// Labels aligned with the kept points of scan `i`, if a label file exists.
    pub fn load_labels(&self, i: usize, report: &IngestReport) -> Result<Option<LabelArray>, PipelineError> {
        let path = self.label_path(i);
        if !path.exists() {
            return Ok(None);
        }
        let labels = read_labels(&path)?;
        if labels.len() != report.raw_count {
            return Err(RangeViewError::Pairing {
                labels: labels.len(),
                points: report.raw_count,
            }
            .into());
        }
        Ok(Some(labels.select(&report.kept)))
    }
}

/// One scan with its range residual image and projection bookkeeping.
#[derive(Debug, Clone)]
pub struct PreparedScan {
    pub cloud: PointCloud,
    pub report: IngestReport,
    pub rri: RangeResidualImage,
    pub map: PixelIndexMap,
}

impl PreparedScan {
    pub fn range_image(&self) -> RangeImage {
        range_image_from_rri(&self.rri)
    }

    /// Spreads per-kept-point values over the raw record order; dropped
    /// records get `fill`.
    pub fn to_raw_order(&self, values: &[u16], fill: u16) -> Vec<u16> {
        let mut out = vec![fill; self.report.raw_count];
        for (&raw, &v) in self.report.kept.iter().zip(values) {
            out[raw] = v;
        }
        out
    }
}

pub fn range_image_from_rri(rri: &RangeResidualImage) -> RangeImage {
    let n = rri.pixels();
    RangeImage {
        height: rri.height,
        width: rri.width,
        range: rri.channel(RANGE_CHANNEL).to_vec(),
        xyz: rri.data[n..4 * n].to_vec(),
        remission: rri.channel(REMISSION_CHANNEL).to_vec(),
        mask: rri.channel(MASK_CHANNEL).iter().map(|&m| m != 0.0).collect(),
    }
}

/// Scan `i` with up to `cfg.residual_count` predecessors compensated into
/// its frame.
pub fn prepare_scan(seq: &Sequence, i: usize, cfg: &PipelineConfig) -> Result<PreparedScan, PipelineError> {
    let (cloud, report) = seq.load_cloud(i)?;
    let mut prev = Vec::new();
    for k in 1..=cfg.residual_count.min(i) {
        let j = i - k;
        let (p, _) = seq.load_cloud(j)?;
        prev.push((p, relative_transform(&seq.poses[j], &seq.poses[i])));
    }
    let (rri, map) = assemble_residual_image(&cloud, &prev, &cfg.projection())?;
    Ok(PreparedScan {
        cloud,
        report,
        rri,
        map,
    })
}

#[derive(Debug, Clone)]
pub struct ScanPrediction {
    pub logits: FeatureMap,
    /// Per-pixel argmax train ids; empty pixels carry [`IGNORE_LABEL`].
    pub labels2d: Vec<u16>,
    /// Train ids per kept point.
    pub point_labels: Vec<u16>,
}

/// Argmax of the logits over valid pixels.
pub fn labels_from_logits(logits: &FeatureMap, mask: &[bool]) -> Vec<u16> {
    logits
        .argmax_channels()
        .into_iter()
        .zip(mask)
        .map(|(c, &m)| if m { c as u16 } else { IGNORE_LABEL })
        .collect()
}

pub fn infer_scan(
    scan: &PreparedScan,
    params: &NetworkParams,
    cfg: &PipelineConfig,
) -> Result<ScanPrediction, PipelineError> {
    let logits = network_forward(&scan.rri, params, &cfg.normalization)?;
    if !logits.is_finite() {
        return Err(TensorError::NonFinite("network logits".into()).into());
    }
    let labels2d = labels_from_logits(&logits, &scan.rri.mask());
    let point_labels = knn_refine(&scan.cloud, &scan.map, &scan.range_image(), &labels2d, &cfg.knn)?;
    Ok(ScanPrediction {
        logits,
        labels2d,
        point_labels,
    })
}

/// Training losses of a prediction against projected ground truth.
pub fn scan_losses(
    logits: &FeatureMap,
    scan: &PreparedScan,
    labels: &LabelArray,
    mapping: &ClassMapping,
    cfg: &PipelineConfig,
) -> Result<LossBreakdown, PipelineError> {
    let train = LabelArray::from_semantic(remap_labels(labels, mapping)?);
    let targets = project_labels(&train, &scan.map, &cfg.projection())?;
    let probs = softmax_channels(logits);
    Ok(total_loss(
        &probs,
        &targets,
        &cfg.class_frequencies()?,
        cfg.loss_weights,
        cfg.theta0,
        IGNORE_LABEL,
    )?)
}

const LB2D_MAGIC: &[u8; 4] = b"LB2D";

/// `LB2D` | u32 height | u32 width | u32 classes | height x width u16
/// train ids (65535 = empty), all little-endian.
pub fn label_image_to_bytes(h: usize, w: usize, classes: usize, labels: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 2 * labels.len());
    out.extend_from_slice(LB2D_MAGIC);
    for v in [h, w, classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u16>,
}

pub fn label_image_from_bytes(bytes: &[u8]) -> Result<LabelImage, PipelineError> {
    if bytes.len() < 16 || &bytes[..4] != LB2D_MAGIC {
        return Err(PipelineError::Data("missing LB2D header".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (height, width, classes) = (word(1), word(2), word(3));
    if bytes.len() != 16 + 2 * height * width {
        return Err(PipelineError::Data(format!(
            "{height}x{width} label image needs {} bytes, got {}",
            16 + 2 * height * width,
            bytes.len()
        )));
    }
    let labels: Vec<u16> = bytes[16..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    if let Some(l) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= classes) {
        return Err(PipelineError::Data(format!("label {l} outside {classes} classes")));
    }
    Ok(LabelImage {
        height,
        width,
        classes,
        labels,
    })
}

/// Confusion over every ground-truth scan in `gt_dir`; each needs a
/// prediction with the same stem in `pred_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, mapping: &ClassMapping) -> Result<ConfusionMatrix, PipelineError> {
    let gt_dir = label_dir(gt_dir);
    let pred_dir = label_dir(pred_dir);
    let stems = list_stems(&gt_dir, "label")?;
    if stems.is_empty() {
        return Err(PipelineError::Data(format!("no ground-truth labels in {}", gt_dir.display())));
    }
    let mut m = ConfusionMatrix::new(mapping.n);
    for stem in stems {
        let pred_path = pred_dir.join(format!("{stem}.label"));
        if !pred_path.exists() {
            return Err(PipelineError::Data(format!("no prediction for scan {stem}")));
        }
        let gt = remap_labels(&read_labels(&gt_dir.join(format!("{stem}.label")))?, mapping)?;
        let pred = remap_labels(&read_labels(&pred_path)?, mapping)?;
        if gt.len() != pred.len() {
            return Err(PipelineError::Data(format!(
                "scan {stem}: {} predictions for {} points",
                pred.len(),
                gt.len()
            )));
        }
        m.accumulate(&pred, &gt)?;
    }
    Ok(m)
}

/// Train-id counts over every label file in `dir`.
pub fn corpus_train_ids(dir: &Path, mapping: &ClassMapping) -> Result<Vec<u16>, PipelineError> {
    let dir = label_dir(dir);
    let mut ids = Vec::new();
    for stem in list_stems(&dir, "label")? {
        ids.extend(remap_labels(&read_labels(&dir.join(format!("{stem}.label")))?, mapping)?);
    }
    Ok(ids)
}
