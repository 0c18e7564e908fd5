//! Back-projection of range-view labels to points by range-similarity k-NN.

use rayon::prelude::*;

use crate::kitti_io::PointCloud;
use crate::range_view::{PixelIndexMap, RangeImage, IGNORE_LABEL};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PostprocError {
    #[error("invalid k-NN configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("point {0} projects to an empty pixel")]
    Inconsistent(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    /// Odd side of the square search window.
    pub window: usize,
    /// Candidates with a larger absolute range difference are discarded.
    pub cutoff: Option<f64>,
    /// Vote weight `exp(-dr^2 / 2 sigma^2)` instead of one vote each.
    pub gaussian_sigma: Option<f64>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 5,
            window: 7,
            cutoff: None,
            gaussian_sigma: None,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<(), PostprocError> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(PostprocError::Config(format!("window {} must be odd", self.window)));
        }
        if self.k == 0 || self.k > self.window * self.window {
            return Err(PostprocError::Config(format!(
                "k = {} outside 1..={}",
                self.k,
                self.window * self.window
            )));
        }
        if let Some(c) = self.cutoff {
            if !(c >= 0.0) {
                return Err(PostprocError::Config(format!("cutoff {c}")));
            }
        }
        if let Some(s) = self.gaussian_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(PostprocError::Config(format!("gaussian sigma {s}")));
            }
        }
        Ok(())
    }
}

/// Window pixels ordered by ascending `|range - r|`, ties in row-major
/// order, as `(pixel, |dr|)`.
fn ranked_candidates(img: &RangeImage, u: usize, v: usize, r: f64, window: usize) -> Vec<(usize, f64)> {
    let half = (window / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = Vec::with_capacity(window * window);
    for dy in -half..=half {
        for dx in -half..=half {
            let (y, x) = (v as isize + dy, u as isize + dx);
            if y < 0 || x < 0 || y >= h || x >= w {
                continue;
            }
            let pix = (y * w + x) as usize;
            if img.mask[pix] {
                out.push((pix, (img.range[pix] as f64 - r).abs()));
            }
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    out
}

/// Majority vote; ties go to the class owning the smallest range
/// difference, then to the lowest class id.
fn vote(candidates: &[(usize, f64)], labels2d: &[u16], sigma: Option<f64>) -> u16 {
    // (class, weight, best |dr|)
    let mut tally: Vec<(u16, f64, f64)> = Vec::with_capacity(candidates.len());
    for &(pix, dr) in candidates {
        let class = labels2d[pix];
        let weight = sigma.map_or(1.0, |s| (-dr * dr / (2.0 * s * s)).exp());
        match tally.iter_mut().find(|t| t.0 == class) {
            Some(t) => {
                t.1 += weight;
                t.2 = t.2.min(dr);
            }
            None => tally.push((class, weight, dr)),
        }
    }
    tally
        .into_iter()
        .min_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(a.2.total_cmp(&b.2))
                .then(a.0.cmp(&b.0))
        })
        .map(|t| t.0)
        .expect("non-empty candidate set")
}

/// Per-point labels. Points that did not project (at the origin) get
/// [`IGNORE_LABEL`].
pub fn knn_refine(
    cloud: &PointCloud,
    map: &PixelIndexMap,
    img: &RangeImage,
    labels2d: &[u16],
    cfg: &KnnConfig,
) -> Result<Vec<u16>, PostprocError> {
    cfg.validate()?;
    if map.point_to_pixel.len() != cloud.len() {
        return Err(PostprocError::Shape(format!(
            "index map covers {} points, cloud has {}",
            map.point_to_pixel.len(),
            cloud.len()
        )));
    }
    if labels2d.len() != img.pixels() || map.width != img.width {
        return Err(PostprocError::Shape(format!(
            "{} labels for a {}x{} image",
            labels2d.len(),
            img.height,
            img.width
        )));
    }
    cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let Some((u, v)) = map.point_to_pixel[i] else {
                return Ok(IGNORE_LABEL);
            };
            let (u, v) = (u as usize, v as usize);
            let mut cand = ranked_candidates(img, u, v, p.range(), cfg.window);
            cand.truncate(cfg.k);
            if let Some(c) = cfg.cutoff {
                cand.retain(|&(_, dr)| dr <= c);
            }
            if cand.is_empty() {
                let own = v * img.width + u;
                if !img.mask[own] {
                    return Err(PostprocError::Inconsistent(i));
                }
                return Ok(labels2d[own]);
            }
            Ok(vote(&cand, labels2d, cfg.gaussian_sigma))
        })
        .collect()
}
