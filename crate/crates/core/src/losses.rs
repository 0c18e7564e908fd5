//! Training losses evaluated on range-view predictions: inverse-frequency
//! weighted cross-entropy, Lovász-softmax and a boundary F1 loss.

use crate::tensor_ops::{max_pool2d, FeatureMap};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss undefined: no valid pixels")]
    UndefinedLoss,
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

/// Per-class frequencies, all strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFrequencies(Vec<f64>);

impl ClassFrequencies {
    pub fn new(f: Vec<f64>) -> Result<Self, LossError> {
        if f.is_empty() {
            return Err(LossError::Config("empty frequency table".into()));
        }
        if let Some((c, v)) = f.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(LossError::Config(format!("class {c} has frequency {v}")));
        }
        let sum: f64 = f.iter().sum();
        if sum > 1.0 + 1e-9 {
            return Err(LossError::Config(format!("frequencies sum to {sum}")));
        }
        Ok(Self(f))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.5,
            w3: 1.0,
        }
    }
}

fn check_targets(probs: &FeatureMap, targets: &[u16], ignore: u16) -> Result<(), LossError> {
    if targets.len() != probs.plane_len() {
        return Err(LossError::Shape(format!(
            "{} targets for a {}x{} map",
            targets.len(),
            probs.height,
            probs.width
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t != ignore && t as usize >= probs.channels) {
        return Err(LossError::Shape(format!(
            "target class {t} outside {} channels",
            probs.channels
        )));
    }
    Ok(())
}

pub fn weighted_cross_entropy(
    probs: &FeatureMap,
    targets: &[u16],
    freqs: &ClassFrequencies,
    ignore: u16,
) -> Result<f64, LossError> {
    check_targets(probs, targets, ignore)?;
    if freqs.len() != probs.channels {
        return Err(LossError::Shape(format!(
            "{} frequencies for {} classes",
            freqs.len(),
            probs.channels
        )));
    }
    let n = probs.plane_len();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let c = t as usize;
        let p = probs.data[c * n + i].max(PROB_FLOOR);
        sum += -p.ln() / freqs.0[c].sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(LossError::UndefinedLoss);
    }
    Ok(sum / count as f64)
}

/// Jaccard increments for ground-truth membership sorted by descending
/// error: `jac_k = 1 - I_k / U_k` with the intersection and union left
/// after the top `k + 1` entries are counted as errors.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut fg_seen, mut bg_seen) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            fg_seen += 1.0;
        } else {
            bg_seen += 1.0;
        }
        let jac = 1.0 - (gts - fg_seen) / (gts + bg_seen);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász extension of the Jaccard loss at error vector `errors`.
pub fn lovasz_class_term(errors: &[f64], gt: &[bool]) -> f64 {
    assert_eq!(errors.len(), gt.len());
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let sorted_gt: Vec<bool> = order.iter().map(|&i| gt[i]).collect();
    order
        .iter()
        .zip(lovasz_grad(&sorted_gt))
        .map(|(&i, g)| errors[i] * g)
        .sum()
}

/// Mean Lovász term over classes present among the valid targets.
pub fn lovasz_softmax(probs: &FeatureMap, targets: &[u16], ignore: u16) -> Result<f64, LossError> {
    check_targets(probs, targets, ignore)?;
    let n = probs.plane_len();
    let valid: Vec<usize> = (0..n).filter(|&i| targets[i] != ignore).collect();
    if valid.is_empty() {
        return Err(LossError::UndefinedLoss);
    }
    let (mut sum, mut classes) = (0.0, 0usize);
    for c in 0..probs.channels {
        let gt: Vec<bool> = valid.iter().map(|&i| targets[i] as usize == c).collect();
        if !gt.contains(&true) {
            continue;
        }
        let p = probs.channel(c);
        let errors: Vec<f64> = valid
            .iter()
            .zip(&gt)
            .map(|(&i, &g)| if g { 1.0 - p[i] } else { p[i] })
            .collect();
        sum += lovasz_class_term(&errors, &gt);
        classes += 1;
    }
    Ok(sum / classes as f64)
}

fn check_theta(theta0: usize) -> Result<(), LossError> {
    if theta0 == 0 || theta0 % 2 == 0 {
        return Err(LossError::Config(format!("boundary window {theta0} must be odd")));
    }
    Ok(())
}

/// `pool(inv) - inv` on an already inverted map, as a boolean map.
fn boundary_of_inverted(inv: Vec<f64>, h: usize, w: usize, theta0: usize) -> Vec<bool> {
    let map = FeatureMap::from_vec(1, h, w, inv).expect("sized");
    let pooled = max_pool2d(&map, theta0, 1, theta0 / 2, 0.0).expect("odd window fits");
    pooled.data.iter().zip(&map.data).map(|(p, v)| p - v > 0.5).collect()
}

/// Pixels of the inverted class map raised by a `theta0` max-pool: the
/// in-class pixels within `theta0 / 2` of an out-of-class pixel.
pub fn boundary_map(binary: &[bool], h: usize, w: usize, theta0: usize) -> Result<Vec<bool>, LossError> {
    check_theta(theta0)?;
    if binary.len() != h * w {
        return Err(LossError::Shape(format!("{} pixels for {h}x{w}", binary.len())));
    }
    let inv = binary.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    Ok(boundary_of_inverted(inv, h, w, theta0))
}

/// Mean over classes present in the valid ground truth of
/// `1 - 2PR / (P + R)` between predicted and true boundary maps.
///
/// Ignored pixels take the inverted value 0 in both maps, the same as the
/// padding, and are never counted.
pub fn boundary_loss(
    pred: &[u16],
    gt: &[u16],
    h: usize,
    w: usize,
    theta0: usize,
    ignore: u16,
) -> Result<f64, LossError> {
    check_theta(theta0)?;
    if pred.len() != h * w || gt.len() != h * w {
        return Err(LossError::Shape(format!(
            "{} predictions and {} targets for {h}x{w}",
            pred.len(),
            gt.len()
        )));
    }
    let mut classes: Vec<u16> = gt.iter().copied().filter(|&g| g != ignore).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let inverted = |labels: &[u16], c: u16| -> Vec<f64> {
        labels
            .iter()
            .zip(gt)
            .map(|(&l, &g)| if g == ignore || l == c { 0.0 } else { 1.0 })
            .collect()
    };
    let mut sum = 0.0;
    for &c in &classes {
        let pb = boundary_of_inverted(inverted(pred, c), h, w, theta0);
        let gb = boundary_of_inverted(inverted(gt, c), h, w, theta0);
        let (mut both, mut np, mut ng) = (0usize, 0usize, 0usize);
        for i in 0..h * w {
            if gt[i] == ignore {
                continue;
            }
            np += pb[i] as usize;
            ng += gb[i] as usize;
            both += (pb[i] && gb[i]) as usize;
        }
        sum += match (np, ng) {
            (0, 0) => 0.0,
            (0, _) | (_, 0) => 1.0,
            _ if both == 0 => 1.0,
            _ => {
                let p = both as f64 / np as f64;
                let r = both as f64 / ng as f64;
                1.0 - 2.0 * p * r / (p + r)
            }
        };
    }
    Ok(sum / classes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub weighted_ce: f64,
    pub lovasz: f64,
    pub boundary: f64,
    pub total: f64,
}

/// Weighted sum of the three terms; the boundary term uses argmax labels.
pub fn total_loss(
    probs: &FeatureMap,
    targets: &[u16],
    freqs: &ClassFrequencies,
    weights: LossWeights,
    theta0: usize,
    ignore: u16,
) -> Result<LossBreakdown, LossError> {
    let weighted_ce = weighted_cross_entropy(probs, targets, freqs, ignore)?;
    let lovasz = lovasz_softmax(probs, targets, ignore)?;
    let hard: Vec<u16> = probs.argmax_channels().into_iter().map(|c| c as u16).collect();
    let boundary = boundary_loss(&hard, targets, probs.height, probs.width, theta0, ignore)?;
    Ok(LossBreakdown {
        weighted_ce,
        lovasz,
        boundary,
        total: weights.w1 * weighted_ce + weights.w2 * lovasz + weights.w3 * boundary,
    })
}
