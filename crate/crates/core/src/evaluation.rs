//! Label remapping, confusion matrices and mean IoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::kitti_io::LabelArray;
use crate::kv::{KvError, KvFile};
use crate::range_view::IGNORE_LABEL;

pub const SINGLE_SCAN_MAPPING: &str = include_str!("../data/semantic_kitti_19.map");
pub const MULTI_SCAN_MAPPING: &str = include_str!("../data/semantic_kitti_25.map");

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("mapping file: {0}")]
    Kv(#[from] KvError),
    #[error("invalid mapping: {0}")]
    Mapping(String),
    #[error("raw ids without a mapping: {0:?}")]
    Unmapped(Vec<u16>),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("metric undefined: empty confusion matrix")]
    UndefinedMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    SingleScan,
    MultiScan,
}

impl Protocol {
    pub fn num_classes(self) -> usize {
        match self {
            Protocol::SingleScan => 19,
            Protocol::MultiScan => 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMapping {
    pub n: usize,
    pub names: Vec<String>,
    pub raw_to_train: BTreeMap<u16, u16>,
    pub train_to_raw: Vec<u16>,
    pub moving_classes: Vec<u16>,
}

impl ClassMapping {
    pub fn builtin(protocol: Protocol) -> Self {
        let text = match protocol {
            Protocol::SingleScan => SINGLE_SCAN_MAPPING,
            Protocol::MultiScan => MULTI_SCAN_MAPPING,
        };
        Self::parse(text).expect("bundled mapping is valid")
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    fn from_kv(kv: &KvFile) -> Result<Self, EvalError> {
        let n: usize = kv.parse_value("classes")?.ok_or_else(|| KvError::Missing("classes".into()))?;
        if n == 0 || n >= IGNORE_LABEL as usize {
            return Err(EvalError::Mapping(format!("{n} classes")));
        }
        let bad = |what: &str, v: &str| EvalError::Mapping(format!("{what} `{v}`"));
        let mut raw_to_train = BTreeMap::new();
        for (raw, train) in kv.section("map") {
            let raw: u16 = raw.parse().map_err(|_| bad("raw id", raw))?;
            let train = if train == "ignore" {
                IGNORE_LABEL
            } else {
                let t: u16 = train.parse().map_err(|_| bad("train id", train))?;
                if t as usize >= n {
                    return Err(bad("train id", train));
                }
                t
            };
            raw_to_train.insert(raw, train);
        }
        let mut train_to_raw = vec![None; n];
        for (train, raw) in kv.section("inv") {
            let t: usize = train.parse().map_err(|_| bad("train id", train))?;
            let r: u16 = raw.parse().map_err(|_| bad("raw id", raw))?;
            *train_to_raw.get_mut(t).ok_or_else(|| bad("train id", train))? = Some(r);
        }
        let train_to_raw = train_to_raw
            .into_iter()
            .enumerate()
            .map(|(t, r)| r.ok_or_else(|| EvalError::Mapping(format!("train id {t} has no inverse"))))
            .collect::<Result<Vec<_>, _>>()?;
        for (t, r) in train_to_raw.iter().enumerate() {
            if raw_to_train.get(r) != Some(&(t as u16)) {
                return Err(EvalError::Mapping(format!("inverse of train id {t} is raw {r}, which maps elsewhere")));
            }
        }
        let mut names: Vec<String> = (0..n).map(|t| format!("class{t}")).collect();
        for (t, name) in kv.section("name") {
            let t: usize = t.parse().map_err(|_| bad("train id", t))?;
            *names.get_mut(t).ok_or_else(|| bad("name index", &t.to_string()))? = name.to_string();
        }
        let moving_classes = match kv.get("moving") {
            None => Vec::new(),
            Some(v) => v
                .split_whitespace()
                .map(|s| s.parse::<u16>().ok().filter(|&t| (t as usize) < n).ok_or_else(|| bad("moving class", s)))
                .collect::<Result<_, _>>()?,
        };
        let known: Vec<String> = ["classes", "moving"].iter().map(|s| s.to_string()).collect();
        let stray: Vec<&str> = kv
            .keys()
            .filter(|k| !known.iter().any(|x| x == k) && !["map.", "inv.", "name."].iter().any(|p| k.starts_with(p)))
            .collect();
        if !stray.is_empty() {
            return Err(KvError::Unknown(stray.join(", ")).into());
        }
        Ok(Self {
            n,
            names,
            raw_to_train,
            train_to_raw,
            moving_classes,
        })
    }

    /// Raw ids that some train id is written back as.
    pub fn raw_image(&self) -> Vec<u16> {
        self.train_to_raw.clone()
    }
}

/// Raw semantic ids to train ids; unknown ids are an error listing them.
pub fn remap_labels(raw: &LabelArray, mapping: &ClassMapping) -> Result<Vec<u16>, EvalError> {
    let mut missing = Vec::new();
    let out = raw
        .semantic
        .iter()
        .map(|r| match mapping.raw_to_train.get(r) {
            Some(&t) => t,
            None => {
                missing.push(*r);
                IGNORE_LABEL
            }
        })
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(EvalError::Unmapped(missing));
    }
    Ok(out)
}

/// Train ids to raw ids for writing predictions; ignore becomes raw 0.
pub fn train_to_raw(train: &[u16], mapping: &ClassMapping) -> Result<Vec<u16>, EvalError> {
    train
        .iter()
        .map(|&t| {
            if t == IGNORE_LABEL {
                Ok(0)
            } else {
                mapping
                    .train_to_raw
                    .get(t as usize)
                    .copied()
                    .ok_or_else(|| EvalError::Protocol(format!("train id {t} outside {} classes", mapping.n)))
            }
        })
        .collect()
}

/// `counts[g * n + p]` = points with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
    /// Valid ground-truth points whose prediction was ignore; not counted.
    pub unpredicted: u64,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
            unpredicted: 0,
        }
    }

    pub fn from_counts(n: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), n * n);
        Self {
            n,
            counts,
            unpredicted: 0,
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u16], gt: &[u16]) -> Result<(), EvalError> {
        if pred.len() != gt.len() {
            return Err(EvalError::Protocol(format!(
                "{} predictions for {} ground-truth points",
                pred.len(),
                gt.len()
            )));
        }
        for &v in gt.iter().chain(pred).filter(|&&v| v != IGNORE_LABEL) {
            if v as usize >= self.n {
                return Err(EvalError::Protocol(format!("train id {v} outside {} classes", self.n)));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p == IGNORE_LABEL {
                self.unpredicted += 1;
                continue;
            }
            self.counts[g as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if other.n != self.n {
            return Err(EvalError::Protocol(format!("merging {} and {} classes", self.n, other.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.unpredicted += other.unpredicted;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// `None` for classes with neither ground truth nor predictions when
    /// they are excluded.
    pub iou: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class `TP / (TP + FP + FN)` and their mean. With `exclude_absent`,
/// zero-denominator classes are left out of the mean; otherwise they
/// score 0.
pub fn miou(m: &ConfusionMatrix, exclude_absent: bool) -> Result<MiouReport, EvalError> {
    if m.total() == 0 {
        return Err(EvalError::UndefinedMetric);
    }
    let n = m.n;
    let iou: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = m.get(c, c);
            let row: u64 = (0..n).map(|p| m.get(c, p)).sum();
            let col: u64 = (0..n).map(|g| m.get(g, c)).sum();
            let denom = row + col - tp;
            if denom == 0 {
                (!exclude_absent).then_some(0.0)
            } else {
                Some(tp as f64 / denom as f64)
            }
        })
        .collect();
    let scored: Vec<f64> = iou.iter().flatten().copied().collect();
    Ok(MiouReport {
        mean: scored.iter().sum::<f64>() / scored.len() as f64,
        iou,
    })
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn render_text_report(report: &MiouReport, names: &[String]) -> String {
    let width = names.iter().map(String::len).max().unwrap_or(4).max(4);
    let mut s = String::new();
    for (name, v) in names.iter().zip(&report.iou) {
        let _ = writeln!(s, "{name:<width$}  {}", fmt_iou(*v));
    }
    let _ = writeln!(s, "{:<width$}  {:.4}", "mIoU", report.mean);
    s
}

pub fn render_kv_report(report: &MiouReport, names: &[String]) -> String {
    let mut kv = KvFile::default();
    for (name, v) in names.iter().zip(&report.iou) {
        kv.set(&format!("iou.{name}"), fmt_iou(*v));
    }
    kv.set("miou", format!("{:.4}", report.mean));
    kv.render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const IGN: u16 = IGNORE_LABEL;

    #[test]
    fn bundled_mappings() {
        let single = ClassMapping::builtin(Protocol::SingleScan);
        let multi = ClassMapping::builtin(Protocol::MultiScan);
        assert_eq!(single.n, Protocol::SingleScan.num_classes());
        assert_eq!(multi.n, Protocol::MultiScan.num_classes());
        assert_eq!(multi.moving_classes.len(), 6);
        for m in [&single, &multi] {
            assert_eq!(m.raw_to_train[&10], 0);
            assert_eq!(m.raw_to_train[&0], IGN);
            assert_eq!(m.raw_to_train[&52], IGN);
            assert_eq!(m.raw_to_train[&60], m.raw_to_train[&40]);
            for (t, &r) in m.train_to_raw.iter().enumerate() {
                assert_eq!(m.raw_to_train[&r] as usize, t);
            }
        }
        assert_eq!(single.raw_to_train[&252], 0);
        assert_eq!(multi.raw_to_train[&252], 19);
        assert_eq!(multi.names[19], "moving-car");
        assert_eq!(single.names[18], "traffic-sign");
    }

    #[test]
    fn mapping_rejections() {
        assert!(ClassMapping::parse("classes = 2\nmap.1 = 0\ninv.0 = 1\n").is_err());
        assert!(ClassMapping::parse("classes = 1\nmap.1 = 3\ninv.0 = 1\n").is_err());
        assert!(ClassMapping::parse("classes = 1\nmap.1 = 0\nmap.2 = 0\ninv.0 = 2\nbogus = 1\n").is_err());
        let ok = ClassMapping::parse("classes = 1\nmap.1 = 0\nmap.2 = 0\ninv.0 = 2\n").unwrap();
        assert_eq!(ok.train_to_raw, vec![2]);
    }

    #[test]
    fn remap_cases() {
        let m = ClassMapping::builtin(Protocol::SingleScan);
        assert!(remap_labels(&LabelArray::from_semantic(vec![]), &m).unwrap().is_empty());
        assert_eq!(remap_labels(&LabelArray::from_semantic(vec![0, 10, 81]), &m).unwrap(), vec![IGN, 0, 18]);
        match remap_labels(&LabelArray::from_semantic(vec![10, 7, 7, 300]), &m) {
            Err(EvalError::Unmapped(ids)) => assert_eq!(ids, vec![7, 300]),
            other => panic!("{other:?}"),
        }
        assert_eq!(train_to_raw(&[0, 18, IGN], &m).unwrap(), vec![10, 81, 0]);
        assert!(train_to_raw(&[19], &m).is_err());
    }

    #[test]
    fn confusion_cases() {
        let mut m = ConfusionMatrix::new(4);
        m.accumulate(&[3; 5], &[3; 5]).unwrap();
        assert_eq!(m.get(3, 3), 5);
        assert_eq!(m.total(), 5);
        let before = m.clone();
        m.accumulate(&[1, 2], &[IGN, IGN]).unwrap();
        assert_eq!(m, before);

        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&[0, 1, 1, 2, 0, 2], &[0, 1, 0, 2, 2, IGN]).unwrap();
        // Rows are ground truth: g0 -> {p0, p1}, g1 -> {p1}, g2 -> {p2, p0}.
        assert_eq!(m.counts, vec![1, 1, 0, 0, 1, 0, 1, 0, 1]);
        assert!(m.accumulate(&[5], &[0]).is_err());
        assert!(m.accumulate(&[0, 0], &[0]).is_err());
        m.accumulate(&[IGN], &[1]).unwrap();
        assert_eq!(m.unpredicted, 1);
    }

    #[test]
    fn miou_cases() {
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]);
        let r = miou(&m, true).unwrap();
        assert_eq!(r.iou, vec![Some(0.6), Some(0.6)]);
        assert_eq!(r.mean, 0.6);

        let diag = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 0, 0, 0, 0, 9]);
        let r = miou(&diag, true).unwrap();
        assert_eq!(r.iou, vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(r.mean, 1.0);
        assert_eq!(miou(&diag, false).unwrap().mean, 2.0 / 3.0);
        assert!(matches!(miou(&ConfusionMatrix::new(2), true), Err(EvalError::UndefinedMetric)));

        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let text = render_text_report(&r, &names);
        assert!(text.contains("b     n/a") && text.contains("mIoU  1.0000"));
        let kv = KvFile::parse(&render_kv_report(&r, &names)).unwrap();
        assert_eq!(kv.get("iou.a"), Some("1.0000"));
        assert_eq!(kv.get("miou"), Some("1.0000"));
    }

    /// Per-class set IoU computed from point index sets.
    fn brute_force(pred: &[u16], gt: &[u16], n: usize) -> (Vec<Option<f64>>, f64) {
        let valid: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != IGN && pred[i] != IGN).collect();
        let iou: Vec<Option<f64>> = (0..n as u16)
            .map(|c| {
                let p: std::collections::BTreeSet<usize> = valid.iter().copied().filter(|&i| pred[i] == c).collect();
                let g: std::collections::BTreeSet<usize> = valid.iter().copied().filter(|&i| gt[i] == c).collect();
                let union = p.union(&g).count();
                (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
            })
            .collect();
        let s: Vec<f64> = iou.iter().flatten().copied().collect();
        (iou, s.iter().sum::<f64>() / s.len() as f64)
    }

    fn pairs() -> impl Strategy<Value = (usize, Vec<(u16, u16)>)> {
        (2usize..6).prop_flat_map(|n| {
            let id = prop_oneof![9 => 0..n as u16, 1 => Just(IGN)];
            (Just(n), prop::collection::vec((id.clone(), id), 1..40))
        })
    }

    proptest! {
        #[test]
        fn miou_matches_sets((n, pts) in pairs()) {
            let (pred, gt): (Vec<u16>, Vec<u16>) = pts.into_iter().unzip();
            let mut m = ConfusionMatrix::new(n);
            m.accumulate(&pred, &gt).unwrap();
            prop_assume!(m.total() > 0);
            let r = miou(&m, true).unwrap();
            let (iou, mean) = brute_force(&pred, &gt, n);
            prop_assert_eq!(r.iou, iou);
            prop_assert_eq!(r.mean, mean);
        }

        #[test]
        fn accumulation_commutes((n, pts) in pairs(), split in 0usize..40) {
            let (pred, gt): (Vec<u16>, Vec<u16>) = pts.into_iter().unzip();
            let k = split.min(pred.len());
            let mut a = ConfusionMatrix::new(n);
            a.accumulate(&pred[..k], &gt[..k]).unwrap();
            a.accumulate(&pred[k..], &gt[k..]).unwrap();
            let mut b = ConfusionMatrix::new(n);
            b.accumulate(&pred[k..], &gt[k..]).unwrap();
            let mut c = ConfusionMatrix::new(n);
            c.accumulate(&pred[..k], &gt[..k]).unwrap();
            b.merge(&c).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn miou_relabel_invariant((n, pts) in pairs(), shift in 1usize..6) {
            let (pred, gt): (Vec<u16>, Vec<u16>) = pts.into_iter().unzip();
            let perm = |v: u16| if v == IGN { v } else { ((v as usize + shift) % n) as u16 };
            let mut a = ConfusionMatrix::new(n);
            a.accumulate(&pred, &gt).unwrap();
            prop_assume!(a.total() > 0);
            let mut b = ConfusionMatrix::new(n);
            let pp: Vec<u16> = pred.iter().map(|&v| perm(v)).collect();
            let gp: Vec<u16> = gt.iter().map(|&v| perm(v)).collect();
            b.accumulate(&pp, &gp).unwrap();
            let (ra, rb) = (miou(&a, true).unwrap(), miou(&b, true).unwrap());
            prop_assert!((ra.mean - rb.mean).abs() < 1e-12);
            for c in 0..n {
                prop_assert_eq!(ra.iou[c], rb.iou[(c + shift) % n]);
            }
        }
    }
}
