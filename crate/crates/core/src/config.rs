//! Pipeline configuration stored as dotted `key = value` text.

use std::path::{Path, PathBuf};

use crate::evaluation::{ClassMapping, EvalError, Protocol};
use crate::kv::{KvError, KvFile};
use crate::losses::{ClassFrequencies, LossError, LossWeights};
use crate::net_blocks::NetworkConfig;
use crate::postproc::KnnConfig;
use crate::range_view::{Normalization, ProjectionConfig, RRI_CHANNELS};

/// Frequencies below this are raised before renormalizing, so classes
/// missing from a corpus keep a finite weight.
pub const FREQUENCY_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("{0}")]
    Invalid(String),
    #[error("referenced file {0} does not exist")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Mapping(#[from] EvalError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub height: usize,
    pub width: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub residual_cap: Option<f64>,
    pub residual_count: usize,
    pub normalization: Normalization,
    pub knn: KnnConfig,
    pub loss_weights: LossWeights,
    pub theta0: usize,
    pub protocol: Protocol,
    /// `None` selects the bundled table for `protocol`.
    pub mapping: Option<PathBuf>,
    pub frequencies: Option<PathBuf>,
    pub exclude_absent: bool,
    pub seed: u64,
    pub mlp_hidden: usize,
    pub meta_channels: usize,
    pub widths: [usize; 4],
    pub context_channels: usize,
    pub fuse_channels: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let proj = ProjectionConfig::default();
        Self {
            height: proj.height,
            width: proj.width,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            residual_cap: None,
            residual_count: 3,
            normalization: Normalization::default(),
            knn: KnnConfig::default(),
            loss_weights: LossWeights::default(),
            theta0: 3,
            protocol: Protocol::SingleScan,
            mapping: None,
            frequencies: None,
            exclude_absent: true,
            seed: 0,
            mlp_hidden: net.mlp_hidden,
            meta_channels: net.meta_channels,
            widths: net.widths,
            context_channels: net.context_channels,
            fuse_channels: net.fuse_channels,
        }
    }
}

fn opt_to_string(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |v| v.to_string())
}

fn list<const N: usize, T: ToString>(v: &[T; N]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

const KEYS: &[&str] = &[
    "projection.height",
    "projection.width",
    "projection.fov_up_deg",
    "projection.fov_down_deg",
    "projection.residual_cap",
    "residual.count",
    "normalization.mean",
    "normalization.std",
    "knn.k",
    "knn.window",
    "knn.cutoff",
    "knn.gaussian_sigma",
    "loss.w1",
    "loss.w2",
    "loss.w3",
    "loss.theta0",
    "eval.protocol",
    "eval.mapping",
    "eval.exclude_absent",
    "loss.frequencies",
    "seed",
    "network.mlp_hidden",
    "network.meta_channels",
    "network.widths",
    "network.context_channels",
    "network.fuse_channels",
];

impl PipelineConfig {
    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            height: self.height,
            width: self.width,
            fov_up: self.fov_up_deg.to_radians(),
            fov_down: self.fov_down_deg.to_radians(),
            residual_cap: self.residual_cap,
        }
    }

    pub fn class_mapping(&self) -> Result<ClassMapping, ConfigError> {
        let m = match &self.mapping {
            Some(p) => ClassMapping::read(p)?,
            None => ClassMapping::builtin(self.protocol),
        };
        if m.n != self.protocol.num_classes() {
            return Err(ConfigError::Invalid(format!(
                "mapping has {} classes, protocol expects {}",
                m.n,
                self.protocol.num_classes()
            )));
        }
        Ok(m)
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            value_channels: RRI_CHANNELS,
            mlp_hidden: self.mlp_hidden,
            meta_channels: self.meta_channels,
            widths: self.widths,
            context_channels: self.context_channels,
            fuse_channels: self.fuse_channels,
            num_classes: self.protocol.num_classes(),
        }
    }

    /// The configured table, or uniform frequencies when none is set.
    pub fn class_frequencies(&self) -> Result<ClassFrequencies, ConfigError> {
        let n = self.protocol.num_classes();
        match &self.frequencies {
            None => Ok(ClassFrequencies::uniform(n)),
            Some(p) => {
                let raw = read_frequency_table(p)?;
                if raw.len() != n {
                    return Err(ConfigError::Invalid(format!(
                        "frequency table has {} classes, protocol expects {n}",
                        raw.len()
                    )));
                }
                Ok(ClassFrequencies::new(floor_frequencies(&raw))?)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.projection().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.residual_count > crate::range_view::MAX_PREDECESSORS {
            return bad(format!("residual.count {} exceeds 3", self.residual_count));
        }
        if self.normalization.stds.iter().any(|&s| !(s > 0.0)) {
            return bad("normalization.std entries must be positive".into());
        }
        self.knn.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let w = self.loss_weights;
        if [w.w1, w.w2, w.w3].iter().any(|&v| !(v >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        if self.theta0 % 2 == 0 {
            return bad(format!("loss.theta0 {} must be odd", self.theta0));
        }
        if [self.mlp_hidden, self.meta_channels, self.context_channels, self.fuse_channels]
            .iter()
            .chain(&self.widths)
            .any(|&c| c == 0)
        {
            return bad("network widths must be positive".into());
        }
        for p in self.mapping.iter().chain(&self.frequencies) {
            if !p.exists() {
                return Err(ConfigError::MissingFile(p.clone()));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("projection.height", self.height);
        kv.set("projection.width", self.width);
        kv.set("projection.fov_up_deg", self.fov_up_deg);
        kv.set("projection.fov_down_deg", self.fov_down_deg);
        kv.set("projection.residual_cap", opt_to_string(self.residual_cap));
        kv.set("residual.count", self.residual_count);
        kv.set("normalization.mean", list(&self.normalization.means));
        kv.set("normalization.std", list(&self.normalization.stds));
        kv.set("knn.k", self.knn.k);
        kv.set("knn.window", self.knn.window);
        kv.set("knn.cutoff", opt_to_string(self.knn.cutoff));
        kv.set("knn.gaussian_sigma", opt_to_string(self.knn.gaussian_sigma));
        kv.set("loss.w1", self.loss_weights.w1);
        kv.set("loss.w2", self.loss_weights.w2);
        kv.set("loss.w3", self.loss_weights.w3);
        kv.set("loss.theta0", self.theta0);
        kv.set(
            "eval.protocol",
            match self.protocol {
                Protocol::SingleScan => "single",
                Protocol::MultiScan => "multi",
            },
        );
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string());
        kv.set("eval.mapping", path(&self.mapping));
        kv.set("eval.exclude_absent", self.exclude_absent);
        kv.set("loss.frequencies", path(&self.frequencies));
        kv.set("seed", self.seed);
        kv.set("network.mlp_hidden", self.mlp_hidden);
        kv.set("network.meta_channels", self.meta_channels);
        kv.set("network.widths", list(&self.widths));
        kv.set("network.context_channels", self.context_channels);
        kv.set("network.fuse_channels", self.fuse_channels);
        kv
    }

    pub fn dump(&self) -> String {
        self.to_kv().render()
    }

    /// Missing keys keep their defaults; relative paths resolve against
    /// `base`.
    pub fn from_kv(kv: &KvFile, base: &Path) -> Result<Self, ConfigError> {
        let unknown: Vec<&str> = kv.keys().filter(|k| !KEYS.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(KvError::Unknown(unknown.join(", ")).into());
        }
        let mut c = Self::default();
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_value($key)? {
                    $field = v;
                }
            };
        }
        take!("projection.height", c.height);
        take!("projection.width", c.width);
        take!("projection.fov_up_deg", c.fov_up_deg);
        take!("projection.fov_down_deg", c.fov_down_deg);
        if let Some(v) = opt_f64(kv, "projection.residual_cap")? {
            c.residual_cap = v;
        }
        take!("residual.count", c.residual_count);
        if let Some(v) = kv.get("normalization.mean") {
            c.normalization.means = floats::<5>("normalization.mean", v)?;
        }
        if let Some(v) = kv.get("normalization.std") {
            c.normalization.stds = floats::<5>("normalization.std", v)?;
        }
        take!("knn.k", c.knn.k);
        take!("knn.window", c.knn.window);
        if let Some(v) = opt_f64(kv, "knn.cutoff")? {
            c.knn.cutoff = v;
        }
        if let Some(v) = opt_f64(kv, "knn.gaussian_sigma")? {
            c.knn.gaussian_sigma = v;
        }
        take!("loss.w1", c.loss_weights.w1);
        take!("loss.w2", c.loss_weights.w2);
        take!("loss.w3", c.loss_weights.w3);
        take!("loss.theta0", c.theta0);
        if let Some(v) = kv.get("eval.protocol") {
            c.protocol = match v {
                "single" => Protocol::SingleScan,
                "multi" => Protocol::MultiScan,
                _ => {
                    return Err(KvError::Value {
                        key: "eval.protocol".into(),
                        value: v.into(),
                    }
                    .into())
                }
            };
        }
        let path = |key: &str| -> Option<PathBuf> {
            kv.get(key).filter(|v| *v != "none").map(|v| base.join(v))
        };
        if kv.get("eval.mapping").is_some() {
            c.mapping = path("eval.mapping");
        }
        if kv.get("loss.frequencies").is_some() {
            c.frequencies = path("loss.frequencies");
        }
        take!("eval.exclude_absent", c.exclude_absent);
        take!("seed", c.seed);
        take!("network.mlp_hidden", c.mlp_hidden);
        take!("network.meta_channels", c.meta_channels);
        if let Some(v) = kv.get("network.widths") {
            let f = floats::<4>("network.widths", v)?;
            c.widths = f.map(|x| x as usize);
            if f.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
                return Err(KvError::Value {
                    key: "network.widths".into(),
                    value: v.into(),
                }
                .into());
            }
        }
        take!("network.context_channels", c.context_channels);
        take!("network.fuse_channels", c.fuse_channels);
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        Self::from_kv(&KvFile::parse(text)?, base)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(&KvFile::read(path)?, base)
    }
}

fn opt_f64(kv: &KvFile, key: &str) -> Result<Option<Option<f64>>, ConfigError> {
    match kv.get(key) {
        None => Ok(None),
        Some("none") => Ok(Some(None)),
        Some(_) => Ok(Some(kv.parse_value(key)?)),
    }
}

fn floats<const N: usize>(key: &str, v: &str) -> Result<[f64; N], ConfigError> {
    let err = || KvError::Value {
        key: key.into(),
        value: v.into(),
    };
    let parsed: Vec<f64> = v
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| err()))
        .collect::<Result<_, _>>()?;
    Ok(parsed.try_into().map_err(|_| err())?)
}

/// `classes = n` followed by `freq.<train id> = value`.
pub fn write_frequency_table(freqs: &[f64], names: &[String]) -> String {
    let mut kv = KvFile::default();
    kv.set("classes", freqs.len());
    for (c, f) in freqs.iter().enumerate() {
        kv.set(&format!("freq.{c}"), f);
    }
    let mut text = String::new();
    for (c, name) in names.iter().enumerate() {
        text.push_str(&format!("# {c}: {name}\n"));
    }
    text + &kv.render()
}

pub fn read_frequency_table(path: &Path) -> Result<Vec<f64>, ConfigError> {
    let kv = KvFile::read(path)?;
    let n: usize = kv.parse_value("classes")?.ok_or_else(|| KvError::Missing("classes".into()))?;
    (0..n)
        .map(|c| {
            let key = format!("freq.{c}");
            kv.parse_value::<f64>(&key)?
                .ok_or_else(|| ConfigError::from(KvError::Missing(key)))
        })
        .collect()
}

/// Raises entries to [`FREQUENCY_FLOOR`] and rescales to sum 1.
pub fn floor_frequencies(raw: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = raw.iter().map(|&f| f.max(FREQUENCY_FLOOR)).collect();
    let sum: f64 = floored.iter().sum();
    floored.iter().map(|f| f / sum).collect()
}

/// Normalized per-class counts of valid train ids.
pub fn count_frequencies(train_ids: impl IntoIterator<Item = u16>, n: usize) -> Option<Vec<f64>> {
    let mut counts = vec![0u64; n];
    for t in train_ids {
        if let Some(c) = counts.get_mut(t as usize) {
            *c += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.dump(), Path::new("/")).unwrap(), c);
        assert_eq!(c.projection(), ProjectionConfig::default());
    }

    #[test]
    fn partial_file_and_errors() {
        let c = PipelineConfig::parse("projection.width = 512\neval.protocol = multi\n", Path::new(".")).unwrap();
        assert_eq!(c.width, 512);
        assert_eq!(c.network().num_classes, 25);
        assert!(PipelineConfig::parse("projection.widht = 512\n", Path::new(".")).is_err());
        assert!(PipelineConfig::parse("knn.window = 4\n", Path::new(".")).is_err());
        assert!(PipelineConfig::parse("network.widths = 1 2 3\n", Path::new(".")).is_err());
        assert!(matches!(
            PipelineConfig::parse("eval.mapping = nowhere.map\n", Path::new("/nonexistent")),
            Err(ConfigError::MissingFile(_))
        ));
    }

    #[test]
    fn relative_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.map"), crate::evaluation::SINGLE_SCAN_MAPPING).unwrap();
        std::fs::write(dir.path().join("cfg.txt"), "eval.mapping = m.map\n").unwrap();
        let c = PipelineConfig::load(&dir.path().join("cfg.txt")).unwrap();
        assert_eq!(c.mapping.as_deref(), Some(dir.path().join("m.map").as_path()));
        assert_eq!(c.class_mapping().unwrap().n, 19);
    }

    #[test]
    fn frequency_counting() {
        assert_eq!(count_frequencies([2, 2, 2], 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(count_frequencies([0, 0, 0, 1, u16::MAX], 2).unwrap(), vec![0.75, 0.25]);
        assert!(count_frequencies([u16::MAX], 2).is_none());
        let f = floor_frequencies(&[0.0, 1.0]);
        assert!(f[0] > 0.0 && (f.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        std::fs::write(&p, write_frequency_table(&[0.75, 0.25], &["a".into(), "b".into()])).unwrap();
        assert_eq!(read_frequency_table(&p).unwrap(), vec![0.75, 0.25]);
    }

    proptest! {
        #[test]
        fn dump_load_round_trip(
            h in 1usize..128, w in 1usize..4096, up in 0.0f64..10.0, down in 0.1f64..40.0,
            cap in prop::option::of(0.01f64..10.0), count in 0usize..4,
            k in 1usize..10, cutoff in prop::option::of(0.0f64..5.0),
            w2 in 0.0f64..3.0, multi in any::<bool>(), seed in any::<u64>(),
            widths in prop::array::uniform4(1usize..300),
        ) {
            let c = PipelineConfig {
                height: h, width: w, fov_up_deg: up, fov_down_deg: down, residual_cap: cap,
                residual_count: count,
                knn: KnnConfig { k, window: 7, cutoff, gaussian_sigma: None },
                loss_weights: LossWeights { w2, ..Default::default() },
                protocol: if multi { Protocol::MultiScan } else { Protocol::SingleScan },
                seed, widths,
                ..Default::default()
            };
            prop_assert_eq!(PipelineConfig::parse(&c.dump(), Path::new("/")).unwrap(), c);
        }
    }
}
