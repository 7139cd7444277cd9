//! TOML pipeline configuration with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::netgraph::{NetworkOptions, NetworkSpec, Variant};
use crate::quantizer::QuantizationScheme;
use crate::router::{DepthRange, DEFAULT_SIGMA, DEFAULT_TOP_K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMethod {
    SceneClassification,
    #[default]
    CoarseDepth,
    ForcedLow,
    ForcedHigh,
    CdeOnly,
}

impl std::str::FromStr for RouterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "scene_classification" | "scene" => RouterMethod::SceneClassification,
            "coarse_depth" | "coarse" => RouterMethod::CoarseDepth,
            "forced_low" => RouterMethod::ForcedLow,
            "forced_high" => RouterMethod::ForcedHigh,
            "cde_only" => RouterMethod::CdeOnly,
            _ => return Err(Error::Config(format!("unknown router method `{s}`"))),
        })
    }
}

/// Which network a training run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    Low,
    High,
    /// Mixed-range network used by the coarse-depth router; shares the
    /// low-range architecture.
    Coarse,
}

impl TrainTarget {
    pub fn variant(self) -> Variant {
        match self {
            TrainTarget::High => Variant::HighDepthRange,
            TrainTarget::Low | TrainTarget::Coarse => Variant::LowDepthRange,
        }
    }

    /// Range tag of the samples this target trains on; `None` means all.
    pub fn range(self) -> Option<DepthRange> {
        match self {
            TrainTarget::Low => Some(DepthRange::Low),
            TrainTarget::High => Some(DepthRange::High),
            TrainTarget::Coarse => None,
        }
    }
}

impl std::str::FromStr for TrainTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(TrainTarget::Low),
            "high" => Ok(TrainTarget::High),
            "coarse" => Ok(TrainTarget::Coarse),
            _ => Err(Error::Config(format!("unknown training target `{s}` (low, high, coarse)"))),
        }
    }
}

impl std::fmt::Display for TrainTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainTarget::Low => "low",
            TrainTarget::High => "high",
            TrainTarget::Coarse => "coarse",
        })
    }
}

/// SAM decoding position: an integer block index or `"none"` in TOML.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamPlacement(pub Option<usize>);

impl Serialize for SamPlacement {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(p) => s.serialize_u64(p as u64),
            None => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for SamPlacement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(u64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Int(p) => Ok(SamPlacement(Some(p as usize))),
            Repr::Str(s) if s == "none" => Ok(SamPlacement(None)),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected a block number or \"none\", got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub width_multiplier: f64,
    pub skip_encoding: bool,
    pub skip_rgb: bool,
    pub low_sam: SamPlacement,
    pub high_sam: SamPlacement,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            skip_encoding: true,
            skip_rgb: true,
            low_sam: SamPlacement(None),
            high_sam: SamPlacement(Some(3)),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub low: QuantizationScheme,
    pub high: QuantizationScheme,
    pub coarse: QuantizationScheme,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            low: QuantizationScheme::low_range(),
            high: QuantizationScheme::high_range(),
            coarse: QuantizationScheme::coarse(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub method: RouterMethod,
    /// Coarse-depth threshold, meters.
    pub sigma: f64,
    pub top_k: usize,
    /// Scene table (`name,low|high` lines); the built-in table when unset.
    pub scene_table: Option<PathBuf>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            method: RouterMethod::default(),
            sigma: DEFAULT_SIGMA,
            top_k: DEFAULT_TOP_K,
            scene_table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty added to every gradient.
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Seed of batch sampling and cropping.
    pub seed: u64,
    pub validate_every: u64,
    pub bn_momentum: f64,
    /// Optional `[width, height]` random crop applied to training samples.
    pub crop: Option<[usize; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            validate_every: 200,
            bn_momentum: 0.1,
            crop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub low_checkpoint: Option<PathBuf>,
    pub high_checkpoint: Option<PathBuf>,
    pub coarse_checkpoint: Option<PathBuf>,
    /// Scene-probability CSV keyed by sample id.
    pub scene_probs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub output_dir: Option<PathBuf>,
    pub low_count: usize,
    pub high_count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Depth cap for low-range scenes, meters.
    pub low_max_depth: Option<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            low_count: 16,
            high_count: 16,
            width: 64,
            height: 64,
            seed: 0,
            low_max_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub schemes: SchemeConfig,
    pub loss: LossConfig,
    pub router: RouterConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    pub synthetic: SyntheticConfig,
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub sigma: Option<f64>,
    pub top_k: Option<usize>,
    pub router: Option<RouterMethod>,
    pub seed: Option<u64>,
    pub width_multiplier: Option<f64>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    /// Parses TOML text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [
            &mut cfg.paths.train_manifest,
            &mut cfg.paths.val_manifest,
            &mut cfg.paths.eval_manifest,
            &mut cfg.paths.output_dir,
            &mut cfg.paths.low_checkpoint,
            &mut cfg.paths.high_checkpoint,
            &mut cfg.paths.coarse_checkpoint,
            &mut cfg.paths.scene_probs,
            &mut cfg.router.scene_table,
            &mut cfg.synthetic.output_dir,
        ] {
            resolve(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.sigma {
            self.router.sigma = s;
        }
        if let Some(k) = o.top_k {
            self.router.top_k = k;
        }
        if let Some(m) = o.router {
            self.router.method = m;
        }
        if let Some(s) = o.seed {
            self.network.seed = s;
            self.train.seed = s;
            self.synthetic.seed = s;
        }
        if let Some(m) = o.width_multiplier {
            self.network.width_multiplier = m;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.loss.validate()?;
        let m = self.network.width_multiplier;
        if !(m > 0.0 && m <= 1.0) {
            return bad(format!("network.width_multiplier must be in (0, 1], got {m}"));
        }
        if !(self.router.sigma.is_finite() && self.router.sigma > 0.0) {
            return bad(format!("router.sigma must be a positive depth, got {}", self.router.sigma));
        }
        if self.router.top_k == 0 {
            return bad("router.top_k must be >= 1".into());
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be positive, got {}", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.epsilon <= 0.0 {
            return bad("train.beta1/beta2 must be in [0, 1) and epsilon positive".into());
        }
        if t.weight_decay < 0.0 || !(0.0..=1.0).contains(&t.bn_momentum) {
            return bad("train.weight_decay must be >= 0 and bn_momentum in [0, 1]".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if t.validate_every == 0 {
            return bad("train.validate_every must be >= 1".into());
        }
        for (name, sam) in [("low_sam", self.network.low_sam), ("high_sam", self.network.high_sam)] {
            if let Some(p) = sam.0 {
                if !(3..=5).contains(&p) {
                    return bad(format!("network.{name} must be 3, 4, 5 or \"none\", got {p}"));
                }
            }
        }
        Ok(())
    }

    pub fn scheme(&self, target: TrainTarget) -> QuantizationScheme {
        match target {
            TrainTarget::Low => self.schemes.low,
            TrainTarget::High => self.schemes.high,
            TrainTarget::Coarse => self.schemes.coarse,
        }
    }

    /// Network spec for a target with the branches its loss mode trains.
    pub fn network_spec(&self, target: TrainTarget) -> Result<NetworkSpec> {
        let variant = target.variant();
        let scheme = self.scheme(target);
        let opts = NetworkOptions {
            width_multiplier: self.network.width_multiplier,
            num_bins: scheme.num_bins(),
            skip_encoding: self.network.skip_encoding,
            skip_rgb: self.network.skip_rgb,
            sam_position: match variant {
                Variant::LowDepthRange => self.network.low_sam.0,
                Variant::HighDepthRange => self.network.high_sam.0,
            },
            branches: self.loss.mode.branches(),
            // geometric center of the range: the middle of the log-spaced bins
            regression_bias: (scheme.alpha() * scheme.beta()).sqrt(),
            seed: self.network.seed,
        };
        NetworkSpec::build(variant, &opts).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::parse(&text, Path::new(".")).unwrap(), cfg);
    }

    #[test]
    fn parses_sections_and_resolves_paths() {
        let text = r#"
[network]
width_multiplier = 0.125
high_sam = "none"
low_sam = 4

[schemes.low]
alpha_m = 0.5
beta_m = 8.0
num_bins = 20

[loss]
mode = "soft_cls_plus_reg"
w2 = 0.5

[router]
method = "scene_classification"
top_k = 5

[paths]
train_manifest = "data/manifest.tsv"
"#;
        let cfg = PipelineConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.network.width_multiplier, 0.125);
        assert_eq!(cfg.network.high_sam, SamPlacement(None));
        assert_eq!(cfg.network.low_sam, SamPlacement(Some(4)));
        assert_eq!(cfg.schemes.low.num_bins(), 20);
        assert_eq!(cfg.schemes.high, QuantizationScheme::high_range());
        assert_eq!(cfg.loss.w2, 0.5);
        assert_eq!(cfg.router.method, RouterMethod::SceneClassification);
        assert_eq!(cfg.router.sigma, DEFAULT_SIGMA);
        assert_eq!(cfg.paths.train_manifest, Some(PathBuf::from("/cfg/data/manifest.tsv")));
    }

    #[test]
    fn rejects_bad_configs() {
        let base = Path::new(".");
        for text in [
            "[loss]\nw1 = 0.0\nw2 = 0.0\n",
            "[router]\nsigma = -1.0\n",
            "[network]\nwidth_multiplier = 2.0\n",
            "[network]\nhigh_sam = 7\n",
            "[network]\nunknown_key = 1\n",
            "[schemes.low]\nalpha_m = 5.0\nbeta_m = 1.0\nnum_bins = 3\n",
            "not toml at all [",
        ] {
            assert!(matches!(PipelineConfig::parse(text, base), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = PipelineConfig::default();
        cfg.apply(&Overrides {
            sigma: Some(10.0),
            top_k: Some(5),
            router: Some(RouterMethod::ForcedLow),
            seed: Some(7),
            width_multiplier: Some(0.25),
        })
        .unwrap();
        assert_eq!(cfg.router.sigma, 10.0);
        assert_eq!(cfg.router.top_k, 5);
        assert_eq!(cfg.router.method, RouterMethod::ForcedLow);
        assert_eq!((cfg.network.seed, cfg.train.seed), (7, 7));
        assert_eq!(cfg.network.width_multiplier, 0.25);
        assert!(cfg
            .apply(&Overrides {
                width_multiplier: Some(0.0),
                ..Overrides::default()
            })
            .is_err());
    }
}
