//! Typed experiment configuration read from `key=value` manifests.
//!
//! Every command accepts a fixed key set; unknown keys are rejected so a typo
//! cannot silently fall back to a default.

use std::path::PathBuf;
use std::str::FromStr;

use crate::datasets::{bundled_mnist_images, DatasetHandle, DumpDtype, Manifest};
use crate::error::{Error, Result};
use crate::metric::FeatureExtractor;
use crate::nn::{Activation, AdamConfig};
use crate::tensor::Tensor;
use crate::twostage::{GenStage, LatentSource, RenormMode, SecondStageConfig};
use crate::vae::{TrainConfig, VaeArchitecture};

/// Dataset alias resolving to the bundled 10k MNIST image subset.
pub const MNIST_ALIAS: &str = "mnist10k";

/// How the configured `beta` maps onto the loss `mse + β·KL`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaUnit {
    /// `β = beta / data_dim`: the KL is weighed against the per-image sum of
    /// squared errors rather than the per-element mean.
    #[default]
    Image,
    /// `β = beta`.
    Element,
}

impl FromStr for BetaUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(BetaUnit::Image),
            "element" => Ok(BetaUnit::Element),
            other => Err(Error::invalid(format!("beta_unit must be image or element, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for BetaUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BetaUnit::Image => "image",
            BetaUnit::Element => "element",
        })
    }
}

impl BetaUnit {
    pub fn effective(self, beta: f64, data_dim: usize) -> f64 {
        match self {
            BetaUnit::Image => beta / data_dim as f64,
            BetaUnit::Element => beta,
        }
    }
}

/// Feature space for the Fréchet distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpec {
    Identity,
    Pca(usize),
}

impl FeatureSpec {
    pub fn build(self, real: &Tensor) -> Result<FeatureExtractor> {
        match self {
            FeatureSpec::Identity => Ok(FeatureExtractor::Identity),
            FeatureSpec::Pca(k) => FeatureExtractor::fit_pca(real, k),
        }
    }
}

impl FromStr for FeatureSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(FeatureSpec::Identity);
        }
        match s.strip_prefix("pca:").map(str::parse::<usize>) {
            Some(Ok(k)) if k > 0 => Ok(FeatureSpec::Pca(k)),
            _ => Err(Error::invalid(format!("features must be `identity` or `pca:K`, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureSpec::Identity => f.write_str("identity"),
            FeatureSpec::Pca(k) => write!(f, "pca:{k}"),
        }
    }
}

/// Read-only view of a manifest with typed, defaulted lookups.
pub struct Settings<'a> {
    m: &'a Manifest,
}

impl<'a> Settings<'a> {
    /// Fails on any key outside `allowed`.
    pub fn new(m: &'a Manifest, allowed: &[&str]) -> Result<Self> {
        let unknown: Vec<&str> = m.entries().map(|(k, _)| k).filter(|k| !allowed.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(Error::invalid(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        Ok(Self { m })
    }

    pub fn raw(&self, key: &str) -> Option<&'a str> {
        self.m.get(key)
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.m.parse(key)
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.m.get(key) {
            None => Ok(default),
            Some(_) => self.m.parse(key),
        }
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.m.get(key).map(|_| self.m.parse(key)).transpose()
    }

    /// Comma-separated list; an empty value or `none` is the empty list.
    pub fn list_or<T: FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.m.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => parse_list(key, v),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.m.require(key)?))
    }
}

pub fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let v = v.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            item.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("`{key}`: cannot parse list item `{item}`")))
        })
        .collect()
}

/// Resolves the dataset alias and checks that the file exists.
pub fn resolve_dataset(spec: &str) -> Result<PathBuf> {
    let path = if spec == MNIST_ALIAS {
        bundled_mnist_images()
    } else {
        PathBuf::from(spec)
    };
    if !path.is_file() {
        return Err(Error::invalid(format!("dataset `{}` does not exist", path.display())));
    }
    Ok(path)
}

fn existing_dir(path: PathBuf, key: &str) -> Result<PathBuf> {
    if !path.is_dir() {
        return Err(Error::invalid(format!("`{key}` directory `{}` does not exist", path.display())));
    }
    Ok(path)
}

/// Keys shared by every training command.
pub const RUN_KEYS: &[&str] = &[
    "run_id",
    "seed",
    "out_dir",
    "dataset",
    "dataset_limit",
    "hidden",
    "activation",
    "latent_dim",
    "beta",
    "beta_unit",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta_warmup_epochs",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: PathBuf,
    pub dataset_limit: Option<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub latent_dim: usize,
    pub beta: f64,
    pub beta_unit: BetaUnit,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta_warmup_epochs: usize,
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let cfg = Self {
            run_id: s.or("run_id", "run".to_string())?,
            seed: s.required("seed")?,
            out_dir: s.path("out_dir")?,
            dataset: resolve_dataset(&s.or("dataset", MNIST_ALIAS.to_string())?)?,
            dataset_limit: s.optional("dataset_limit")?,
            hidden: s.list_or("hidden", &[256])?,
            activation: s.or("activation", Activation::Relu)?,
            latent_dim: s.or("latent_dim", 16)?,
            beta: s.or("beta", 1.0)?,
            beta_unit: s.or("beta_unit", BetaUnit::Image)?,
            epochs: s.or("epochs", 15)?,
            batch_size: s.or("batch_size", 100)?,
            learning_rate: s.or("learning_rate", 1e-3)?,
            beta_warmup_epochs: s.or("beta_warmup_epochs", 0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid("beta must be finite and >= 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.dataset_limit == Some(0) {
            return Err(Error::invalid("dataset_limit must be positive"));
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '"']) {
            return Err(Error::invalid("run_id must be non-empty without commas, quotes or newlines"));
        }
        self.train_config().validate()
    }

    pub fn load_dataset(&self) -> Result<DatasetHandle> {
        DatasetHandle::open(&self.dataset, self.dataset_limit)
    }

    pub fn architecture(&self, data_dim: usize) -> VaeArchitecture {
        VaeArchitecture {
            hidden_activation: self.activation,
            ..VaeArchitecture::mlp(data_dim, &self.hidden, self.latent_dim)
        }
    }

    pub fn effective_beta(&self, data_dim: usize) -> f64 {
        self.beta_unit.effective(self.beta, data_dim)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                ..AdamConfig::default()
            },
            beta_warmup_epochs: self.beta_warmup_epochs,
            shuffle: true,
        }
    }
}

pub const DIAGNOSE_KEYS: &[&str] = &["run_id", "seed", "out_dir", "checkpoint", "dataset", "dataset_limit", "features"];

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseConfig {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub dataset_limit: Option<usize>,
    pub features: FeatureSpec,
}

impl DiagnoseConfig {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let s = Settings::new(m, DIAGNOSE_KEYS)?;
        Ok(Self {
            run_id: s.or("run_id", "run".to_string())?,
            seed: s.required("seed")?,
            out_dir: s.path("out_dir")?,
            checkpoint: existing_dir(s.path("checkpoint")?, "checkpoint")?,
            dataset: resolve_dataset(&s.or("dataset", MNIST_ALIAS.to_string())?)?,
            dataset_limit: s.optional("dataset_limit")?,
            features: s.or("features", FeatureSpec::Pca(DEFAULT_PCA_FEATURES))?,
        })
    }
}

/// Default PCA feature dimension for the Fréchet distance.
pub const DEFAULT_PCA_FEATURES: usize = 32;

pub const SCATTER_EXTRA_KEYS: &[&str] = &[
    "grid_latent_dims",
    "grid_depths",
    "grid_betas",
    "grid_width",
    "pca_ks",
    "threads",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterConfig {
    /// Shared settings; `hidden`, `latent_dim` and `beta` are replaced per cell.
    pub run: RunConfig,
    pub latent_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub betas: Vec<f64>,
    pub width: usize,
    pub pca_ks: Vec<usize>,
    /// 0 lets the thread pool decide.
    pub threads: usize,
}

impl ScatterConfig {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let allowed: Vec<&str> = RUN_KEYS.iter().chain(SCATTER_EXTRA_KEYS).copied().collect();
        let s = Settings::new(m, &allowed)?;
        let cfg = Self {
            run: RunConfig::from_settings(&s)?,
            latent_dims: s.list_or("grid_latent_dims", &[2, 8, 16, 32])?,
            depths: s.list_or("grid_depths", &[1, 2])?,
            betas: s.list_or("grid_betas", &[0.5, 1.0])?,
            width: s.or("grid_width", 256)?,
            pca_ks: s.list_or("pca_ks", &[1, 2, 4, 8, 16, 32, 64, 128])?,
            threads: s.or("threads", 0)?,
        };
        if cfg.latent_dims.contains(&0) || cfg.width == 0 || cfg.pca_ks.contains(&0) {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if cfg.betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::invalid("grid betas must be finite and >= 0"));
        }
        if cfg.latent_dims.is_empty() && cfg.pca_ks.is_empty() {
            return Err(Error::invalid("empty scatter grid"));
        }
        Ok(cfg)
    }

    pub fn cell_count(&self) -> usize {
        self.latent_dims.len() * self.depths.len() * self.betas.len()
    }
}

pub const TWOSTAGE_EXTRA_KEYS: &[&str] = &[
    "checkpoint",
    "second_hidden",
    "second_latent_dim",
    "second_beta",
    "second_epochs",
    "latent_source",
    "n_generate",
    "features",
    "recenter_pixels",
    "dump_samples",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageConfig {
    pub run: RunConfig,
    /// Pretrained first stage; trained from `run` when absent.
    pub checkpoint: Option<PathBuf>,
    pub second: SecondStageConfig,
    /// Unscaled; see [`BetaUnit`].
    pub second_beta: f64,
    pub latent_source: LatentSource,
    pub n_generate: usize,
    pub features: FeatureSpec,
    pub recenter_pixels: bool,
    /// Rows written to each sample dump.
    pub dump_samples: usize,
}

impl TwoStageConfig {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let allowed: Vec<&str> = RUN_KEYS.iter().chain(TWOSTAGE_EXTRA_KEYS).copied().collect();
        let s = Settings::new(m, &allowed)?;
        let run = RunConfig::from_settings(&s)?;
        let checkpoint = s
            .optional::<String>("checkpoint")?
            .map(|p| existing_dir(PathBuf::from(p), "checkpoint"))
            .transpose()?;
        let second_beta: f64 = s.or("second_beta", 0.25)?;
        if !(second_beta >= 0.0) || !second_beta.is_finite() {
            return Err(Error::invalid("second_beta must be finite and >= 0"));
        }
        let mut train = run.train_config();
        train.epochs = s.or("second_epochs", 40)?;
        let second = SecondStageConfig {
            hidden: s.list_or("second_hidden", &[128, 128])?,
            latent_dim: s.optional("second_latent_dim")?,
            beta: second_beta,
            train,
        };
        if second.hidden.contains(&0) || second.latent_dim == Some(0) {
            return Err(Error::invalid("second stage sizes must be positive"));
        }
        let n_generate = s.or("n_generate", 10_000)?;
        if n_generate < 2 {
            return Err(Error::invalid("n_generate must be at least 2"));
        }
        Ok(Self {
            run,
            checkpoint,
            second,
            second_beta,
            latent_source: s.or("latent_source", LatentSource::default())?,
            n_generate,
            features: s.or("features", FeatureSpec::Pca(DEFAULT_PCA_FEATURES))?,
            recenter_pixels: s.or("recenter_pixels", false)?,
            dump_samples: s.or("dump_samples", 1000)?,
        })
    }
}

pub const GENERATE_KEYS: &[&str] = &["seed", "out_dir", "model", "n", "stage", "renorm", "dtype"];

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Directory written by the two-stage command (`<out_dir>/model`).
    pub model: PathBuf,
    pub n: usize,
    pub stage: GenStage,
    pub renorm: RenormMode,
    pub dtype: DumpDtype,
}

impl GenerateConfig {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let s = Settings::new(m, GENERATE_KEYS)?;
        let cfg = Self {
            seed: s.required("seed")?,
            out_dir: s.path("out_dir")?,
            model: existing_dir(s.path("model")?, "model")?,
            n: s.or("n", 1000)?,
            stage: s.or("stage", GenStage::Gen2)?,
            renorm: s.or("renorm", RenormMode::None)?,
            dtype: s.or("dtype", DumpDtype::F64)?,
        };
        if cfg.n == 0 {
            return Err(Error::invalid("n must be positive"));
        }
        if cfg.renorm.latent() && cfg.n < 2 {
            return Err(Error::invalid("latent renormalization needs n >= 2"));
        }
        Ok(cfg)
    }
}

pub const METRIC_KEYS: &[&str] = &["seed", "out_dir", "real", "generated", "features"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub real: PathBuf,
    pub generated: PathBuf,
    pub features: FeatureSpec,
}

impl MetricConfig {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let s = Settings::new(m, METRIC_KEYS)?;
        Ok(Self {
            seed: s.required("seed")?,
            out_dir: s.optional::<String>("out_dir")?.map(PathBuf::from),
            real: resolve_dataset(&s.required::<String>("real")?)?,
            generated: resolve_dataset(&s.required::<String>("generated")?)?,
            features: s.or("features", FeatureSpec::Identity)?,
        })
    }
}

/// Seed used by the demos when none is given.
pub const DEMO_SEED: u64 = 7;

pub const PCA_DEMO_KEYS: &[&str] = &["seed", "out_dir", "n", "std_major", "std_minor", "rotation"];

#[derive(Debug, Clone, PartialEq)]
pub struct PcaDemoConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub n: usize,
    pub stds: [f64; 2],
    pub rotation: f64,
}

impl PcaDemoConfig {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let s = Settings::new(m, PCA_DEMO_KEYS)?;
        let cfg = Self {
            seed: s.or("seed", DEMO_SEED)?,
            out_dir: s.path("out_dir")?,
            n: s.or("n", 200)?,
            stds: [s.or("std_major", 2.0)?, s.or("std_minor", 0.5)?],
            rotation: s.or("rotation", 0.6)?,
        };
        if cfg.n < 2 {
            return Err(Error::invalid("n must be at least 2"));
        }
        Ok(cfg)
    }
}

pub const SMOOTHING_DEMO_KEYS: &[&str] = &["seed", "out_dir", "n_points", "window", "smoothness", "noise"];

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingDemoConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub n_points: usize,
    pub window: usize,
    pub smoothness: f64,
    pub noise: f64,
}

impl SmoothingDemoConfig {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let s = Settings::new(m, SMOOTHING_DEMO_KEYS)?;
        let cfg = Self {
            seed: s.or("seed", DEMO_SEED)?,
            out_dir: s.path("out_dir")?,
            n_points: s.or("n_points", 256)?,
            window: s.or("window", 9)?,
            smoothness: s.or("smoothness", 0.9)?,
            noise: s.or("noise", 0.5)?,
        };
        if !(cfg.noise >= 0.0) || !cfg.noise.is_finite() {
            return Err(Error::invalid("noise must be finite and >= 0"));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(text: &str) -> Manifest {
        Manifest::from_text(text).unwrap()
    }

    #[test]
    fn run_config_defaults_and_overrides() {
        let m = manifest("seed=3\nout_dir=/tmp/x\nhidden=64,32\nbeta=0.5\n");
        let s = Settings::new(&m, RUN_KEYS).unwrap();
        let c = RunConfig::from_settings(&s).unwrap();
        assert_eq!(c.hidden, vec![64, 32]);
        assert_eq!(c.latent_dim, 16);
        assert_eq!(c.beta_unit, BetaUnit::Image);
        assert!((c.effective_beta(784) - 0.5 / 784.0).abs() < 1e-18);
        assert_eq!(c.architecture(784).hidden_activation, Activation::Relu);
    }

    #[test]
    fn seed_is_mandatory_and_unknown_keys_fail() {
        let m = manifest("out_dir=/tmp/x\n");
        assert!(RunConfig::from_settings(&Settings::new(&m, RUN_KEYS).unwrap()).is_err());
        let m = manifest("seed=1\nout_dir=/tmp/x\nlatnet_dim=3\n");
        assert!(Settings::new(&m, RUN_KEYS).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        for extra in ["latent_dim=0", "beta=-1", "batch_size=0", "dataset=/nonexistent", "hidden=4,x", "beta_unit=foo"] {
            let m = manifest(&format!("seed=1\nout_dir=/tmp/x\n{extra}\n"));
            let s = Settings::new(&m, RUN_KEYS).unwrap();
            assert!(RunConfig::from_settings(&s).is_err(), "{extra}");
        }
    }

    #[test]
    fn empty_hidden_list() {
        let m = manifest("seed=1\nout_dir=/tmp/x\nhidden=none\n");
        let c = RunConfig::from_settings(&Settings::new(&m, RUN_KEYS).unwrap()).unwrap();
        assert!(c.hidden.is_empty());
    }

    #[test]
    fn feature_spec_parsing() {
        assert_eq!("identity".parse::<FeatureSpec>().unwrap(), FeatureSpec::Identity);
        assert_eq!("pca:8".parse::<FeatureSpec>().unwrap(), FeatureSpec::Pca(8));
        assert!("pca:0".parse::<FeatureSpec>().is_err());
        assert!("inception".parse::<FeatureSpec>().is_err());
        assert_eq!(FeatureSpec::Pca(4).to_string(), "pca:4");
    }

    #[test]
    fn scatter_grid_defaults() {
        let m = manifest("seed=1\nout_dir=/tmp/x\n");
        let c = ScatterConfig::from_manifest(&m).unwrap();
        assert_eq!(c.cell_count(), 16);
        assert_eq!(c.betas, vec![0.5, 1.0]);
    }

    #[test]
    fn twostage_defaults() {
        let m = manifest("seed=1\nout_dir=/tmp/x\n");
        let c = TwoStageConfig::from_manifest(&m).unwrap();
        assert_eq!(c.latent_source, LatentSource::PosteriorSample);
        assert!(c.checkpoint.is_none());
        let m = manifest("seed=1\nout_dir=/tmp/x\ncheckpoint=/nonexistent\n");
        assert!(TwoStageConfig::from_manifest(&m).is_err());
    }
}
