//! Two-stage sampling: a second VAE learns the first VAE's aggregate
//! posterior, and generation feeds normal noise through both decoders.
//!
//! Two optional corrections are available on the generated batch. Latent
//! renormalization standardizes every latent component to mean 0 and variance
//! 1 before the first decoder. Pixel renormalization rescales deviations from
//! the generated mean so the global pixel std matches the real data.
//! Factors are estimated on the generated batch itself, so batches of at least
//! 1000 samples are advisable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::datasets::Manifest;
use crate::error::{Error, Result};
use crate::linalg::{variance, VarianceKind};
use crate::nn::Activation;
use crate::rng::{gaussian_sample, Rng};
use crate::tensor::Tensor;
use crate::vae::{reparameterize, TrainConfig, VaeArchitecture, VaeModel};

/// Floor applied to per-component latent std before dividing.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatentSource {
    #[default]
    PosteriorSample,
    PosteriorMean,
}

impl fmt::Display for LatentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentSource::PosteriorSample => "posterior_sample",
            LatentSource::PosteriorMean => "posterior_mean",
        })
    }
}

impl FromStr for LatentSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior_sample" => Ok(LatentSource::PosteriorSample),
            "posterior_mean" => Ok(LatentSource::PosteriorMean),
            other => Err(Error::invalid(format!("unknown latent source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RenormMode {
    #[default]
    None,
    Latent,
    Pixel,
    Both,
}

impl RenormMode {
    pub const ALL: [RenormMode; 4] = [RenormMode::None, RenormMode::Latent, RenormMode::Pixel, RenormMode::Both];

    pub fn latent(self) -> bool {
        matches!(self, RenormMode::Latent | RenormMode::Both)
    }

    pub fn pixel(self) -> bool {
        matches!(self, RenormMode::Pixel | RenormMode::Both)
    }
}

impl fmt::Display for RenormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RenormMode::None => "none",
            RenormMode::Latent => "latent",
            RenormMode::Pixel => "pixel",
            RenormMode::Both => "both",
        })
    }
}

impl FromStr for RenormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RenormMode::None),
            "latent" => Ok(RenormMode::Latent),
            "pixel" => Ok(RenormMode::Pixel),
            "both" => Ok(RenormMode::Both),
            other => Err(Error::invalid(format!("unknown renorm mode `{other}`"))),
        }
    }
}

/// Global scalar mean and population std over every pixel of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelStats {
    pub mean: f64,
    pub std: f64,
}

impl PixelStats {
    pub fn of(x: &Tensor) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::invalid("pixel statistics of an empty tensor"));
        }
        Ok(Self {
            mean: x.mean(),
            std: variance(x.data(), VarianceKind::Population)?.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactors {
    pub mean: Vec<f64>,
    /// Floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFactors {
    /// `std_real / std_gen`.
    pub scale: f64,
    pub mean_real: f64,
    pub mean_gen: f64,
    pub recenter: bool,
}

/// Corrections that were actually applied to a generated batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenormFactors {
    pub latent: Option<LatentFactors>,
    pub pixel: Option<PixelFactors>,
}

impl RenormFactors {
    pub fn to_manifest(&self, mode: RenormMode) -> Manifest {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let mut m = Manifest::default();
        m.set("renorm_mode", mode);
        if let Some(l) = &self.latent {
            m.set("latent_mean", join(&l.mean));
            m.set("latent_std", join(&l.std));
        }
        if let Some(p) = &self.pixel {
            m.set("pixel_scale", format!("{:e}", p.scale));
            m.set("pixel_mean_real", format!("{:e}", p.mean_real));
            m.set("pixel_mean_gen", format!("{:e}", p.mean_gen));
            m.set("pixel_recenter", p.recenter);
        }
        m
    }

    pub fn write(&self, mode: RenormMode, path: &Path) -> Result<()> {
        self.to_manifest(mode).write(path)
    }
}

/// Per-component standardization using population moments of the batch.
pub fn renormalize_latents(z: &Tensor) -> Result<(Tensor, LatentFactors)> {
    let (n, k) = z.dims2()?;
    if n < 2 {
        return Err(Error::invalid(format!("latent renormalization needs n >= 2, got {n}")));
    }
    let mean = z.column_means();
    let mut std = vec![0.0; k];
    for row in z.row_iter() {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n as f64).sqrt().max(STD_FLOOR);
    }
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(k) {
        for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
            *v = (*v - m) / s;
        }
    }
    Ok((out, LatentFactors { mean, std }))
}

/// `X' = mean_gen + (X − mean_gen)·(std_real/std_gen)`, optionally shifted so
/// the mean becomes `mean_real`.
pub fn renormalize_pixels(x: &Tensor, real: PixelStats, recenter: bool) -> Result<(Tensor, PixelFactors)> {
    let gen = PixelStats::of(x)?;
    if !(gen.std >= STD_FLOOR) {
        return Err(Error::invalid(format!(
            "generated pixel std {:e} is below {STD_FLOOR:e}",
            gen.std
        )));
    }
    if !(real.std > 0.0) || !real.std.is_finite() {
        return Err(Error::invalid(format!("real pixel std must be positive, got {}", real.std)));
    }
    let scale = real.std / gen.std;
    let target = if recenter { real.mean } else { gen.mean };
    let out = x.map(|v| target + (v - gen.mean) * scale);
    Ok((
        out,
        PixelFactors {
            scale,
            mean_real: real.mean,
            mean_gen: gen.mean,
            recenter,
        },
    ))
}

/// Samples of the aggregate posterior: `μ + σδ` per datum, or `μ`.
pub fn collect_latents(first: &VaeModel, data: &Tensor, source: LatentSource, rng: &mut Rng) -> Result<Tensor> {
    let params = first.encode_unclamped(data)?;
    match source {
        LatentSource::PosteriorMean => Ok(params.mu),
        LatentSource::PosteriorSample => reparameterize(&params, rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondStageConfig {
    pub hidden: Vec<usize>,
    /// Defaults to the first stage's latent dimension.
    pub latent_dim: Option<usize>,
    pub beta: f64,
    pub train: TrainConfig,
}

impl Default for SecondStageConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            latent_dim: None,
            beta: 1.0,
            train: TrainConfig::default(),
        }
    }
}

/// Trains a VAE whose data are latent codes; its decoder output is linear.
pub fn train_second_stage(
    latents: &Tensor,
    config: &SecondStageConfig,
    rng: &mut Rng,
) -> Result<(VaeModel, Vec<crate::vae::LossBreakdown>)> {
    let (n, k) = latents.dims2()?;
    if n == 0 {
        return Err(Error::invalid("second stage needs at least one latent code"));
    }
    let arch = VaeArchitecture {
        data_dim: k,
        hidden: config.hidden.clone(),
        latent_dim: config.latent_dim.unwrap_or(k),
        hidden_activation: Activation::Relu,
        output_activation: Activation::Identity,
    };
    let mut model = VaeModel::new(&arch, config.beta, rng)?;
    let history = model.train(latents, &config.train, rng)?;
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenStage {
    /// First decoder applied to prior samples.
    Gen1,
    /// Second decoder feeding the first.
    Gen2,
}

impl FromStr for GenStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gen1" => Ok(GenStage::Gen1),
            "gen2" => Ok(GenStage::Gen2),
            other => Err(Error::invalid(format!("stage must be gen1 or gen2, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub samples: Tensor,
    pub factors: RenormFactors,
}

#[derive(Debug, Clone)]
pub struct TwoStageModel {
    pub first: VaeModel,
    pub second: Option<VaeModel>,
    pub latent_source: LatentSource,
    /// Pixel statistics of the first stage's training data.
    pub real_pixels: PixelStats,
    pub recenter_pixels: bool,
    pub clip: bool,
}

impl TwoStageModel {
    pub fn new(first: VaeModel, real_pixels: PixelStats) -> Self {
        Self {
            first,
            second: None,
            latent_source: LatentSource::default(),
            real_pixels,
            recenter_pixels: false,
            clip: true,
        }
    }

    pub fn with_second(mut self, second: VaeModel) -> Result<Self> {
        if second.data_dim() != self.first.latent_dim {
            return Err(Error::invalid(format!(
                "second stage data dim {} != first stage latent dim {}",
                second.data_dim(),
                self.first.latent_dim
            )));
        }
        self.second = Some(second);
        Ok(self)
    }

    fn second(&self) -> Result<&VaeModel> {
        self.second
            .as_ref()
            .ok_or_else(|| Error::Untrained("second stage has not been trained".into()))
    }

    /// Raw first-stage latent codes for `n` samples of the chosen stage.
    pub fn sample_latents(&self, stage: GenStage, n: usize, rng: &mut Rng) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("cannot generate zero samples"));
        }
        match stage {
            GenStage::Gen1 => gaussian_sample(rng, &[n, self.first.latent_dim], 0.0, 1.0),
            GenStage::Gen2 => {
                let second = self.second()?;
                let u = gaussian_sample(rng, &[n, second.latent_dim], 0.0, 1.0)?;
                second.decode(&u)
            }
        }
    }

    pub fn clip_pixels(&self, x: Tensor) -> Tensor {
        if self.clip {
            x.map(|v| v.clamp(0.0, 1.0))
        } else {
            x
        }
    }

    pub fn generate_stage(&self, stage: GenStage, n: usize, rng: &mut Rng, mode: RenormMode) -> Result<Generated> {
        let mut factors = RenormFactors::default();
        let mut z = self.sample_latents(stage, n, rng)?;
        if mode.latent() {
            let (zr, f) = renormalize_latents(&z)?;
            z = zr;
            factors.latent = Some(f);
        }
        let mut x = self.first.decode(&z)?;
        if mode.pixel() {
            let (xr, f) = renormalize_pixels(&x, self.real_pixels, self.recenter_pixels)?;
            x = xr;
            factors.pixel = Some(f);
        }
        Ok(Generated {
            samples: self.clip_pixels(x),
            factors,
        })
    }

    /// Writes `twostage.txt` plus `first/` and (when trained) `second/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.first.save(&dir.join("first"))?;
        if let Some(second) = &self.second {
            second.save(&dir.join("second"))?;
        }
        let mut m = Manifest::default();
        m.set("format", "varloss-twostage/1");
        m.set("latent_source", self.latent_source);
        m.set("real_pixel_mean", self.real_pixels.mean);
        m.set("real_pixel_std", self.real_pixels.std);
        m.set("recenter_pixels", self.recenter_pixels);
        m.set("clip", self.clip);
        m.set("has_second", self.second.is_some());
        m.write(&dir.join("twostage.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join("twostage.txt"))?;
        let first = VaeModel::load(&dir.join("first"))?;
        let mut model = TwoStageModel::new(
            first,
            PixelStats {
                mean: m.parse("real_pixel_mean")?,
                std: m.parse("real_pixel_std")?,
            },
        );
        model.latent_source = m.parse("latent_source")?;
        model.recenter_pixels = m.parse("recenter_pixels")?;
        model.clip = m.parse("clip")?;
        if m.parse::<bool>("has_second")? {
            model = model.with_second(VaeModel::load(&dir.join("second"))?)?;
        }
        Ok(model)
    }

    /// Two-stage generation (GEN-2).
    pub fn generate(&self, n: usize, rng: &mut Rng, mode: RenormMode) -> Result<Generated> {
        self.generate_stage(GenStage::Gen2, n, rng, mode)
    }
}
