//! Fréchet distance between Gaussians fitted to feature clouds.
//!
//! ```text
//! d²(a, b) = ‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^{1/2})
//! ```
//!
//! The trace of `(Σa Σb)^{1/2}` is computed as the trace of the PSD square
//! root of `Σa^{1/2} Σb Σa^{1/2}`, which is similar to `Σa Σb` and symmetric.
//! Features are either raw pixels or coordinates in a PCA basis fitted on the
//! real data ("Fréchet feature distance").

use crate::analysis::{pca_fit, PcaModel};
use crate::error::{Error, Result};
use crate::linalg::{covariance, sqrtm_psd, sym_eig, VarianceKind};
use crate::tensor::Tensor;

const PSD_TOL: f64 = 1e-9;
const REGULARIZER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Population covariance.
    pub cov: Tensor,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Builds stats from explicit moments (`n` is informational).
    pub fn from_moments(mean: Vec<f64>, cov: Tensor, n: usize) -> Result<Self> {
        let (r, c) = cov.dims2()?;
        if r != c || r != mean.len() {
            return Err(Error::ShapeMismatch {
                op: "gaussian stats",
                expected: vec![mean.len(), mean.len()],
                actual: cov.shape().to_vec(),
            });
        }
        if n < 2 {
            return Err(Error::invalid("gaussian stats need n >= 2"));
        }
        Ok(Self { mean, cov, n })
    }
}

pub fn fit_gaussian(features: &Tensor) -> Result<GaussianStats> {
    let (n, _) = features.dims2()?;
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 feature rows, got {n}")));
    }
    Ok(GaussianStats {
        mean: features.column_means(),
        cov: covariance(features, VarianceKind::Population)?,
        n,
    })
}

fn trace_sqrt_product(a: &Tensor, b: &Tensor) -> Result<Option<f64>> {
    let sa = sqrtm_psd(a)?;
    let m = sa.matmul(b)?.matmul(&sa)?;
    let sym = m.zip_map(&m.transpose()?, |x, y| 0.5 * (x + y))?;
    let eig = sym_eig(&sym)?;
    if eig.eigenvalues.iter().any(|&l| l < -PSD_TOL) {
        return Ok(None);
    }
    Ok(Some(eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()))
}

fn add_ridge(cov: &Tensor, eps: f64) -> Tensor {
    let mut c = cov.clone();
    let d = c.rows();
    for i in 0..d {
        let v = c.get(i, i) + eps;
        c.set(i, i, v);
    }
    c
}

/// Squared Fréchet distance, clipped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            expected: vec![a.dim()],
            actual: vec![b.dim()],
        });
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let (ca, cb) = (&a.cov, &b.cov);
    let cross = match trace_sqrt_product(ca, cb)? {
        Some(t) => ca.trace()? + cb.trace()? - 2.0 * t,
        None => {
            let (ra, rb) = (add_ridge(ca, REGULARIZER), add_ridge(cb, REGULARIZER));
            let t = trace_sqrt_product(&ra, &rb)?.ok_or(Error::NotPositiveSemidefinite {
                min_eigenvalue: f64::NAN,
            })?;
            ra.trace()? + rb.trace()? - 2.0 * t
        }
    };
    Ok((mean_term + cross).max(0.0))
}

#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    Identity,
    Pca(PcaModel),
}

impl FeatureExtractor {
    /// PCA basis of dimension `k` fitted on `real`.
    pub fn fit_pca(real: &Tensor, k: usize) -> Result<Self> {
        Ok(FeatureExtractor::Pca(pca_fit(real, k)?))
    }

    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeatureExtractor::Identity => {
                x.dims2()?;
                Ok(x.clone())
            }
            FeatureExtractor::Pca(model) => model.project(x),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            FeatureExtractor::Identity => "identity".into(),
            FeatureExtractor::Pca(m) => format!("pca:{}", m.k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FfdReport {
    pub distance: f64,
    pub real: GaussianStats,
    pub generated: GaussianStats,
}

/// Fréchet feature distance between a real and a generated sample.
pub fn ffd_report(real: &Tensor, generated: &Tensor, extractor: &FeatureExtractor) -> Result<FfdReport> {
    let real_stats = fit_gaussian(&extractor.extract(real)?)?;
    let gen_stats = fit_gaussian(&extractor.extract(generated)?)?;
    Ok(FfdReport {
        distance: frechet_distance(&real_stats, &gen_stats)?,
        real: real_stats,
        generated: gen_stats,
    })
}
