//! Variance loss and the cases where it can be related exactly to the
//! reconstruction error.
//!
//! Two conventions for the variance loss are reported:
//!
//! * `loss_per_feature`: variance of each feature over the data axis,
//!   real minus reconstructed, averaged over features. The PCA equality,
//!   the permutation-average identity and the shrinkage bound are exact
//!   statements about this quantity, so it is the default.
//! * `loss_paper_axis`: variance of each sample across its features,
//!   differenced and averaged over samples.
//!
//! All variances here are population variances.

use crate::error::{Error, Result};
use crate::linalg::{column_variances, covariance, sym_eig, variance, VarianceKind};
use crate::tensor::{Tensor, Trans};

/// Mean over all elements of `(a − b)²`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    if a.is_empty() {
        return Err(Error::invalid("mse of empty tensors"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    /// Per-feature variance of the real data.
    pub var_real: Vec<f64>,
    /// Per-feature variance of the reconstruction.
    pub var_hat: Vec<f64>,
    pub loss_per_feature: f64,
    pub loss_paper_axis: f64,
    pub mse: f64,
}

impl VarianceReport {
    pub fn mean_var_real(&self) -> f64 {
        self.var_real.iter().sum::<f64>() / self.var_real.len() as f64
    }
}

/// Variance loss of `x_hat` relative to `x` (both `n×m`).
pub fn variance_loss(x: &Tensor, x_hat: &Tensor) -> Result<VarianceReport> {
    variance_loss_with(x, x_hat, VarianceKind::Population)
}

/// [`variance_loss`] with an explicit variance divisor. The exact identities
/// in this module only hold for [`VarianceKind::Population`].
pub fn variance_loss_with(x: &Tensor, x_hat: &Tensor, kind: VarianceKind) -> Result<VarianceReport> {
    x.expect_same_shape(x_hat, "variance_loss")?;
    let (n, m) = x.dims2()?;
    if n == 0 || m == 0 {
        return Err(Error::invalid("variance loss of an empty matrix"));
    }
    let var_real = column_variances(x, kind)?;
    let var_hat = column_variances(x_hat, kind)?;
    let loss_per_feature = var_real
        .iter()
        .zip(&var_hat)
        .map(|(a, b)| a - b)
        .sum::<f64>()
        / m as f64;
    let mut per_sample = 0.0;
    for (r, h) in x.row_iter().zip(x_hat.row_iter()) {
        per_sample += variance(r, kind)? - variance(h, kind)?;
    }
    Ok(VarianceReport {
        var_real,
        var_hat,
        loss_per_feature,
        loss_paper_axis: per_sample / n as f64,
        mse: mse(x, x_hat)?,
    })
}

/// Variance loss between two unpaired sample sets with the same feature count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceGap {
    pub loss_per_feature: f64,
    pub loss_paper_axis: f64,
}

/// Same conventions as [`variance_loss`], for sets that need not be paired
/// (e.g. real versus generated). On paired inputs both numbers coincide with
/// the ones in [`VarianceReport`].
pub fn variance_gap(x: &Tensor, g: &Tensor) -> Result<VarianceGap> {
    let (n, m) = x.dims2()?;
    let (ng, mg) = g.dims2()?;
    if m != mg {
        return Err(Error::ShapeMismatch {
            op: "variance_gap",
            expected: vec![ng, m],
            actual: g.shape().to_vec(),
        });
    }
    if n == 0 || ng == 0 || m == 0 {
        return Err(Error::invalid("variance gap of an empty matrix"));
    }
    let kind = VarianceKind::Population;
    let vr = column_variances(x, kind)?;
    let vg = column_variances(g, kind)?;
    let per_feature = vr.iter().zip(&vg).map(|(a, b)| a - b).sum::<f64>() / m as f64;
    let row_mean = |t: &Tensor, rows: usize| -> Result<f64> {
        let mut s = 0.0;
        for r in t.row_iter() {
            s += variance(r, kind)?;
        }
        Ok(s / rows as f64)
    };
    Ok(VarianceGap {
        loss_per_feature: per_feature,
        loss_paper_axis: row_mean(x, n)? - row_mean(g, ng)?,
    })
}

/// Top-`k` principal subspace of a data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `m×k`, orthonormal columns.
    pub components: Tensor,
    /// Full spectrum of the population covariance, non-increasing.
    pub eigenvalues: Vec<f64>,
    pub k: usize,
}

pub fn pca_fit(x: &Tensor, k: usize) -> Result<PcaModel> {
    let (n, m) = x.dims2()?;
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two samples"));
    }
    if k == 0 || k > m {
        return Err(Error::invalid(format!("k = {k} outside 1..={m}")));
    }
    let eig = sym_eig(&covariance(x, VarianceKind::Population)?)?;
    let q = eig.eigenvectors.data();
    let mut comps = Vec::with_capacity(m * k);
    for r in 0..m {
        comps.extend_from_slice(&q[r * m..r * m + k]);
    }
    Ok(PcaModel {
        mean: x.column_means(),
        components: Tensor::new(vec![m, k], comps)?,
        eigenvalues: eig.eigenvalues,
        k,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn centered(&self, x: &Tensor) -> Result<Tensor> {
        let (_, m) = x.dims2()?;
        if m != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "pca",
                expected: vec![x.rows(), self.dim()],
                actual: x.shape().to_vec(),
            });
        }
        let mut c = x.clone();
        for row in c.data_mut().chunks_exact_mut(m) {
            for (v, mu) in row.iter_mut().zip(&self.mean) {
                *v -= mu;
            }
        }
        Ok(c)
    }

    /// Coordinates along the retained components, `n×k`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.centered(x)?.matmul(&self.components)
    }

    /// `mean + P·Pᵀ·(x − mean)` for every row.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let scores = self.project(x)?;
        let mut out = scores.matmul_t(Trans::No, &self.components, Trans::Yes)?;
        let m = self.dim();
        for row in out.data_mut().chunks_exact_mut(m) {
            for (v, mu) in row.iter_mut().zip(&self.mean) {
                *v += mu;
            }
        }
        Ok(out)
    }

    /// The same fit restricted to its leading `k` components.
    pub fn truncated(&self, k: usize) -> Result<PcaModel> {
        if k == 0 || k > self.k {
            return Err(Error::invalid(format!("k = {k} outside 1..={}", self.k)));
        }
        let m = self.dim();
        let src = self.components.data();
        let mut comps = Vec::with_capacity(m * k);
        for r in 0..m {
            comps.extend_from_slice(&src[r * self.k..r * self.k + k]);
        }
        Ok(PcaModel {
            mean: self.mean.clone(),
            components: Tensor::new(vec![m, k], comps)?,
            eigenvalues: self.eigenvalues.clone(),
            k,
        })
    }

    pub fn discarded_eigen_sum(&self) -> f64 {
        self.eigenvalues[self.k..].iter().sum()
    }
}

pub fn pca_reconstruct(model: &PcaModel, x: &Tensor) -> Result<Tensor> {
    model.reconstruct(x)
}

/// The three quantities that coincide for a PCA reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaTheorem {
    /// Mean over samples and features of the squared reconstruction error.
    pub mse: f64,
    /// Sum of the eigenvalues of the dropped components. This is the
    /// per-sample squared error summed over features, i.e. `m · mse`.
    pub discarded_eigen_sum: f64,
    /// `discarded_eigen_sum / m`, on the same per-element scale as `mse`.
    pub discarded_eigen_mean: f64,
    pub loss_per_feature: f64,
}

impl PcaTheorem {
    pub fn max_discrepancy(&self) -> f64 {
        let v = [self.mse, self.discarded_eigen_mean, self.loss_per_feature];
        let hi = v.iter().copied().fold(f64::MIN, f64::max);
        let lo = v.iter().copied().fold(f64::MAX, f64::min);
        hi - lo
    }
}

pub fn pca_theorem_check(x: &Tensor, k: usize) -> Result<PcaTheorem> {
    let model = pca_fit(x, k)?;
    let x_hat = model.reconstruct(x)?;
    let report = variance_loss(x, &x_hat)?;
    let discarded = model.discarded_eigen_sum();
    Ok(PcaTheorem {
        mse: report.mse,
        discarded_eigen_sum: discarded,
        discarded_eigen_mean: discarded / model.dim() as f64,
        loss_per_feature: report.loss_per_feature,
    })
}

/// Circular moving average with an odd, centered window.
pub fn smooth_signal(y: &[f64], window: usize) -> Result<Vec<f64>> {
    let n = y.len();
    if window.is_multiple_of(2) || window == 0 || window > n {
        return Err(Error::invalid(format!(
            "window must be odd and within 1..={n}, got {window}"
        )));
    }
    let half = window / 2;
    let out = (0..n)
        .map(|t| {
            (0..window)
                .map(|s| y[(t + n + s - half) % n])
                .sum::<f64>()
                / window as f64
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorVsLoss {
    pub mse: f64,
    pub variance_loss: f64,
}

/// Compares `x` with `(x + x[perm])/2`, permuting rows (every column with the
/// same permutation). For a flat vector pass an `n×1` matrix.
pub fn permutation_average_check(x: &Tensor, perm: &[usize]) -> Result<ErrorVsLoss> {
    let (n, _) = x.dims2()?;
    if perm.len() != n {
        return Err(Error::invalid(format!(
            "permutation has {} entries for {n} rows",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("not a permutation"));
        }
    }
    let permuted = x.select_rows(perm);
    let x_hat = x.zip_map(&permuted, |a, b| 0.5 * (a + b))?;
    let report = variance_loss(x, &x_hat)?;
    Ok(ErrorVsLoss {
        mse: report.mse,
        variance_loss: report.loss_per_feature,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageCheck {
    pub mse: f64,
    pub variance_loss: f64,
    /// `mse ≤ variance_loss + 1e-12`.
    pub holds: bool,
}

/// Shrinks every element toward its feature mean, `μ + t ⊙ (x − μ)`, and
/// checks that the mse stays below the per-feature variance loss.
pub fn shrinkage_bound_check(x: &Tensor, t: &Tensor) -> Result<ShrinkageCheck> {
    x.expect_same_shape(t, "shrinkage_bound_check")?;
    if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("shrinkage factor {bad} outside [0, 1]")));
    }
    let (_, m) = x.dims2()?;
    let means = x.column_means();
    let mut x_hat = x.clone();
    for (i, v) in x_hat.data_mut().iter_mut().enumerate() {
        let mu = means[i % m];
        *v = mu + t.data()[i] * (*v - mu);
    }
    let report = variance_loss(x, &x_hat)?;
    Ok(ShrinkageCheck {
        mse: report.mse,
        variance_loss: report.loss_per_feature,
        holds: report.mse <= report.loss_per_feature + 1e-12,
    })
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("pearson needs two equally long series of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    Ok(cov / (va * vb).sqrt())
}
