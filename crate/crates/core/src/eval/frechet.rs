//! Gaussian feature statistics and the Fréchet distance between them.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::FrozenEmbedder;
use crate::tensor::{Real, Tensor};

const STAT_MAGIC: &[u8; 8] = b"LRSTAT01";

/// Seed of the evaluation embedder, kept apart from any metadata seed.
pub const FRECHET_SEED: u64 = 0x5eed_f1d0;
pub const FRECHET_DIM: usize = 32;

/// The frozen embedder behind Fréchet-lite for a given image side.
pub fn frechet_embedder(resolution: usize) -> Result<FrozenEmbedder> {
    FrozenEmbedder::new(FRECHET_SEED, resolution, FRECHET_DIM)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl DistributionStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance of at least two feature rows.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::Usage(format!(
                "statistics need at least 2 samples, got {}",
                features.len()
            )));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::shape("feature rows must share one positive length"));
        }
        let n = features.len() as f64;
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let x = DVector::from_column_slice(f) - &mean;
            cov.ger(1.0, &x, &x, 1.0);
        }
        cov /= n - 1.0;
        Ok(DistributionStats { mean, cov })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut buf = Vec::with_capacity(12 + 8 * d * (d + 1));
        buf.extend_from_slice(STAT_MAGIC);
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.mean.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..d {
            for j in 0..d {
                buf.extend_from_slice(&self.cov[(i, j)].to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.get(..8) != Some(STAT_MAGIC) {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected LRSTAT01".into(),
            });
        }
        let d = bytes
            .get(8..12)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or(Error::Format {
                offset: 8,
                reason: "truncated dim".into(),
            })?;
        let need = 12 + 8 * d * (d + 1);
        if bytes.len() != need {
            return Err(Error::Format {
                offset: bytes.len().min(need),
                reason: format!("expected {need} bytes for dim {d}, found {}", bytes.len()),
            });
        }
        let vals: Vec<f64> = bytes[12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DistributionStats {
            mean: DVector::from_column_slice(&vals[..d]),
            cov: DMatrix::from_row_slice(d, d, &vals[d..]),
        })
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Relative tolerance used for symmetry and positive-semidefiniteness.
const PSD_TOL: f64 = 1e-8;

fn check_psd(m: &DMatrix<f64>, which: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let scale = m.abs().max().max(1.0);
    let asym = (m - m.transpose()).abs().max();
    if asym > PSD_TOL * scale {
        return Err(Error::Usage(format!(
            "{which} covariance is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL * scale {
        return Err(Error::Usage(format!(
            "{which} covariance is not positive semidefinite (eigenvalue {min:e})"
        )));
    }
    Ok(eig)
}

/// Square root of a symmetric positive semidefinite matrix from its
/// eigendecomposition, with negative eigenvalues clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    from_eigen(&eig, f64::sqrt)
}

/// Eigenvalues at round-off level relative to the largest are zeroed: their
/// square roots (about 1e-8 for an exact zero) would otherwise make the
/// distance depend on argument order for rank-deficient covariances.
const EIG_FLOOR: f64 = 1e-12;

fn floored(values: &DVector<f64>) -> DVector<f64> {
    let cut = EIG_FLOOR * values.iter().fold(0.0f64, |m, &l| m.max(l));
    values.map(|l| if l > cut { l } else { 0.0 })
}

fn from_eigen(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&floored(&eig.eigenvalues).map(f));
    q * d * q.transpose()
}

/// The symmetric matrix `√Σ_a · Σ_b · √Σ_a`. It is similar to `Σ_a Σ_b`, so
/// the trace of its square root equals `Tr (Σ_a Σ_b)^{1/2}`.
pub fn cross_term(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ra = sqrt_psd(a);
    symmetrize(&(&ra * b * &ra))
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, clamped at zero.
pub fn frechet_distance(a: &DistributionStats, b: &DistributionStats) -> Result<f64> {
    if a.dim() != b.dim()
        || a.cov.shape() != (a.dim(), a.dim())
        || b.cov.shape() != (b.dim(), b.dim())
    {
        return Err(Error::shape(format!(
            "statistics dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let ea = check_psd(&a.cov, "first")?;
    check_psd(&b.cov, "second")?;
    let ra = from_eigen(&ea, f64::sqrt);
    let m = symmetrize(&(&ra * &b.cov * &ra));
    let tr_sqrt: f64 = floored(&SymmetricEigen::new(m).eigenvalues)
        .iter()
        .map(|l| l.sqrt())
        .sum();
    let dmu = (&a.mean - &b.mean).norm_squared();
    Ok((dmu + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Embeds every image with the frozen embedder and summarises the features.
pub fn embed_and_stats<T: Real>(
    images: &[Tensor<T>],
    embedder: &FrozenEmbedder,
) -> Result<DistributionStats> {
    if images.len() < 2 {
        return Err(Error::Usage(format!(
            "statistics need at least 2 images, got {}",
            images.len()
        )));
    }
    let feats = embedder.embed_all(images)?;
    let feats: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| f.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    DistributionStats::from_features(&feats)
}

/// Fréchet-lite between two image sets with the evaluation embedder.
pub fn frechet_lite<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<f64> {
    let r = a
        .first()
        .map_or(0, |t| t.shape().last().copied().unwrap_or(0));
    let e = frechet_embedder(r)?;
    frechet_distance(&embed_and_stats(a, &e)?, &embed_and_stats(b, &e)?)
}
