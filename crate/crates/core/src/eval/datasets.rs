//! Synthetic datasets with controllable long-range structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// The right half mirrors a random smooth left half.
    Mirror,
    /// Two white pixels on black at a dataset-wide offset.
    PairedDots,
    /// Smooth random color fields without symmetry.
    GradientBlobs,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mirror" => Ok(DatasetKind::Mirror),
            "paired-dots" => Ok(DatasetKind::PairedDots),
            "gradient-blobs" => Ok(DatasetKind::GradientBlobs),
            _ => Err(Error::Config(format!(
                "unknown dataset kind `{s}` (expected mirror, paired-dots or gradient-blobs)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_count() -> usize {
    500
}

fn default_resolution() -> usize {
    32
}

impl SyntheticDatasetSpec {
    pub fn new(kind: DatasetKind, count: usize, resolution: usize, seed: u64) -> Self {
        SyntheticDatasetSpec {
            kind,
            count,
            resolution,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("data.spec.count must be at least 1".into()));
        }
        if self.resolution < 8 || self.resolution % 2 != 0 {
            return Err(Error::Config(format!(
                "data.spec.resolution must be even and at least 8, got {}",
                self.resolution
            )));
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    inv2s2: f64,
    color: [f64; 3],
}

fn random_color(rng: &mut ChaCha8Rng, scale: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(-scale..scale))
}

fn blobs(rng: &mut ChaCha8Rng, n: usize, xmax: f64, ymax: f64, r: f64) -> Vec<Blob> {
    (0..n)
        .map(|_| {
            let s = rng.random_range(r / 10.0..r / 4.0);
            Blob {
                cx: rng.random_range(0.0..xmax),
                cy: rng.random_range(0.0..ymax),
                inv2s2: 1.0 / (2.0 * s * s),
                color: random_color(rng, 1.5),
            }
        })
        .collect()
}

fn shade(base: [f64; 3], blobs: &[Blob], x: f64, y: f64, c: usize) -> f64 {
    let mut v = base[c];
    for b in blobs {
        let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
        v += b.color[c] * (-d2 * b.inv2s2).exp();
    }
    v.tanh()
}

// Layout varies per image, colours do not: a generator whose normalization
// layers wipe per-sample channel means can still cover the distribution.
const MIRROR_BACKGROUND: [f64; 3] = [-0.5, -0.25, 0.35];
const MIRROR_PALETTE: [[f64; 3]; 3] = [[1.5, -0.8, -0.8], [-0.8, 1.5, -0.8], [-0.8, -0.8, 1.5]];

fn mirror_image(rng: &mut ChaCha8Rng, r: usize) -> Tensor<f64> {
    let half = r / 2;
    let mut bl = blobs(rng, MIRROR_PALETTE.len(), half as f64, r as f64, r as f64);
    for (b, &color) in bl.iter_mut().zip(&MIRROR_PALETTE) {
        b.color = color;
    }
    let mut img = Tensor::zeros(vec![3, r, r]);
    let d = img.data_mut();
    for c in 0..3 {
        for y in 0..r {
            for x in 0..half {
                let v = shade(MIRROR_BACKGROUND, &bl, x as f64 + 0.5, y as f64 + 0.5, c);
                d[(c * r + y) * r + x] = v;
                d[(c * r + y) * r + (r - 1 - x)] = v;
            }
        }
    }
    img
}

fn blob_image(rng: &mut ChaCha8Rng, r: usize) -> Tensor<f64> {
    let (c0, c1) = (random_color(rng, 0.8), random_color(rng, 0.8));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let bl = blobs(rng, 2, r as f64, r as f64, r as f64);
    let mut img = Tensor::zeros(vec![3, r, r]);
    let d = img.data_mut();
    let rf = r as f64;
    for c in 0..3 {
        for y in 0..r {
            for x in 0..r {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = ((fx - rf / 2.0) * dx + (fy - rf / 2.0) * dy) / rf + 0.5;
                let base = [0, 1, 2].map(|k| c0[k] * (1.0 - t) + c1[k] * t);
                d[(c * r + y) * r + x] = shade(base, &bl, fx, fy, c);
            }
        }
    }
    img
}

/// Dataset-wide dot offset `(Δx, Δy)`.
pub fn paired_dots_offset(spec: &SyntheticDatasetSpec) -> (usize, isize) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    offset_from(&mut rng, spec.resolution)
}

fn offset_from(rng: &mut ChaCha8Rng, r: usize) -> (usize, isize) {
    let q = (r / 4) as isize;
    (
        rng.random_range(r / 4..=r / 2),
        rng.random_range(-(q as i64)..=q as i64) as isize,
    )
}

fn dots_image(rng: &mut ChaCha8Rng, r: usize, (dx, dy): (usize, isize)) -> Tensor<f64> {
    let x = rng.random_range(0..r - dx);
    let (ylo, yhi) = ((-dy).max(0) as usize, (r as isize - dy.max(0)) as usize);
    let y = rng.random_range(ylo..yhi);
    let y2 = (y as isize + dy) as usize;
    let mut img = Tensor::full(vec![3, r, r], -1.0);
    let d = img.data_mut();
    for c in 0..3 {
        d[(c * r + y) * r + x] = 1.0;
        d[(c * r + y2) * r + x + dx] = 1.0;
    }
    img
}

/// Images `[3, R, R]` with values in `[−1, 1]`; identical for identical specs.
pub fn make_synthetic_dataset<T: Real>(spec: &SyntheticDatasetSpec) -> Result<Vec<Tensor<T>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = spec.resolution;
    let offset = offset_from(&mut rng, r);
    Ok((0..spec.count)
        .map(|_| {
            let img = match spec.kind {
                DatasetKind::Mirror => mirror_image(&mut rng, r),
                DatasetKind::PairedDots => dots_image(&mut rng, r, offset),
                DatasetKind::GradientBlobs => blob_image(&mut rng, r),
            };
            img.cast()
        })
        .collect())
}

/// Mean of `|I(x, y, c) − I(W−1−x, y, c)|` over all pixels and channels.
pub fn symmetry_score<T: Real>(image: &Tensor<T>) -> Result<f64> {
    let s = image.shape();
    let w = match s {
        [_, _, w] => *w,
        _ => {
            return Err(Error::shape(format!(
                "symmetry score expects a [C, H, W] image, got {s:?}"
            )))
        }
    };
    if w % 2 != 0 || w == 0 {
        return Err(Error::shape(format!(
            "symmetry score needs an even width, got {w}"
        )));
    }
    let d = image.data();
    let mut acc = 0.0;
    for row in d.chunks(w) {
        for x in 0..w {
            acc += (row[x] - row[w - 1 - x]).to_f64_lossy().abs();
        }
    }
    Ok(acc / d.len().max(1) as f64)
}

/// Mean symmetry score over images.
pub fn mean_symmetry_score<T: Real>(images: &[Tensor<T>]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Usage("no images to score".into()));
    }
    let total = images.iter().map(symmetry_score).sum::<Result<f64>>()?;
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind, n: usize) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec::new(kind, n, 16, 3)
    }

    #[test]
    fn mirror_images_are_symmetric() {
        for img in make_synthetic_dataset::<f64>(&spec(DatasetKind::Mirror, 20)).unwrap() {
            assert_eq!(symmetry_score(&img).unwrap(), 0.0);
            assert!(img.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn blobs_are_not_symmetric() {
        let imgs = make_synthetic_dataset::<f64>(&spec(DatasetKind::GradientBlobs, 20)).unwrap();
        assert!(mean_symmetry_score(&imgs).unwrap() > 0.05);
    }

    #[test]
    fn paired_dots_have_two_maxima_at_fixed_offset() {
        let s = spec(DatasetKind::PairedDots, 50);
        let (dx, dy) = paired_dots_offset(&s);
        for img in make_synthetic_dataset::<f64>(&s).unwrap() {
            let r = 16;
            let lum: Vec<f64> = (0..r * r)
                .map(|i| (0..3).map(|c| img.data()[c * r * r + i]).sum())
                .collect();
            let peak = lum.iter().copied().fold(f64::MIN, f64::max);
            let at: Vec<usize> = (0..r * r).filter(|&i| lum[i] == peak).collect();
            assert_eq!(at.len(), 2);
            let (a, b) = ((at[0] % r, at[0] / r), (at[1] % r, at[1] / r));
            let (p, q) = if a.0 < b.0 { (a, b) } else { (b, a) };
            assert_eq!(q.0 - p.0, dx);
            assert_eq!(q.1 as isize - p.1 as isize, dy);
        }
    }

    #[test]
    fn datasets_are_deterministic() {
        for kind in [
            DatasetKind::Mirror,
            DatasetKind::PairedDots,
            DatasetKind::GradientBlobs,
        ] {
            let a = make_synthetic_dataset::<f64>(&spec(kind, 5)).unwrap();
            let b = make_synthetic_dataset::<f64>(&spec(kind, 5)).unwrap();
            assert_eq!(a, b);
            let c = make_synthetic_dataset::<f64>(&SyntheticDatasetSpec {
                seed: 4,
                ..spec(kind, 5)
            })
            .unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn spec_preconditions() {
        assert!(make_synthetic_dataset::<f64>(&spec(DatasetKind::Mirror, 0)).is_err());
        assert!(make_synthetic_dataset::<f64>(&SyntheticDatasetSpec::new(
            DatasetKind::Mirror,
            1,
            6,
            0
        ))
        .is_err());
        assert_eq!(
            "paired-dots".parse::<DatasetKind>().unwrap(),
            DatasetKind::PairedDots
        );
        assert!("faces".parse::<DatasetKind>().is_err());
    }

    #[test]
    fn antisymmetric_extremes_score_two() {
        let img = Tensor::from_fn(vec![3, 2, 4], |i| if i % 4 < 2 { 1.0 } else { -1.0 });
        assert_eq!(symmetry_score(&img).unwrap(), 2.0);
        assert!(symmetry_score(&Tensor::<f64>::zeros(vec![3, 2, 3])).is_err());
    }
}
