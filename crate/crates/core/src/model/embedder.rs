//! Metadata: a globally averaged deep feature of a real image.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{glu, Conv2d, Init, ParamStore};
use crate::tensor::{Graph, Real, Tensor};

const META_MAGIC: &[u8; 8] = b"LRMETA01";

/// Frozen, seeded stack of four `conv k4 s2 p1 + GLU` layers. It is never
/// trained and its weights are not part of any checkpoint; the seed and
/// width reproduce it.
#[derive(Clone, Debug)]
pub struct FrozenEmbedder {
    params: ParamStore<f64>,
    convs: Vec<Conv2d>,
    pub resolution: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Images embedded per graph; bounds peak memory.
const CHUNK: usize = 64;

impl FrozenEmbedder {
    pub const LAYERS: usize = 4;

    pub fn new(seed: u64, resolution: usize, dim: usize) -> Result<Self> {
        let div = 1 << Self::LAYERS;
        if resolution < div || resolution % div != 0 || dim == 0 {
            return Err(Error::Usage(format!(
                "embedder needs a side divisible by {div} and a positive width, got side {resolution}, width {dim}"
            )));
        }
        let init = Init::new(seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::with_capacity(Self::LAYERS);
        let mut cin = 3;
        for i in 0..Self::LAYERS {
            let name = format!("embed.conv{i}");
            // Unit-variance preserving scale so a random stack does not
            // collapse the signal to zero.
            let std = (2.0 / (cin * 16) as f64).sqrt();
            let conv = Conv2d::new(&mut params, &init, &name, cin, 2 * dim, 4, 2, 1, false);
            *params.get_mut(conv.weight) =
                init.normal(&format!("{name}.weight"), &[2 * dim, cin, 4, 4], std);
            convs.push(conv);
            cin = dim;
        }
        Ok(FrozenEmbedder {
            params,
            convs,
            resolution,
            dim,
            seed,
        })
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4
            || shape[1] != 3
            || shape[2] != self.resolution
            || shape[3] != self.resolution
        {
            return Err(Error::shape(format!(
                "embedder expects [N, 3, {r}, {r}] images, got {shape:?}",
                r = self.resolution
            )));
        }
        Ok(())
    }

    /// Final `[N, dim, R/16, R/16]` feature map.
    pub fn feature_map<T: Real>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(images.shape())?;
        let store: ParamStore<T> = self.params.cast();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false)?;
        let mut x = g.constant(images.clone())?;
        for conv in &self.convs {
            x = conv.forward(&mut g, &p, x)?;
            x = glu(&mut g, x)?;
        }
        Ok(g.value(x).clone())
    }

    /// `[N, dim]` vectors, one per image of a `[N, 3, R, R]` batch.
    pub fn embed_batch<T: Real>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let fm = self.feature_map(images)?;
        spatial_average(&fm)
    }

    /// Embeds any number of `[3, R, R]` images in fixed-size chunks.
    pub fn embed_all<T: Real>(&self, images: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let v = self.embed_batch(&Tensor::stack(chunk)?)?;
            out.extend(v.data().chunks(self.dim).map(<[T]>::to_vec));
        }
        Ok(out)
    }
}

/// Mean over the two trailing axes of `[N, C, H, W]`, giving `[N, C]`.
pub fn spatial_average<T: Real>(fm: &Tensor<T>) -> Result<Tensor<T>> {
    let s = fm.shape();
    if s.len() != 4 || s[2] * s[3] == 0 {
        return Err(Error::shape(format!(
            "spatial average needs [N, C, H, W], got {s:?}"
        )));
    }
    let hw = s[2] * s[3];
    let inv = T::lit(hw as f64);
    let data = fm
        .data()
        .chunks(hw)
        .map(|c| c.iter().copied().sum::<T>() / inv)
        .collect();
    Tensor::new(vec![s[0], s[1]], data)
}

/// Source of metadata vectors.
#[derive(Clone, Debug)]
pub enum MetadataEmbedder {
    Frozen(FrozenEmbedder),
    /// Vectors computed elsewhere, one per dataset image in order.
    Precomputed {
        vectors: Vec<Vec<f32>>,
        dim: usize,
    },
}

impl MetadataEmbedder {
    pub fn dim(&self) -> usize {
        match self {
            MetadataEmbedder::Frozen(e) => e.dim,
            MetadataEmbedder::Precomputed { dim, .. } => *dim,
        }
    }

    /// One vector per dataset image.
    pub fn table<T: Real>(&self, images: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        match self {
            MetadataEmbedder::Frozen(e) => e.embed_all(images),
            MetadataEmbedder::Precomputed { vectors, .. } => {
                if vectors.len() != images.len() {
                    return Err(Error::Usage(format!(
                        "{} precomputed metadata vectors for {} images",
                        vectors.len(),
                        images.len()
                    )));
                }
                Ok(vectors
                    .iter()
                    .map(|v| v.iter().map(|&x| T::lit(f64::from(x))).collect())
                    .collect())
            }
        }
    }
}

/// Metadata vector of a single `[3, H, W]` meta-image.
pub fn encode_metadata<T: Real>(image: &Tensor<T>, embedder: &MetadataEmbedder) -> Result<Vec<T>> {
    let MetadataEmbedder::Frozen(e) = embedder else {
        return Err(Error::Usage(
            "precomputed metadata is looked up by index, not computed from pixels".into(),
        ));
    };
    if image.rank() != 3 {
        return Err(Error::shape(format!(
            "meta-image must be [3, H, W], got {:?}",
            image.shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(e.embed_batch(&image.clone().reshape(shape)?)?.into_data())
}

pub fn write_metadata_file(path: &Path, vectors: &[Vec<f32>]) -> Result<()> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Usage(
            "metadata vectors must share one length".into(),
        ));
    }
    let mut buf = Vec::with_capacity(16 + 4 * dim * vectors.len());
    buf.extend_from_slice(META_MAGIC);
    buf.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for x in vectors.iter().flatten() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_metadata_file(path: &Path) -> Result<Vec<Vec<f32>>> {
    let bytes = std::fs::read(path)?;
    parse_metadata(&bytes)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let s = bytes.get(*at..*at + n).ok_or_else(|| Error::Format {
        offset: *at,
        reason: format!("truncated while reading {what}"),
    })?;
    *at += n;
    Ok(s)
}

fn parse_metadata(bytes: &[u8]) -> Result<Vec<Vec<f32>>> {
    let mut at = 0;
    if take(bytes, &mut at, 8, "magic")? != META_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected LRMETA01".into(),
        });
    }
    let count = u32::from_le_bytes(take(bytes, &mut at, 4, "count")?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(bytes, &mut at, 4, "dim")?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let raw = take(bytes, &mut at, 4 * dim, "vector")?;
        out.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if at != bytes.len() {
        return Err(Error::Format {
            offset: at,
            reason: "trailing bytes".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, r: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, 3, r, r], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn average_of_constant_map() {
        let fm = Tensor::from_fn(vec![1, 3, 2, 2], |i| (i / 4) as f64 * 0.5);
        assert_eq!(spatial_average(&fm).unwrap().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn average_ignores_spatial_permutation() {
        let fm = Tensor::from_fn(vec![1, 2, 2, 2], |i| {
            [0.3, -1.2, 4.0, 0.7, 2.0, 0.1, -0.4, 9.0][i]
        });
        let perm = Tensor::from_fn(vec![1, 2, 2, 2], |i| {
            [4.0, 0.7, -1.2, 0.3, 9.0, -0.4, 2.0, 0.1][i]
        });
        let a = spatial_average(&fm).unwrap();
        let b = spatial_average(&perm).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn embedding_is_deterministic() {
        let x = images(2, 32, 3);
        let a = FrozenEmbedder::new(9, 32, 8)
            .unwrap()
            .embed_batch(&x)
            .unwrap();
        let b = FrozenEmbedder::new(9, 32, 8)
            .unwrap()
            .embed_batch(&x)
            .unwrap();
        assert_eq!(a.shape(), &[2, 8]);
        assert_eq!(a, b);
        let c = FrozenEmbedder::new(10, 32, 8)
            .unwrap()
            .embed_batch(&x)
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn chunked_equals_batched() {
        let e = FrozenEmbedder::new(1, 16, 4).unwrap();
        let x = images(3, 16, 5);
        let whole = e.embed_batch(&x).unwrap();
        let parts: Vec<_> = (0..3).map(|i| x.select(i)).collect();
        let each = e.embed_all(&parts).unwrap();
        for (i, v) in each.iter().enumerate() {
            assert_eq!(v.as_slice(), &whole.data()[i * 4..(i + 1) * 4]);
        }
        let one = encode_metadata(&parts[1], &MetadataEmbedder::Frozen(e)).unwrap();
        assert_eq!(one, each[1]);
    }

    #[test]
    fn wrong_resolution_is_an_error() {
        let e = FrozenEmbedder::new(1, 32, 4).unwrap();
        assert!(e.embed_batch(&images(1, 16, 0)).is_err());
        assert!(FrozenEmbedder::new(1, 24, 4).is_err());
    }

    #[test]
    fn features_are_not_vanishing() {
        let e = FrozenEmbedder::new(4, 32, 16).unwrap();
        let v = e.embed_batch(&images(8, 32, 2)).unwrap();
        let spread = v.data().iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(spread > 1e-3, "max |feature| {spread}");
    }

    #[test]
    fn metadata_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let vecs = vec![vec![1.0f32, -2.5, 3.25], vec![0.0, 1e-7, f32::MAX]];
        write_metadata_file(&path, &vecs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"LRMETA01");
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(read_metadata_file(&path).unwrap(), vecs);
        match parse_metadata(&bytes[..30]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 28),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            parse_metadata(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
