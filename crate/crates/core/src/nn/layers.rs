use super::params::{Bound, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Standard deviation for conv and dense weights.
pub const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let wname = format!("{name}.weight");
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.push(&wname, init.normal(&wname, &shape, WEIGHT_STD));
        let bias =
            bias.then(|| store.push(format!("{name}.bias"), Tensor::zeros(vec![out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p[self.weight],
            self.bias.map(|b| p[b]),
            self.stride,
            self.padding,
        )
    }

    pub fn param_count(&self) -> usize {
        let w = self.out_channels * self.in_channels * self.kernel * self.kernel;
        w + if self.bias.is_some() {
            self.out_channels
        } else {
            0
        }
    }
}

/// Fully connected layer `y = x·W + b` on `[N, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let wname = format!("{name}.weight");
        let weight = store.push(
            &wname,
            init.normal(&wname, &[in_features, out_features], WEIGHT_STD),
        );
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(vec![out_features]));
        Dense {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p[self.weight])?;
        g.add(xw, p[self.bias])
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}

/// Instance normalization with a learned per-channel affine map.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let scale = store.push(format!("{name}.scale"), Tensor::ones(vec![channels]));
        let shift = store.push(format!("{name}.shift"), Tensor::zeros(vec![channels]));
        InstanceNorm {
            scale,
            shift,
            channels,
            eps: Self::EPS,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        instance_norm(g, x, p[self.scale], p[self.shift], self.eps)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Per-sample, per-channel standardization over spatial positions followed
/// by `scale[c]·x̂ + shift[c]`.
pub fn instance_norm<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    scale: Var,
    shift: Var,
    eps: f64,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 3 {
        return Err(Error::shape(format!(
            "instance_norm expects [N, C, ...], got {shape:?}"
        )));
    }
    let c = shape[1];
    if g.shape(scale) != [c] || g.shape(shift) != [c] {
        return Err(Error::shape(format!(
            "instance_norm affine parameters {:?}/{:?} do not match {c} channels",
            g.shape(scale),
            g.shape(shift)
        )));
    }
    let mut bshape = vec![1; shape.len()];
    bshape[1] = c;
    let xhat = g.instance_standardize(x, T::lit(eps))?;
    let s = g.reshape(scale, bshape.clone())?;
    let b = g.reshape(shift, bshape)?;
    let y = g.mul(xhat, s)?;
    g.add(y, b)
}

/// `a ⊙ σ(b)` where `a` and `b` are the first and second channel halves.
pub fn glu<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.glu(x)
}

/// Replicates each pixel into a 2×2 block.
pub fn upsample_nearest<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.upsample_nearest2(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_count_with_bias() {
        let mut s = ParamStore::<f32>::new();
        let c = Conv2d::new(&mut s, &Init::new(0), "c", 3, 8, 3, 1, 1, true);
        assert_eq!(c.param_count(), 224);
        assert_eq!(s.numel(), 224);
    }

    fn standardize(data: &[f64], shape: &[usize]) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let c = shape[1];
        let x = g
            .constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
            .unwrap();
        let s = g.constant(Tensor::ones(vec![c])).unwrap();
        let b = g.constant(Tensor::zeros(vec![c])).unwrap();
        let y = instance_norm(&mut g, x, s, b, InstanceNorm::EPS).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        assert!(standardize(&[3.0; 4], &[1, 1, 2, 2])
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn standardized_channel_is_kept() {
        let y = standardize(&[-1.0, 1.0], &[1, 1, 1, 2]);
        let k = 1.0 / (1.0 + InstanceNorm::EPS).sqrt();
        assert!((y[0] + k).abs() < 1e-12 && (y[1] - k).abs() < 1e-12);
    }

    #[test]
    fn glu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(Tensor::new(vec![1, 2, 1, 2], vec![2.0, -4.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let y = glu(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0]);
        let z = g
            .constant(Tensor::new(vec![1, 2, 1, 2], vec![0.0, 0.0, 3.0, -1.0]).unwrap())
            .unwrap();
        let y = glu(&mut g, z).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let odd = g.constant(Tensor::zeros(vec![1, 3, 1, 1])).unwrap();
        assert!(matches!(glu(&mut g, odd), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_counts() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(Tensor::from_fn(vec![2, 3, 3, 5], |i| (i as f64).sin()))
            .unwrap();
        let y = upsample_nearest(&mut g, x).unwrap();
        let s_in: f64 = g.value(x).data().iter().sum();
        let s_out: f64 = g.value(y).data().iter().sum();
        assert_eq!(g.shape(y), &[2, 3, 6, 10]);
        assert!((s_out - 4.0 * s_in).abs() < 1e-12);
        let c = g.constant(Tensor::full(vec![1, 1, 2, 2], 0.3)).unwrap();
        let y = upsample_nearest(&mut g, c).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.3));
    }
}
