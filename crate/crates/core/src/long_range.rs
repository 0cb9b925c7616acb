//! Spatial and channel long-range modules.
//!
//! Both modules follow the same recipe. Two 1×1 projections of the hidden
//! feature are multiplied into a pre-softmax score matrix, a softmax over the
//! last axis turns it into a row-stochastic correlation matrix, and a
//! learnable Gaussian-initialized vector is redistributed through the
//! transposed correlation: `v = corrᵀ · weight`. The relation vector then
//! gates the feature per location (spatial) or per channel (channel).
//!
//! Because the correlation entries are positive and sum to one, every `v[i]`
//! is a convex combination of the weight entries. The sign of the weight
//! vector therefore survives into the gate, and mixed-sign weights can give
//! negative gates, which a softmax attention map alone cannot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamId, ParamStore, WEIGHT_STD};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Spatial,
    Channel,
}

/// How the relation vector is applied to the feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    /// `h[c, i]·v[i]` (spatial) or `h[c, :]·v[c]` (channel).
    #[default]
    Gating,
    /// The feature reshaped and multiplied by the full relation matrix
    /// `corrᵀ × w′`. Since every column of that matrix is `v`, the result is
    /// constant along the gated axis.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrmOptions {
    pub mode: ApplyMode,
    /// Adds the input back onto the gated feature.
    pub residual: bool,
}

impl Default for LrmOptions {
    fn default() -> Self {
        LrmOptions {
            mode: ApplyMode::Gating,
            residual: true,
        }
    }
}

/// Width of the projected feature space, `max(C/8, 1)`.
pub fn reduced_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

/// A row-stochastic correlation matrix for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix<T> {
    /// `[L, L]` with `L = H·W` (spatial) or `C` (channel).
    pub values: Tensor<T>,
    pub axis: Axis,
}

impl<T: Real> CorrelationMatrix<T> {
    pub fn side(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let l = self.side();
        self.values
            .data()
            .chunks_exact(l)
            .map(|r| r.iter().map(|v| v.to_f64_lossy()).sum())
            .collect()
    }

    pub fn min_entry(&self) -> f64 {
        self.values
            .data()
            .iter()
            .map(|v| v.to_f64_lossy())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.min_entry() > 0.0 && self.row_sums().iter().all(|s| (s - 1.0).abs() <= tol)
    }
}

/// The relation-aware weight in matrix and vector form.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationWeight<T> {
    /// `corrᵀ × w′` where every column of `w′` is the weight vector.
    pub matrix: Tensor<T>,
    /// `v[i] = Σ_k corr[k][i]·weight[k]`; equals every column of `matrix`.
    pub vector: Vec<T>,
}

/// Builds the relation-aware weight from a correlation matrix and a weight
/// vector. Matrix entries and the vector use the same summation order, so
/// each column of the matrix is bit-identical to the vector.
pub fn relation_weight<T: Real>(
    corr: &CorrelationMatrix<T>,
    weightvec: &[T],
) -> Result<RelationWeight<T>> {
    let l = corr.side();
    if weightvec.len() != l {
        return Err(Error::shape(format!(
            "relation weight: vector of length {} for a {l}x{l} correlation",
            weightvec.len()
        )));
    }
    let a = corr.values.data();
    // w′[k][j] = weightvec[k] for every column j.
    let repeated: Vec<T> = (0..l * l).map(|idx| weightvec[idx / l]).collect();
    let mut matrix = vec![T::zero(); l * l];
    for i in 0..l {
        for j in 0..l {
            let mut acc = T::zero();
            for k in 0..l {
                acc += a[k * l + i] * repeated[k * l + j];
            }
            matrix[i * l + j] = acc;
        }
    }
    let vector = (0..l)
        .map(|i| {
            let mut acc = T::zero();
            for k in 0..l {
                acc += a[k * l + i] * weightvec[k];
            }
            acc
        })
        .collect();
    Ok(RelationWeight {
        matrix: Tensor::new(vec![l, l], matrix)?,
        vector,
    })
}

/// Graph form of the relation vector: `[N, L, L]` correlation and `[L]`
/// weight give `[N, L]`.
pub fn relation_vector<T: Real>(g: &mut Graph<T>, corr: Var, weight: Var) -> Result<Var> {
    let s = g.shape(corr).to_vec();
    let l = s.get(2).copied().unwrap_or(0);
    if s.len() != 3 || s[1] != l || g.shape(weight) != [l] {
        return Err(Error::shape(format!(
            "relation vector: correlation {s:?} with weight {:?}",
            g.shape(weight)
        )));
    }
    let ct = g.transpose(corr)?;
    let w = g.reshape(weight, vec![1, l, 1])?;
    let v = g.bmm(ct, w)?;
    g.reshape(v, vec![s[0], l])
}

/// Graph form of the full relation matrix `corrᵀ × w′`, `[N, L, L]`.
pub fn relation_matrix<T: Real>(g: &mut Graph<T>, corr: Var, weight: Var) -> Result<Var> {
    let l = g.shape(weight)[0];
    let w = g.reshape(weight, vec![l, 1])?;
    let ones = g.constant(Tensor::ones(vec![1, l]))?;
    let repeated = g.mul(w, ones)?;
    let repeated = g.reshape(repeated, vec![1, l, l])?;
    let ct = g.transpose(corr)?;
    g.bmm(ct, repeated)
}

/// Applies a relation vector `v` (`[N, H·W]` or `[N, C]`) to `h` `[N, C, H, W]`.
pub fn apply_gate<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    v: Var,
    axis: Axis,
    options: LrmOptions,
) -> Result<Var> {
    let s = g.shape(h).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "long-range gate expects [N, C, H, W], got {s:?}"
        )));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let want = match axis {
        Axis::Spatial => hw,
        Axis::Channel => c,
    };
    if g.shape(v) != [n, want] {
        return Err(Error::shape(format!(
            "{axis:?} gate for feature {s:?} needs a [{n}, {want}] vector, got {:?}",
            g.shape(v)
        )));
    }
    let gated = match (options.mode, axis) {
        (ApplyMode::Gating, Axis::Spatial) => {
            let v = g.reshape(v, vec![n, 1, s[2], s[3]])?;
            g.mul(h, v)?
        }
        (ApplyMode::Gating, Axis::Channel) => {
            let v = g.reshape(v, vec![n, c, 1, 1])?;
            g.mul(h, v)?
        }
        (ApplyMode::Literal, Axis::Spatial) => {
            // [C, HW] × W_n: out[c][j] = Σ_i h[c][i]·v[i] for every j.
            let hr = g.reshape(h, vec![n, c, hw])?;
            let vc = g.reshape(v, vec![n, hw, 1])?;
            let col = g.bmm(hr, vc)?;
            let ones = g.constant(Tensor::ones(vec![1, 1, hw]))?;
            let out = g.mul(col, ones)?;
            g.reshape(out, s.clone())?
        }
        (ApplyMode::Literal, Axis::Channel) => {
            // ([HW, C] × c_n)ᵀ: out[j][p] = Σ_i v[i]·h[i][p] for every j.
            let hr = g.reshape(h, vec![n, c, hw])?;
            let vr = g.reshape(v, vec![n, 1, c])?;
            let row = g.bmm(vr, hr)?;
            let ones = g.constant(Tensor::ones(vec![1, c, 1]))?;
            let out = g.mul(row, ones)?;
            g.reshape(out, s.clone())?
        }
    };
    if options.residual {
        g.add(h, gated)
    } else {
        Ok(gated)
    }
}

/// Common surface of the two long-range modules.
pub trait LongRangeModule {
    fn axis(&self) -> Axis;
    fn weight(&self) -> ParamId;
    fn options(&self) -> LrmOptions;
    fn param_count(&self) -> usize;

    /// `[N, L, L]` correlation for a `[N, C, H, W]` feature.
    fn correlation<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var>;

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        let corr = self.correlation(g, p, h)?;
        let v = relation_vector(g, corr, p[self.weight()])?;
        apply_gate(g, h, v, self.axis(), self.options())
    }
}

fn projection<T: Real>(
    store: &mut ParamStore<T>,
    init: &Init,
    name: &str,
    c: usize,
    r: usize,
) -> ParamId {
    store.push(name, init.normal(name, &[r, c, 1, 1], WEIGHT_STD))
}

fn project<T: Real>(g: &mut Graph<T>, h: Var, kernel: Var, r: usize) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let y = g.conv2d(h, kernel, None, 1, 0)?;
    g.reshape(y, vec![s[0], r, s[2] * s[3]])
}

/// Long-range module along spatial positions.
#[derive(Clone, Debug)]
pub struct SpatialLrm {
    /// Learnable `w`, length `H·W`, drawn from N(0, 1).
    pub w: ParamId,
    pub proj1: ParamId,
    pub proj2: ParamId,
    pub channels: usize,
    pub reduced: usize,
    pub height: usize,
    pub width: usize,
    pub options: LrmOptions,
}

impl SpatialLrm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        options: LrmOptions,
    ) -> Self {
        let reduced = reduced_channels(channels);
        let wname = format!("{name}.w");
        let w = store.push(&wname, init.normal(&wname, &[height * width], 1.0));
        let proj1 = projection(store, init, &format!("{name}.proj1"), channels, reduced);
        let proj2 = projection(store, init, &format!("{name}.proj2"), channels, reduced);
        SpatialLrm {
            w,
            proj1,
            proj2,
            channels,
            reduced,
            height,
            width,
            options,
        }
    }

    fn check(&self, s: &[usize]) -> Result<()> {
        if s.len() != 4 || s[1] != self.channels || s[2] != self.height || s[3] != self.width {
            return Err(Error::shape(format!(
                "spatial long-range module for [*, {}, {}, {}] got {s:?}",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

impl LongRangeModule for SpatialLrm {
    fn axis(&self) -> Axis {
        Axis::Spatial
    }

    fn weight(&self) -> ParamId {
        self.w
    }

    fn options(&self) -> LrmOptions {
        self.options
    }

    fn param_count(&self) -> usize {
        self.height * self.width + 2 * self.channels * self.reduced
    }

    fn correlation<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        self.check(g.shape(h))?;
        let h1 = project(g, h, p[self.proj1], self.reduced)?;
        let h2 = project(g, h, p[self.proj2], self.reduced)?;
        let h1t = g.transpose(h1)?;
        let scores = g.bmm(h1t, h2)?;
        g.softmax_lastdim(scores)
    }
}

/// Long-range module along channels.
///
/// Each projection is a tied bottleneck `Pᵀ(P·h)` with `P` a `C′×C` 1×1
/// kernel, which keeps one row per channel so the score matrix is `C×C`
/// while costing `C·C′` parameters per projection.
#[derive(Clone, Debug)]
pub struct ChannelLrm {
    /// Learnable `c`, length `C`, drawn from N(0, 1).
    pub c: ParamId,
    pub proj1: ParamId,
    pub proj2: ParamId,
    pub channels: usize,
    pub reduced: usize,
    pub options: LrmOptions,
}

impl ChannelLrm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        channels: usize,
        options: LrmOptions,
    ) -> Self {
        let reduced = reduced_channels(channels);
        let cname = format!("{name}.c");
        let c = store.push(&cname, init.normal(&cname, &[channels], 1.0));
        let proj1 = projection(store, init, &format!("{name}.proj1"), channels, reduced);
        let proj2 = projection(store, init, &format!("{name}.proj2"), channels, reduced);
        ChannelLrm {
            c,
            proj1,
            proj2,
            channels,
            reduced,
            options,
        }
    }

    fn tied<T: Real>(&self, g: &mut Graph<T>, h: Var, kernel: Var) -> Result<Var> {
        let e = project(g, h, kernel, self.reduced)?;
        let k = g.reshape(kernel, vec![1, self.reduced, self.channels])?;
        let kt = g.transpose(k)?;
        g.bmm(kt, e)
    }
}

impl LongRangeModule for ChannelLrm {
    fn axis(&self) -> Axis {
        Axis::Channel
    }

    fn weight(&self) -> ParamId {
        self.c
    }

    fn options(&self) -> LrmOptions {
        self.options
    }

    fn param_count(&self) -> usize {
        self.channels + 2 * self.channels * self.reduced
    }

    fn correlation<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(format!(
                "channel long-range module for {} channels got {s:?}",
                self.channels
            )));
        }
        let hc1 = self.tied(g, h, p[self.proj1])?;
        let hc2 = self.tied(g, h, p[self.proj2])?;
        let hc2t = g.transpose(hc2)?;
        let scores = g.bmm(hc1, hc2t)?;
        g.softmax_lastdim(scores)
    }
}

/// Spatial then channel module at one feature resolution.
#[derive(Clone, Debug)]
pub struct LongRangePair {
    pub spatial: SpatialLrm,
    pub channel: ChannelLrm,
}

impl LongRangePair {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        channels: usize,
        side: usize,
        options: LrmOptions,
    ) -> Self {
        LongRangePair {
            spatial: SpatialLrm::new(
                store,
                init,
                &format!("{name}.spatial"),
                channels,
                side,
                side,
                options,
            ),
            channel: ChannelLrm::new(store, init, &format!("{name}.channel"), channels, options),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        let h = self.spatial.forward(g, p, h)?;
        self.channel.forward(g, p, h)
    }

    /// `H·W + C + 4·C·C′`.
    pub fn param_count(&self) -> usize {
        self.spatial.param_count() + self.channel.param_count()
    }
}

/// Evaluates one module's correlation on a single `[C, H, W]` feature.
pub fn compute_correlation<T: Real, M: LongRangeModule>(
    module: &M,
    store: &ParamStore<T>,
    h: &Tensor<T>,
) -> Result<CorrelationMatrix<T>> {
    if h.rank() != 3 {
        return Err(Error::shape(format!(
            "expected a [C, H, W] feature, got {:?}",
            h.shape()
        )));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false)?;
    let mut shape = vec![1];
    shape.extend_from_slice(h.shape());
    let x = g.constant(h.clone().reshape(shape)?)?;
    let corr = module.correlation(&mut g, &p, x)?;
    let l = g.shape(corr)[1];
    Ok(CorrelationMatrix {
        values: g.value(corr).clone().reshape(vec![l, l])?,
        axis: module.axis(),
    })
}

/// Spatial module forward on a graph.
pub fn spatial_lrm_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    h: Var,
    m: &SpatialLrm,
) -> Result<Var> {
    m.forward(g, p, h)
}

/// Channel module forward on a graph.
pub fn channel_lrm_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    h: Var,
    m: &ChannelLrm,
) -> Result<Var> {
    m.forward(g, p, h)
}
