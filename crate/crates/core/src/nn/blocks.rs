//! Residual block, upsampling block and the SAGAN-style self-attention
//! baseline.

use super::layers::{glu, upsample_nearest, Conv2d, InstanceNorm};
use super::params::{Bound, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// `x + IN(conv(GLU(IN(conv(x)))))`. The first conv emits `2C` channels so
/// the GLU brings the branch back to `C`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub norm1: InstanceNorm,
    pub conv2: Conv2d,
    pub norm2: InstanceNorm,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        channels: usize,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            init,
            &format!("{name}.conv1"),
            channels,
            2 * channels,
            3,
            1,
            1,
            false,
        );
        let norm1 = InstanceNorm::new(store, &format!("{name}.norm1"), 2 * channels);
        let conv2 = Conv2d::new(
            store,
            init,
            &format!("{name}.conv2"),
            channels,
            channels,
            3,
            1,
            1,
            false,
        );
        let norm2 = InstanceNorm::new(store, &format!("{name}.norm2"), channels);
        ResidualBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            channels,
        }
    }

    /// The residual branch alone.
    pub fn branch<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 4 || c != self.channels {
            return Err(Error::shape(format!(
                "residual block for {} channels got input {:?}",
                self.channels,
                g.shape(x)
            )));
        }
        let y = self.conv1.forward(g, p, x)?;
        let y = self.norm1.forward(g, p, y)?;
        let y = glu(g, y)?;
        let y = self.conv2.forward(g, p, y)?;
        self.norm2.forward(g, p, y)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.branch(g, p, x)?;
        g.add(x, y)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.norm1.param_count()
            + self.conv2.param_count()
            + self.norm2.param_count()
    }
}

/// `GLU(conv(IN(upsample(x))))`: doubles the spatial side and maps
/// `C_in → C_out` channels.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub norm: InstanceNorm,
    pub conv: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UpsampleBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let norm = InstanceNorm::new(store, &format!("{name}.norm"), in_channels);
        let conv = Conv2d::new(
            store,
            init,
            &format!("{name}.conv"),
            in_channels,
            2 * out_channels,
            3,
            1,
            1,
            false,
        );
        UpsampleBlock {
            norm,
            conv,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        if g.shape(x).len() != 4 || g.shape(x)[1] != self.in_channels {
            return Err(Error::shape(format!(
                "upsample block for {} channels got input {:?}",
                self.in_channels,
                g.shape(x)
            )));
        }
        let y = upsample_nearest(g, x)?;
        let y = self.norm.forward(g, p, y)?;
        let y = self.conv.forward(g, p, y)?;
        glu(g, y)
    }

    pub fn param_count(&self) -> usize {
        self.norm.param_count() + self.conv.param_count()
    }
}

/// Self-attention over all spatial positions, mixed in through a learned
/// scalar `gamma` that starts at zero.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub out: Conv2d,
    pub gamma: ParamId,
    pub channels: usize,
    pub inner: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        channels: usize,
    ) -> Self {
        let inner = (channels / 8).max(1);
        let query = Conv2d::new(
            store,
            init,
            &format!("{name}.query"),
            channels,
            inner,
            1,
            1,
            0,
            true,
        );
        let key = Conv2d::new(
            store,
            init,
            &format!("{name}.key"),
            channels,
            inner,
            1,
            1,
            0,
            true,
        );
        let value = Conv2d::new(
            store,
            init,
            &format!("{name}.value"),
            channels,
            channels,
            1,
            1,
            0,
            true,
        );
        let out = Conv2d::new(
            store,
            init,
            &format!("{name}.out"),
            channels,
            channels,
            1,
            1,
            0,
            true,
        );
        let gamma = store.push(format!("{name}.gamma"), Tensor::zeros(vec![1]));
        SelfAttention {
            query,
            key,
            value,
            out,
            gamma,
            channels,
            inner,
        }
    }

    fn check(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "self-attention for {} channels got input {shape:?}",
                self.channels
            )));
        }
        Ok((shape[0], shape[2] * shape[3]))
    }

    /// Row-stochastic `[N, HW, HW]` map; row `i` weights every position `j`.
    pub fn attention_map<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (n, hw) = self.check(g.shape(x))?;
        let q = self.query.forward(g, p, x)?;
        let q = g.reshape(q, vec![n, self.inner, hw])?;
        let k = self.key.forward(g, p, x)?;
        let k = g.reshape(k, vec![n, self.inner, hw])?;
        let qt = g.transpose(q)?;
        let energy = g.bmm(qt, k)?;
        g.softmax_lastdim(energy)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (n, hw) = self.check(&shape)?;
        let attn = self.attention_map(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let v = g.reshape(v, vec![n, self.channels, hw])?;
        let at = g.transpose(attn)?;
        let mixed = g.bmm(v, at)?;
        let mixed = g.reshape(mixed, shape)?;
        let o = self.out.forward(g, p, mixed)?;
        let scaled = g.mul(o, p[self.gamma])?;
        g.add(x, scaled)
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count()
            + self.key.param_count()
            + self.value.param_count()
            + self.out.param_count()
            + 1
    }
}
