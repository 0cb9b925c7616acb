//! The 64-bit finite-difference suite over every differentiable op, block
//! and loss. Each check runs on several random small shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::long_range::{
    ApplyMode, ChannelLrm, LongRangeModule, LongRangePair, LrmOptions, SpatialLrm,
};
use crate::model::{Discriminator, Generator, ModelConfig};
use crate::nn::{
    instance_norm, Bound, Init, ParamStore, ResidualBlock, SelfAttention, UpsampleBlock,
};
use crate::objectives::{color_consistency_loss, discriminator_loss, generator_loss, LossWeights};
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Random shapes per check.
pub const CASES: usize = 5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Fixed non-uniform projection to a scalar, so no output entry can hide
/// behind a symmetric reduction.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y).to_vec(), |i| {
        (0.7548 * i as f64 + 0.3).sin() + 0.25
    });
    let w = g.constant(w)?;
    let m = g.mul(y, w)?;
    g.sum(m)
}

fn check<F>(params: Vec<Tensor<f64>>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check(|g, v| f(g, v).and_then(|y| probe(g, y)), &params, STEP)
}

/// Checks a block built into a fresh store. The input is parameter 0 and
/// the block's own parameters follow, jittered away from their init.
fn block<B>(
    rng: &mut ChaCha8Rng,
    input: &[usize],
    build: impl FnOnce(&mut ParamStore<f64>, &Init) -> B,
    forward: impl Fn(&B, &mut Graph<f64>, &Bound, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let b = build(&mut store, &Init::new(rng.random()));
    let mut params = vec![uniform(rng, input, 1.0)];
    for t in store.tensors() {
        let jitter = uniform(rng, t.shape(), 0.3);
        let data = t
            .data()
            .iter()
            .zip(jitter.data())
            .map(|(a, j)| a + j)
            .collect();
        params.push(Tensor::new(t.shape().to_vec(), data)?);
    }
    check(params, |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        forward(&b, g, &p, v[0])
    })
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn nchw(rng: &mut ChaCha8Rng, cmax: usize) -> Vec<usize> {
    vec![
        dims(rng, 1, 2),
        dims(rng, 1, cmax),
        dims(rng, 2, 4),
        dims(rng, 2, 4),
    ]
}

fn broadcast_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let a = vec![dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
    let b = a
        .iter()
        .map(|&d| if rng.random_bool(0.5) { 1 } else { d })
        .collect();
    (a, b)
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (a, b) = broadcast_pair(rng);
    check(
        vec![uniform(rng, &a, 1.0), uniform(rng, &b, 1.0)],
        |g, v| g.add(v[0], v[1]),
    )
}

fn case_sub(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (a, b) = broadcast_pair(rng);
    check(
        vec![uniform(rng, &b, 1.0), uniform(rng, &a, 1.0)],
        |g, v| g.sub(v[0], v[1]),
    )
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (a, b) = broadcast_pair(rng);
    check(
        vec![uniform(rng, &a, 1.0), uniform(rng, &b, 1.0)],
        |g, v| g.mul(v[0], v[1]),
    )
}

fn case_scale_shift(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
    let (k, c) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
    check(vec![uniform(rng, &s, 1.0)], move |g, v| {
        let y = g.scale(v[0], k)?;
        g.add_scalar(y, c)
    })
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
    check(
        vec![uniform(rng, &[m, k], 1.0), uniform(rng, &[k, n], 1.0)],
        |g, v| g.matmul(v[0], v[1]),
    )
}

fn case_bmm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (b, m, k, n) = (
        dims(rng, 2, 3),
        dims(rng, 1, 3),
        dims(rng, 1, 3),
        dims(rng, 1, 3),
    );
    let bb = if rng.random_bool(0.5) { 1 } else { b };
    check(
        vec![
            uniform(rng, &[b, m, k], 1.0),
            uniform(rng, &[bb, k, n], 1.0),
        ],
        |g, v| g.bmm(v[0], v[1]),
    )
}

fn case_transpose_reshape(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = vec![dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
    let flat = s.iter().product::<usize>();
    check(vec![uniform(rng, &s, 1.0)], move |g, v| {
        let t = g.transpose(v[0])?;
        let y = g.reshape(t, vec![flat])?;
        g.mul(y, y)
    })
}

fn case_concat(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut a = vec![dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
    let axis = rng.random_range(0..3);
    let mut b = a.clone();
    b[axis] = dims(rng, 1, 3);
    a[axis] = a[axis].max(1);
    check(
        vec![uniform(rng, &a, 1.0), uniform(rng, &b, 1.0)],
        move |g, v| {
            let y = g.concat(v[0], v[1], axis)?;
            g.mul(y, y)
        },
    )
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (cin, cout) = (dims(rng, 1, 3), dims(rng, 1, 3));
    let (k, stride, pad) =
        [(1, 1, 0), (3, 1, 1), (3, 2, 1), (4, 2, 1), (2, 1, 0)][rng.random_range(0..5)];
    // Outputs must tile the padded input exactly.
    let side = 4 + 2 * rng.random_range(0..2usize) + usize::from(k == 3 && stride == 2);
    let bias = rng.random_bool(0.5);
    let n = dims(rng, 1, 2);
    let mut params = vec![
        uniform(rng, &[n, cin, side, side], 1.0),
        uniform(rng, &[cout, cin, k, k], 0.5),
    ];
    if bias {
        params.push(uniform(rng, &[cout], 0.5));
    }
    check(params, move |g, v| {
        g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)
    })
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = vec![dims(rng, 1, 3), dims(rng, 2, 5)];
    check(vec![uniform(rng, &s, 2.0)], |g, v| g.softmax_lastdim(v[0]))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
    check(vec![uniform(rng, &s, 3.0)], |g, v| g.sigmoid(v[0]))
}

fn case_tanh(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
    check(vec![uniform(rng, &s, 2.0)], |g, v| g.tanh(v[0]))
}

fn case_leaky_relu(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
    // Keep entries off the kink.
    let x = Tensor::from_fn(s, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    check(vec![x], |g, v| g.leaky_relu(v[0], 0.2))
}

fn case_log_sigmoid(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
    check(vec![uniform(rng, &s, 6.0)], |g, v| g.log_sigmoid(v[0]))
}

fn case_reductions(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = vec![dims(rng, 1, 3), dims(rng, 1, 4)];
    check(vec![uniform(rng, &s, 1.0)], |g, v| {
        let r = g.sum_lastdim(v[0])?;
        let r2 = g.mul(r, r)?;
        let a = g.sum(r2)?;
        let m = g.mean(v[0])?;
        let m2 = g.mul(m, m)?;
        g.add(a, m2)
    })
}

fn case_instance_norm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = nchw(rng, 3);
    let c = s[1];
    let params = vec![
        uniform(rng, &s, 1.0),
        uniform(rng, &[c], 1.0),
        uniform(rng, &[c], 1.0),
    ];
    check(params, |g, v| instance_norm(g, v[0], v[1], v[2], 1e-5))
}

fn case_glu(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut s = nchw(rng, 3);
    s[1] *= 2;
    check(vec![uniform(rng, &s, 2.0)], |g, v| g.glu(v[0]))
}

fn case_upsample(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = nchw(rng, 3);
    check(vec![uniform(rng, &s, 1.0)], |g, v| {
        g.upsample_nearest2(v[0])
    })
}

fn case_avg_pool(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut s = nchw(rng, 3);
    s[2] = 2 * dims(rng, 1, 2);
    s[3] = 2 * dims(rng, 1, 2);
    check(vec![uniform(rng, &s, 1.0)], |g, v| g.avg_pool2(v[0]))
}

fn case_residual(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = nchw(rng, 3);
    block(
        rng,
        &s,
        |st, i| ResidualBlock::new(st, i, "res", s[1]),
        |b, g, p, x| b.forward(g, p, x),
    )
}

fn case_upsample_block(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = nchw(rng, 3);
    let out = dims(rng, 1, 3);
    block(
        rng,
        &s,
        |st, i| UpsampleBlock::new(st, i, "up", s[1], out),
        |b, g, p, x| b.forward(g, p, x),
    )
}

fn case_self_attention(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut s = nchw(rng, 9);
    s[1] = s[1].max(2);
    block(
        rng,
        &s,
        |st, i| SelfAttention::new(st, i, "sa", s[1]),
        |b, g, p, x| b.forward(g, p, x),
    )
}

fn lrm_options(rng: &mut ChaCha8Rng) -> LrmOptions {
    let mode = if rng.random_bool(0.5) {
        ApplyMode::Gating
    } else {
        ApplyMode::Literal
    };
    LrmOptions {
        mode,
        residual: rng.random_bool(0.5),
    }
}

fn case_spatial_lrm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = nchw(rng, 9);
    let o = lrm_options(rng);
    block(
        rng,
        &s,
        |st, i| SpatialLrm::new(st, i, "s", s[1], s[2], s[3], o),
        |b, g, p, x| b.forward(g, p, x),
    )
}

fn case_channel_lrm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = nchw(rng, 9);
    let o = lrm_options(rng);
    block(
        rng,
        &s,
        |st, i| ChannelLrm::new(st, i, "c", s[1], o),
        |b, g, p, x| b.forward(g, p, x),
    )
}

fn case_lrm_pair(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut s = nchw(rng, 9);
    s[3] = s[2];
    let o = lrm_options(rng);
    block(
        rng,
        &s,
        |st, i| LongRangePair::new(st, i, "p", s[1], s[2], o),
        |b, g, p, x| b.forward(g, p, x),
    )
}

fn case_d_loss(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (k, n) = (dims(rng, 1, 3), dims(rng, 1, 4));
    let params: Vec<_> = (0..2 * k).map(|_| uniform(rng, &[n, 1], 4.0)).collect();
    grad_check(
        |g, v| discriminator_loss(g, &v[..k], &v[k..]),
        &params,
        STEP,
    )
}

fn case_g_loss(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (k, n) = (dims(rng, 1, 3), dims(rng, 1, 3));
    let mut params: Vec<_> = (0..k).map(|_| uniform(rng, &[n, 1], 4.0)).collect();
    for i in 0..k {
        let side = 2 << i;
        params.push(uniform(rng, &[n, 3, side, side], 1.0));
    }
    grad_check(
        move |g, v| {
            let w = LossWeights::default();
            let color = (1..k)
                .map(|i| color_consistency_loss(g, v[k + i], v[k + i - 1], &w))
                .collect::<Result<Vec<_>>>()?;
            generator_loss(g, &v[..k], &color, &w)
        },
        &params,
        STEP,
    )
}

fn case_color_loss(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = dims(rng, 1, 3);
    let side = 2 * dims(rng, 1, 2);
    let lower = if rng.random_bool(0.5) { side / 2 } else { side };
    let params = vec![
        uniform(rng, &[n, 3, side, side], 1.0),
        uniform(rng, &[n, 3, lower, lower], 1.0),
    ];
    let w = LossWeights {
        lambda1: rng.random_range(0.5..2.0),
        lambda2: rng.random_range(1.0..6.0),
        lambda3: 50.0,
    };
    grad_check(
        move |g, v| color_consistency_loss(g, v[0], v[1], &w),
        &params,
        STEP,
    )
}

fn case_discriminator(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let side = [4, 8][rng.random_range(0..2)];
    let width = dims(rng, 1, 2);
    let n = dims(rng, 1, 2);
    block(
        rng,
        &[n, 3, side, side],
        |st, i| Discriminator::new(st, i, 1, side, width),
        |d, g, p, x| d.forward(g, p, x),
    )
}

fn case_generator(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::tiny();
    cfg.channels = vec![2, 2, 2];
    cfg.use_metadata = rng.random_bool(0.5);
    cfg.lrm_resolution = [4, 8][rng.random_range(0..2)];
    let n = dims(rng, 1, 2);
    let meta = uniform(rng, &[n, cfg.metadata_dim], 1.0);
    let use_meta = cfg.use_metadata;
    block(
        rng,
        &[n, cfg.noise_dim],
        |st, i| Generator::new(st, i, &cfg).expect("tiny config is valid"),
        move |gen, g, p, z| {
            let m = if use_meta {
                Some(g.constant(meta.clone())?)
            } else {
                None
            };
            let out = gen.forward(g, p, z, m)?;
            let flat: Vec<Var> = out
                .images
                .iter()
                .map(|&i| {
                    let s = g.shape(i).iter().product::<usize>();
                    g.reshape(i, vec![s])
                })
                .collect::<Result<_>>()?;
            flat[1..]
                .iter()
                .try_fold(flat[0], |a, &b| g.concat(a, b, 0))
        },
    )
}

/// `(name, case)` for every check in the suite.
pub fn checks() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add", case_add),
        ("sub", case_sub),
        ("mul", case_mul),
        ("scale_shift", case_scale_shift),
        ("matmul", case_matmul),
        ("bmm", case_bmm),
        ("transpose_reshape", case_transpose_reshape),
        ("concat", case_concat),
        ("conv2d", case_conv2d),
        ("softmax", case_softmax),
        ("sigmoid", case_sigmoid),
        ("tanh", case_tanh),
        ("leaky_relu", case_leaky_relu),
        ("log_sigmoid", case_log_sigmoid),
        ("reductions", case_reductions),
        ("instance_norm", case_instance_norm),
        ("glu", case_glu),
        ("upsample", case_upsample),
        ("avg_pool", case_avg_pool),
        ("residual_block", case_residual),
        ("upsample_block", case_upsample_block),
        ("self_attention", case_self_attention),
        ("spatial_lrm", case_spatial_lrm),
        ("channel_lrm", case_channel_lrm),
        ("long_range_pair", case_lrm_pair),
        ("discriminator_loss", case_d_loss),
        ("generator_loss", case_g_loss),
        ("color_consistency_loss", case_color_loss),
        ("discriminator", case_discriminator),
        ("generator", case_generator),
    ]
}

/// Runs one named check over [`CASES`] random shapes.
pub fn run_check(name: &'static str, case: CaseFn, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::nn::fnv1a(name.as_bytes()));
    let mut out = CheckResult {
        name,
        cases: 0,
        entries: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..CASES {
        let r = case(&mut rng)?;
        out.cases += 1;
        out.entries += r.entries_checked;
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
    }
    Ok(out)
}

pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    checks()
        .into_iter()
        .map(|(name, case)| run_check(name, case, seed))
        .collect()
}
