//! Color consistency regularization and the adversarial objectives.
//!
//! All adversarial terms take discriminator logits and use `ln σ(x)` and
//! `ln(1 − σ(x)) = ln σ(−x)` directly, so no `log(0)` can occur.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// λ₁ (mean term), λ₂ (covariance term), λ₃ (color loss in the generator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 5.0,
            lambda3: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "train.{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-image RGB mean and population covariance over pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorStats<T> {
    pub mu: [T; 3],
    pub sigma: [[T; 3]; 3],
}

/// Color statistics of one `[3, H, W]` image.
pub fn color_stats<T: Real>(image: &Tensor<T>) -> Result<ColorStats<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] * s[2] == 0 {
        return Err(Error::shape(format!(
            "color stats expect a non-empty [3, H, W] image, got {s:?}"
        )));
    }
    let p = s[1] * s[2];
    let pn = T::lit(p as f64);
    let d = image.data();
    let mut mu = [T::zero(); 3];
    for (c, m) in mu.iter_mut().enumerate() {
        *m = d[c * p..(c + 1) * p].iter().copied().sum::<T>() / pn;
    }
    let mut sigma = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = T::zero();
            for k in 0..p {
                acc += (d[a * p + k] - mu[a]) * (d[b * p + k] - mu[b]);
            }
            sigma[a][b] = acc / pn;
        }
    }
    Ok(ColorStats { mu, sigma })
}

/// Graph form over a batch `[N, 3, H, W]`: mean `[N, 3, 1]` and covariance
/// `[N, 3, 3]`.
pub fn color_stats_graph<T: Real>(g: &mut Graph<T>, batch: Var) -> Result<(Var, Var)> {
    let s = g.shape(batch).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] * s[3] == 0 {
        return Err(Error::shape(format!(
            "color stats expect [N, 3, H, W], got {s:?}"
        )));
    }
    let p = s[2] * s[3];
    let inv = T::lit(1.0 / p as f64);
    let x = g.reshape(batch, vec![s[0], 3, p])?;
    let total = g.sum_lastdim(x)?;
    let mu = g.scale(total, inv)?;
    let centered = g.sub(x, mu)?;
    let ct = g.transpose(centered)?;
    let outer = g.bmm(centered, ct)?;
    let sigma = g.scale(outer, inv)?;
    Ok((mu, sigma))
}

/// Nearest-upsamples `lower` until its side matches `side`.
fn align<T: Real>(g: &mut Graph<T>, mut lower: Var, side: usize) -> Result<Var> {
    loop {
        let s = g.shape(lower)[2];
        if s == side {
            return Ok(lower);
        }
        if s > side || side % s != 0 {
            return Err(Error::shape(format!(
                "cannot align a {s}-pixel stage to {side} pixels by doubling"
            )));
        }
        lower = g.upsample_nearest2(lower)?;
    }
}

/// `(1/n)·Σ_j (λ₁‖μ_i − μ_{i−1}‖² + λ₂‖Σ_i − Σ_{i−1}‖_F²)` over a batch. The
/// lower-resolution batch is nearest-upsampled to the higher one first.
pub fn color_consistency_loss<T: Real>(
    g: &mut Graph<T>,
    batch_i: Var,
    batch_prev: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let (si, sp) = (g.shape(batch_i).to_vec(), g.shape(batch_prev).to_vec());
    if si.len() != 4 || sp.len() != 4 || si[0] != sp[0] || si[0] == 0 {
        return Err(Error::shape(format!(
            "color consistency needs equal non-empty batches, got {si:?} and {sp:?}"
        )));
    }
    let n = si[0];
    let prev = align(g, batch_prev, si[2])?;
    let (mu_i, sig_i) = color_stats_graph(g, batch_i)?;
    let (mu_p, sig_p) = color_stats_graph(g, prev)?;
    let dmu = g.sub(mu_i, mu_p)?;
    let dmu2 = g.mul(dmu, dmu)?;
    let mean_term = g.sum(dmu2)?;
    let dsig = g.sub(sig_i, sig_p)?;
    let dsig2 = g.mul(dsig, dsig)?;
    let cov_term = g.sum(dsig2)?;
    let a = g.scale(mean_term, T::lit(weights.lambda1 / n as f64))?;
    let b = g.scale(cov_term, T::lit(weights.lambda2 / n as f64))?;
    g.add(a, b)
}

fn sum_scalars<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Usage("loss needs at least one stage".into()))?;
    rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
}

/// `−½·E[ln σ(logit)]` for one stage.
pub fn generator_adversarial_term<T: Real>(g: &mut Graph<T>, fake_logits: Var) -> Result<Var> {
    let ls = g.log_sigmoid(fake_logits)?;
    let m = g.mean(ls)?;
    g.scale(m, T::lit(-0.5))
}

/// `Σ_k −½·E[ln D_k(I′_k)] + λ₃·Σ_{i≥2} L_C_i`. `color_losses` holds the
/// terms for stages 2..K (empty for K = 1).
pub fn generator_loss<T: Real>(
    g: &mut Graph<T>,
    fake_logits: &[Var],
    color_losses: &[Var],
    weights: &LossWeights,
) -> Result<Var> {
    if !fake_logits.is_empty() && color_losses.len() + 1 != fake_logits.len() {
        return Err(Error::Usage(format!(
            "{} stages need {} color terms, got {}",
            fake_logits.len(),
            fake_logits.len() - 1,
            color_losses.len()
        )));
    }
    let adv = fake_logits
        .iter()
        .map(|&l| generator_adversarial_term(g, l))
        .collect::<Result<Vec<_>>>()?;
    let adv = sum_scalars(g, &adv)?;
    if color_losses.is_empty() {
        return Ok(adv);
    }
    let color = sum_scalars(g, color_losses)?;
    let color = g.scale(color, T::lit(weights.lambda3))?;
    g.add(adv, color)
}

/// `Σ_k (−½·E[ln D_k(I_k)] − ½·E[ln(1 − D_k(I′_k))])`.
///
/// Gradients flow into both logit sets. Callers keep the generator out of
/// this update by detaching the fake images before the discriminator.
pub fn discriminator_loss<T: Real>(
    g: &mut Graph<T>,
    real_logits: &[Var],
    fake_logits: &[Var],
) -> Result<Var> {
    if real_logits.len() != fake_logits.len() {
        return Err(Error::Usage(format!(
            "{} real stages but {} fake stages",
            real_logits.len(),
            fake_logits.len()
        )));
    }
    let mut terms = Vec::with_capacity(real_logits.len());
    for (&real, &fake) in real_logits.iter().zip(fake_logits) {
        if g.value(real).numel() == 0 || g.value(fake).numel() == 0 {
            return Err(Error::Usage("empty stage batch".into()));
        }
        let lr = g.log_sigmoid(real)?;
        let mr = g.mean(lr)?;
        let neg = g.scale(fake, -T::one())?;
        let lf = g.log_sigmoid(neg)?;
        let mf = g.mean(lf)?;
        let both = g.add(mr, mf)?;
        terms.push(g.scale(both, T::lit(-0.5))?);
    }
    sum_scalars(g, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(pixels: &[[f64; 3]], h: usize, w: usize) -> Tensor<f64> {
        let p = h * w;
        Tensor::from_fn(vec![3, h, w], |i| pixels[i % p][i / p])
    }

    #[test]
    fn constant_image_stats() {
        let s = color_stats(&img(&[[0.2, -0.4, 0.9]; 4], 2, 2)).unwrap();
        assert_eq!(s.mu, [0.2, -0.4, 0.9]);
        assert!(s.sigma.iter().flatten().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn two_pixel_population_covariance() {
        let s = color_stats(&img(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 1, 2)).unwrap();
        assert_eq!(s.mu, [0.5, 0.0, 0.0]);
        assert_eq!(s.sigma[0][0], 0.25);
        let rest: f64 = s.sigma.iter().flatten().map(|v| v.abs()).sum::<f64>() - 0.25;
        assert!(rest.abs() < 1e-15);
    }

    #[test]
    fn stats_are_permutation_invariant() {
        let px = [
            [0.1, 0.5, -0.3],
            [0.9, -0.2, 0.4],
            [-0.7, 0.0, 0.8],
            [0.3, 0.3, 0.3],
        ];
        let perm = [px[2], px[0], px[3], px[1]];
        let a = color_stats(&img(&px, 2, 2)).unwrap();
        let b = color_stats(&img(&perm, 2, 2)).unwrap();
        for c in 0..3 {
            assert!((a.mu[c] - b.mu[c]).abs() < 1e-15);
            for d in 0..3 {
                assert!((a.sigma[c][d] - b.sigma[c][d]).abs() < 1e-15);
            }
        }
    }

    fn ccl(a: Tensor<f64>, b: Tensor<f64>) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(a).unwrap();
        let b = g.constant(b).unwrap();
        let l = color_consistency_loss(&mut g, a, b, &LossWeights::default()).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn color_consistency_hand_cases() {
        let red = Tensor::stack(&[img(&[[1.0, 0.0, 0.0]; 4], 2, 2)]).unwrap();
        let black = Tensor::stack(&[img(&[[0.0, 0.0, 0.0]; 4], 2, 2)]).unwrap();
        assert!((ccl(red.clone(), black) - 1.0).abs() < 1e-12);
        assert_eq!(ccl(red.clone(), red), 0.0);
    }

    #[test]
    fn color_consistency_aligns_resolutions() {
        let hi = Tensor::stack(&[img(&[[0.5, 0.5, 0.5]; 16], 4, 4)]).unwrap();
        let lo = Tensor::stack(&[img(&[[0.5, 0.5, 0.5]; 4], 2, 2)]).unwrap();
        assert_eq!(ccl(hi.clone(), lo), 0.0);
        let odd = Tensor::stack(&[img(&[[0.5, 0.5, 0.5]; 9], 3, 3)]).unwrap();
        let mut g = Graph::new();
        let a = g.constant(hi).unwrap();
        let b = g.constant(odd).unwrap();
        assert!(color_consistency_loss(&mut g, a, b, &LossWeights::default()).is_err());
    }

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn generator_loss_closed_forms() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(vec![4, 1])).unwrap();
        let l = generator_loss(&mut g, &[zero], &[], &w).unwrap();
        assert!((scalar(&g, l) - 0.5 * 2f64.ln()).abs() < 1e-12);

        let big = g.constant(Tensor::full(vec![4, 1], 40.0)).unwrap();
        let c0 = g.constant(Tensor::scalar(1.0)).unwrap();
        let l = generator_loss(&mut g, &[big, big], &[c0], &w).unwrap();
        assert!((scalar(&g, l) - 50.0).abs() < 1e-12);

        let l = generator_loss(&mut g, &[big], &[], &w).unwrap();
        assert!(scalar(&g, l) > 0.0 && scalar(&g, l) < 1e-15);
    }

    #[test]
    fn discriminator_loss_closed_forms() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(vec![3, 1])).unwrap();
        let l = discriminator_loss(&mut g, &[zero], &[zero]).unwrap();
        assert!((scalar(&g, l) - 2f64.ln()).abs() < 1e-12);
        let l3 = discriminator_loss(&mut g, &[zero; 3], &[zero; 3]).unwrap();
        assert_eq!(scalar(&g, l3), 3.0 * scalar(&g, l));

        let hi = g.constant(Tensor::full(vec![3, 1], 40.0)).unwrap();
        let lo = g.constant(Tensor::full(vec![3, 1], -40.0)).unwrap();
        let l = discriminator_loss(&mut g, &[hi], &[lo]).unwrap();
        assert!(scalar(&g, l) > 0.0 && scalar(&g, l) < 1e-15);
    }

    #[test]
    fn losses_are_finite_at_extreme_logits() {
        let mut g = Graph::new();
        let hi = g.constant(Tensor::full(vec![2, 1], 1e4)).unwrap();
        let lo = g.constant(Tensor::full(vec![2, 1], -1e4)).unwrap();
        let d = discriminator_loss(&mut g, &[lo], &[hi]).unwrap();
        let gl = generator_loss(&mut g, &[lo], &[], &LossWeights::default()).unwrap();
        assert!(scalar(&g, d).is_finite() && scalar(&g, gl).is_finite());
    }

    #[test]
    fn generator_gradient_is_negative_in_logits() {
        for &x in &[-30.0, -2.0, 0.0, 3.0, 25.0] {
            let mut g = Graph::new();
            let l = g.param(Tensor::full(vec![2, 1], x)).unwrap();
            let loss = generator_loss(&mut g, &[l], &[], &LossWeights::default()).unwrap();
            g.backward(loss).unwrap();
            assert!(g.grad(l).unwrap().iter().all(|&d| d < 0.0), "logit {x}");
        }
    }

    #[test]
    fn discriminator_gradients_reach_both_logit_sets() {
        let mut g = Graph::<f64>::new();
        let real = g
            .param(Tensor::new(vec![2, 1], vec![0.0, 1.5]).unwrap())
            .unwrap();
        let fake = g
            .param(Tensor::new(vec![2, 1], vec![-0.5, 0.0]).unwrap())
            .unwrap();
        let l = discriminator_loss(&mut g, &[real], &[fake]).unwrap();
        g.backward(l).unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        // d/dx of −½·mean ln σ(x) and of −½·mean ln σ(−x), with n = 2.
        let dr: Vec<f64> = [0.0, 1.5].iter().map(|&x| -0.25 * (1.0 - s(x))).collect();
        let df: Vec<f64> = [-0.5, 0.0].iter().map(|&x| 0.25 * s(x)).collect();
        for (a, b) in g
            .grad(real)
            .unwrap()
            .iter()
            .zip(&dr)
            .chain(g.grad(fake).unwrap().iter().zip(&df))
        {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
