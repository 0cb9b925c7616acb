//! Alternating D/G optimisation, resumable state and evaluation hooks.

mod artifacts;
pub mod checkpoint;

pub use artifacts::{read_metrics, ArtifactWriter, MetricsLog, METRICS_HEADER};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{embed_and_stats, frechet_distance, frechet_embedder, DistributionStats};
use crate::model::{FrozenEmbedder, MetadataEmbedder, Model, ModelConfig};
use crate::nn::ParamStore;
use crate::objectives::{
    color_consistency_loss, discriminator_loss, generator_adversarial_term, LossWeights,
};
use crate::tensor::{adam_step, AdamState, Graph, Real, Tensor, Var};
use checkpoint::RawCheckpoint;

/// Arithmetic precision of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub seed: u64,
    /// Epochs between checkpoints and sample grids; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Epochs between Fréchet-lite evaluations. The first and last epoch
    /// are always evaluated; 0 evaluates only those.
    pub eval_every: usize,
    /// Generated images per evaluation.
    pub eval_samples: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            epochs: 30,
            batch: 16,
            lr: 0.0002,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            seed: 0,
            checkpoint_every: 10,
            eval_every: 5,
            eval_samples: 500,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be positive, got {}",
                self.lr
            )));
        }
        if self.eval_samples < 2 {
            return Err(Error::Config(
                "train.eval_samples must be at least 2".into(),
            ));
        }
        self.weights().validate()
    }

    fn is_eval_epoch(&self, epoch: usize) -> bool {
        epoch == 1 || epoch == self.epochs || (self.eval_every > 0 && epoch % self.eval_every == 0)
    }
}

/// Seed of the frozen metadata embedder. It is fixed so that every run and
/// ablation mode sees the same metadata for the same image.
pub const METADATA_SEED: u64 = 0x3e7a_da7a;

pub fn metadata_embedder(config: &ModelConfig) -> Result<FrozenEmbedder> {
    FrozenEmbedder::new(METADATA_SEED, config.top_resolution(), config.metadata_dim)
}

/// Per-dimension z-scores over the table. Raw embedder features are small
/// next to unit-variance noise, so unscaled they barely reach the stem.
/// Constant dimensions become zero.
pub fn standardize<T: Real>(mut table: Vec<Vec<T>>) -> Vec<Vec<T>> {
    let n = table.len() as f64;
    let d = table.first().map_or(0, Vec::len);
    for j in 0..d {
        let mean = table.iter().map(|r| r[j].to_f64_lossy()).sum::<f64>() / n;
        let var = table
            .iter()
            .map(|r| (r[j].to_f64_lossy() - mean).powi(2))
            .sum::<f64>()
            / n;
        let inv = if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 };
        for r in &mut table {
            r[j] = T::lit((r[j].to_f64_lossy() - mean) * inv);
        }
    }
    table
}

/// Training images at the top resolution plus one metadata vector each.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub meta: Vec<Vec<T>>,
}

impl<T: Real> Dataset<T> {
    /// Computes metadata with `embedder`, or with the default frozen
    /// embedder when none is given. Models without metadata skip this.
    pub fn prepare(
        images: Vec<Tensor<T>>,
        config: &ModelConfig,
        embedder: Option<&MetadataEmbedder>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Usage("dataset is empty".into()));
        }
        let r = config.top_resolution();
        if let Some(bad) = images.iter().find(|t| t.shape() != [3, r, r]) {
            return Err(Error::shape(format!(
                "training images must be [3, {r}, {r}], got {:?}",
                bad.shape()
            )));
        }
        let meta = if config.use_metadata {
            let meta = match embedder {
                Some(e) => e.table(&images)?,
                None => metadata_embedder(config)?.embed_all(&images)?,
            };
            if meta.first().map_or(0, Vec::len) != config.metadata_dim {
                return Err(Error::shape(format!(
                    "metadata vectors have width {}, model expects {}",
                    meta.first().map_or(0, Vec::len),
                    config.metadata_dim
                )));
            }
            standardize(meta)
        } else {
            Vec::new()
        };
        Ok(Dataset { images, meta })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Metadata rows for the given image indices, or `None` without metadata.
    pub fn meta_batch(&self, idx: &[usize]) -> Option<Tensor<T>> {
        if self.meta.is_empty() {
            return None;
        }
        let d = self.meta[0].len();
        let data = idx
            .iter()
            .flat_map(|&i| self.meta[i].iter().copied())
            .collect();
        Some(Tensor::new(vec![idx.len(), d], data).expect("metadata rows share one width"))
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub color_loss: f64,
    pub frechet_lite: Option<f64>,
}

/// Loss scalars of one step. `color` holds the unweighted color terms of
/// stages 2..K.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub d_stage: Vec<f64>,
    pub g_adv_stage: Vec<f64>,
    pub color: Vec<f64>,
    pub d_loss: f64,
    pub g_loss: f64,
}

impl StepLosses {
    pub fn color_loss(&self) -> f64 {
        self.color.iter().sum()
    }

    fn all_finite(&self) -> bool {
        [self.d_loss, self.g_loss]
            .iter()
            .chain(&self.d_stage)
            .chain(&self.g_adv_stage)
            .chain(&self.color)
            .all(|v| v.is_finite())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub g_params: ParamStore<T>,
    pub d_params: ParamStore<T>,
    pub g_adam: AdamState<T>,
    pub d_adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<MetricsRow>,
}

fn sum_vars<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::Usage("no stages".into()))?;
    rest.iter().try_fold(first, |acc, &v| g.add(acc, v))
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64_lossy()
}

/// `2×2` average pooling of a `[N, C, H, W]` tensor.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::shape(format!(
            "average pooling needs [N, C, even H, even W], got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let quarter = T::lit(0.25);
    Tensor::new(
        vec![s[0], s[1], oh, ow],
        (0..s[0] * s[1] * oh * ow)
            .map(|i| {
                let (p, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                let base = p * h * w + 2 * y * w + 2 * xx;
                (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]) * quarter
            })
            .collect(),
    )
}

/// Reals for every stage, lowest resolution first, by repeated pooling of
/// the top-resolution batch.
pub fn real_pyramid<T: Real>(top: &Tensor<T>, resolutions: &[usize]) -> Result<Vec<Tensor<T>>> {
    let mut out = vec![top.clone()];
    for &r in resolutions.iter().rev().skip(1) {
        let mut t = avg_pool2(out.last().unwrap())?;
        while t.shape()[2] > r {
            t = avg_pool2(&t)?;
        }
        out.push(t);
    }
    out.reverse();
    for (t, &r) in out.iter().zip(resolutions) {
        if t.shape()[2] != r {
            return Err(Error::shape(format!(
                "real batch side {} cannot feed a {r}-pixel stage",
                t.shape()[2]
            )));
        }
    }
    Ok(out)
}

pub fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

impl<T: Real> TrainState<T> {
    /// Fresh parameters and optimizer state for `model_config`.
    pub fn init(model_config: &ModelConfig, config: &TrainConfig) -> Result<(Model, Self)> {
        config.validate()?;
        let (model, g_params, d_params) = Model::build::<T>(model_config, config.seed)?;
        let state = TrainState {
            g_adam: AdamState::new(config.lr, g_params.tensors()),
            d_adam: AdamState::new(config.lr, d_params.tensors()),
            g_params,
            d_params,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            epoch: 0,
            history: Vec::new(),
        };
        Ok((model, state))
    }

    /// One discriminator update on all stages, then one generator update,
    /// from a single generator forward pass.
    pub fn train_step(
        &mut self,
        model: &Model,
        real_top: &Tensor<T>,
        meta: Option<&Tensor<T>>,
        weights: &LossWeights,
    ) -> Result<StepLosses> {
        let cfg = &model.config;
        let n = real_top.shape().first().copied().unwrap_or(0);
        if real_top.shape() != [n, 3, cfg.top_resolution(), cfg.top_resolution()] || n == 0 {
            return Err(Error::shape(format!(
                "real batch must be [N, 3, {r}, {r}], got {:?}",
                real_top.shape(),
                r = cfg.top_resolution()
            )));
        }
        let reals = real_pyramid(real_top, &cfg.resolutions)?;
        let z = normal_tensor::<T>(&mut self.rng, vec![n, cfg.noise_dim]);

        let mut g = Graph::new();
        let gp = self.g_params.bind(&mut g, true)?;
        let zv = g.constant(z)?;
        let mv = match meta {
            Some(m) if cfg.use_metadata => Some(g.constant(m.clone())?),
            _ => None,
        };
        let out = model.generator.forward(&mut g, &gp, zv, mv)?;

        let dp = self.d_params.bind(&mut g, true)?;
        let mut d_terms = Vec::with_capacity(cfg.stages);
        for ((d, real), &fake) in model.discriminators.iter().zip(reals).zip(&out.images) {
            let rv = g.constant(real)?;
            let rl = d.forward(&mut g, &dp, rv)?;
            let fv = g.detach(fake)?;
            let fl = d.forward(&mut g, &dp, fv)?;
            d_terms.push(discriminator_loss(&mut g, &[rl], &[fl])?);
        }
        let d_total = sum_vars(&mut g, &d_terms)?;
        g.backward(d_total)?;
        let d_grads = self.d_params.grads(&g, &dp);
        adam_step(self.d_params.tensors_mut(), &d_grads, &mut self.d_adam)?;

        let dp = self.d_params.bind(&mut g, false)?;
        let mut adv = Vec::with_capacity(cfg.stages);
        for (d, &fake) in model.discriminators.iter().zip(&out.images) {
            let fl = d.forward(&mut g, &dp, fake)?;
            adv.push(generator_adversarial_term(&mut g, fl)?);
        }
        let mut color = Vec::with_capacity(cfg.stages.saturating_sub(1));
        for k in 1..cfg.stages {
            color.push(color_consistency_loss(
                &mut g,
                out.images[k],
                out.images[k - 1],
                weights,
            )?);
        }
        let adv_total = sum_vars(&mut g, &adv)?;
        let g_total = if color.is_empty() {
            adv_total
        } else {
            let c = sum_vars(&mut g, &color)?;
            let c = g.scale(c, T::lit(weights.lambda3))?;
            g.add(adv_total, c)?
        };
        g.backward(g_total)?;
        let g_grads = self.g_params.grads(&g, &gp);
        adam_step(self.g_params.tensors_mut(), &g_grads, &mut self.g_adam)?;

        let losses = StepLosses {
            d_stage: d_terms.iter().map(|&v| scalar(&g, v)).collect(),
            g_adv_stage: adv.iter().map(|&v| scalar(&g, v)).collect(),
            color: color.iter().map(|&v| scalar(&g, v)).collect(),
            d_loss: scalar(&g, d_total),
            g_loss: scalar(&g, g_total),
        };
        if !losses.all_finite() {
            return Err(Error::NonFinite {
                op: "loss",
                index: 0,
            });
        }
        Ok(losses)
    }

    fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, store, adam) in [
            ("g", &self.g_params, &self.g_adam),
            ("d", &self.d_params, &self.d_adam),
        ] {
            for (name, t) in store.iter() {
                out.push((format!("{prefix}/{name}"), t.clone()));
            }
            for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
                for ((name, t), m) in store.iter().zip(moments.iter()) {
                    let tensor = Tensor::new(t.shape().to_vec(), m.clone())
                        .expect("moment matches parameter");
                    out.push((format!("opt.{prefix}.{kind}/{name}"), tensor));
                }
            }
            out.push((
                format!("opt.{prefix}.step"),
                Tensor::scalar(T::lit(adam.step as f64)),
            ));
        }
        let rows: Vec<T> = self
            .history
            .iter()
            .flat_map(|r| {
                [
                    r.epoch as f64,
                    r.step as f64,
                    r.d_loss,
                    r.g_loss,
                    r.color_loss,
                    r.frechet_lite.unwrap_or(-1.0),
                ]
            })
            .map(T::lit)
            .collect();
        let n = self.history.len();
        out.push((
            "history".into(),
            Tensor::new(vec![n, 6], rows).expect("six columns"),
        ));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named();
        let refs: Vec<(String, &Tensor<T>)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::encode(&refs, &self.rng, self.epoch as u32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes()?)
    }

    /// Rebuilds a state for `model` from a decoded checkpoint. Every
    /// parameter and moment must be present with its exact shape.
    pub fn from_raw(raw: &RawCheckpoint, model: &Model, config: &TrainConfig) -> Result<Self> {
        let (_, mut fresh) = Self::init(&model.config, config)?;
        let missing = |name: &str| Error::Format {
            offset: 0,
            reason: format!("checkpoint lacks `{name}`"),
        };
        for (prefix, store, adam) in [
            ("g", &mut fresh.g_params, &mut fresh.g_adam),
            ("d", &mut fresh.d_params, &mut fresh.d_adam),
        ] {
            let names = store.names().to_vec();
            for (i, name) in names.iter().enumerate() {
                let want = store.tensors()[i].shape().to_vec();
                for (slot, key) in [
                    (0, format!("{prefix}/{name}")),
                    (1, format!("opt.{prefix}.m/{name}")),
                    (2, format!("opt.{prefix}.v/{name}")),
                ] {
                    let t = raw.get(&key).ok_or_else(|| missing(&key))?;
                    if t.shape() != want.as_slice() {
                        return Err(Error::shape(format!(
                            "checkpoint `{key}` has shape {:?}, model expects {want:?}",
                            t.shape()
                        )));
                    }
                    let t = t.cast::<T>();
                    match slot {
                        0 => store.tensors_mut()[i] = t,
                        1 => adam.m[i] = t.into_data(),
                        _ => adam.v[i] = t.into_data(),
                    }
                }
            }
            let key = format!("opt.{prefix}.step");
            adam.step = raw.get(&key).ok_or_else(|| missing(&key))?.data()[0] as u64;
        }
        let h = raw.get("history").ok_or_else(|| missing("history"))?;
        fresh.history = h
            .data()
            .chunks(6)
            .map(|r| MetricsRow {
                epoch: r[0] as usize,
                step: r[1] as usize,
                d_loss: r[2],
                g_loss: r[3],
                color_loss: r[4],
                frechet_lite: (r[5] >= 0.0).then_some(r[5]),
            })
            .collect();
        fresh.rng = checkpoint::rng_from_blob(&raw.rng);
        fresh.epoch = raw.epoch as usize;
        Ok(fresh)
    }

    pub fn load(path: &Path, model: &Model, config: &TrainConfig) -> Result<Self> {
        let raw = checkpoint::read_file(path)?;
        if raw.dtype != T::DTYPE_TAG {
            return Err(Error::Usage(format!(
                "checkpoint holds dtype {} but this run uses {}",
                raw.dtype,
                T::NAME
            )));
        }
        Self::from_raw(&raw, model, config)
    }
}

/// Fréchet-lite of generated images against the training set, with fixed
/// evaluation noise so successive evaluations are comparable.
pub struct Evaluator<T> {
    embedder: FrozenEmbedder,
    real: DistributionStats,
    noise: Tensor<T>,
    meta: Option<Tensor<T>>,
}

/// Images generated per graph during evaluation.
const EVAL_CHUNK: usize = 100;
const EVAL_SALT: u64 = 0xe7a1_0000;

impl<T: Real> Evaluator<T> {
    pub fn new(model: &Model, data: &Dataset<T>, samples: usize, seed: u64) -> Result<Self> {
        let embedder = frechet_embedder(model.config.top_resolution())?;
        let real = embed_and_stats(&data.images, &embedder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
        let noise = normal_tensor(&mut rng, vec![samples, model.config.noise_dim]);
        let idx: Vec<usize> = (0..samples)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        Ok(Evaluator {
            embedder,
            real,
            noise,
            meta: data.meta_batch(&idx),
        })
    }

    /// Top-stage images for the evaluation noise.
    pub fn generate(&self, model: &Model, g_params: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
        let n = self.noise.shape()[0];
        let mut images = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let z = rows(&self.noise, start, end)?;
            let m = self
                .meta
                .as_ref()
                .map(|m| rows(m, start, end))
                .transpose()?;
            let top = model
                .generate(g_params, &z, m.as_ref())?
                .pop()
                .expect("at least one stage");
            images.extend((0..end - start).map(|i| top.select(i)));
        }
        Ok(images)
    }

    pub fn frechet(&self, model: &Model, g_params: &ParamStore<T>) -> Result<f64> {
        let images = self.generate(model, g_params)?;
        frechet_distance(&embed_and_stats(&images, &self.embedder)?, &self.real)
    }
}

/// Rows `start..end` of a tensor along its first axis.
pub fn rows<T: Real>(t: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * per..end * per].to_vec())
}

/// Callbacks from the training loop.
pub trait Observer<T> {
    fn on_step(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    /// Called after each completed epoch, with the row of its last step.
    fn on_epoch(&mut self, _model: &Model, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> Observer<T> for () {}

/// Runs epochs `state.epoch + 1 ..= config.epochs`.
pub fn train<T: Real>(
    config: &TrainConfig,
    model: &Model,
    data: &Dataset<T>,
    state: &mut TrainState<T>,
    observer: &mut dyn Observer<T>,
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("dataset is empty".into()));
    }
    let weights = config.weights();
    let evaluator = Evaluator::new(model, data, config.eval_samples, config.seed)?;
    let n = data.len();
    let mut step = state.history.last().map_or(0, |r| r.step);
    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch).collect();
        for (i, idx) in batches.iter().enumerate() {
            step += 1;
            let items: Vec<Tensor<T>> = idx.iter().map(|&j| data.images[j].clone()).collect();
            let real = Tensor::stack(&items)?;
            let meta_idx: Vec<usize> = (0..idx.len())
                .map(|_| state.rng.random_range(0..n))
                .collect();
            let meta = data.meta_batch(&meta_idx);
            let losses = state
                .train_step(model, &real, meta.as_ref(), &weights)
                .map_err(|e| Error::Training {
                    epoch,
                    step,
                    source: Box::new(e),
                })?;
            let last = i + 1 == batches.len();
            let frechet_lite =
                if last && config.is_eval_epoch(epoch) {
                    Some(evaluator.frechet(model, &state.g_params).map_err(|e| {
                        Error::Training {
                            epoch,
                            step,
                            source: Box::new(e),
                        }
                    })?)
                } else {
                    None
                };
            let row = MetricsRow {
                epoch,
                step,
                d_loss: losses.d_loss,
                g_loss: losses.g_loss,
                color_loss: losses.color_loss(),
                frechet_lite,
            };
            observer.on_step(&row)?;
            state.history.push(row);
        }
        state.epoch = epoch;
        observer.on_epoch(model, state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{make_synthetic_dataset, DatasetKind, SyntheticDatasetSpec};

    fn tiny_setup(
        n: usize,
        batch: usize,
        seed: u64,
    ) -> (TrainConfig, Model, Dataset<f64>, TrainState<f64>) {
        let mc = ModelConfig {
            resolutions: vec![8, 16],
            channels: vec![4, 4, 4],
            lrm_resolution: 8,
            metadata_dim: 4,
            ..ModelConfig::tiny()
        };
        let tc = TrainConfig {
            epochs: 1,
            batch,
            seed,
            eval_samples: 4,
            ..Default::default()
        };
        let (model, state) = TrainState::<f64>::init(&mc, &tc).unwrap();
        let imgs =
            make_synthetic_dataset(&SyntheticDatasetSpec::new(DatasetKind::Mirror, n, 16, 1))
                .unwrap();
        let data = Dataset::prepare(imgs, &mc, None).unwrap();
        (tc, model, data, state)
    }

    #[test]
    fn pooling_halves_and_averages() {
        let x = Tensor::from_fn(vec![1, 1, 2, 4], |i| i as f64);
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5]);
        let pyr = real_pyramid(&Tensor::<f64>::zeros(vec![2, 3, 32, 32]), &[8, 16, 32]).unwrap();
        let sides: Vec<_> = pyr.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sides, vec![8, 16, 32]);
    }

    #[test]
    fn step_count_uses_partial_batches() {
        let (tc, model, data, mut state) = tiny_setup(8, 4, 0);
        train(&tc, &model, &data, &mut state, &mut ()).unwrap();
        assert_eq!(state.history.len(), 2);
        let (tc, model, data, mut state) = tiny_setup(9, 4, 0);
        train(&tc, &model, &data, &mut state, &mut ()).unwrap();
        assert_eq!(state.history.len(), 3);
        assert!(state.history.last().unwrap().frechet_lite.is_some());
    }

    #[test]
    fn zero_discriminator_first_loss_is_k_ln2() {
        let (tc, model, data, mut state) = tiny_setup(4, 4, 0);
        for t in state.d_params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let real = Tensor::stack(&data.images).unwrap();
        let meta = data.meta_batch(&[0, 1, 2, 3]);
        let l = state
            .train_step(&model, &real, meta.as_ref(), &tc.weights())
            .unwrap();
        assert!((l.d_loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.d_stage.len(), 2);
        assert_eq!(l.color.len(), 1);
    }

    #[test]
    fn same_seed_same_stream() {
        let run = |seed| {
            let (tc, model, data, mut state) = tiny_setup(6, 3, seed);
            train(&tc, &model, &data, &mut state, &mut ()).unwrap();
            state
        };
        let (a, b) = (run(2), run(2));
        assert_eq!(a, b);
        assert_ne!(a.history, run(3).history);
    }

    #[test]
    fn checkpoint_round_trip_restores_everything() {
        let (tc, model, data, mut state) = tiny_setup(6, 3, 1);
        train(&tc, &model, &data, &mut state, &mut ()).unwrap();
        let raw = checkpoint::decode(&state.to_bytes().unwrap()).unwrap();
        let back = TrainState::<f64>::from_raw(&raw, &model, &tc).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn checkpoint_for_other_model_is_rejected() {
        let (tc, model, _, state) = tiny_setup(2, 2, 1);
        let raw = checkpoint::decode(&state.to_bytes().unwrap()).unwrap();
        let other = ModelConfig {
            use_metadata: false,
            ..model.config.clone()
        };
        let (m2, _) = TrainState::<f64>::init(&other, &tc).unwrap();
        assert!(TrainState::<f64>::from_raw(&raw, &m2, &tc).is_err());
    }

    #[test]
    fn wrong_real_resolution_is_an_error() {
        let (tc, model, _, mut state) = tiny_setup(2, 2, 1);
        let real = Tensor::zeros(vec![2, 3, 8, 8]);
        assert!(state
            .train_step(&model, &real, None, &tc.weights())
            .is_err());
    }
}
