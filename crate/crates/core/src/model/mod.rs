//! Multi-stage generator, per-stage discriminators, metadata and parameter
//! accounting.

mod config;
mod discriminator;
mod embedder;
mod generator;

pub use config::{LrmReplacement, ModelConfig, SlotKind};
pub use discriminator::{build_discriminators, Discriminator, LEAKY_SLOPE};
pub use embedder::{
    encode_metadata, read_metadata_file, spatial_average, write_metadata_file, FrozenEmbedder,
    MetadataEmbedder,
};
pub use generator::{Generator, GeneratorStage, Slot, StageOutputs};

use crate::error::Result;
use crate::nn::{Init, ParamStore};
use crate::tensor::{Graph, Real, Tensor};

/// Architecture only; parameters live in separate stores.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub generator: Generator,
    pub discriminators: Vec<Discriminator>,
}

impl Model {
    /// Builds the architecture and freshly initialized generator and
    /// discriminator stores.
    pub fn build<T: Real>(
        config: &ModelConfig,
        seed: u64,
    ) -> Result<(Model, ParamStore<T>, ParamStore<T>)> {
        let init = Init::new(seed);
        let mut gp = ParamStore::new();
        let generator = Generator::new(&mut gp, &init, config)?;
        let mut dp = ParamStore::new();
        let discriminators = build_discriminators(&mut dp, &init, config);
        Ok((
            Model {
                config: config.clone(),
                generator,
                discriminators,
            },
            gp,
            dp,
        ))
    }

    /// Runs the generator without recording gradients and returns the
    /// images of every stage.
    pub fn generate<T: Real>(
        &self,
        g_params: &ParamStore<T>,
        noise: &Tensor<T>,
        meta: Option<&Tensor<T>>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = g_params.bind(&mut g, false)?;
        let z = g.constant(noise.clone())?;
        let m = match meta {
            Some(m) if self.config.use_metadata => Some(g.constant(m.clone())?),
            _ => None,
        };
        let out = self.generator.forward(&mut g, &p, z, m)?;
        Ok(out.images.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Discriminator logits `[N, 1]` for each stage's images.
    pub fn discriminate<T: Real>(
        &self,
        d_params: &ParamStore<T>,
        images: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = d_params.bind(&mut g, false)?;
        self.discriminators
            .iter()
            .zip(images)
            .map(|(d, img)| {
                let x = g.constant(img.clone())?;
                let l = d.forward(&mut g, &p, x)?;
                Ok(g.value(l).clone())
            })
            .collect()
    }

    pub fn param_report<T: Real>(
        &self,
        g_params: &ParamStore<T>,
        d_params: &ParamStore<T>,
    ) -> ParamReport {
        let stage = self.config.slot_stage() + 1;
        let slot = g_params.count_prefix(&format!("g.s{stage}.lrm."));
        let discriminators = (1..=self.config.stages)
            .map(|k| d_params.count_prefix(&format!("d{k}.")))
            .collect();
        ParamReport {
            generator: g_params.numel(),
            slot,
            slot_kind: self.config.slot(),
            discriminators,
        }
    }
}

/// Exact parameter counts by component. The metadata embedder is frozen
/// and excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    /// All trainable generator parameters, slot included.
    pub generator: usize,
    /// Parameters of the long-range slot (or its replacement).
    pub slot: usize,
    pub slot_kind: SlotKind,
    pub discriminators: Vec<usize>,
}

impl ParamReport {
    pub fn discriminator_total(&self) -> usize {
        self.discriminators.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.generator + self.discriminator_total()
    }

    /// `(component, count)` rows in display order.
    pub fn rows(&self) -> Vec<(String, usize)> {
        let slot_name = match self.slot_kind {
            SlotKind::Empty => "generator.slot (empty)",
            SlotKind::LongRange => "generator.long_range",
            SlotKind::Residual => "generator.slot (residual)",
            SlotKind::SelfAttention => "generator.slot (self-attention)",
        };
        let mut rows = vec![
            ("generator".to_string(), self.generator),
            (slot_name.to_string(), self.slot),
        ];
        for (k, &d) in self.discriminators.iter().enumerate() {
            rows.push((format!("discriminator.stage{}", k + 1), d));
        }
        rows.push(("discriminator".into(), self.discriminator_total()));
        rows.push(("total".into(), self.total()));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::long_range::reduced_channels;

    fn noise(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, d], |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn desk_default_shapes_and_range() {
        let cfg = ModelConfig::default();
        let (m, gp, _) = Model::build::<f64>(&cfg, 1).unwrap();
        let imgs = m
            .generate(&gp, &noise(2, 32, 0), Some(&noise(2, 32, 1).cast()))
            .unwrap();
        let sides: Vec<_> = imgs.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            sides,
            vec![vec![2, 3, 8, 8], vec![2, 3, 16, 16], vec![2, 3, 32, 32]]
        );
        assert!(imgs.iter().all(|t| t.data().iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let run = || {
            let (m, gp, _) = Model::build::<f64>(&cfg, 5).unwrap();
            m.generate(&gp, &noise(3, 3, 2), Some(&noise(3, 2, 3)))
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metadata_changes_only_the_stem_width() {
        let on = ModelConfig::default();
        let off = ModelConfig {
            use_metadata: false,
            ..on.clone()
        };
        let (m1, g1, d1) = Model::build::<f32>(&on, 0).unwrap();
        let (m0, g0, d0) = Model::build::<f32>(&off, 0).unwrap();
        let r1 = m1.param_report(&g1, &d1);
        let r0 = m0.param_report(&g0, &d0);
        assert_eq!(
            r1.generator - r0.generator,
            on.metadata_dim * 2 * on.channels[0] * 16
        );
        assert_eq!(r1.discriminators, r0.discriminators);
    }

    #[test]
    fn report_matches_layer_closed_forms() {
        for cfg in [ModelConfig::default(), ModelConfig::tiny()] {
            let (m, gp, dp) = Model::build::<f32>(&cfg, 0).unwrap();
            let r = m.param_report(&gp, &dp);
            assert_eq!(r.generator, m.generator.param_count());
            assert_eq!(r.slot, m.generator.slot().param_count());
            for (d, &n) in m.discriminators.iter().zip(&r.discriminators) {
                assert_eq!(d.param_count(), n);
            }
            assert_eq!(r.total(), gp.numel() + dp.numel());
        }
    }

    #[test]
    fn long_range_is_light_at_desk_default() {
        let cfg = ModelConfig::default();
        let (m, gp, dp) = Model::build::<f32>(&cfg, 0).unwrap();
        let r = m.param_report(&gp, &dp);
        let (side, c) = (cfg.lrm_resolution, cfg.channels[cfg.slot_stage() + 1]);
        let cr = reduced_channels(c);
        assert_eq!(r.slot, side * side + c + 4 * c * cr);
        assert!(10 * r.slot < r.generator);
    }

    #[test]
    fn zero_discriminator_gives_half_probability() {
        let cfg = ModelConfig::tiny();
        let (m, _, mut dp) = Model::build::<f64>(&cfg, 0).unwrap();
        for t in dp.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let imgs = vec![
            Tensor::full(vec![5, 3, 4, 4], 0.3),
            Tensor::full(vec![5, 3, 8, 8], -0.7),
        ];
        let logits = m.discriminate(&dp, &imgs).unwrap();
        for l in logits {
            assert_eq!(l.shape(), &[5, 1]);
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
        assert!(m
            .discriminate(&dp, &[Tensor::zeros(vec![1, 3, 8, 8])])
            .is_err());
    }

    #[test]
    fn zero_gamma_attention_matches_no_slot() {
        let base = ModelConfig::tiny();
        let sa = ModelConfig {
            lrm_replacement: LrmReplacement::SelfAttention,
            ..base.clone()
        };
        let none = ModelConfig {
            use_lrm: false,
            ..base
        };
        let (ma, ga, _) = Model::build::<f64>(&sa, 11).unwrap();
        let (mn, gn, _) = Model::build::<f64>(&none, 11).unwrap();
        let (z, md) = (noise(2, 3, 7), noise(2, 2, 8));
        assert_eq!(
            ma.generate(&ga, &z, Some(&md)).unwrap(),
            mn.generate(&gn, &z, Some(&md)).unwrap()
        );
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cfg = ModelConfig::tiny();
        let (m, gp, _) = Model::build::<f64>(&cfg, 0).unwrap();
        assert!(m
            .generate(&gp, &noise(2, 4, 0), Some(&noise(2, 2, 0)))
            .is_err());
        assert!(m
            .generate(&gp, &noise(2, 3, 0), Some(&noise(2, 3, 0)))
            .is_err());
        assert!(m.generate(&gp, &noise(2, 3, 0), None).is_err());
    }
}
