use super::config::{ModelConfig, SlotKind};
use crate::error::{Error, Result};
use crate::long_range::LongRangePair;
use crate::nn::{
    glu, Bound, Conv2d, Dense, Init, ParamStore, ResidualBlock, SelfAttention, UpsampleBlock,
};
use crate::tensor::{Graph, Real, Var};

/// Whatever sits at the long-range insertion point.
#[derive(Clone, Debug)]
pub enum Slot {
    Empty,
    LongRange(LongRangePair),
    Residual(ResidualBlock),
    SelfAttention(SelfAttention),
}

impl Slot {
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        match self {
            Slot::Empty => Ok(h),
            Slot::LongRange(m) => m.forward(g, p, h),
            Slot::Residual(b) => b.forward(g, p, h),
            Slot::SelfAttention(a) => a.forward(g, p, h),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Slot::Empty => 0,
            Slot::LongRange(m) => m.param_count(),
            Slot::Residual(b) => b.param_count(),
            Slot::SelfAttention(a) => a.param_count(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorStage {
    pub resolution: usize,
    pub upsample: Vec<UpsampleBlock>,
    pub residual: ResidualBlock,
    pub slot: Slot,
    pub to_rgb: Conv2d,
}

/// Hidden features and `tanh` images, one pair per stage.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub features: Vec<Var>,
    pub images: Vec<Var>,
}

/// `concat(z, m) → dense → [2C₀, 4, 4] → GLU`, then per stage upsampling
/// blocks, a residual block, the long-range slot and a toRGB head.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub stem: Dense,
    pub stages: Vec<GeneratorStage>,
}

impl Generator {
    /// Registers all generator parameters under the `g.` prefix.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let c0 = config.channels[0];
        let stem = Dense::new(store, init, "g.stem", config.input_dim(), 2 * c0 * 16);
        let mut stages = Vec::with_capacity(config.stages);
        let (mut side, mut cin) = (4, c0);
        for (k, &res) in config.resolutions.iter().enumerate() {
            let c = config.channels[k + 1];
            let name = format!("g.s{}", k + 1);
            let mut upsample = Vec::new();
            while side < res {
                let i = upsample.len();
                upsample.push(UpsampleBlock::new(
                    store,
                    init,
                    &format!("{name}.up{i}"),
                    cin,
                    c,
                ));
                cin = c;
                side *= 2;
            }
            if cin != c {
                return Err(Error::Config(format!(
                    "model.channels: stage {} has no upsampling step to go from {cin} to {c} channels",
                    k + 1
                )));
            }
            let residual = ResidualBlock::new(store, init, &format!("{name}.res"), c);
            let slot = if k == config.slot_stage() {
                let slot_name = format!("{name}.lrm");
                match config.slot() {
                    SlotKind::Empty => Slot::Empty,
                    SlotKind::LongRange => Slot::LongRange(LongRangePair::new(
                        store,
                        init,
                        &slot_name,
                        c,
                        res,
                        config.lrm_options,
                    )),
                    SlotKind::Residual => {
                        Slot::Residual(ResidualBlock::new(store, init, &slot_name, c))
                    }
                    SlotKind::SelfAttention => {
                        Slot::SelfAttention(SelfAttention::new(store, init, &slot_name, c))
                    }
                }
            } else {
                Slot::Empty
            };
            let to_rgb = Conv2d::new(store, init, &format!("{name}.to_rgb"), c, 3, 3, 1, 1, true);
            stages.push(GeneratorStage {
                resolution: res,
                upsample,
                residual,
                slot,
                to_rgb,
            });
        }
        Ok(Generator {
            config: config.clone(),
            stem,
            stages,
        })
    }

    /// `noise` is `[N, noise_dim]`; `meta` is `[N, metadata_dim]` and only
    /// read when the config uses metadata.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        noise: Var,
        meta: Option<Var>,
    ) -> Result<StageOutputs> {
        let cfg = &self.config;
        let ns = g.shape(noise).to_vec();
        if ns.len() != 2 || ns[1] != cfg.noise_dim {
            return Err(Error::shape(format!(
                "noise must be [N, {}], got {ns:?}",
                cfg.noise_dim
            )));
        }
        let n = ns[0];
        let input = if cfg.use_metadata {
            let m = meta.ok_or_else(|| Error::Usage("this model needs a metadata batch".into()))?;
            let ms = g.shape(m);
            if ms != [n, cfg.metadata_dim] {
                return Err(Error::shape(format!(
                    "metadata must be [{n}, {}], got {ms:?}",
                    cfg.metadata_dim
                )));
            }
            g.concat(noise, m, 1)?
        } else {
            noise
        };
        let h = self.stem.forward(g, p, input)?;
        let mut h = g.reshape(h, vec![n, 2 * cfg.channels[0], 4, 4])?;
        h = glu(g, h)?;
        let mut out = StageOutputs {
            features: Vec::new(),
            images: Vec::new(),
        };
        for stage in &self.stages {
            for up in &stage.upsample {
                h = up.forward(g, p, h)?;
            }
            h = stage.residual.forward(g, p, h)?;
            h = stage.slot.forward(g, p, h)?;
            let rgb = stage.to_rgb.forward(g, p, h)?;
            out.images.push(g.tanh(rgb)?);
            out.features.push(h);
        }
        Ok(out)
    }

    /// The long-range slot, if one is built.
    pub fn slot(&self) -> &Slot {
        self.stages
            .iter()
            .map(|s| &s.slot)
            .find(|s| !matches!(s, Slot::Empty))
            .unwrap_or(&Slot::Empty)
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self
                .stages
                .iter()
                .map(|s| {
                    s.upsample
                        .iter()
                        .map(UpsampleBlock::param_count)
                        .sum::<usize>()
                        + s.residual.param_count()
                        + s.slot.param_count()
                        + s.to_rgb.param_count()
                })
                .sum::<usize>()
    }
}
