use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Dense, Init, ParamStore};
use crate::tensor::{Graph, Real, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// `conv k4 s2 p1 + LeakyReLU` down to 4×4, then a dense layer to one logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub resolution: usize,
    pub convs: Vec<Conv2d>,
    pub head: Dense,
}

impl Discriminator {
    /// Registers parameters under `d{stage}.`, with `stage` counted from 1.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Init,
        stage: usize,
        resolution: usize,
        width: usize,
    ) -> Self {
        let mut convs = Vec::new();
        let (mut side, mut cin, mut cout) = (resolution, 3, width);
        while side > 4 {
            let name = format!("d{stage}.conv{}", convs.len());
            convs.push(Conv2d::new(store, init, &name, cin, cout, 4, 2, 1, true));
            cin = cout;
            cout = (cout * 2).min(8 * width);
            side /= 2;
        }
        let head = Dense::new(store, init, &format!("d{stage}.head"), cin * 16, 1);
        Discriminator {
            resolution,
            convs,
            head,
        }
    }

    /// `[N, 3, R, R]` images to `[N, 1]` logits.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::shape(format!(
                "discriminator for {r}×{r} images got {s:?}",
                r = self.resolution
            )));
        }
        let mut h = image;
        for conv in &self.convs {
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, T::lit(LEAKY_SLOPE))?;
        }
        let features = g.shape(h)[1] * 16;
        let h = g.reshape(h, vec![s[0], features])?;
        self.head.forward(g, p, h)
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum::<usize>() + self.head.param_count()
    }
}

/// One discriminator per stage, all in a single store.
pub fn build_discriminators<T: Real>(
    store: &mut ParamStore<T>,
    init: &Init,
    config: &ModelConfig,
) -> Vec<Discriminator> {
    config
        .resolutions
        .iter()
        .enumerate()
        .map(|(k, &r)| Discriminator::new(store, init, k + 1, r, config.disc_channels))
        .collect()
}
