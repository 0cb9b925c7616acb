use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::long_range::LrmOptions;

/// What occupies the long-range slot when `use_lrm` is set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrmReplacement {
    /// The long-range module itself.
    #[default]
    None,
    Residual,
    SelfAttention,
}

/// Architecture of the generator/discriminator stack.
///
/// `channels` has `stages + 1` entries: the 4×4 base width followed by the
/// width of each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stages: usize,
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    pub noise_dim: usize,
    pub metadata_dim: usize,
    pub lrm_resolution: usize,
    pub use_metadata: bool,
    pub use_lrm: bool,
    pub lrm_replacement: LrmReplacement,
    pub lrm_options: LrmOptions,
    /// Width of the first discriminator conv; doubles per layer up to 8×.
    pub disc_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 3,
            resolutions: vec![8, 16, 32],
            channels: vec![16, 16, 16, 8],
            noise_dim: 32,
            metadata_dim: 32,
            lrm_resolution: 16,
            use_metadata: true,
            use_lrm: true,
            lrm_replacement: LrmReplacement::None,
            lrm_options: LrmOptions::default(),
            disc_channels: 16,
        }
    }
}

/// The slot actually built at `lrm_resolution`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Empty,
    LongRange,
    Residual,
    SelfAttention,
}

fn bad(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("model.{key}: {msg}"))
}

impl ModelConfig {
    /// A very small config for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            stages: 2,
            resolutions: vec![4, 8],
            channels: vec![4, 4, 4],
            noise_dim: 3,
            metadata_dim: 2,
            lrm_resolution: 8,
            disc_channels: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.stages;
        if k == 0 {
            return Err(bad("stages", "need at least one stage"));
        }
        if self.resolutions.len() != k {
            return Err(bad(
                "resolutions",
                format!("expected {k} entries, got {}", self.resolutions.len()),
            ));
        }
        let first = self.resolutions[0];
        if first < 4 || !(first / 4).is_power_of_two() || first % 4 != 0 {
            return Err(bad(
                "resolutions",
                format!("first side must be 4·2^j, got {first}"),
            ));
        }
        for w in self.resolutions.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(bad(
                    "resolutions",
                    format!("sides must double, got {} then {}", w[0], w[1]),
                ));
            }
        }
        if self.channels.len() != k + 1 {
            return Err(bad(
                "channels",
                format!(
                    "expected {} entries (base + per stage), got {}",
                    k + 1,
                    self.channels.len()
                ),
            ));
        }
        if self.channels.contains(&0) {
            return Err(bad("channels", "widths must be positive"));
        }
        if first == 4 && self.channels[1] != self.channels[0] {
            return Err(bad(
                "channels",
                "a 4×4 first stage has no upsampling step, so it must keep the base width",
            ));
        }
        if self.noise_dim == 0 {
            return Err(bad("noise_dim", "must be positive"));
        }
        if self.use_metadata && self.metadata_dim == 0 {
            return Err(bad(
                "metadata_dim",
                "must be positive when use_metadata is set",
            ));
        }
        if !self.resolutions.contains(&self.lrm_resolution) {
            return Err(bad(
                "lrm_resolution",
                format!(
                    "{} is not a stage side {:?}",
                    self.lrm_resolution, self.resolutions
                ),
            ));
        }
        if !self.use_lrm && self.lrm_replacement != LrmReplacement::None {
            return Err(bad(
                "lrm_replacement",
                "replacing the long-range module requires use_lrm = true",
            ));
        }
        if self.disc_channels == 0 {
            return Err(bad("disc_channels", "must be positive"));
        }
        Ok(())
    }

    pub fn slot(&self) -> SlotKind {
        match (self.use_lrm, self.lrm_replacement) {
            (false, _) => SlotKind::Empty,
            (true, LrmReplacement::None) => SlotKind::LongRange,
            (true, LrmReplacement::Residual) => SlotKind::Residual,
            (true, LrmReplacement::SelfAttention) => SlotKind::SelfAttention,
        }
    }

    /// Index of the stage carrying the long-range slot.
    pub fn slot_stage(&self) -> usize {
        self.resolutions
            .iter()
            .position(|&r| r == self.lrm_resolution)
            .unwrap_or(0)
    }

    pub fn top_resolution(&self) -> usize {
        *self.resolutions.last().unwrap_or(&0)
    }

    /// Width of the generator input.
    pub fn input_dim(&self) -> usize {
        self.noise_dim
            + if self.use_metadata {
                self.metadata_dim
            } else {
                0
            }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let cases: Vec<(ModelConfig, &str)> = vec![
            (
                ModelConfig {
                    stages: 0,
                    ..Default::default()
                },
                "model.stages",
            ),
            (
                ModelConfig {
                    resolutions: vec![8, 16, 24],
                    ..Default::default()
                },
                "model.resolutions",
            ),
            (
                ModelConfig {
                    resolutions: vec![6, 12, 24],
                    ..Default::default()
                },
                "model.resolutions",
            ),
            (
                ModelConfig {
                    channels: vec![8, 8],
                    ..Default::default()
                },
                "model.channels",
            ),
            (
                ModelConfig {
                    lrm_resolution: 4,
                    ..Default::default()
                },
                "model.lrm_resolution",
            ),
            (
                ModelConfig {
                    use_lrm: false,
                    lrm_replacement: LrmReplacement::Residual,
                    ..Default::default()
                },
                "model.lrm_replacement",
            ),
        ];
        for (cfg, key) in cases {
            let err = cfg.validate().unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn slot_mapping() {
        let mut c = ModelConfig::default();
        assert_eq!(c.slot(), SlotKind::LongRange);
        assert_eq!(c.slot_stage(), 1);
        c.lrm_replacement = LrmReplacement::SelfAttention;
        assert_eq!(c.slot(), SlotKind::SelfAttention);
        c.use_lrm = false;
        c.lrm_replacement = LrmReplacement::None;
        assert_eq!(c.slot(), SlotKind::Empty);
        assert_eq!(c.input_dim(), 64);
        c.use_metadata = false;
        assert_eq!(c.input_dim(), 32);
    }
}
