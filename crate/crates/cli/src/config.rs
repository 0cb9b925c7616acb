use std::path::{Path, PathBuf};

use lrgan_core::eval::{
    load_image_folder, make_synthetic_dataset, DatasetKind, SyntheticDatasetSpec,
};
use lrgan_core::model::{read_metadata_file, MetadataEmbedder, ModelConfig};
use lrgan_core::tensor::{Real, Tensor};
use lrgan_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub use lrgan_core::trainer::TrainConfig;

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// A synthetic kind, or `folder` to read `path`.
    pub kind: String,
    pub path: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
    /// Precomputed metadata vectors (one per image, LRMETA01).
    pub metadata_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: "mirror".into(),
            path: None,
            count: 500,
            seed: 0,
            metadata_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Config(inner.to_string())
            } else {
                Error::Config(format!("{path}: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The config next to a checkpoint, as written by `train`.
    pub fn beside(ckpt: &Path) -> Result<Self> {
        let dir = ckpt.parent().unwrap_or(Path::new("."));
        let path = dir.join(EFFECTIVE_CONFIG);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no -c given and no {} beside {}",
                EFFECTIVE_CONFIG,
                ckpt.display()
            )));
        }
        Self::load(&path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        match self.data.kind.as_str() {
            "folder" if self.data.path.is_none() => Err(Error::Config(
                "data.path is required when data.kind is folder".into(),
            )),
            "folder" => Ok(()),
            k => k
                .parse::<DatasetKind>()
                .map(|_| ())
                .map_err(|_| Error::Config(format!("data.kind: unknown kind `{k}`"))),
        }?;
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load_images<T: Real>(&self) -> Result<Vec<Tensor<T>>> {
        load_images(
            &self.data.kind,
            self.data.path.as_deref(),
            self.data.count,
            self.data.seed,
            self.model.top_resolution(),
        )
    }

    /// The metadata source: precomputed vectors when a file is given.
    pub fn metadata(&self) -> Result<Option<MetadataEmbedder>> {
        match &self.data.metadata_file {
            Some(p) if self.model.use_metadata => {
                let vectors = read_metadata_file(p)?;
                let dim = vectors.first().map_or(0, Vec::len);
                Ok(Some(MetadataEmbedder::Precomputed { vectors, dim }))
            }
            _ => Ok(None),
        }
    }
}

pub fn load_images<T: Real>(
    kind: &str,
    path: Option<&Path>,
    count: usize,
    seed: u64,
    resolution: usize,
) -> Result<Vec<Tensor<T>>> {
    if kind == "folder" {
        let dir = path.ok_or_else(|| Error::Config("a folder dataset needs a path".into()))?;
        return Ok(load_image_folder(dir, resolution)?
            .iter()
            .map(|t| t.cast())
            .collect());
    }
    let kind: DatasetKind = kind
        .parse()
        .map_err(|_| Error::Config(format!("unknown dataset kind `{kind}`")))?;
    make_synthetic_dataset(&SyntheticDatasetSpec::new(kind, count, resolution, seed))
}

/// `--data` for `eval`: a folder path, or `kind[:count[:seed]]`.
pub fn parse_data_arg(arg: &str) -> Result<(String, Option<PathBuf>, usize, u64)> {
    let p = Path::new(arg);
    if p.is_dir() {
        return Ok(("folder".into(), Some(p.to_path_buf()), 0, 0));
    }
    let mut parts = arg.split(':');
    let kind = parts.next().unwrap_or_default().to_string();
    let num = |s: Option<&str>, what: &str, d: u64| -> Result<u64> {
        s.map_or(Ok(d), |s| {
            s.parse()
                .map_err(|_| Error::Config(format!("--data: bad {what} `{s}`")))
        })
    };
    let count = num(parts.next(), "count", 500)? as usize;
    let seed = num(parts.next(), "seed", 0)?;
    if parts.next().is_some() {
        return Err(Error::Config(format!(
            "--data: expected kind[:count[:seed]] or a folder, got `{arg}`"
        )));
    }
    Ok((kind, None, count, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_keys_take_defaults() {
        let c = RunConfig::parse(r#"{"train": {"lambda1": 2.0}}"#).unwrap();
        assert_eq!(c.train.lambda1, 2.0);
        assert_eq!(c.train.lambda3, 50.0);
        assert_eq!(c.train.lr, 0.0002);
        assert_eq!(c.model.stages, 3);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let e = RunConfig::parse(r#"{"model": {"use_lmr": true}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("model") && e.contains("use_lmr"), "{e}");
        let e = RunConfig::parse(r#"{"train": {"batch": "x"}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("train.batch"), "{e}");
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn data_arg_forms() {
        assert_eq!(
            parse_data_arg("mirror").unwrap(),
            ("mirror".into(), None, 500, 0)
        );
        assert_eq!(
            parse_data_arg("paired-dots:40:3").unwrap(),
            ("paired-dots".into(), None, 40, 3)
        );
        assert!(parse_data_arg("mirror:x").is_err());
    }
}
