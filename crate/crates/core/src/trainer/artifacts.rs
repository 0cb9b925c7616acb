use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{normal_tensor, MetricsRow, Observer, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::eval::{image_grid, write_image};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

pub const METRICS_HEADER: &str = "epoch,step,d_loss,g_loss,color_loss,frechet_lite";

/// `metrics.csv`: one row per step, Fréchet-lite filled on evaluation steps.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Creates the file and writes the header plus any existing history.
    pub fn create(path: &Path, history: &[MetricsRow]) -> Result<Self> {
        let mut log = MetricsLog {
            out: BufWriter::new(File::create(path)?),
        };
        writeln!(log.out, "{METRICS_HEADER}")?;
        for row in history {
            log.append(row)?;
        }
        log.out.flush()?;
        Ok(log)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let fl = row.frechet_lite.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{},{},{},{},{},{fl}",
            row.epoch, row.step, row.d_loss, row.g_loss, row.color_loss
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parses a metrics file written by [`MetricsLog`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, why: &str| Error::Data {
        path: path.to_path_buf(),
        reason: format!("line {line}: {why}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 2, "expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            Ok(MetricsRow {
                epoch: f[0].parse().map_err(|_| bad(i + 2, "bad epoch"))?,
                step: f[1].parse().map_err(|_| bad(i + 2, "bad step"))?,
                d_loss: num(f[2])?,
                g_loss: num(f[3])?,
                color_loss: num(f[4])?,
                frechet_lite: if f[5].is_empty() {
                    None
                } else {
                    Some(num(f[5])?)
                },
            })
        })
        .collect()
}

/// Writes metrics, checkpoints and per-stage sample grids into a run
/// directory.
pub struct ArtifactWriter<T> {
    dir: PathBuf,
    metrics: MetricsLog,
    config: TrainConfig,
    noise: Tensor<T>,
    meta: Option<Tensor<T>>,
    /// Prints one progress line per epoch.
    pub verbose: bool,
}

/// Samples in each grid.
const GRID: usize = 16;
const SAMPLE_SALT: u64 = 0x5a3a_91e5;

impl<T: Real> ArtifactWriter<T> {
    /// `meta` supplies the metadata rows for the grid samples.
    pub fn new(
        dir: &Path,
        model: &Model,
        config: &TrainConfig,
        state: &TrainState<T>,
        meta: Option<Tensor<T>>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let metrics = MetricsLog::create(&dir.join("metrics.csv"), &state.history)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLE_SALT);
        let noise = normal_tensor(&mut rng, vec![GRID, model.config.noise_dim]);
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            metrics,
            config: config.clone(),
            noise,
            meta,
            verbose: false,
        })
    }

    pub fn grid_size() -> usize {
        GRID
    }

    fn write_samples(&self, model: &Model, state: &TrainState<T>) -> Result<()> {
        let stages = model.generate(&state.g_params, &self.noise, self.meta.as_ref())?;
        for (k, batch) in stages.iter().enumerate() {
            let tiles: Vec<_> = (0..batch.shape()[0]).map(|i| batch.select(i)).collect();
            let grid = image_grid(&tiles, 4)?;
            write_image(
                &grid,
                &self.dir.join(format!(
                    "samples_epoch{:03}_stage{}.ppm",
                    state.epoch,
                    k + 1
                )),
            )?;
        }
        Ok(())
    }
}

impl<T: Real> Observer<T> for ArtifactWriter<T> {
    fn on_step(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.append(row)
    }

    fn on_epoch(&mut self, model: &Model, state: &TrainState<T>) -> Result<()> {
        self.metrics.flush()?;
        let e = state.epoch;
        let last = e == self.config.epochs;
        if last || (self.config.checkpoint_every > 0 && e % self.config.checkpoint_every == 0) {
            let bytes = state.to_bytes()?;
            super::checkpoint::write_file(
                &self.dir.join(format!("ckpt_epoch{e:03}.lrgn")),
                &bytes,
            )?;
            super::checkpoint::write_file(&self.dir.join("latest.lrgn"), &bytes)?;
            self.write_samples(model, state)?;
        }
        if self.verbose {
            if let Some(r) = state.history.last() {
                let fl = r
                    .frechet_lite
                    .map(|v| format!(" frechet_lite {v:.4}"))
                    .unwrap_or_default();
                println!(
                    "epoch {e}/{}: d_loss {:.4} g_loss {:.4} color_loss {:.5}{fl}",
                    self.config.epochs, r.d_loss, r.g_loss, r.color_loss
                );
            }
        }
        Ok(())
    }
}
