mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use lrgan_core::eval::{
    embed_and_stats, frechet_distance, frechet_embedder, mean_symmetry_score, write_image,
};
use lrgan_core::gradsuite::{run_suite, TOLERANCE};
use lrgan_core::model::{LrmReplacement, Model};
use lrgan_core::tensor::{Real, Tensor};
use lrgan_core::trainer::{
    checkpoint, normal_tensor, rows, train, ArtifactWriter, Dataset, Precision, TrainState,
};
use lrgan_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use config::{load_images, parse_data_arg, RunConfig, EFFECTIVE_CONFIG};

#[derive(Parser)]
#[command(
    name = "lrgan",
    version,
    about = "Multi-stage GAN with long-range modules: train, sample, evaluate, ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, metrics.csv and sample grids.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write N images per stage from a checkpoint.
    Generate {
        /// Defaults to the effective config beside the checkpoint.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print Fréchet-lite against a dataset and the mean symmetry score.
    Eval {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// A folder of images, or `kind[:count[:seed]]`.
        #[arg(long)]
        data: String,
        /// Generated images; defaults to `train.eval_samples`.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one run per mode and seed and summarise final Fréchet-lite.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,no_meta,no_lrm,residual,self_attention"
        )]
        modes: Vec<String>,
        /// Defaults to `train.seed`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Defaults to `<out_dir>/ablate`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the 64-bit finite-difference suite.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Parameter counts of a checkpoint.
    Inspect {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            resume,
            out,
        } => cmd_train(&config, resume.as_deref(), out),
        Command::Generate {
            config,
            ckpt,
            n,
            seed,
            out,
        } => cmd_generate(config.as_deref(), &ckpt, n, seed, out),
        Command::Eval {
            config,
            ckpt,
            data,
            samples,
            seed,
        } => cmd_eval(config.as_deref(), &ckpt, &data, samples, seed),
        Command::Ablate {
            config,
            modes,
            seeds,
            out,
        } => cmd_ablate(&config, &modes, &seeds, out),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Inspect { config, ckpt } => cmd_inspect(config.as_deref(), &ckpt),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 1 } else { 2 })
        }
    }
}

fn header(cfg: &RunConfig) -> String {
    let (m, t) = (&cfg.model, &cfg.train);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "model: stages {} resolutions {:?} channels {:?} noise_dim {} metadata_dim {} use_metadata {} use_lrm {} lrm_resolution {} lrm_replacement {:?}",
        m.stages, m.resolutions, m.channels, m.noise_dim, m.metadata_dim, m.use_metadata, m.use_lrm, m.lrm_resolution, m.lrm_replacement
    );
    let _ = writeln!(
        s,
        "train: epochs {} batch {} lr {} lambda1 {} lambda2 {} lambda3 {} seed {} precision {:?}",
        t.epochs, t.batch, t.lr, t.lambda1, t.lambda2, t.lambda3, t.seed, t.precision
    );
    let _ = write!(
        s,
        "data: {} count {} seed {} -> {}",
        cfg.data.kind,
        cfg.data.count,
        cfg.data.seed,
        cfg.out_dir.display()
    );
    s
}

/// Metadata rows for `n` samples, drawn from the dataset table.
fn sample_meta<T: Real>(data: &Dataset<T>, rng: &mut ChaCha8Rng, n: usize) -> Option<Tensor<T>> {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
    data.meta_batch(&idx)
}

const GRID_META_SALT: u64 = 0x9e1d_0001;

struct RunSummary {
    final_frechet: Option<f64>,
    first_frechet: Option<f64>,
    report: lrgan_core::model::ParamReport,
}

fn run_training<T: Real>(
    cfg: &RunConfig,
    resume: Option<&Path>,
    verbose: bool,
) -> Result<RunSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(EFFECTIVE_CONFIG), cfg.to_json())?;
    let (model, mut state) = TrainState::<T>::init(&cfg.model, &cfg.train)?;
    let data = Dataset::prepare(
        cfg.load_images::<T>()?,
        &cfg.model,
        cfg.metadata()?.as_ref(),
    )?;
    if let Some(path) = resume {
        state = TrainState::load(path, &model, &cfg.train)?;
        if verbose {
            println!("resumed from {} at epoch {}", path.display(), state.epoch);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ GRID_META_SALT);
    let grid_meta = sample_meta(&data, &mut rng, ArtifactWriter::<T>::grid_size());
    let mut writer = ArtifactWriter::new(&cfg.out_dir, &model, &cfg.train, &state, grid_meta)?;
    writer.verbose = verbose;
    train(&cfg.train, &model, &data, &mut state, &mut writer)?;
    let fl: Vec<f64> = state
        .history
        .iter()
        .filter_map(|r| r.frechet_lite)
        .collect();
    Ok(RunSummary {
        final_frechet: fl.last().copied(),
        first_frechet: fl.first().copied(),
        report: model.param_report(&state.g_params, &state.d_params),
    })
}

fn train_any(cfg: &RunConfig, resume: Option<&Path>, verbose: bool) -> Result<RunSummary> {
    match cfg.train.precision {
        Precision::F32 => run_training::<f32>(cfg, resume, verbose),
        Precision::F64 => run_training::<f64>(cfg, resume, verbose),
    }
}

fn cmd_train(path: &Path, resume: Option<&Path>, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    println!("{}", header(&cfg));
    let start = Instant::now();
    let s = train_any(&cfg, resume, true)?;
    if let Some(f) = s.final_frechet {
        println!("final frechet_lite {f:.6}");
    }
    println!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

fn config_for(config: Option<&Path>, ckpt: &Path) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p),
        None => RunConfig::beside(ckpt),
    }
}

/// A model and its generator state restored from a checkpoint.
struct Restored<T> {
    cfg: RunConfig,
    model: Model,
    state: TrainState<T>,
}

fn restore<T: Real>(cfg: RunConfig, raw: &checkpoint::RawCheckpoint) -> Result<Restored<T>> {
    let (model, _) = TrainState::<T>::init(&cfg.model, &cfg.train)?;
    let state = TrainState::from_raw(raw, &model, &cfg.train)?;
    Ok(Restored { cfg, model, state })
}

/// `n` samples per stage, grouped by stage.
fn sample<T: Real>(r: &Restored<T>, n: usize, seed: u64) -> Result<Vec<Vec<Tensor<T>>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal_tensor::<T>(&mut rng, vec![n, r.model.config.noise_dim]);
    let meta = if r.model.config.use_metadata {
        let data = Dataset::prepare(
            r.cfg.load_images::<T>()?,
            &r.cfg.model,
            r.cfg.metadata()?.as_ref(),
        )?;
        sample_meta(&data, &mut rng, n)
    } else {
        None
    };
    let mut out = vec![Vec::with_capacity(n); r.model.config.stages];
    for start in (0..n).step_by(50) {
        let end = (start + 50).min(n);
        let z = rows(&noise, start, end)?;
        let m = meta.as_ref().map(|m| rows(m, start, end)).transpose()?;
        for (k, batch) in r
            .model
            .generate(&r.state.g_params, &z, m.as_ref())?
            .into_iter()
            .enumerate()
        {
            out[k].extend((0..end - start).map(|i| batch.select(i)));
        }
    }
    Ok(out)
}

fn write_samples<T: Real>(r: &Restored<T>, n: usize, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for (k, images) in sample(r, n, seed)?.iter().enumerate() {
        for (i, img) in images.iter().enumerate() {
            write_image(img, &out.join(format!("stage{}_{i:04}.ppm", k + 1)))?;
        }
    }
    Ok(())
}

fn cmd_generate(
    config: Option<&Path>,
    ckpt: &Path,
    n: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    if n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let cfg = config_for(config, ckpt)?;
    let out = out.unwrap_or_else(|| {
        ckpt.parent()
            .unwrap_or(Path::new("."))
            .join(format!("generated_seed{seed}"))
    });
    let start = Instant::now();
    let raw = checkpoint::read_file(ckpt)?;
    match raw.dtype {
        2 => write_samples(&restore::<f64>(cfg, &raw)?, n, seed, &out)?,
        _ => write_samples(&restore::<f32>(cfg, &raw)?, n, seed, &out)?,
    }
    println!(
        "generated {n} images per stage into {} in {:.3}s",
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

fn evaluate<T: Real>(r: &Restored<T>, data: &str, samples: usize, seed: u64) -> Result<()> {
    let (kind, path, count, dseed) = parse_data_arg(data)?;
    let res = r.model.config.top_resolution();
    let reference: Vec<Tensor<T>> = load_images(&kind, path.as_deref(), count, dseed, res)?;
    let fake = sample(r, samples, seed)?.pop().expect("at least one stage");
    let e = frechet_embedder(res)?;
    let fl = frechet_distance(
        &embed_and_stats(&fake, &e)?,
        &embed_and_stats(&reference, &e)?,
    )?;
    println!("epoch {}", r.state.epoch);
    println!("frechet_lite {fl:.6}");
    println!("symmetry_score {:.6}", mean_symmetry_score(&fake)?);
    println!(
        "reference_symmetry_score {:.6}",
        mean_symmetry_score(&reference)?
    );
    Ok(())
}

fn cmd_eval(
    config: Option<&Path>,
    ckpt: &Path,
    data: &str,
    samples: Option<usize>,
    seed: u64,
) -> Result<ExitCode> {
    let cfg = config_for(config, ckpt)?;
    let samples = samples.unwrap_or(cfg.train.eval_samples);
    if samples < 2 {
        return Err(Error::Usage("--samples must be at least 2".into()));
    }
    let raw = checkpoint::read_file(ckpt)?;
    match raw.dtype {
        2 => evaluate(&restore::<f64>(cfg, &raw)?, data, samples, seed)?,
        _ => evaluate(&restore::<f32>(cfg, &raw)?, data, samples, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// Applies one ablation mode; each differs from `full` by a single flag.
fn apply_mode(cfg: &mut RunConfig, mode: &str) -> Result<()> {
    let m = &mut cfg.model;
    match mode {
        "full" => {}
        "no_meta" => m.use_metadata = false,
        "no_lrm" => m.use_lrm = false,
        "residual" => m.lrm_replacement = LrmReplacement::Residual,
        "self_attention" => m.lrm_replacement = LrmReplacement::SelfAttention,
        other => {
            return Err(Error::Config(format!(
                "--modes: unknown mode `{other}` (expected full, no_meta, no_lrm, residual, self_attention)"
            )))
        }
    }
    cfg.validate()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn cmd_ablate(
    path: &Path,
    modes: &[String],
    seeds: &[u64],
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let base = RunConfig::load(path)?;
    let seeds = if seeds.is_empty() {
        vec![base.train.seed]
    } else {
        seeds.to_vec()
    };
    let root = out.unwrap_or_else(|| base.out_dir.join("ablate"));
    let mut configs = Vec::new();
    for mode in modes {
        for &seed in &seeds {
            let mut cfg = base.clone();
            apply_mode(&mut cfg, mode)?;
            cfg.train.seed = seed;
            cfg.out_dir = root.join(mode).join(format!("seed{seed}"));
            configs.push((mode.as_str(), seed, cfg));
        }
    }
    println!("{}", header(&base));
    std::fs::create_dir_all(&root)?;
    let mut csv =
        String::from("mode,seed,g_params,slot_params,frechet_epoch1,frechet_final,ratio\n");
    let mut finals: Vec<(&str, Vec<f64>)> =
        modes.iter().map(|m| (m.as_str(), Vec::new())).collect();
    for (mode, seed, cfg) in &configs {
        let start = Instant::now();
        let s = train_any(cfg, None, false)?;
        let ratio = s.final_frechet.zip(s.first_frechet).map(|(f, i)| f / i);
        println!(
            "{mode:<15} seed {seed:<3} G {:>8} slot {:>6} frechet epoch1 {} final {} ratio {} ({:.0}s)",
            s.report.generator,
            s.report.slot,
            fmt_opt(s.first_frechet),
            fmt_opt(s.final_frechet),
            fmt_opt(ratio),
            start.elapsed().as_secs_f64()
        );
        let _ = writeln!(
            csv,
            "{mode},{seed},{},{},{},{},{}",
            s.report.generator,
            s.report.slot,
            fmt_opt(s.first_frechet),
            fmt_opt(s.final_frechet),
            fmt_opt(ratio)
        );
        if let (Some(f), Some(e)) = (s.final_frechet, finals.iter_mut().find(|(m, _)| m == mode)) {
            e.1.push(f);
        }
    }
    std::fs::write(root.join("summary.csv"), &csv)?;
    println!("\n{:<15} {:>14}", "mode", "median final");
    for (mode, v) in finals {
        println!("{mode:<15} {:>14}", fmt_opt(median(v)));
    }
    println!("summary written to {}", root.join("summary.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64) -> Result<ExitCode> {
    let start = Instant::now();
    let results = run_suite(seed)?;
    let mut failed = 0;
    println!(
        "{:<24} {:>5} {:>8} {:>12}",
        "check", "cases", "entries", "max_rel_err"
    );
    for r in &results {
        let mark = if r.passed() { "" } else { "  FAIL" };
        println!(
            "{:<24} {:>5} {:>8} {:>12.3e}{mark}",
            r.name, r.cases, r.entries, r.max_rel_error
        );
        failed += usize::from(!r.passed());
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} checks, max relative error {worst:.3e} (tolerance {TOLERANCE:e}), {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        eprintln!("{failed} checks exceeded the tolerance");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn print_report<T: Real>(r: &Restored<T>) {
    let rep = r.model.param_report(&r.state.g_params, &r.state.d_params);
    println!("epoch {}  precision {}", r.state.epoch, T::NAME);
    println!("{:<28} {:>10}", "component", "params");
    for (name, n) in rep.rows() {
        println!("{name:<28} {n:>10}");
    }
    let share = 100.0 * rep.slot as f64 / rep.generator.max(1) as f64;
    println!("slot ({:?}) share of generator: {share:.2}%", rep.slot_kind);
}

fn cmd_inspect(config: Option<&Path>, ckpt: &Path) -> Result<ExitCode> {
    let cfg = config_for(config, ckpt)?;
    let raw = checkpoint::read_file(ckpt)?;
    match raw.dtype {
        2 => print_report(&restore::<f64>(cfg, &raw)?),
        _ => print_report(&restore::<f32>(cfg, &raw)?),
    }
    Ok(ExitCode::SUCCESS)
}
