//! Training loop, metrics log and checkpoints.
//!
//! Each step samples a batch of training views, runs the full pipeline in
//! `f32`, backpropagates into the parameter store and applies one Adam
//! update. Batch sampling and latent noise are derived from the run seed, so
//! a `(seed, config, dataset)` triple always produces the same run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slpt_core::diffcore::checkpoint::{load_params, save_params};
use slpt_core::diffcore::{adam_step, ParamStore, Tape};
use slpt_core::losses::LossBreakdown;
use slpt_core::model::{self, ModelConfig, SceneInput, View};
use slpt_core::plvae::SampleMode;
use slpt_core::{Error, Result};

use crate::config::TrainingConfig;
use crate::io::{read_json, write_json, Dataset};

/// Bumped whenever the metrics columns change.
pub const METRICS_VERSION: u32 = 1;
const METRICS_MARKER: &str = "# slpt-metrics v";

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub w_t: f64,
    pub l_render: f64,
    pub l_render_rgb: f64,
    pub l_render_depth: f64,
    pub l_render_sem: f64,
    pub l_recon: f64,
    pub l_vae: f64,
    pub l_kl: f64,
    pub l_total: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 11] = [
        "step",
        "w_t",
        "l_render",
        "l_render_rgb",
        "l_render_depth",
        "l_render_sem",
        "l_recon",
        "l_vae",
        "l_kl",
        "l_total",
        "wall_ms",
    ];

    fn new(step: usize, b: &LossBreakdown, wall_ms: f64) -> Self {
        Self {
            step,
            w_t: b.w_t,
            l_render: b.l_render,
            l_render_rgb: b.l_render_rgb,
            l_render_depth: b.l_render_depth,
            l_render_sem: b.l_render_sem,
            l_recon: b.l_recon,
            l_vae: b.l_vae,
            l_kl: b.l_kl,
            l_total: b.l_total,
            wall_ms,
        }
    }

    /// The row with the timing column cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

/// Streams rows to a versioned CSV file.
pub struct MetricsWriter {
    inner: csv::Writer<fs::File>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "{METRICS_MARKER}{METRICS_VERSION}")?;
        Ok(Self {
            inner: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics: {e}"))
}

/// Reads a metrics file written by [`MetricsWriter`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or_default();
    if first != format!("{METRICS_MARKER}{METRICS_VERSION}") {
        return Err(Error::Format(format!("metrics: unsupported version line `{first}`")));
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.iter().ne(MetricsRow::HEADER) {
        return Err(Error::Format(format!("metrics: unexpected header {header:?}")));
    }
    reader.deserialize().map(|r| r.map_err(csv_err)).collect()
}

// ---------------------------------------------------------------------------
// Checkpoints

/// JSON stored next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainingConfig,
    pub config_hash: String,
    pub step: usize,
}

pub struct Checkpoint {
    pub config: TrainingConfig,
    pub step: usize,
    pub params: ParamStore<f32>,
}

/// Writes `{dir}/{name}.slpt` (with optimiser moments) and `{dir}/{name}.json`.
pub fn save_checkpoint(
    dir: &Path,
    name: &str,
    params: &ParamStore<f32>,
    config: &TrainingConfig,
    step: usize,
) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.slpt"));
    save_params(&path, params, true)?;
    let meta = CheckpointMeta {
        config: config.clone(),
        config_hash: config.hash(),
        step,
    };
    write_json(path.with_extension("json"), &meta)?;
    Ok(path)
}

/// Loads a checkpoint and its sidecar, verifying the recorded config hash and
/// that every parameter has the shape the config implies.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let meta: CheckpointMeta = read_json(path.with_extension("json"))?;
    if meta.config.hash() != meta.config_hash {
        return Err(Error::Config(format!(
            "checkpoint config hash {} does not match its config",
            meta.config_hash
        )));
    }
    let params = load_params::<f32>(path)?;
    check_layout(&meta.config.model, &params)?;
    Ok(Checkpoint {
        config: meta.config,
        step: meta.step,
        params,
    })
}

/// Parameters must match, name for name and shape for shape, a fresh init.
pub fn check_layout(cfg: &ModelConfig, params: &ParamStore<f32>) -> Result<()> {
    let fresh = cfg.init_params::<f32>(0)?;
    for (name, e) in fresh.iter() {
        match params.value(name) {
            Some(v) if v.shape() == e.value.shape() => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    v.shape(),
                    e.value.shape()
                )))
            }
            None => return Err(Error::Config(format!("parameter `{name}` is missing"))),
        }
    }
    if params.len() != fresh.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, config implies {}",
            params.len(),
            fresh.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loop

/// Noise seed for the latent sample at `step`, independent of batch sampling.
pub fn noise_seed(seed: u64, step: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng.next_u64()
}

/// Fails with a config error when the dataset cannot feed the model.
pub fn check_dataset(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.sem_dim() != cfg.heads.s_sem {
        return Err(Error::Config(format!(
            "dataset semantic width {} differs from the model's {}",
            data.sem_dim(),
            cfg.heads.s_sem
        )));
    }
    if data.cloud.len() < cfg.codec.m_sparse {
        return Err(Error::Config(format!(
            "dataset has {} points, the model samples {}",
            data.cloud.len(),
            cfg.codec.m_sparse
        )));
    }
    Ok(())
}

/// Model state and everything needed to take optimisation steps.
pub struct Trainer {
    config: TrainingConfig,
    input: SceneInput<f32>,
    views: Vec<View<f32>>,
    train_views: Vec<usize>,
    params: ParamStore<f32>,
    batch_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Fresh parameters initialised from the config seed.
    pub fn new(config: &TrainingConfig, data: &Dataset) -> Result<Self> {
        let params = config.model.init_params(config.seed)?;
        Self::with_params(config, data, params)
    }

    pub fn with_params(config: &TrainingConfig, data: &Dataset, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        check_dataset(&config.model, data)?;
        check_layout(&config.model, &params)?;
        let train_views = data.train_indices();
        if config.batch_views > train_views.len() {
            return Err(Error::Config(format!(
                "batch of {} views from {} training views",
                config.batch_views,
                train_views.len()
            )));
        }
        let views = data
            .cameras
            .iter()
            .zip(&data.views)
            .map(|(camera, v)| View {
                camera: camera.clone(),
                target: v.target(),
            })
            .collect();
        Ok(Self {
            input: SceneInput::new(&data.cloud, &config.model.codec)?,
            config: config.clone(),
            views,
            train_views,
            params,
            batch_rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn into_params(self) -> ParamStore<f32> {
        self.params
    }

    pub fn input(&self) -> &SceneInput<f32> {
        &self.input
    }

    /// Ring indices of the next batch, ascending.
    fn sample_batch(&mut self) -> Vec<usize> {
        let mut picks: Vec<usize> = index::sample(&mut self.batch_rng, self.train_views.len(), self.config.batch_views)
            .into_iter()
            .map(|i| self.train_views[i])
            .collect();
        picks.sort_unstable();
        picks
    }

    /// One forward/backward/update; returns the losses before the update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = self.sample_batch();
        let views: Vec<&View<f32>> = batch.iter().map(|&k| &self.views[k]).collect();
        let sample = SampleMode::Stochastic {
            seed: noise_seed(self.config.seed, self.step),
        };
        let mut tape = Tape::new();
        let loss = model::training_loss(
            &mut tape,
            &self.params,
            &self.config.model,
            &self.input,
            &views,
            self.step,
            self.config.steps,
            sample,
        )?;
        tape.backward_into(loss.total, &mut self.params)?;
        adam_step(&mut self.params, &self.config.adam)?;
        self.step += 1;
        Ok(loss.breakdown)
    }
}

/// Result of a full run.
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
    pub params: ParamStore<f32>,
}

/// Trains for `config.steps` steps, writing `metrics.csv`, periodic
/// checkpoints `step_{n}` and a `final` checkpoint into `out`.
pub fn train(config: &TrainingConfig, data: &Dataset, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    let mut trainer = Trainer::new(config, data)?;
    let mut writer = MetricsWriter::create(out.join("metrics.csv"))?;
    let mut metrics = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let start = Instant::now();
        let losses = trainer.step()?;
        let row = MetricsRow::new(step, &losses, start.elapsed().as_secs_f64() * 1e3);
        writer.write(&row)?;
        metrics.push(row);
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
            save_checkpoint(out, &format!("step_{done}"), trainer.params(), config, done)?;
        }
    }
    let checkpoint = save_checkpoint(out, "final", trainer.params(), config, config.steps)?;
    Ok(TrainOutcome {
        metrics,
        checkpoint,
        params: trainer.into_params(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize) -> MetricsRow {
        MetricsRow {
            step,
            w_t: 0.5,
            l_render: 0.1,
            l_render_rgb: 0.2,
            l_render_depth: 0.3,
            l_render_sem: 0.4,
            l_recon: 1.0 / 3.0,
            l_vae: 0.0,
            l_kl: 1e-12,
            l_total: 7.0,
            wall_ms: 12.5,
        }
    }

    #[test]
    fn metrics_roundtrip_with_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&row(0)).unwrap();
        w.write(&row(1)).unwrap();
        drop(w);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# slpt-metrics v1"));
        assert_eq!(lines.next(), Some(MetricsRow::HEADER.join(",").as_str()));
        assert_eq!(read_metrics(&path).unwrap(), vec![row(0), row(1)]);
    }

    #[test]
    fn metrics_without_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "step,w_t\n0,1\n").unwrap();
        assert!(read_metrics(&path).is_err());
    }

    #[test]
    fn noise_seeds_differ_per_step() {
        let seeds: Vec<u64> = (0..50).map(|s| noise_seed(3, s)).collect();
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), seeds.len());
        assert_eq!(noise_seed(3, 7), noise_seed(3, 7));
        assert_ne!(noise_seed(3, 7), noise_seed(4, 7));
    }

    #[test]
    fn layout_mismatch_is_config_error() {
        let cfg = ModelConfig::default();
        let params = cfg.init_params::<f32>(1).unwrap();
        check_layout(&cfg, &params).unwrap();
        let mut other = cfg.clone();
        other.heads.k_feat = 8;
        assert!(matches!(check_layout(&other, &params), Err(Error::Config(_))));
        let mut no_vae = cfg.clone();
        no_vae.plvae_enabled = false;
        assert!(matches!(check_layout(&no_vae, &params), Err(Error::Config(_))));
    }
}
