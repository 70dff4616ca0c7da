//! Adversarial training: model wiring, the alternating update step, the
//! training loop with its logs and checkpoints, and checkpoint restore.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use tch::{nn, Device, Kind, Tensor};

use crate::adversary::{
    area_loss, compose_losses, concentration_loss, discriminator_gan_loss, generator_gan_loss, r1_gradient_penalty,
    Discriminator, LossReport, LossTerms, LossWeights,
};
use crate::checkpoint::{collect_vars, load_archive, restore_vars, save_archive, CheckpointMeta, CHECKPOINT_VERSION};
use crate::config::TrainConfig;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::fields::MarginGrid;
use crate::image::{Generator, GeneratorOutput};
use crate::imageio;
use crate::latent::{derive_seed, LatentBatch};
use crate::nn_util::init_var_store;
use crate::optim::Adam;

const STREAM_D: u64 = 1;
const STREAM_G: u64 = 2;
const STREAM_SAMPLE: u64 = 3;

/// Generator and discriminator with their variable stores.
#[derive(Debug)]
pub struct GanModel {
    pub cfg: TrainConfig,
    pub seed: u64,
    pub gen_vs: nn::VarStore,
    pub disc_vs: nn::VarStore,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl GanModel {
    /// Validates `cfg`, wires the variant it selects and initializes all weights from `seed`.
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        for warning in cfg.validate()? {
            log::warn!("{warning}");
        }
        let gen_vs = nn::VarStore::new(Device::Cpu);
        let disc_vs = nn::VarStore::new(Device::Cpu);
        let generator = Generator::new(gen_vs.root() / "gen", cfg)?;
        let discriminator = Discriminator::new(disc_vs.root() / "disc", cfg);
        init_var_store(&gen_vs, derive_seed(&[seed, 0x9e4]));
        init_var_store(&disc_vs, derive_seed(&[seed, 0xd15c]));
        Ok(Self { cfg: cfg.clone(), seed, gen_vs, disc_vs, generator, discriminator })
    }

    /// Generator forward pass. Inference mode (`train = false`) uses frozen normalization statistics.
    pub fn generate(&self, latents: &LatentBatch, train: bool) -> Result<GeneratorOutput> {
        self.generator.forward(latents, train)
    }

    /// Inference-mode samples for latents derived from `(seed, stream)`.
    pub fn sample(&self, seed: u64, stream: u64, n: usize) -> Result<GeneratorOutput> {
        let latents = LatentBatch::sample(&self.cfg, seed, stream, n, Kind::Float, Device::Cpu);
        tch::no_grad(|| self.generate(&latents, false))
    }

    pub fn parameter_count(&self) -> (i64, i64) {
        let count = |vs: &nn::VarStore| vs.trainable_variables().iter().map(|t| t.numel() as i64).sum();
        (count(&self.gen_vs), count(&self.disc_vs))
    }
}

/// Everything the loop mutates.
#[derive(Debug)]
pub struct TrainState {
    pub model: GanModel,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed generator updates.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = GanModel::new(cfg, cfg.seed)?;
        let opt_g = Adam::new(&model.gen_vs, cfg.lr_g, cfg.beta1, cfg.beta2);
        let opt_d = Adam::new(&model.disc_vs, cfg.lr_d, cfg.beta1, cfg.beta2);
        Ok(Self { model, opt_g, opt_d, step: 0 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            kind: "gan".into(),
            config: serde_json::to_value(&self.model.cfg)?,
            step: self.step,
            seed: self.model.seed,
            extra: serde_json::json!({ "config_hash": self.model.cfg.hash() }),
        };
        let mut tensors = collect_vars(&self.model.gen_vs, "gen/");
        tensors.extend(collect_vars(&self.model.disc_vs, "disc/"));
        tensors.extend(self.opt_g.state_tensors("opt_g/"));
        tensors.extend(self.opt_d.state_tensors("opt_d/"));
        save_archive(path, &meta, &tensors)
    }

    /// Restores a state saved by [`TrainState::save`], including optimizer moments and the step counter.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = load_archive(path)?;
        let cfg = config_from_meta(&meta)?;
        let mut state = Self::new(&cfg)?;
        state.model.seed = meta.seed;
        restore_vars(&state.model.gen_vs, "gen/", &tensors)?;
        restore_vars(&state.model.disc_vs, "disc/", &tensors)?;
        state.opt_g.load_state("opt_g/", &tensors)?;
        state.opt_d.load_state("opt_d/", &tensors)?;
        state.step = meta.step;
        Ok(state)
    }
}

fn config_from_meta(meta: &CheckpointMeta) -> Result<TrainConfig> {
    if meta.kind != "gan" {
        return Err(Error::Checkpoint(format!("expected a generator checkpoint, found `{}`", meta.kind)));
    }
    Ok(serde_json::from_value(meta.config.clone())?)
}

/// Loads only the model from a training checkpoint.
pub fn load_model(path: &Path) -> Result<(GanModel, CheckpointMeta)> {
    let (meta, tensors) = load_archive(path)?;
    let cfg = config_from_meta(&meta)?;
    let model = GanModel::new(&cfg, meta.seed)?;
    restore_vars(&model.gen_vs, "gen/", &tensors)?;
    restore_vars(&model.disc_vs, "disc/", &tensors)?;
    Ok((model, meta))
}

/// Concentration and area terms for one generator output; zero when no geometry exists.
pub fn regularizers(out: &GeneratorOutput, cfg: &TrainConfig) -> Result<(Tensor, Tensor)> {
    let parts = out.masks.parts();
    let zero = || Tensor::zeros([], (parts.kind(), parts.device()));
    match (&out.layout.geometry, &out.heatmaps) {
        (Some(geom), Some(hm)) => {
            let res = cfg.image_size();
            let grid = MarginGrid::square(res, cfg.margin_px)?;
            let coords = grid.interior_coords(parts.kind(), parts.device());
            let con = concentration_loss(&parts, &geom.centers, &coords)?;
            let area = area_loss(hm, &parts)?;
            Ok((con, area))
        }
        _ => Ok((zero(), zero())),
    }
}

/// One discriminator phase (`d_updates_per_g` updates) followed by one generator update.
pub fn training_step(state: &mut TrainState, dataset: &Dataset) -> Result<LossReport> {
    let cfg = state.model.cfg.clone();
    let weights = LossWeights::from_config(&cfg);
    let seed = state.model.seed;
    let step = state.step;
    let mut d_terms = (Tensor::zeros([], (Kind::Float, Device::Cpu)), Tensor::zeros([], (Kind::Float, Device::Cpu)));
    for r in 0..cfg.d_updates_per_g as u64 {
        let sub = step * cfg.d_updates_per_g as u64 + r;
        let real = dataset.batch(&dataset.sample_indices(seed, sub, cfg.batch_size), Kind::Float);
        let latents = LatentBatch::sample(&cfg, seed, derive_seed(&[STREAM_D, sub]), cfg.batch_size, Kind::Float, Device::Cpu);
        let fake = tch::no_grad(|| state.model.generate(&latents, true))?.image;
        let disc = &state.model.discriminator;
        let d_gan = discriminator_gan_loss(&disc.logits(&real), &disc.logits(&fake));
        let gp = if weights.gp > 0.0 {
            r1_gradient_penalty(|x| Ok(disc.logits(x)), &real)?
        } else {
            Tensor::zeros([], (Kind::Float, Device::Cpu))
        };
        let d_total = &d_gan + &gp * weights.gp;
        check_finite(&d_total, "d_total", step)?;
        state.opt_d.minimize(&d_total)?;
        d_terms = (d_gan.detach(), gp.detach());
    }

    let latents = LatentBatch::sample(&cfg, seed, derive_seed(&[STREAM_G, step]), cfg.batch_size, Kind::Float, Device::Cpu);
    let out = state.model.generate(&latents, true)?;
    let g_gan = generator_gan_loss(&state.model.discriminator.logits(&out.image));
    let (con, area) = regularizers(&out, &cfg)?;
    let terms = LossTerms { g_gan, d_gan: d_terms.0, gp: d_terms.1, con, area };
    let (g_total, _, report) = compose_losses(&terms, weights, step);
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}: {}", report.to_json_line())));
    }
    state.opt_g.minimize(&g_total)?;
    // Discriminator gradients from the generator loss are discarded by construction:
    // each optimizer differentiates only with respect to its own parameters.
    state.step += 1;
    Ok(report)
}

fn check_finite(t: &Tensor, what: &str, step: u64) -> Result<()> {
    let v = t.double_value(&[]);
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at step {step}")))
    }
}

/// Where and how often the loop writes artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Run directory for `losses.jsonl`, checkpoints and sample grids; nothing is written when absent.
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoint.pt"))
    }
}

/// Runs generator updates until `cfg.total_updates`, starting from `state`
/// (fresh or resumed). Aborts on a non-finite loss after writing `diagnostic.pt`.
pub fn train_gan_from(
    mut state: TrainState,
    dataset: &Dataset,
    outputs: &TrainOutputs,
    mut on_report: impl FnMut(&LossReport),
) -> Result<TrainState> {
    let cfg = state.model.cfg.clone();
    if dataset.len() < cfg.batch_size {
        return Err(Error::Dataset(format!("{} images cannot fill a batch of {}", dataset.len(), cfg.batch_size)));
    }
    if dataset.len() < 5000 {
        log::warn!("only {} training images; results degrade on small datasets", dataset.len());
    }
    if dataset.resolution() != cfg.image_size() {
        return Err(Error::Dataset(format!(
            "dataset resolution {} differs from the generator output {}",
            dataset.resolution(),
            cfg.image_size()
        )));
    }
    let mut log_file = match &outputs.dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let append = state.step > 0;
            Some(OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(dir.join("losses.jsonl"))?)
        }
        None => None,
    };
    while state.step < cfg.total_updates as u64 {
        let report = match training_step(&mut state, dataset) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                if let Some(dir) = &outputs.dir {
                    state.save(&dir.join("diagnostic.pt"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", report.to_json_line())?;
        }
        on_report(&report);
        let done = state.step as usize;
        if cfg.log_every > 0 && done % cfg.log_every == 0 {
            log::info!(
                "step {done}: g_total {:.4} d_total {:.4} con {:.4} area {:.4} gp {:.4}",
                report.g_total,
                report.d_total,
                report.con,
                report.area,
                report.gp
            );
        }
        if let Some(dir) = &outputs.dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                state.save(&dir.join("checkpoint.pt"))?;
            }
            if cfg.sample_every > 0 && done % cfg.sample_every == 0 {
                write_sample_grid(&state.model, &dir.join(format!("samples_{done:06}.png")), 8)?;
            }
        }
    }
    if let Some(path) = outputs.checkpoint_path() {
        state.save(&path)?;
    }
    Ok(state)
}

/// Fresh training run from `cfg`.
pub fn train_gan(
    cfg: &TrainConfig,
    dataset: &Dataset,
    outputs: &TrainOutputs,
    on_report: impl FnMut(&LossReport),
) -> Result<TrainState> {
    train_gan_from(TrainState::new(cfg)?, dataset, outputs, on_report)
}

/// Images, argmax masks and part centers of `n` fixed-seed samples.
pub fn write_sample_grid(model: &GanModel, path: &Path, n: usize) -> Result<()> {
    let out = model.sample(model.seed, STREAM_SAMPLE, n)?;
    let centers = out.layout.geometry.as_ref().map(|g| &g.centers);
    let grid = imageio::sample_grid(&out.image, Some(&out.masks.probs), centers)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    grid.save(path)?;
    Ok(())
}

/// Describes the wiring of `cfg` as sorted `(name, shape)` pairs.
pub fn apply_ablation(cfg: &TrainConfig) -> Result<Vec<(String, Vec<i64>)>> {
    let model = GanModel::new(cfg, 0)?;
    Ok(crate::nn_util::structure(&model.gen_vs))
}

/// Tensors of a checkpoint by name, for inspection.
pub fn checkpoint_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    Ok(load_archive(path)?.1)
}
