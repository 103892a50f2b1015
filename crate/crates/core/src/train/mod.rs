//! Training loop, evaluation, checkpoint conversion and the verification
//! and analysis tasks built on it.

pub mod dirfit;
pub mod dirmap;
pub mod gradcheck;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Tape};
use crate::encoding::{Aabb, HashGridConfig};
use crate::error::{Error, Result};
use crate::pipeline::{view_directions_on_tape, Modulator, ParamKind, PipelineConfig};
use crate::render::metrics::{loss, loss_with_grad, psnr, LossTerms};
use crate::render::{render, render_backward, Camera, Gaussian, Image, Modulation, RenderOptions, GAUSSIAN_PARAMS};
use crate::scene_io::checkpoint::{Checkpoint, GroupState};
use crate::scene_io::config::RunConfig;
use crate::scene_io::image_io::MetricsRow;
use crate::scene_io::scene::SceneFile;
use crate::scene_io::synthetic::SyntheticDataset;

/// Gaussian parameter groups as `(name, offset, width)` within a flat record.
pub const GAUSSIAN_GROUPS: [(&str, usize, usize); 5] =
    [("gaussian.mu", 0, 3), ("gaussian.rot", 3, 4), ("gaussian.log_scale", 7, 3), ("gaussian.opacity", 10, 1), ("gaussian.sh", 11, 48)];

/// Stream of the training RNG; model initialization uses stream 0.
const TRAIN_STREAM: u64 = 1;

/// Modulator configuration described by a run configuration.
pub fn pipeline_config(run: &RunConfig, bounds: Aabb) -> PipelineConfig {
    let grid = |bounds| HashGridConfig {
        num_levels: run.hash_levels,
        features_per_level: run.hash_features,
        table_size: 1usize << run.hash_table_log2,
        base_resolution: run.hash_base_resolution,
        max_resolution: run.hash_max_resolution,
        bounds,
    };
    PipelineConfig {
        kind: run.pipeline,
        ansatz_layers: run.ansatz_layers,
        modulation: run.modulation,
        spatial_grid: grid(bounds),
        direction_grid: grid(Aabb::unit()),
        hidden: run.hidden,
        proj_hidden: run.proj_hidden,
        dropout: run.dropout,
    }
}

/// SH degree used for the base color.
pub fn sh_degree(run: &RunConfig) -> usize {
    if run.baseline {
        3
    } else {
        run.modulation.sh_degree()
    }
}

/// Analytic loss gradients for one view.
#[derive(Clone, Debug)]
pub struct StepGrads {
    pub terms: LossTerms,
    /// `n x 59`, flat records.
    pub gaussians: Vec<f64>,
    /// One vector per modulator group.
    pub modulator: Vec<Vec<f64>>,
}

/// Renders one view, evaluates the loss and backpropagates through the
/// renderer and, when present, the modulator.
pub fn loss_and_grads(
    scene: &[Gaussian],
    modulator: Option<&Modulator>,
    cam: &Camera,
    target: &Image,
    opts: &RenderOptions,
    lambda: f64,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<StepGrads> {
    let n = scene.len();
    let mut tape = Tape::new();
    let recorded = match modulator {
        Some(m) => {
            let mu = tape.param(n, 3, scene.iter().flat_map(|g| g.mu).collect());
            let p = cam.position;
            let dirs = view_directions_on_tape(&mut tape, mu, [p.x, p.y, p.z])?;
            let vars = m.record(&mut tape, mu, dirs, dropout_rng)?;
            let modulation = m.mode().to_modulation(n, tape.value(vars.factors))?;
            Some((mu, vars, modulation, m.mode()))
        }
        None => None,
    };
    let identity = Modulation::identity();
    let modulation = recorded.as_ref().map(|r| &r.2).unwrap_or(&identity);
    let img = render(scene, cam, modulation, opts)?;
    let (terms, dimg) = loss_with_grad(&img.rgb, target, lambda)?;
    let rg = render_backward(scene, cam, modulation, opts, &dimg)?;
    let mut gaussians = rg.gaussians.clone();
    let mut mod_grads = Vec::new();
    if let Some((mu, vars, _, mode)) = &recorded {
        let seed = mode.factor_grads(n, &rg);
        let mut g = tape.backward(&[(vars.factors, &seed)]);
        let gmu = g.take(*mu);
        for i in 0..n {
            for a in 0..3 {
                gaussians[i * GAUSSIAN_PARAMS + a] += gmu[3 * i + a];
            }
        }
        mod_grads = vars.params.iter().map(|&p| g.take(p)).collect();
    }
    Ok(StepGrads { terms, gaussians, modulator: mod_grads })
}

/// Loss of one view without gradients or dropout.
pub fn view_loss(scene: &[Gaussian], modulator: Option<&Modulator>, cam: &Camera, target: &Image, opts: &RenderOptions, lambda: f64) -> Result<LossTerms> {
    let img = render_view(scene, modulator, cam, opts)?;
    loss(&img, target, lambda)
}

/// Rendered image of a (possibly modulated) scene.
pub fn render_view(scene: &[Gaussian], modulator: Option<&Modulator>, cam: &Camera, opts: &RenderOptions) -> Result<Image> {
    let modulation = match modulator {
        Some(m) => {
            let mu: Vec<[f64; 3]> = scene.iter().map(|g| g.mu).collect();
            let p = cam.position;
            m.modulation(&mu, [p.x, p.y, p.z])?
        }
        None => Modulation::identity(),
    };
    Ok(render(scene, cam, &modulation, opts)?.rgb)
}

/// Training views.
#[derive(Clone, Debug)]
pub struct Views {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub background: [f64; 3],
}

impl Views {
    pub fn from_dataset(d: &SyntheticDataset) -> Self {
        Self { cameras: d.cameras.clone(), images: d.images.clone(), background: d.render_options().background }
    }
}

/// Mean metrics over a set of views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub loss: f64,
}

/// Optimizer state and model for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    bounds: Aabb,
    scene: Vec<Gaussian>,
    modulator: Option<Modulator>,
    adam: Vec<AdamState>,
    names: Vec<String>,
    rng: ChaCha8Rng,
    step: u64,
    views: Views,
}

fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    rng
}

impl Trainer {
    /// Starts from the dataset's geometry with all SH coefficients zeroed
    /// (a flat grey appearance) and a freshly initialized modulator.
    pub fn new(config: RunConfig, dataset: &SyntheticDataset) -> Result<Self> {
        let mut scene = dataset.scene.gaussians.clone();
        for g in &mut scene {
            g.sh = [0.0; crate::render::sh::SH_LEN];
        }
        Self::from_scene(config, SceneFile { bounds: dataset.scene.bounds, gaussians: scene }, Views::from_dataset(dataset))
    }

    /// Starts from an explicit scene.
    pub fn from_scene(config: RunConfig, scene: SceneFile, views: Views) -> Result<Self> {
        config.validate()?;
        if views.cameras.is_empty() || views.cameras.len() != views.images.len() {
            return Err(Error::Config("training needs at least one view with one image per camera".into()));
        }
        let modulator = if config.baseline {
            None
        } else {
            let mut init = ChaCha8Rng::seed_from_u64(config.seed);
            Some(Modulator::new(pipeline_config(&config, scene.bounds), &mut init)?)
        };
        let mut t = Self {
            bounds: scene.bounds,
            scene: scene.gaussians,
            modulator,
            adam: Vec::new(),
            names: Vec::new(),
            rng: train_rng(config.seed),
            step: 0,
            views,
            config,
        };
        t.reset_optimizer();
        Ok(t)
    }

    fn reset_optimizer(&mut self) {
        let n = self.scene.len();
        let c = &self.config;
        let lrs = [c.lr_position, c.lr_rotation, c.lr_scale, c.lr_opacity, c.lr_sh];
        self.names = GAUSSIAN_GROUPS.iter().map(|g| g.0.to_string()).collect();
        self.adam = GAUSSIAN_GROUPS.iter().zip(lrs).map(|(g, lr)| AdamState::new(n * g.2, lr)).collect();
        if let Some(m) = &self.modulator {
            for g in m.groups() {
                let lr = match g.kind {
                    ParamKind::Hash => c.lr_hash,
                    ParamKind::Network => c.lr_network,
                    ParamKind::Quantum => c.lr_quantum,
                };
                self.names.push(g.name.to_string());
                self.adam.push(AdamState::new(g.rows * g.cols, lr));
            }
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn scene(&self) -> &[Gaussian] {
        &self.scene
    }

    pub fn scene_file(&self) -> SceneFile {
        SceneFile { bounds: self.bounds, gaussians: self.scene.clone() }
    }

    pub fn modulator(&self) -> Option<&Modulator> {
        self.modulator.as_ref()
    }

    pub fn views(&self) -> &Views {
        &self.views
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { sh_degree: sh_degree(&self.config), background: self.views.background }
    }

    /// One optimization step on a randomly drawn view.
    pub fn step(&mut self) -> Result<LossTerms> {
        let view = self.rng.gen_range(0..self.views.cameras.len());
        let opts = self.render_options();
        let dropout: Option<&mut dyn RngCore> = if self.modulator.is_some() { Some(&mut self.rng) } else { None };
        let grads = loss_and_grads(
            &self.scene,
            self.modulator.as_ref(),
            &self.views.cameras[view],
            &self.views.images[view],
            &opts,
            self.config.lambda,
            dropout,
        )?;
        if !grads.terms.loss.is_finite() {
            return Err(Error::NonFiniteLoss(self.step));
        }
        self.apply(&grads);
        self.step += 1;
        Ok(grads.terms)
    }

    /// Learning-rate multiplier at the current step.
    pub fn lr_scale(&self) -> f64 {
        if self.config.iters == 0 {
            return 1.0;
        }
        let t = (self.step as f64 / self.config.iters as f64).min(1.0);
        self.config.lr_decay.powf(t)
    }

    fn apply(&mut self, grads: &StepGrads) {
        let n = self.scene.len();
        let scale = self.lr_scale();
        let base: Vec<f64> = self.adam.iter().map(|a| a.lr).collect();
        for a in &mut self.adam {
            a.lr *= scale;
        }
        for (gi, &(name, offset, width)) in GAUSSIAN_GROUPS.iter().enumerate() {
            let mut values = Vec::with_capacity(n * width);
            let mut g = Vec::with_capacity(n * width);
            for (i, gauss) in self.scene.iter().enumerate() {
                values.extend_from_slice(&gauss.to_flat()[offset..offset + width]);
                g.extend_from_slice(&grads.gaussians[i * GAUSSIAN_PARAMS + offset..i * GAUSSIAN_PARAMS + offset + width]);
            }
            if !self.adam[gi].step(&mut values, &g) {
                log::warn!("step {}: non-finite gradient in {name}, update skipped", self.step);
                continue;
            }
            for (i, gauss) in self.scene.iter_mut().enumerate() {
                let mut flat = gauss.to_flat();
                flat[offset..offset + width].copy_from_slice(&values[i * width..(i + 1) * width]);
                *gauss = Gaussian::from_flat(&flat);
            }
        }
        if let Some(m) = &mut self.modulator {
            for (k, values) in m.group_values_mut().into_iter().enumerate() {
                let idx = GAUSSIAN_GROUPS.len() + k;
                if !self.adam[idx].step(values, &grads.modulator[k]) {
                    log::warn!("step {}: non-finite gradient in {}, update skipped", self.step, self.names[idx]);
                }
            }
        }
        for (a, lr) in self.adam.iter_mut().zip(base) {
            a.lr = lr;
        }
    }

    pub fn render_view(&self, cam: &Camera) -> Result<Image> {
        render_view(&self.scene, self.modulator.as_ref(), cam, &self.render_options())
    }

    /// Mean metrics over all training views, without dropout.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let opts = self.render_options();
        let k = self.views.cameras.len() as f64;
        let mut e = Evaluation { psnr: 0.0, ssim: 0.0, l1: 0.0, loss: 0.0 };
        for (cam, target) in self.views.cameras.iter().zip(&self.views.images) {
            let img = render_view(&self.scene, self.modulator.as_ref(), cam, &opts)?;
            let t = loss(&img, target, self.config.lambda)?;
            e.psnr += psnr(&img, target)? / k;
            e.ssim += t.ssim / k;
            e.l1 += t.l1 / k;
            e.loss += t.loss / k;
        }
        Ok(e)
    }

    pub fn metrics_row(&self) -> Result<MetricsRow> {
        let e = self.evaluate()?;
        Ok(MetricsRow { step: self.step, psnr: e.psnr, ssim: e.ssim, l1: e.l1, loss: e.loss })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut values: Vec<Vec<f64>> = GAUSSIAN_GROUPS
            .iter()
            .map(|&(_, offset, width)| self.scene.iter().flat_map(|g| g.to_flat()[offset..offset + width].to_vec()).collect())
            .collect();
        if let Some(m) = &self.modulator {
            values.extend(m.group_values().into_iter().map(|v| v.to_vec()));
        }
        let groups = self
            .names
            .iter()
            .zip(&self.adam)
            .zip(values)
            .map(|((name, a), values)| GroupState { name: name.clone(), lr: a.lr, adam_step: a.step, values, m: a.m.clone(), v: a.v.clone() })
            .collect();
        Checkpoint {
            config: self.config.clone(),
            scene: self.scene_file(),
            step: self.step,
            seed: self.config.seed,
            rng_word_pos: self.rng.get_word_pos(),
            groups,
        }
    }

    /// Restores a run; `views` must be the dataset it was trained on.
    pub fn from_checkpoint(ckpt: &Checkpoint, views: Views) -> Result<Self> {
        let mut config = ckpt.config.clone();
        config.seed = ckpt.seed;
        let mut t = Self::from_scene(config, ckpt.scene.clone(), views)?;
        if ckpt.groups.len() != t.names.len() {
            return Err(Error::Config(format!("checkpoint has {} parameter groups, the configuration defines {}", ckpt.groups.len(), t.names.len())));
        }
        for (k, g) in ckpt.groups.iter().enumerate() {
            if g.name != t.names[k] || g.values.len() != t.adam[k].m.len() {
                return Err(Error::Config(format!(
                    "checkpoint group {k} is '{}' with {} values, expected '{}' with {}",
                    g.name,
                    g.values.len(),
                    t.names[k],
                    t.adam[k].m.len()
                )));
            }
            let a = &mut t.adam[k];
            a.lr = g.lr;
            a.step = g.adam_step;
            a.m.clone_from(&g.m);
            a.v.clone_from(&g.v);
            if k >= GAUSSIAN_GROUPS.len() {
                if let Some(m) = &mut t.modulator {
                    m.set_group(k - GAUSSIAN_GROUPS.len(), &g.values)?;
                }
            }
        }
        t.step = ckpt.step;
        t.rng.set_word_pos(ckpt.rng_word_pos);
        Ok(t)
    }
}

/// Rebuilds the trained modulator stored in a checkpoint without needing
/// the training views. `None` for baseline runs.
pub fn modulator_from_checkpoint(ckpt: &Checkpoint) -> Result<Option<Modulator>> {
    if ckpt.config.baseline {
        return Ok(None);
    }
    let mut m = Modulator::zeros(pipeline_config(&ckpt.config, ckpt.scene.bounds))?;
    let names: Vec<String> = m.groups().iter().map(|g| g.name.to_string()).collect();
    let stored = ckpt.groups.get(GAUSSIAN_GROUPS.len()..).unwrap_or_default();
    if stored.len() != names.len() {
        return Err(Error::Config(format!("checkpoint has {} modulator groups, the configuration defines {}", stored.len(), names.len())));
    }
    for (k, (g, name)) in stored.iter().zip(&names).enumerate() {
        if &g.name != name {
            return Err(Error::Config(format!("checkpoint modulator group {k} is '{}', expected '{name}'", g.name)));
        }
        m.set_group(k, &g.values)?;
    }
    Ok(Some(m))
}

/// Trains `config.iters` steps from scratch and returns the trainer.
pub fn train(config: RunConfig, dataset: &SyntheticDataset) -> Result<Trainer> {
    let iters = config.iters;
    let mut t = Trainer::new(config, dataset)?;
    for _ in 0..iters {
        t.step()?;
    }
    Ok(t)
}

/// Short human-readable label of a run.
pub fn describe(run: &RunConfig) -> String {
    if run.baseline {
        "SH-only baseline".to_string()
    } else {
        format!("pipeline {} ({})", run.pipeline, run.modulation)
    }
}
