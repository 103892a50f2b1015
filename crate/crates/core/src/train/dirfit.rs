//! Fitting the directional color response of a single Gaussian: the
//! modulated SH color against a target function on the sphere.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pipeline_config;
use crate::autodiff::{AdamState, Tape, Var};
use crate::encoding::Aabb;
use crate::error::{Error, Result};
use crate::pipeline::{ModulationMode, Modulator, ParamKind};
use crate::render::sh::{sh_basis, SH_BASIS, SH_LEN};
use crate::scene_io::config::RunConfig;
use crate::scene_io::synthetic::{random_unit, sh_least_squares, sphere_quadrature, DirectionalTarget};

#[derive(Clone, Debug)]
pub struct DirFitOptions {
    pub steps: u64,
    /// Random directions per step.
    pub batch: usize,
    /// Quadrature grid for evaluation and the least-squares floor.
    pub quad_nz: usize,
    pub quad_nphi: usize,
    /// Fit plain SH coefficients without a modulator.
    pub sh_only: bool,
}

impl Default for DirFitOptions {
    fn default() -> Self {
        Self { steps: 2000, batch: 256, quad_nz: 64, quad_nphi: 128, sh_only: false }
    }
}

#[derive(Clone, Debug)]
pub struct DirFitOutcome {
    /// Mean squared error of the trained model over the quadrature grid.
    pub model_mse: f64,
    /// Error of the best degree-3 SH fit on the same grid.
    pub sh_floor_mse: f64,
    /// Training loss every 100 steps.
    pub history: Vec<f64>,
    pub sh: Vec<f64>,
    pub modulator: Option<Modulator>,
}

impl DirFitOutcome {
    pub fn ratio(&self) -> f64 {
        self.model_mse / self.sh_floor_mse
    }
}

/// Position of the fitted Gaussian; the hash features are constant.
const CENTER: [f64; 3] = [0.0; 3];

/// `clamp(0.5 + sum_k f_k sh_k Y_k(d))` per channel for every row of
/// `dirs`, with `f = None` meaning unmodulated.
fn color_on_tape(tape: &mut Tape, sh: Var, factors: Option<Var>, dirs: &[[f64; 3]]) -> Result<Var> {
    let b = dirs.len();
    let mut basis = Vec::with_capacity(b * SH_LEN);
    for d in dirs {
        let y = sh_basis(*d);
        for _ in 0..3 {
            basis.extend_from_slice(&y);
        }
    }
    let y = tape.constant(b, SH_LEN, basis);
    let coeff = match factors {
        Some(f) => {
            let f = tape.slice_cols(f, 0, SH_LEN)?;
            tape.mul(f, sh)?
        }
        None => sh,
    };
    let terms = tape.mul(coeff, y)?;
    let mut channels = Vec::with_capacity(3);
    for ch in 0..3 {
        let t = tape.slice_cols(terms, ch * SH_BASIS, SH_BASIS)?;
        channels.push(tape.row_sum(t));
    }
    let c = tape.concat_cols(&channels)?;
    let c = tape.add_scalar(c, 0.5);
    let zero = tape.scalar_constant(0.0);
    let c = tape.max(c, zero)?;
    let c = tape.neg(c);
    let minus_one = tape.scalar_constant(-1.0);
    let c = tape.max(c, minus_one)?;
    Ok(tape.neg(c))
}

fn forward(
    tape: &mut Tape,
    sh: &[f64],
    modulator: Option<&Modulator>,
    dirs: &[[f64; 3]],
    dropout: Option<&mut dyn RngCore>,
) -> Result<(Var, Option<Vec<Var>>, Var)> {
    let b = dirs.len();
    let sh_var = tape.param(1, SH_LEN, sh.to_vec());
    let (factors, params) = match modulator {
        Some(m) => {
            let mu = tape.constant(b, 3, (0..b).flat_map(|_| CENTER).collect());
            let d = tape.constant(b, 3, dirs.iter().flatten().copied().collect());
            let vars = m.record(tape, mu, d, dropout)?;
            (Some(vars.factors), Some(vars.params))
        }
        None => (None, None),
    };
    let c = color_on_tape(tape, sh_var, factors, dirs)?;
    Ok((sh_var, params, c))
}

/// Colors of the model along each direction.
pub fn model_colors(sh: &[f64], modulator: Option<&Modulator>, dirs: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    let mut tape = Tape::new();
    let (_, _, c) = forward(&mut tape, sh, modulator, dirs, None)?;
    Ok(tape.value(c).chunks(3).map(|v| [v[0], v[1], v[2]]).collect())
}

fn mse(colors: &[[f64; 3]], target: &DirectionalTarget, dirs: &[[f64; 3]]) -> f64 {
    let mut s = 0.0;
    for (c, d) in colors.iter().zip(dirs) {
        let t = target.eval(*d);
        s += (0..3).map(|k| (c[k] - t[k]).powi(2)).sum::<f64>();
    }
    s / (3 * dirs.len()) as f64
}

fn step_scaled(adam: &mut AdamState, values: &mut [f64], grads: &[f64], scale: f64) -> bool {
    let lr = adam.lr;
    adam.lr = lr * scale;
    let ok = adam.step(values, grads);
    adam.lr = lr;
    ok
}

/// Trains a single-Gaussian model (SH coefficients starting at zero plus,
/// unless `sh_only`, a freshly initialized modulator) on random direction
/// batches and scores it on a quadrature grid against the best degree-3
/// SH fit.
pub fn directional_fit(target: &DirectionalTarget, run: &RunConfig, opts: &DirFitOptions) -> Result<DirFitOutcome> {
    if !opts.sh_only && !matches!(run.modulation, ModulationMode::Full | ModulationMode::OnlySh) {
        return Err(Error::Config(format!("directional fit modulates SH coefficients; mode {} has none", run.modulation)));
    }
    if opts.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut init = ChaCha8Rng::seed_from_u64(run.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(1);
    let bounds = Aabb::new([-0.5; 3], [0.5; 3]);
    let mut modulator = if opts.sh_only { None } else { Some(Modulator::new(pipeline_config(run, bounds), &mut init)?) };
    let mut sh = vec![0.0; SH_LEN];
    let mut sh_adam = AdamState::new(SH_LEN, run.lr_sh);
    let mut mod_adam: Vec<AdamState> = modulator
        .as_ref()
        .map(|m| {
            m.groups()
                .iter()
                .map(|g| {
                    let lr = match g.kind {
                        ParamKind::Hash => run.lr_hash,
                        ParamKind::Network => run.lr_network,
                        ParamKind::Quantum => run.lr_quantum,
                    };
                    AdamState::new(g.rows * g.cols, lr)
                })
                .collect()
        })
        .unwrap_or_default();

    let mut history = Vec::new();
    for step in 0..opts.steps {
        let dirs: Vec<[f64; 3]> = (0..opts.batch).map(|_| random_unit(&mut rng)).collect();
        let targets: Vec<f64> = dirs.iter().flat_map(|d| target.eval(*d)).collect();
        let mut tape = Tape::new();
        let dropout: Option<&mut dyn RngCore> = if modulator.is_some() { Some(&mut rng) } else { None };
        let (sh_var, params, c) = forward(&mut tape, &sh, modulator.as_ref(), &dirs, dropout)?;
        let t = tape.constant(opts.batch, 3, targets);
        let diff = tape.sub(c, t)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / (3 * opts.batch) as f64);
        let l = tape.scalar(loss);
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        if step % 100 == 0 {
            history.push(l);
        }
        let mut g = tape.gradients(loss);
        let decay = run.lr_decay.powf(step as f64 / opts.steps as f64);
        step_scaled(&mut sh_adam, &mut sh, &g.take(sh_var), decay);
        if let (Some(m), Some(params)) = (modulator.as_mut(), params) {
            for ((values, adam), p) in m.group_values_mut().into_iter().zip(&mut mod_adam).zip(params) {
                if !step_scaled(adam, values, &g.take(p), decay) {
                    log::warn!("directional fit step {step}: non-finite gradient, update skipped");
                }
            }
        }
    }

    let quad = sphere_quadrature(opts.quad_nz, opts.quad_nphi);
    let floor = sh_least_squares(|d| target.eval(d), &quad)?;
    let colors = model_colors(&sh, modulator.as_ref(), &quad)?;
    Ok(DirFitOutcome { model_mse: mse(&colors, target, &quad), sh_floor_mse: floor.mse, history, sh, modulator })
}
