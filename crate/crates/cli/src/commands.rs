use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, Context};
use qgs_core::pipeline::ModulationMode;
use qgs_core::render::Image;
use qgs_core::scene_io::checkpoint::Checkpoint;
use qgs_core::scene_io::image_io::{append_metrics, write_image, METRICS_HEADER};
use qgs_core::scene_io::{write_atomic, SceneFile};
use qgs_core::train::dirmap::direction_map;
use qgs_core::train::gradcheck::{gradcheck_scene, run_gradcheck, GradcheckOptions};
use qgs_core::train::{describe, modulator_from_checkpoint, sh_degree, Trainer, Views};

use crate::setup::{self, create_run_dir, load_dataset, log_config, DATASET_FILE};
use crate::{AblateArgs, Cli, DirmapArgs, EvalArgs, Failure, GenArgs, GradcheckArgs, RenderArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn gen(cli: &Cli, a: &GenArgs) -> CmdResult {
    let config = setup::dataset_config(cli, a)?;
    log_config("dataset configuration", &config.to_text());
    let ds = qgs_core::scene_io::synthetic::generate_scene(&config)?;
    let dir = create_run_dir(&a.out.out, "gen", config.seed)?;
    config.save(&dir.join(DATASET_FILE))?;
    ds.scene.save(&dir.join("scene.qgs"))?;
    let views = dir.join("views");
    std::fs::create_dir(&views).with_context(|| format!("creating {}", views.display()))?;
    for (k, img) in ds.images.iter().enumerate() {
        write_image(&views.join(format!("view_{k:03}.png")), img)?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn save_checkpoint(t: &Trainer, dir: &Path) -> anyhow::Result<std::path::PathBuf> {
    let path = dir.join(format!("ckpt_{:06}.qgsc", t.step_count()));
    t.to_checkpoint().save(&path)?;
    let preview = t.render_view(&t.views().cameras[0])?;
    write_image(&dir.join("previews").join(format!("step_{:06}.png", t.step_count())), &preview)?;
    Ok(path)
}

pub fn train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let mut t = match &a.resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            if let Some(i) = a.run.iters {
                ckpt.config.iters = i;
            }
            if cli.seed.is_some_and(|s| s != ckpt.seed) {
                log::warn!("--seed ignored when resuming; the checkpoint's seed {} is used", ckpt.seed);
            }
            log::info!("resuming {} at step {}", path.display(), ckpt.step);
            Trainer::from_checkpoint(&ckpt, Views::from_dataset(&ds))?
        }
        None => Trainer::new(setup::run_config(cli, &a.run)?, &ds)?,
    };
    let config = t.config().clone();
    log_config("run configuration", &config.to_text());
    log::info!("training {} for {} iterations", describe(&config), config.iters);

    let dir = create_run_dir(&a.out.out, "train", config.seed)?;
    config.save(&dir.join("config.cfg"))?;
    ds.config.save(&dir.join(DATASET_FILE))?;
    std::fs::create_dir(dir.join("previews")).context("creating previews directory")?;
    let metrics = dir.join("metrics.csv");

    let log_row = |t: &Trainer| -> anyhow::Result<()> {
        let row = t.metrics_row()?;
        append_metrics(&metrics, &[row])?;
        log::info!("step {:>6}  psnr {:.3} dB  ssim {:.4}  loss {:.6}", row.step, row.psnr, row.ssim, row.loss);
        Ok(())
    };
    let due = |every: u64, step: u64| every > 0 && step.is_multiple_of(every);

    log_row(&t)?;
    let mut last_good = save_checkpoint(&t, &dir)?;
    while t.step_count() < config.iters {
        let result = if a.inject_nonfinite_at == Some(t.step_count()) {
            Err(qgs_core::Error::NonFiniteLoss(t.step_count()))
        } else {
            t.step().map(|_| ())
        };
        if let Err(e) = result {
            log::error!("last good checkpoint: {}", last_good.display());
            return Err(anyhow!(e).into());
        }
        let s = t.step_count();
        let last = s == config.iters;
        if due(config.log_every, s) || last {
            log_row(&t)?;
        }
        if due(config.checkpoint_every, s) || last {
            last_good = save_checkpoint(&t, &dir)?;
        }
    }
    t.to_checkpoint().save(&dir.join("final.qgsc"))?;
    t.scene_file().save(&dir.join("scene.qgs"))?;
    println!("{}", dir.display());
    Ok(())
}

pub fn render(a: &RenderArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let t = Trainer::from_checkpoint(&ckpt, Views::from_dataset(&ds))?;
    let n = ds.cameras.len();
    let views: Vec<usize> = match a.view {
        Some(v) if v >= n => return Err(anyhow!(qgs_core::Error::IndexOutOfRange { index: v, len: n }).context("--view").into()),
        Some(v) => vec![v],
        None => (0..n).collect(),
    };
    let dir = create_run_dir(&a.out.out, "render", ckpt.seed)?;
    for v in views {
        let img = t.render_view(&ds.cameras[v])?;
        let p = qgs_core::render::metrics::psnr(&img, &ds.images[v])?;
        log::info!("view {v}: psnr {p:.3} dB");
        write_image(&dir.join(format!("render_{v:03}.{}", a.format)), &img)?;
    }
    println!("{}", dir.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let t = Trainer::from_checkpoint(&ckpt, Views::from_dataset(&ds))?;
    log_config("run configuration", &t.config().to_text());
    println!("{METRICS_HEADER}\n{}", t.metrics_row()?.to_csv());
    Ok(())
}

pub fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> CmdResult {
    let run = setup::run_config(cli, &a.run)?;
    if run.baseline {
        return Err(anyhow!("gradcheck needs a modulated configuration; drop --baseline").into());
    }
    log_config("run configuration", &run.to_text());
    let scene = match &a.scene {
        Some(p) => SceneFile::load(p).with_context(|| format!("loading scene {}", p.display()))?,
        None => gradcheck_scene(&run, a.gaussians, run.seed)?,
    };
    let opts = GradcheckOptions {
        width: a.width,
        height: a.height,
        perturb: !a.identity,
        entries_per_group: a.entries,
        seed: run.seed,
        corrupt_group: a.corrupt_group.clone(),
    };
    let report = run_gradcheck(&run, &scene, &opts)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numerical(anyhow!("gradient check failed for: {}", report.failed_groups().join(", "))))
    }
}

fn channel_range(img: &Image) -> f64 {
    (0..3)
        .map(|c| {
            let vals = img.data.iter().skip(c).step_by(3);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .fold(0.0, f64::max)
}

pub fn dirmap(cli: &Cli, a: &DirmapArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    log_config("run configuration", &ckpt.config.to_text());
    let modulator = modulator_from_checkpoint(&ckpt)?;
    let (color, factor) =
        direction_map(&ckpt.scene.gaussians, modulator.as_ref(), a.index, a.width, a.height, sh_degree(&ckpt.config))?;
    let dir = create_run_dir(&a.out.out, "dirmap", cli.seed.unwrap_or(ckpt.seed))?;
    write_image(&dir.join(format!("color_{:04}.png", a.index)), &color)?;
    write_image(&dir.join(format!("factor_{:04}.png", a.index)), &factor)?;
    write_image(&dir.join(format!("color_{:04}.ppm", a.index)), &color)?;
    write_image(&dir.join(format!("factor_{:04}.ppm", a.index)), &factor)?;
    log::info!("Gaussian {}: color range {:.4}, factor range {:.4}", a.index, channel_range(&color), 2.0 * channel_range(&factor));
    println!("{}", dir.display());
    Ok(())
}

pub const ABLATION_HEADER: &str = "modulation,psnr,ssim,l1,loss";

pub fn ablate(cli: &Cli, a: &AblateArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let mut base = setup::run_config(cli, &a.run)?;
    base.baseline = false;
    log_config("run configuration", &base.to_text());
    let dir = create_run_dir(&a.out.out, "ablate", base.seed)?;
    base.save(&dir.join("config.cfg"))?;
    ds.config.save(&dir.join(DATASET_FILE))?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    for mode in ModulationMode::ALL {
        let run = qgs_core::scene_io::RunConfig { modulation: mode, ..base.clone() };
        log::info!("training {} for {} iterations", describe(&run), run.iters);
        let t = qgs_core::train::train(run, &ds)?;
        let e = t.evaluate()?;
        log::info!("{mode}: psnr {:.3} dB  ssim {:.4}", e.psnr, e.ssim);
        let _ = writeln!(csv, "{mode},{},{},{},{}", e.psnr, e.ssim, e.l1, e.loss);
    }
    write_atomic(&dir.join("ablation.csv"), csv.as_bytes())?;
    println!("{}", dir.display());
    Ok(())
}
