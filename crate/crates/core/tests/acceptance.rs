//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion, non-zero
//! exit status if any criterion fails.

mod common;

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use common::*;
use qgs_core::encoding::Aabb;
use qgs_core::pipeline::{ModulationMode, Modulator, PipelineKind};
use qgs_core::quantum::{
    bloch_angles, circuit_gradients, conditioned_circuit_gradients, encode_direction, AnsatzParams, BlochAngles,
};
use qgs_core::render::metrics::{loss, ssim};
use qgs_core::render::{render, Gaussian, Image, Modulation, RenderOptions};
use qgs_core::scene_io::checkpoint::Checkpoint;
use qgs_core::scene_io::image_io::{append_metrics, parse_ppm, ppm_bytes, read_metrics};
use qgs_core::scene_io::synthetic::{generate_directional_target, generate_scene, TargetKind};
use qgs_core::scene_io::{DatasetConfig, RunConfig, SceneFile};
use qgs_core::train::dirfit::{directional_fit, DirFitOptions};
use qgs_core::train::gradcheck::{gradcheck_scene, run_gradcheck, GradcheckOptions};
use qgs_core::train::{pipeline_config, Trainer, Views};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    let s = elapsed.as_secs_f64();
    check(s < limit_s, format!("{detail}, {s:.1} s (limit {limit_s} s)"))
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn random_params(rng: &mut ChaCha8Rng, layers: usize) -> AnsatzParams {
    AnsatzParams::from_flat((0..6 * layers).map(|_| rng.gen_range(-PI..PI)).collect()).unwrap()
}

fn quantum_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut norm_dev, mut oracle_dev, mut z_out) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..1000 {
        let angles = bloch_angles(random_unit(&mut rng)).map_err(|e| e.to_string())?;
        let layers = rng.gen_range(1..=6);
        let params = random_params(&mut rng, layers);
        let mut s = encode_direction(angles);
        s.apply_ansatz(&params);
        norm_dev = norm_dev.max((s.norm_sqr() - 1.0).abs());
        let dense = matvec(&ansatz_unitary(params.as_slice()), &encoded_state(angles.theta, angles.phi));
        for (a, b) in s.amps().iter().zip(&dense) {
            oracle_dev = oracle_dev.max((a - b).norm());
        }
        z_out += s.measure_z().z.iter().filter(|z| !(-1.0..=1.0).contains(*z)).count();
    }
    let detail = format!("1000 cases: max |norm-1| {norm_dev:.1e}, max oracle deviation {oracle_dev:.1e}, {z_out} <Z> outside [-1,1]");
    if norm_dev >= 1e-12 || oracle_dev >= 1e-12 || z_out > 0 {
        return Err(detail);
    }
    within(t.elapsed(), 5.0, detail)
}

fn encoding_faithfulness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut dirs: Vec<[f64; 3]> = (0..1000).map(|_| random_unit(&mut rng)).collect();
    // poles, the phi seam and the axes
    dirs.extend([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [1.0, -1e-300, 0.0]]);
    let (mut dev, mut bad_angles) = (0.0f64, 0usize);
    for d in &dirs {
        let a = bloch_angles(*d).map_err(|e| e.to_string())?;
        if !(0.0..=PI).contains(&a.theta) || !(0.0..2.0 * PI).contains(&a.phi) {
            bad_angles += 1;
        }
        for z in encode_direction(a).measure_z().z {
            dev = dev.max((z - d[2]).abs());
        }
    }
    check(
        dev < 1e-12 && bad_angles == 0,
        format!("{} directions: max |<Z_j> - d_z| {dev:.1e}, {bad_angles} angles out of range", dirs.len()),
    )
}

fn gradient_agreement() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut shift_dev, mut fd_dev) = (0.0f64, 0.0f64);
    for case in 0..100 {
        // away from the poles, where phi is degenerate
        let enc = BlochAngles { theta: rng.gen_range(0.2..PI - 0.2), phi: rng.gen_range(0.0..2.0 * PI) };
        let layers = rng.gen_range(1..=5);
        let params = random_params(&mut rng, layers);
        let up: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let cond: Option<[f64; 6]> = (case % 2 == 1).then(|| std::array::from_fn(|_| rng.gen_range(-PI..PI)));
        let g = match &cond {
            Some(c) => conditioned_circuit_gradients(enc, c, &params, up),
            None => circuit_gradients(enc, &params, up),
        };
        let mut analytic = vec![g.enc_theta, g.enc_phi];
        if cond.is_some() {
            analytic.extend_from_slice(&g.conditioning);
        }
        analytic.extend_from_slice(&g.params);
        let shift = parameter_shift(enc.theta, enc.phi, cond, params.as_slice(), up);
        let fd = finite_difference(enc.theta, enc.phi, cond, params.as_slice(), up, 1e-5);
        if shift.len() != analytic.len() || fd.len() != analytic.len() {
            return Err(format!("case {case}: gradient lengths differ"));
        }
        for i in 0..analytic.len() {
            shift_dev = shift_dev.max((analytic[i] - shift[i]).abs());
            fd_dev = fd_dev.max(rel_err(analytic[i], fd[i]));
        }
    }
    let detail = format!("100 circuits: max |adjoint - shift| {shift_dev:.1e}, max rel |adjoint - FD| {fd_dev:.1e}");
    if shift_dev >= 1e-9 || fd_dev >= 1e-6 {
        return Err(detail);
    }
    within(t.elapsed(), 10.0, detail)
}

fn end_to_end_gradcheck() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for kind in [PipelineKind::I, PipelineKind::II] {
        let run = RunConfig { pipeline: kind, ..Default::default() };
        let scene = gradcheck_scene(&run, 2, 0).map_err(|e| e.to_string())?;
        for perturb in [false, true] {
            let opts = GradcheckOptions { width: 8, height: 8, perturb, ..Default::default() };
            let report = run_gradcheck(&run, &scene, &opts).map_err(|e| e.to_string())?;
            for g in &report.groups {
                worst = worst.max(g.max_rel_err);
                if !g.passed() || g.checked == 0 {
                    failed.push(format!("{kind}/{}", g.name));
                }
            }
            if !perturb {
                lines.push(format!("{kind}: {}", report.groups.iter().map(|g| g.name.as_str()).collect::<Vec<_>>().join(",")));
            }
        }
    }
    let detail = format!("2 Gaussians, 8x8, both pipelines, identity and perturbed: worst rel err {worst:.1e} ({})", lines.join("; "));
    if !failed.is_empty() {
        return Err(format!("{detail}; failing groups {}", failed.join(" ")));
    }
    within(t.elapsed(), 120.0, detail)
}

fn identity_equivalence() -> Outcome {
    let mut compared = 0;
    for (seed, kind) in [(0, TargetKind::StepLobe), (1, TargetKind::ShSmooth), (2, TargetKind::SpecularSpot)] {
        let ds = generate_scene(&DatasetConfig { seed, kind, views: 4, width: 32, height: 32, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let mu: Vec<[f64; 3]> = ds.scene.gaussians.iter().map(|g| g.mu).collect();
        for pipeline in [PipelineKind::I, PipelineKind::II] {
            for mode in ModulationMode::ALL {
                let run = RunConfig { pipeline, modulation: mode, seed, ..Default::default() };
                let config = pipeline_config(&run, ds.scene.bounds);
                let zero = Modulator::zeros(config.clone()).map_err(|e| e.to_string())?;
                let fresh = Modulator::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
                let opts = RenderOptions { sh_degree: mode.sh_degree(), ..Default::default() };
                for cam in &ds.cameras {
                    let p = cam.position;
                    let plain = render(&ds.scene.gaussians, cam, &Modulation::identity(), &opts).map_err(|e| e.to_string())?;
                    for m in [&zero, &fresh] {
                        let modulation = m.modulation(&mu, [p.x, p.y, p.z]).map_err(|e| e.to_string())?;
                        let out = render(&ds.scene.gaussians, cam, &modulation, &opts).map_err(|e| e.to_string())?;
                        if out.rgb.data != plain.rgb.data {
                            return Err(format!("seed {seed} pipeline {pipeline} mode {mode}: render differs"));
                        }
                        compared += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{compared} renders (3 scenes, both pipelines, 4 modes, zero and fresh init) bit-identical to plain SH"))
}

fn expressivity() -> Outcome {
    let t = Instant::now();
    let target = generate_directional_target(TargetKind::StepLobe, 0);
    let out = directional_fit(&target, &RunConfig::default(), &DirFitOptions::default()).map_err(|e| e.to_string())?;
    let detail = format!(
        "step_lobe seed 0, 2000 steps: model MSE {:.5}, SH least-squares floor {:.5}, ratio {:.3} (limit 0.7)",
        out.model_mse,
        out.sh_floor_mse,
        out.ratio()
    );
    if !(out.ratio() <= 0.7) {
        return Err(detail);
    }
    within(t.elapsed(), 300.0, detail)
}

const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Baseline,
    Mode(ModulationMode),
}

/// Final training-view PSNR of every (seed, variant) toy-scene run.
fn toy_runs(variants: &[Variant]) -> Result<Vec<(u64, Variant, f64)>, String> {
    let jobs: Vec<(u64, Variant)> = SEEDS.iter().flat_map(|&s| variants.iter().map(move |&v| (s, v))).collect();
    jobs.par_iter()
        .map(|&(seed, v)| {
            let ds = generate_scene(&DatasetConfig { seed, ..Default::default() }).map_err(|e| e.to_string())?;
            let mut run = RunConfig { seed, ..Default::default() };
            match v {
                Variant::Baseline => run.baseline = true,
                Variant::Mode(m) => run.modulation = m,
            }
            let t = qgs_core::train::train(run, &ds).map_err(|e| e.to_string())?;
            Ok((seed, v, t.evaluate().map_err(|e| e.to_string())?.psnr))
        })
        .collect()
}

fn psnr_of(runs: &[(u64, Variant, f64)], seed: u64, v: Variant) -> f64 {
    runs.iter().find(|r| r.0 == seed && r.1 == v).map(|r| r.2).unwrap()
}

fn toy_training(runs: &[(u64, Variant, f64)], elapsed: Duration) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        let full = psnr_of(runs, seed, Variant::Mode(ModulationMode::Full));
        let base = psnr_of(runs, seed, Variant::Baseline);
        ok &= full >= 28.0 && full - base >= 0.5;
        parts.push(format!("seed {seed}: {full:.2} dB vs baseline {base:.2} dB"));
    }
    let detail = format!("8 Gaussians, step_lobe, 16 views 64x64, 2000 iters, pipeline I; {}", parts.join("; "));
    if !ok {
        return Err(detail);
    }
    within(elapsed, 900.0, detail)
}

fn ablation_ordering(runs: &[(u64, Variant, f64)]) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        let full = psnr_of(runs, seed, Variant::Mode(ModulationMode::Full));
        let mut s = format!("seed {seed}: full {full:.2}");
        for m in [ModulationMode::OnlySh, ModulationMode::OnlyOpacity, ModulationMode::NoSh] {
            let p = psnr_of(runs, seed, Variant::Mode(m));
            ok &= full >= p - 0.1;
            s.push_str(&format!(", {m} {p:.2}"));
        }
        parts.push(s);
    }
    check(ok, format!("{} dB", parts.join("; ")))
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
    let flat: Vec<f64> = (0..qgs_core::render::GAUSSIAN_PARAMS).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Gaussian::from_flat(&flat)
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = generate_scene(&DatasetConfig { num_gaussians: 4, views: 4, width: 24, height: 24, seed: 9, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let again = generate_scene(&ds.config).map_err(|e| e.to_string())?;
    if ds.images.iter().zip(&again.images).any(|(a, b)| a.data != b.data) {
        return Err("dataset regeneration differs".into());
    }
    let mut checked = Vec::new();
    for pipeline in [PipelineKind::I, PipelineKind::II] {
        let run = RunConfig { pipeline, seed: 4, iters: 30, ..Default::default() };
        // identical runs write identical metrics files
        let mut csv = Vec::new();
        for k in 0..2 {
            let path = dir.path().join(format!("{pipeline}_{k}.csv"));
            let mut t = Trainer::new(run.clone(), &ds).map_err(|e| e.to_string())?;
            for _ in 0..3 {
                for _ in 0..5 {
                    t.step().map_err(|e| e.to_string())?;
                }
                append_metrics(&path, &[t.metrics_row().map_err(|e| e.to_string())?]).map_err(|e| e.to_string())?;
            }
            csv.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        }
        if csv[0] != csv[1] {
            return Err(format!("pipeline {pipeline}: metrics CSVs differ"));
        }
        // resume from a saved checkpoint
        let mut a = Trainer::new(run.clone(), &ds).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            a.step().map_err(|e| e.to_string())?;
        }
        let path = dir.path().join(format!("{pipeline}.qgsc"));
        a.to_checkpoint().save(&path).map_err(|e| e.to_string())?;
        let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        let mut b = Trainer::from_checkpoint(&ckpt, Views::from_dataset(&ds)).map_err(|e| e.to_string())?;
        for step in 0..20 {
            let la = a.step().map_err(|e| e.to_string())?.loss;
            let lb = b.step().map_err(|e| e.to_string())?.loss;
            if la.to_bits() != lb.to_bits() {
                return Err(format!("pipeline {pipeline}: resumed loss differs at step {}", 10 + step));
            }
        }
        if ckpt.to_bytes() != std::fs::read(&path).map_err(|e| e.to_string())? {
            return Err("checkpoint re-serialization differs".into());
        }
        checked.push(format!("pipeline {pipeline}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let scene = SceneFile { bounds: Aabb::new([-1.5, -2.0, -0.5], [1.0, 0.25, 3.0]), gaussians: (0..5).map(|_| random_gaussian(&mut rng)).collect() };
    let scene_path = dir.path().join("s.qgs");
    scene.save(&scene_path).map_err(|e| e.to_string())?;
    let back = SceneFile::load(&scene_path).map_err(|e| e.to_string())?;
    let bits = |s: &SceneFile| s.gaussians.iter().flat_map(|g| g.to_flat()).map(f64::to_bits).collect::<Vec<_>>();
    if bits(&back) != bits(&scene) || back.to_bytes() != scene.to_bytes() {
        return Err("scene round trip differs".into());
    }
    let ppm = ppm_bytes(&ds.images[0]);
    if ppm_bytes(&parse_ppm(&ppm).map_err(|e| e.to_string())?) != ppm {
        return Err("ppm round trip differs".into());
    }
    let rows_path = dir.path().join(format!("{}_0.csv", PipelineKind::I));
    let rows = read_metrics(&rows_path).map_err(|e| e.to_string())?;
    let rewritten = dir.path().join("rewritten.csv");
    append_metrics(&rewritten, &rows).map_err(|e| e.to_string())?;
    if std::fs::read(&rewritten).ok() != std::fs::read(&rows_path).ok() {
        return Err("metrics CSV round trip differs".into());
    }
    let cfg = RunConfig { lambda: 0.1 + 0.2, lr_sh: 1.0 / 3.0, ..Default::default() };
    if RunConfig::parse(&cfg.to_text()).ok().as_ref() != Some(&cfg) || DatasetConfig::parse(&ds.config.to_text()).ok().as_ref() != Some(&ds.config) {
        return Err("configuration round trip differs".into());
    }
    Ok(format!(
        "identical CSVs and bit-equal resumed losses ({}); .qgs, .qgsc, .ppm, .csv, .cfg round trips bit-exact",
        checked.join(", ")
    ))
}

fn loss_components() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let (w, h) = (rng.gen_range(4..40), rng.gen_range(4..40));
        let a: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        // half the pairs are noisy copies, half independent
        let b: Vec<f64> = if k % 2 == 0 {
            a.iter().map(|v| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)).collect()
        } else {
            (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()
        };
        let ours = ssim(&Image::from_data(w, h, a.clone()).unwrap(), &Image::from_data(w, h, b.clone()).unwrap())
            .map_err(|e| e.to_string())?;
        worst = worst.max((ours - reference_ssim(&a, &b, w, h)).abs());
    }
    let img = Image::from_data(9, 7, (0..189).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let same = loss(&img, &img, 0.2).map_err(|e| e.to_string())?.loss;
    check(worst < 1e-6 && same == 0.0, format!("20 pairs: max |SSIM - reference| {worst:.1e}; loss(x, x) = {same}"))
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("[PASS] {n}. {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("[FAIL] {n}. {name}: {d}")
            }
        }
    };
    report(1, "quantum correctness", quantum_correctness());
    report(2, "encoding faithfulness", encoding_faithfulness());
    report(3, "gradient triple agreement", gradient_agreement());
    report(4, "end-to-end differentiability", end_to_end_gradcheck());
    report(5, "identity modulation equivalence", identity_equivalence());
    report(6, "expressivity beyond SH", expressivity());

    let t = Instant::now();
    let main_runs = toy_runs(&[Variant::Baseline, Variant::Mode(ModulationMode::Full)]);
    let elapsed = t.elapsed();
    match main_runs {
        Ok(main_runs) => {
            report(7, "toy-scene training", toy_training(&main_runs, elapsed));
            let variants = [ModulationMode::OnlySh, ModulationMode::OnlyOpacity, ModulationMode::NoSh].map(Variant::Mode);
            let outcome = toy_runs(&variants).and_then(|mut runs| {
                runs.extend(main_runs);
                ablation_ordering(&runs)
            });
            report(8, "ablation ordering", outcome);
        }
        Err(e) => {
            report(7, "toy-scene training", Err(e.clone()));
            report(8, "ablation ordering", Err(e));
        }
    }
    report(9, "determinism and persistence", determinism_and_persistence());
    report(10, "loss components", loss_components());
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
