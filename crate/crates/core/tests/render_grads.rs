use nalgebra::Vector3;
use qgs_core::render::camera::{covariance_3d, project_gaussian};
use qgs_core::render::metrics::{loss, loss_with_grad};
use qgs_core::render::sh::{eval_sh_raw, sh_basis, SH_LEN};
use qgs_core::render::{render, render_backward, Camera, ColorFactors, Gaussian, Image, Modulation, RenderOptions, GAUSSIAN_PARAMS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

fn camera(w: usize) -> Camera {
    Camera::look_at(Vector3::new(0.4, -1.0, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 1.2 * w as f64, w, w).unwrap()
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
    let mut sh = [0.0; SH_LEN];
    for v in sh.iter_mut() {
        *v = rng.gen_range(-0.08..0.08);
    }
    Gaussian {
        mu: [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)],
        rot: [rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
        log_scale: [rng.gen_range(-0.4..0.0), rng.gen_range(-0.4..0.0), rng.gen_range(-0.4..0.0)],
        opacity_logit: rng.gen_range(-1.0..0.5),
        sh,
    }
}

fn scene_loss(scene: &[Gaussian], cam: &Camera, m: &Modulation, opts: &RenderOptions, target: &Image) -> f64 {
    loss(&render(scene, cam, m, opts).unwrap().rgb, target, 0.2).unwrap().loss
}

fn check_scene(m: Modulation, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene: Vec<Gaussian> = (0..2).map(|_| random_gaussian(&mut rng)).collect();
    let cam = camera(8);
    let opts = RenderOptions { sh_degree: 3, background: [0.2, 0.4, 0.1] };
    let target = Image::from_data(8, 8, (0..192).map(|_| rng.gen::<f64>()).collect()).unwrap();

    let img = render(&scene, &cam, &m, &opts).unwrap();
    let (_, dimg) = loss_with_grad(&img.rgb, &target, 0.2).unwrap();
    let grads = render_backward(&scene, &cam, &m, &opts, &dimg).unwrap();

    let h = 1e-5;
    for (gi, g) in scene.iter().enumerate() {
        let flat = g.to_flat();
        for k in 0..GAUSSIAN_PARAMS {
            let eval = |d: f64| {
                let mut f = flat;
                f[k] += d;
                let mut s = scene.clone();
                s[gi] = Gaussian::from_flat(&f);
                scene_loss(&s, &cam, &m, &opts, &target)
            };
            let n = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads.gaussians[gi * GAUSSIAN_PARAMS + k];
            assert!((a - n).abs() <= 1e-6 + 1e-4 * n.abs(), "gaussian {gi} param {k}: {a} vs {n}");
        }
    }
    let factor_count = match &m.color {
        ColorFactors::None => 0,
        ColorFactors::Sh(f) | ColorFactors::Rgb(f) => f.len(),
    };
    for k in 0..factor_count {
        let eval = |d: f64| {
            let mut mm = m.clone();
            match &mut mm.color {
                ColorFactors::Sh(f) | ColorFactors::Rgb(f) => f[k] += d,
                ColorFactors::None => unreachable!(),
            }
            scene_loss(&scene, &cam, &mm, &opts, &target)
        };
        let n = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((grads.color_factors[k] - n).abs() <= 1e-6 + 1e-4 * n.abs(), "color factor {k}");
    }
    if let Some(o) = &m.opacity {
        for k in 0..o.len() {
            let eval = |d: f64| {
                let mut mm = m.clone();
                mm.opacity.as_mut().unwrap()[k] += d;
                scene_loss(&scene, &cam, &mm, &opts, &target)
            };
            let n = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((grads.opacity_factors[k] - n).abs() <= 1e-6 + 1e-4 * n.abs(), "opacity factor {k}");
        }
    }
}

#[test]
fn backward_matches_fd_unmodulated() {
    check_scene(Modulation::identity(), 3);
}

#[test]
fn backward_matches_fd_sh_factors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = (0..2 * SH_LEN).map(|_| rng.gen_range(0.5..1.5)).collect();
    let o = (0..2).map(|_| rng.gen_range(0.5..1.5)).collect();
    check_scene(Modulation { color: ColorFactors::Sh(f), opacity: Some(o) }, 4);
}

#[test]
fn backward_matches_fd_rgb_factors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
    let o = (0..2).map(|_| rng.gen_range(0.5..1.5)).collect();
    check_scene(Modulation { color: ColorFactors::Rgb(f), opacity: Some(o) }, 5);
}

#[test]
fn sh_matches_independent_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)).normalize();
        let d = [v.x, v.y, v.z];
        let ours = sh_basis(d);
        let reference = common::real_sh_basis(d);
        for k in 0..16 {
            assert!((ours[k] - reference[k]).abs() < 1e-12, "basis {k}");
        }
        let sh: Vec<f64> = (0..SH_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = eval_sh_raw(&sh, d, 3);
        for ch in 0..3 {
            let r: f64 = (0..16).map(|k| sh[ch * 16 + k] * reference[k]).sum::<f64>() + 0.5;
            assert!((c[ch] - r).abs() < 1e-12);
        }
    }
}

#[test]
fn projection_matches_numerical_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = camera(32);
    for _ in 0..20 {
        let g = random_gaussian(&mut rng);
        let cov3 = covariance_3d(g.rot, g.log_scale);
        let p = project_gaussian(g.mu, &cov3, &cam).unwrap();
        // numerical Jacobian of the pixel projection map at mu
        let proj = |x: Vector3<f64>| {
            let t = cam.world_to_camera(&x);
            cam.project_point(&t)
        };
        let h = 1e-6;
        let mut jac = nalgebra::Matrix2x3::zeros();
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = h;
            let mu = Vector3::from(g.mu);
            let col = (proj(mu + e) - proj(mu - e)) / (2.0 * h);
            jac.set_column(a, &col);
        }
        let expected = jac * cov3 * jac.transpose() + nalgebra::Matrix2::identity() * 0.3;
        assert!((expected - p.cov).abs().max() < 1e-4 * p.cov.abs().max(), "{} vs {}", expected, p.cov);
    }
}

#[test]
fn render_is_deterministic_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scene: Vec<Gaussian> = (0..12).map(|_| random_gaussian(&mut rng)).collect();
    let cam = camera(24);
    let opts = RenderOptions::default();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| render(&scene, &cam, &Modulation::identity(), &opts).unwrap());
    let b = many.install(|| render(&scene, &cam, &Modulation::identity(), &opts).unwrap());
    assert_eq!(a, b);
    let g = vec![0.01; 3 * 24 * 24];
    let ga = one.install(|| render_backward(&scene, &cam, &Modulation::identity(), &opts, &g).unwrap());
    let gb = many.install(|| render_backward(&scene, &cam, &Modulation::identity(), &opts, &g).unwrap());
    assert_eq!(ga, gb);
}

#[test]
fn composited_weights_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut scene: Vec<Gaussian> = (0..10).map(|_| random_gaussian(&mut rng)).collect();
    // pure white, so the color channel equals the accumulated weight
    for g in &mut scene {
        g.sh = [0.0; SH_LEN];
        for ch in 0..3 {
            g.sh[ch * 16] = 0.5 / qgs_core::render::sh::SH_C0;
        }
        g.opacity_logit = 3.0;
    }
    let img = render(&scene, &camera(16), &Modulation::identity(), &RenderOptions::default()).unwrap();
    for (p, t) in img.transmittance.iter().enumerate() {
        let w = img.rgb.data[3 * p];
        assert!(w <= 1.0 + 1e-12);
        assert!((w + t - 1.0).abs() < 1e-12);
    }
}
