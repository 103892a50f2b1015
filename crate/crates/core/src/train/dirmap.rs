//! Equirectangular maps of one Gaussian's response over viewing directions.

use crate::error::{Error, Result};
use crate::pipeline::{ModulationMode, Modulator};
use crate::render::sh::SH_BASIS;
use crate::render::{modulated_color, ColorFactors, Gaussian, Image, Modulation};
use crate::scene_io::synthetic::equirect_direction;

/// The modulated color of Gaussian `index` and its modulation factors
/// (halved, so identity is 0.5) for every direction of a `width x height`
/// equirectangular grid: azimuth along x, polar angle from `+z` along y.
pub fn direction_map(scene: &[Gaussian], modulator: Option<&Modulator>, index: usize, width: usize, height: usize, sh_degree: usize) -> Result<(Image, Image)> {
    let g = scene.get(index).ok_or(Error::IndexOutOfRange { index, len: scene.len() })?.clone();
    if width == 0 || height == 0 {
        return Err(Error::Config("map resolution must be positive".into()));
    }
    let dirs: Vec<[f64; 3]> = (0..height).flat_map(|j| (0..width).map(move |i| equirect_direction(i, j, width, height))).collect();
    let (mode, factors) = match modulator {
        Some(m) => (Some(m.mode()), Some(m.factors(&vec![g.mu; dirs.len()], &dirs)?)),
        None => (None, None),
    };
    let mut color = Image::new(width, height);
    let mut factor = Image::filled(width, height, [0.5; 3]);
    for (p, d) in dirs.iter().enumerate() {
        let (x, y) = (p % width, p / width);
        let m = match (mode, &factors) {
            (Some(mode), Some(f)) => {
                let k = mode.n_out();
                mode.to_modulation(1, &f[p * k..(p + 1) * k])?
            }
            _ => Modulation::identity(),
        };
        color.set(x, y, modulated_color(std::slice::from_ref(&g), 0, *d, &m, sh_degree)?);
        let shown = match (&m.color, mode) {
            (ColorFactors::Sh(f), _) => std::array::from_fn(|ch| f[ch * SH_BASIS..(ch + 1) * SH_BASIS].iter().sum::<f64>() / SH_BASIS as f64 / 2.0),
            (ColorFactors::Rgb(f), _) => [f[0] / 2.0, f[1] / 2.0, f[2] / 2.0],
            (ColorFactors::None, Some(ModulationMode::OnlyOpacity)) => [m.opacity.as_ref().map_or(1.0, |o| o[0]) / 2.0; 3],
            _ => [0.5; 3],
        };
        factor.set(x, y, shown);
    }
    Ok((color, factor))
}
