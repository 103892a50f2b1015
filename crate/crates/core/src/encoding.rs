//! Multi-resolution hash encoding of 3D points and of viewing directions.
//!
//! Each level overlays a regular grid of `N_l` cells per axis on the
//! configured bounds. A query point is located in its cell, the 8 corner
//! vertices are mapped to table rows (densely when the level's vertex grid
//! fits in the table, by spatial hash otherwise) and their feature vectors
//! are blended trilinearly. Level outputs are concatenated.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};

/// Per-axis multipliers of the corner hash.
const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self { min: [0.0; 3], max: [1.0; 3] }
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGridConfig {
    pub num_levels: usize,
    pub features_per_level: usize,
    pub table_size: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub bounds: Aabb,
}

impl HashGridConfig {
    /// Desk-scale defaults: 8 levels of 2 features, 2^14 rows per level.
    pub fn desk(bounds: Aabb) -> Self {
        Self { num_levels: 8, features_per_level: 2, table_size: 1 << 14, base_resolution: 16, max_resolution: 512, bounds }
    }

    /// 16 levels of 2 features, 2^19 rows per level.
    pub fn full_scale(bounds: Aabb) -> Self {
        Self { num_levels: 16, features_per_level: 2, table_size: 1 << 19, ..Self::desk(bounds) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(Error::Config("hash grid needs at least one level".into()));
        }
        if self.features_per_level == 0 {
            return Err(Error::Config("hash grid needs at least one feature per level".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Config(format!("hash table size {} is not a power of two", self.table_size)));
        }
        if self.base_resolution == 0 || self.base_resolution > self.max_resolution {
            return Err(Error::Config(format!(
                "hash grid resolutions must satisfy 0 < base ({}) <= max ({})",
                self.base_resolution, self.max_resolution
            )));
        }
        if (0..3).any(|a| !(self.bounds.extent(a) > 0.0)) {
            return Err(Error::Config("hash grid bounds must have positive extent".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.num_levels * self.features_per_level
    }
}

/// Per-level grid resolutions `floor(base * b^l)` with
/// `b = exp(ln(max / base) / (levels - 1))`.
pub fn grid_levels(config: &HashGridConfig) -> Vec<usize> {
    if config.num_levels == 1 {
        return vec![config.base_resolution];
    }
    let base = config.base_resolution as f64;
    let growth = ((config.max_resolution as f64 / base).ln() / (config.num_levels - 1) as f64).exp();
    (0..config.num_levels)
        // the epsilon keeps exact powers (e.g. 2 * 2^2) from flooring to 7.999..
        .map(|l| (base * growth.powi(l as i32) + 1e-9).floor() as usize)
        .collect()
}

/// Geometry of a grid, shared between the grid and its tape nodes.
#[derive(Clone, Debug)]
struct Layout {
    bounds: Aabb,
    features: usize,
    resolutions: Vec<usize>,
    /// First table row of each level.
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    hashed: Vec<bool>,
}

/// Table rows and trilinear weights of one level's 8 corners, plus the
/// weights' derivatives with respect to the query point.
struct Corners {
    rows: [usize; 8],
    weights: [f64; 8],
    dweights: [[f64; 3]; 8],
}

impl Layout {
    fn new(config: &HashGridConfig) -> Self {
        let resolutions = grid_levels(config);
        let mut offsets = Vec::with_capacity(resolutions.len());
        let mut sizes = Vec::with_capacity(resolutions.len());
        let mut hashed = Vec::with_capacity(resolutions.len());
        let mut total = 0;
        for &n in &resolutions {
            let verts = (n as u128 + 1).pow(3);
            let dense = verts <= config.table_size as u128;
            let size = if dense { verts as usize } else { config.table_size };
            offsets.push(total);
            sizes.push(size);
            hashed.push(!dense);
            total += size;
        }
        Self { bounds: config.bounds, features: config.features_per_level, resolutions, offsets, sizes, hashed }
    }

    fn total_rows(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.sizes.last().unwrap())
    }

    fn row(&self, level: usize, v: [usize; 3]) -> usize {
        let n1 = self.resolutions[level] + 1;
        let local = if self.hashed[level] {
            let h = (v[0] as u32).wrapping_mul(PRIMES[0])
                ^ (v[1] as u32).wrapping_mul(PRIMES[1])
                ^ (v[2] as u32).wrapping_mul(PRIMES[2]);
            h as usize % self.sizes[level]
        } else {
            v[0] + n1 * (v[1] + n1 * v[2])
        };
        self.offsets[level] + local
    }

    /// Returns the clamped point and, per axis, whether it was inside.
    fn clamp(&self, p: [f64; 3]) -> ([f64; 3], [bool; 3]) {
        let mut q = p;
        let mut inside = [true; 3];
        for a in 0..3 {
            if !(p[a] >= self.bounds.min[a] && p[a] <= self.bounds.max[a]) {
                inside[a] = false;
                q[a] = if p[a].is_nan() { self.bounds.min[a] } else { p[a].clamp(self.bounds.min[a], self.bounds.max[a]) };
            }
        }
        (q, inside)
    }

    fn corners(&self, level: usize, p: [f64; 3]) -> Corners {
        let n = self.resolutions[level];
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut scale = [0.0; 3];
        for a in 0..3 {
            scale[a] = n as f64 / self.bounds.extent(a);
            let x = (p[a] - self.bounds.min[a]) * scale[a];
            let c = (x.floor().max(0.0) as usize).min(n - 1);
            cell[a] = c;
            frac[a] = x - c as f64;
        }
        let mut rows = [0; 8];
        let mut weights = [0.0; 8];
        let mut dweights = [[0.0; 3]; 8];
        for k in 0..8 {
            let bit = [k & 1, k >> 1 & 1, k >> 2 & 1];
            let mut w = 1.0;
            let mut f = [0.0; 3];
            for a in 0..3 {
                f[a] = if bit[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                w *= f[a];
            }
            for a in 0..3 {
                let sign = if bit[a] == 1 { 1.0 } else { -1.0 };
                let others: f64 = (0..3).filter(|&b| b != a).map(|b| f[b]).product();
                dweights[k][a] = sign * others * scale[a];
            }
            rows[k] = self.row(level, [cell[0] + bit[0], cell[1] + bit[1], cell[2] + bit[2]]);
            weights[k] = w;
        }
        Corners { rows, weights, dweights }
    }

    fn encode_into(&self, table: &[f64], p: [f64; 3], out: &mut [f64]) {
        let (q, inside) = self.clamp(p);
        if inside.iter().any(|i| !i) {
            log::warn!("hash_encode: point {p:?} outside grid bounds, clamped");
        }
        let f = self.features;
        out.iter_mut().for_each(|o| *o = 0.0);
        for level in 0..self.resolutions.len() {
            let c = self.corners(level, q);
            let o = &mut out[level * f..(level + 1) * f];
            for k in 0..8 {
                let row = &table[c.rows[k] * f..(c.rows[k] + 1) * f];
                for (oi, ti) in o.iter_mut().zip(row) {
                    *oi += c.weights[k] * ti;
                }
            }
        }
    }
}

/// Trainable multi-resolution feature grid.
#[derive(Clone, Debug)]
pub struct HashGrid {
    config: HashGridConfig,
    layout: Arc<Layout>,
    table: Vec<f64>,
}

impl HashGrid {
    /// All-zero table.
    pub fn new(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let table = vec![0.0; layout.total_rows() * config.features_per_level];
        Ok(Self { config, layout: Arc::new(layout), table })
    }

    /// Table entries drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn with_uniform_init(config: HashGridConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut g = Self::new(config)?;
        g.table.iter_mut().for_each(|v| *v = rng.gen_range(-1e-4..=1e-4));
        Ok(g)
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.layout.resolutions
    }

    /// Whether `level` indexes its table through the spatial hash.
    pub fn is_hashed(&self, level: usize) -> bool {
        self.layout.hashed[level]
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    /// Replaces the table; the length must match the layout.
    pub fn set_table(&mut self, table: Vec<f64>) -> Result<()> {
        if table.len() != self.table.len() {
            return Err(Error::Shape(format!("hash table has {} entries, expected {}", table.len(), self.table.len())));
        }
        self.table = table;
        Ok(())
    }

    /// Whether moving `p` by up to `h` along `axis` changes the grid cell
    /// at some level, where the encoding is only piecewise smooth.
    pub fn near_cell_boundary(&self, p: [f64; 3], axis: usize, h: f64) -> bool {
        let b = &self.config.bounds;
        self.resolutions().iter().any(|&n| {
            let s = n as f64 / b.extent(axis);
            ((p[axis] - h - b.min[axis]) * s).floor() != ((p[axis] + h - b.min[axis]) * s).floor()
        })
    }

    /// Table row used by `level` for integer vertex `v`.
    pub fn vertex_row(&self, level: usize, v: [usize; 3]) -> usize {
        self.layout.row(level, v)
    }

    pub fn encode(&self, p: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.layout.encode_into(&self.table, p, &mut out);
        out
    }

    /// Encodes a unit direction after remapping `[-1, 1]^3` onto the bounds.
    pub fn encode_direction(&self, d: [f64; 3]) -> Result<Vec<f64>> {
        Ok(self.encode(self.direction_to_point(d)?))
    }

    pub fn direction_to_point(&self, d: [f64; 3]) -> Result<[f64; 3]> {
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroDirection);
        }
        let b = &self.config.bounds;
        Ok(std::array::from_fn(|a| b.min[a] + 0.5 * (d[a] + 1.0) * b.extent(a)))
    }

    /// Records the encoding of every row of `points` (`n x 3`) on the tape.
    /// `table` must be a node holding this grid's table.
    pub fn encode_on_tape(&self, tape: &mut Tape, points: Var, table: Var) -> Result<Var> {
        let (n, c) = tape.shape(points);
        if c != 3 {
            return Err(Error::Shape(format!("hash_encode expects n x 3 points, got {n}x{c}")));
        }
        if tape.value(table).len() != self.table.len() {
            return Err(Error::Shape("hash_encode: table node does not match grid".into()));
        }
        let dim = self.output_dim();
        let mut out = vec![0.0; n * dim];
        {
            let pv = tape.value(points);
            let tv = tape.value(table);
            for r in 0..n {
                let p = [pv[3 * r], pv[3 * r + 1], pv[3 * r + 2]];
                self.layout.encode_into(tv, p, &mut out[r * dim..(r + 1) * dim]);
            }
        }
        Ok(tape.custom(&[points, table], n, dim, out, Box::new(HashEncodeOp { layout: self.layout.clone() })))
    }

    /// Records the direction remap followed by the encoding; `dirs` is `n x 3`.
    pub fn encode_directions_on_tape(&self, tape: &mut Tape, dirs: Var, table: Var) -> Result<Var> {
        let b = self.config.bounds;
        let scale = tape.constant(1, 3, (0..3).map(|a| 0.5 * b.extent(a)).collect());
        let shift = tape.constant(1, 3, (0..3).map(|a| b.min[a] + 0.5 * b.extent(a)).collect());
        let scaled = tape.mul(dirs, scale)?;
        let p = tape.add(scaled, shift)?;
        self.encode_on_tape(tape, p, table)
    }
}

struct HashEncodeOp {
    layout: Arc<Layout>,
}

impl CustomOp for HashEncodeOp {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_out: &[f64], grad_in: &mut [Option<&mut [f64]>]) {
        let (points, table) = (inputs[0], inputs[1]);
        let f = self.layout.features;
        let levels = self.layout.resolutions.len();
        let dim = levels * f;
        let n = points.len() / 3;
        let (gp, gt) = grad_in.split_at_mut(1);
        let mut gp = gp[0].as_deref_mut();
        let mut gt = gt[0].as_deref_mut();
        for r in 0..n {
            let (q, inside) = self.layout.clamp([points[3 * r], points[3 * r + 1], points[3 * r + 2]]);
            let g_row = &grad_out[r * dim..(r + 1) * dim];
            let mut dp = [0.0; 3];
            for level in 0..levels {
                let c = self.layout.corners(level, q);
                let g = &g_row[level * f..(level + 1) * f];
                for k in 0..8 {
                    let row = c.rows[k];
                    if let Some(gt) = gt.as_deref_mut() {
                        for (t, gi) in gt[row * f..(row + 1) * f].iter_mut().zip(g) {
                            *t += c.weights[k] * gi;
                        }
                    }
                    let proj: f64 = table[row * f..(row + 1) * f].iter().zip(g).map(|(t, gi)| t * gi).sum();
                    for a in 0..3 {
                        dp[a] += c.dweights[k][a] * proj;
                    }
                }
            }
            if let Some(gp) = gp.as_deref_mut() {
                for a in 0..3 {
                    if inside[a] {
                        gp[3 * r + a] += dp[a];
                    }
                }
            }
        }
    }
}
