//! The hybrid quantum-classical modulator: hash features, a hypernetwork
//! (Pipeline I) or global conditioning (Pipeline II), the variational
//! circuit and the decoding MLP, producing per-Gaussian factors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::autodiff::{gelu, two_sigmoid, CustomOp, Tape, Var};
use crate::encoding::{Aabb, HashGrid, HashGridConfig};
use crate::error::{Error, Result};
use crate::quantum::{bloch_angles, bloch_angles_jacobian, AnsatzParams, Circuit, DEFAULT_LAYERS, NUM_QUBITS};
use crate::render::sh::SH_LEN;
use crate::render::{ColorFactors, Modulation, RenderGrads};

/// Width of the per-Gaussian decoder's single hidden layer.
pub const DECODER_HIDDEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PipelineKind {
    /// Per-Gaussian circuit parameters from a hypernetwork.
    I,
    /// One global circuit conditioned on hashed position and direction.
    II,
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineKind::I => "I",
            PipelineKind::II => "II",
        })
    }
}

impl FromStr for PipelineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "i" | "1" => Ok(PipelineKind::I),
            "II" | "ii" | "2" => Ok(PipelineKind::II),
            other => Err(Error::Config(format!("unknown pipeline '{other}' (expected I or II)"))),
        }
    }
}

/// Which appearance attributes the modulator acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModulationMode {
    /// 48 SH-coefficient factors and one opacity factor.
    Full,
    OnlyOpacity,
    OnlySh,
    /// Three RGB factors on the degree-0 color, plus opacity.
    NoSh,
}

impl ModulationMode {
    pub const ALL: [ModulationMode; 4] = [ModulationMode::NoSh, ModulationMode::OnlyOpacity, ModulationMode::OnlySh, ModulationMode::Full];

    pub fn n_out(self) -> usize {
        match self {
            ModulationMode::Full => SH_LEN + 1,
            ModulationMode::OnlyOpacity => 1,
            ModulationMode::OnlySh => SH_LEN,
            ModulationMode::NoSh => 4,
        }
    }

    /// SH degree the renderer uses for the base color in this mode.
    pub fn sh_degree(self) -> usize {
        match self {
            ModulationMode::NoSh => 0,
            _ => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModulationMode::Full => "full",
            ModulationMode::OnlyOpacity => "only_opacity",
            ModulationMode::OnlySh => "only_sh",
            ModulationMode::NoSh => "no_sh",
        }
    }

    /// Splits `n x n_out` factors into renderer modulation.
    pub fn to_modulation(self, n: usize, factors: &[f64]) -> Result<Modulation> {
        let k = self.n_out();
        if factors.len() != n * k {
            return Err(Error::Shape(format!("{} factors for {n} Gaussians in mode {}", factors.len(), self.as_str())));
        }
        let column = |c: usize| (0..n).map(|i| factors[i * k + c]).collect::<Vec<_>>();
        let block = |start: usize, len: usize| (0..n).flat_map(|i| factors[i * k + start..i * k + start + len].to_vec()).collect::<Vec<_>>();
        Ok(match self {
            ModulationMode::Full => Modulation { color: ColorFactors::Sh(block(0, SH_LEN)), opacity: Some(column(SH_LEN)) },
            ModulationMode::OnlyOpacity => Modulation { color: ColorFactors::None, opacity: Some(column(0)) },
            ModulationMode::OnlySh => Modulation { color: ColorFactors::Sh(block(0, SH_LEN)), opacity: None },
            ModulationMode::NoSh => Modulation { color: ColorFactors::Rgb(block(0, 3)), opacity: Some(column(3)) },
        })
    }

    /// Inverse of [`Self::to_modulation`] for gradients.
    pub fn factor_grads(self, n: usize, grads: &RenderGrads) -> Vec<f64> {
        let k = self.n_out();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &mut out[i * k..(i + 1) * k];
            match self {
                ModulationMode::Full => {
                    row[..SH_LEN].copy_from_slice(&grads.color_factors[i * SH_LEN..(i + 1) * SH_LEN]);
                    row[SH_LEN] = grads.opacity_factors[i];
                }
                ModulationMode::OnlyOpacity => row[0] = grads.opacity_factors[i],
                ModulationMode::OnlySh => row.copy_from_slice(&grads.color_factors[i * SH_LEN..(i + 1) * SH_LEN]),
                ModulationMode::NoSh => {
                    row[..3].copy_from_slice(&grads.color_factors[3 * i..3 * i + 3]);
                    row[3] = grads.opacity_factors[i];
                }
            }
        }
        out
    }
}

impl fmt::Display for ModulationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModulationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(ModulationMode::Full),
            "only_opacity" => Ok(ModulationMode::OnlyOpacity),
            "only_sh" => Ok(ModulationMode::OnlySh),
            "no_sh" => Ok(ModulationMode::NoSh),
            other => Err(Error::Config(format!("unknown modulation mode '{other}'"))),
        }
    }
}

/// Number of values in one decoder: `W1 (3x3), b1 (3), W2 (3 x n_out), b2 (n_out)`.
pub fn decoder_param_count(n_out: usize) -> usize {
    NUM_QUBITS * DECODER_HIDDEN + DECODER_HIDDEN + DECODER_HIDDEN * n_out + n_out
}

/// Hypernetwork output width: the ansatz angles followed by the decoder.
pub fn hypernet_output_dim(layers: usize, mode: ModulationMode) -> usize {
    layers * AnsatzParams::PER_LAYER + decoder_param_count(mode.n_out())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    pub ansatz_layers: usize,
    pub modulation: ModulationMode,
    pub spatial_grid: HashGridConfig,
    /// Pipeline II only.
    pub direction_grid: HashGridConfig,
    /// Hypernetwork hidden width (two layers).
    pub hidden: usize,
    /// Pipeline II projection MLP hidden width (two layers).
    pub proj_hidden: usize,
    /// Hypernetwork dropout during training.
    pub dropout: f64,
}

impl PipelineConfig {
    /// Desk-scale defaults; `bounds` should enclose every Gaussian mean.
    pub fn desk(kind: PipelineKind, modulation: ModulationMode, bounds: Aabb) -> Self {
        Self {
            kind,
            ansatz_layers: DEFAULT_LAYERS,
            modulation,
            spatial_grid: HashGridConfig::desk(bounds),
            direction_grid: HashGridConfig::desk(Aabb::unit()),
            hidden: 64,
            proj_hidden: 64,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spatial_grid.validate()?;
        if self.kind == PipelineKind::II {
            self.direction_grid.validate()?;
        }
        if self.ansatz_layers == 0 {
            return Err(Error::Config("ansatz_layers must be at least 1".into()));
        }
        if self.hidden == 0 || self.proj_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Learning-rate class of a parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Hash,
    Network,
    Quantum,
}

/// A dense trainable matrix (biases are `1 x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
    pub values: Vec<f64>,
}

impl Param {
    fn zeros(name: &str, rows: usize, cols: usize, kind: ParamKind) -> Self {
        Self { name: name.into(), rows, cols, kind, values: vec![0.0; rows * cols] }
    }

    fn uniform(name: &str, rows: usize, cols: usize, kind: ParamKind, bound: f64, rng: &mut impl Rng) -> Self {
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { name: name.into(), rows, cols, kind, values }
    }
}

/// Linear layers `in -> hidden -> hidden -> out`; GeLU on hidden layers.
fn mlp_params(prefix: &str, input: usize, hidden: usize, output: usize, kind: ParamKind, rng: Option<&mut dyn RngCore>) -> Vec<Param> {
    let shapes = [(input, hidden), (hidden, hidden), (hidden, output)];
    let mut out = Vec::new();
    match rng {
        None => {
            for (l, &(i, o)) in shapes.iter().enumerate() {
                out.push(Param::zeros(&format!("{prefix}.w{l}"), i, o, kind));
                out.push(Param::zeros(&format!("{prefix}.b{l}"), 1, o, kind));
            }
        }
        Some(mut rng) => {
            for (l, &(i, o)) in shapes.iter().enumerate() {
                let bound = 1.0 / (i as f64).sqrt();
                out.push(Param::uniform(&format!("{prefix}.w{l}"), i, o, kind, bound, &mut rng));
                out.push(Param::uniform(&format!("{prefix}.b{l}"), 1, o, kind, bound, &mut rng));
            }
        }
    }
    out
}

fn dropout_mask(tape: &mut Tape, rows: usize, cols: usize, rate: f64, rng: &mut dyn RngCore) -> Var {
    let keep = 1.0 - rate;
    let mask = (0..rows * cols).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    tape.constant(rows, cols, mask)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Three-layer MLP on the tape; `vars` holds `[w0, b0, w1, b1, w2, b2]`.
fn mlp_forward(tape: &mut Tape, x: Var, vars: &[Var], residual: bool, dropout: Option<(f64, &mut dyn RngCore)>) -> Result<Var> {
    let z0 = linear(tape, x, vars[0], vars[1])?;
    let mut h1 = gelu(tape, z0)?;
    let mut dropout = dropout;
    if let Some((rate, rng)) = dropout.as_mut() {
        let (r, c) = tape.shape(h1);
        let m = dropout_mask(tape, r, c, *rate, *rng);
        h1 = tape.mul(h1, m)?;
    }
    let z1 = linear(tape, h1, vars[2], vars[3])?;
    let mut h2 = gelu(tape, z1)?;
    if residual {
        h2 = tape.add(h2, h1)?;
    }
    if let Some((rate, rng)) = dropout.as_mut() {
        let (r, c) = tape.shape(h2);
        let m = dropout_mask(tape, r, c, *rate, *rng);
        h2 = tape.mul(h2, m)?;
    }
    linear(tape, h2, vars[4], vars[5])
}

/// Circuit evaluation as a tape node.
///
/// Inputs: unit directions `n x 3`, ansatz angles (`n x 6L`, or `1 x 6L`
/// shared by all rows) and, for conditioned circuits, `n x 6` conditioning
/// angles. Output: `<Z_j>` as `n x 3`.
struct QuantumOp {
    circuit: Circuit,
}

impl QuantumOp {
    fn slots(&self, row: usize, dirs: &[f64], angles: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let d = [dirs[3 * row], dirs[3 * row + 1], dirs[3 * row + 2]];
        let b = bloch_angles(d)?;
        let per = self.circuit.num_layers() * AnsatzParams::PER_LAYER;
        let a = if angles.len() == per { angles } else { &angles[row * per..(row + 1) * per] };
        let mut s = Vec::with_capacity(self.circuit.num_slots());
        s.push(b.theta);
        s.push(b.phi);
        if let Some(c) = cond {
            s.extend_from_slice(&c[row * Circuit::COND_SLOTS..(row + 1) * Circuit::COND_SLOTS]);
        }
        s.extend_from_slice(a);
        Ok(s)
    }
}

impl CustomOp for QuantumOp {
    fn name(&self) -> &'static str {
        "quantum_circuit"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_output: &[f64], grad_inputs: &mut [Option<&mut [f64]>]) {
        let dirs = inputs[0];
        let angles = inputs[1];
        let cond = inputs.get(2).copied();
        let n = dirs.len() / 3;
        let per = self.circuit.num_layers() * AnsatzParams::PER_LAYER;
        let off = self.circuit.ansatz_offset();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|r| {
                let up = [grad_output[3 * r], grad_output[3 * r + 1], grad_output[3 * r + 2]];
                // forward succeeded on the same inputs, so the slots are valid
                let slots = self.slots(r, dirs, angles, cond).expect("direction validated in forward");
                self.circuit.gradient(&slots, up).1
            })
            .collect();
        let (g_dirs, rest) = grad_inputs.split_at_mut(1);
        let (g_angles, g_cond) = rest.split_at_mut(1);
        for (r, g) in rows.iter().enumerate() {
            if let Some(gd) = g_dirs[0].as_deref_mut() {
                let d = [dirs[3 * r], dirs[3 * r + 1], dirs[3 * r + 2]];
                let jac = bloch_angles_jacobian(d);
                for a in 0..3 {
                    gd[3 * r + a] += g[0] * jac[0][a] + g[1] * jac[1][a];
                }
            }
            if let Some(ga) = g_angles[0].as_deref_mut() {
                let dst = if ga.len() == per { &mut ga[..] } else { &mut ga[r * per..(r + 1) * per] };
                for (o, v) in dst.iter_mut().zip(&g[off..]) {
                    *o += v;
                }
            }
            if let Some(Some(gc)) = g_cond.first_mut().map(|g| g.as_deref_mut()) {
                for k in 0..Circuit::COND_SLOTS {
                    gc[r * Circuit::COND_SLOTS + k] += g[2 + k];
                }
            }
        }
    }
}

/// Records the circuit on the tape.
pub fn quantum_on_tape(tape: &mut Tape, circuit: &Circuit, dirs: Var, angles: Var, cond: Option<Var>) -> Result<Var> {
    let (n, c) = tape.shape(dirs);
    if c != 3 {
        return Err(Error::Shape(format!("circuit directions must be n x 3, got {n}x{c}")));
    }
    let per = circuit.num_layers() * AnsatzParams::PER_LAYER;
    let (ar, ac) = tape.shape(angles);
    if ac != per || (ar != n && ar != 1) {
        return Err(Error::Shape(format!("ansatz angles {ar}x{ac} for {n} rows of {per}")));
    }
    if circuit.is_conditioned() != cond.is_some() {
        return Err(Error::Shape("conditioning input must match the circuit".into()));
    }
    if let Some(cv) = cond {
        if tape.shape(cv) != (n, Circuit::COND_SLOTS) {
            return Err(Error::Shape("conditioning angles must be n x 6".into()));
        }
    }
    let op = QuantumOp { circuit: circuit.clone() };
    let out = {
        let dv = tape.value(dirs);
        let av = tape.value(angles);
        let cvv = cond.map(|c| tape.value(c));
        let slots: Vec<Vec<f64>> = (0..n).map(|r| op.slots(r, dv, av, cvv)).collect::<Result<_>>()?;
        let z: Vec<[f64; 3]> = slots.par_iter().map(|s| circuit.run(s).measure_z().z).collect();
        z.into_iter().flatten().collect::<Vec<f64>>()
    };
    let mut inputs = vec![dirs, angles];
    inputs.extend(cond);
    Ok(tape.custom(&inputs, n, 3, out, Box::new(op)))
}

/// `normalize(mu - position)` per row, on the tape.
pub fn view_directions_on_tape(tape: &mut Tape, mu: Var, position: [f64; 3]) -> Result<Var> {
    let p = tape.constant(1, 3, position.to_vec());
    let v = tape.sub(mu, p)?;
    let sq = tape.mul(v, v)?;
    let n2 = tape.row_sum(sq);
    let n = tape.sqrt(n2)?;
    tape.div(v, n)
}

/// Tape nodes produced by [`Modulator::record`].
#[derive(Clone, Debug)]
pub struct ModulatorVars {
    /// One leaf per parameter group, in [`Modulator::groups`] order.
    pub params: Vec<Var>,
    /// `n x n_out` factors in `(0, 2)`.
    pub factors: Var,
}

/// A view of one trainable group.
#[derive(Clone, Copy, Debug)]
pub struct GroupInfo<'a> {
    pub name: &'a str,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug)]
pub struct Modulator {
    config: PipelineConfig,
    circuit: Circuit,
    spatial: HashGrid,
    direction: Option<HashGrid>,
    /// Everything except the hash tables, in a fixed order.
    nets: Vec<Param>,
}

const HASH_SPATIAL: &str = "hash_spatial";
const HASH_DIRECTION: &str = "hash_direction";

impl Modulator {
    /// Every trainable value set to zero.
    pub fn zeros(config: PipelineConfig) -> Result<Self> {
        Self::build(config, None)
    }

    /// Standard initialization: hash tables uniform in `[-1e-4, 1e-4]`,
    /// hidden layers uniform in `+-1/sqrt(fan_in)`, and the parts that
    /// produce the decoder's output layer zeroed, so every factor is
    /// exactly 1 at initialization.
    pub fn new(config: PipelineConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut dynrng: &mut dyn RngCore = rng;
        Self::build(config, Some(&mut dynrng))
    }

    fn build(config: PipelineConfig, rng: Option<&mut &mut dyn RngCore>) -> Result<Self> {
        config.validate()?;
        let layers = config.ansatz_layers;
        let n_out = config.modulation.n_out();
        let per = layers * AnsatzParams::PER_LAYER;
        let (circuit, spatial, direction, nets) = match (config.kind, rng) {
            (PipelineKind::I, None) => {
                let spatial = HashGrid::new(config.spatial_grid.clone())?;
                let nets = mlp_params("hyper", spatial.output_dim(), config.hidden, hypernet_output_dim(layers, config.modulation), ParamKind::Network, None);
                (Circuit::new(layers), spatial, None, nets)
            }
            (PipelineKind::I, Some(rng)) => {
                let spatial = HashGrid::with_uniform_init(config.spatial_grid.clone(), rng)?;
                let out_dim = hypernet_output_dim(layers, config.modulation);
                let mut nets = mlp_params("hyper", spatial.output_dim(), config.hidden, out_dim, ParamKind::Network, Some(&mut **rng));
                // final layer: zero weights; the bias seeds the generated
                // angles and decoder hidden layer, and is zero for the
                // decoder output layer
                nets[4].values.iter_mut().for_each(|v| *v = 0.0);
                let b = &mut nets[5].values;
                let dec_hidden_end = per + NUM_QUBITS * DECODER_HIDDEN + DECODER_HIDDEN;
                for (k, v) in b.iter_mut().enumerate() {
                    *v = if k < per {
                        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
                    } else if k < dec_hidden_end {
                        rng.gen_range(-1.0..1.0) / (NUM_QUBITS as f64).sqrt()
                    } else {
                        0.0
                    };
                }
                (Circuit::new(layers), spatial, None, nets)
            }
            (PipelineKind::II, rng) => {
                let mut nets = Vec::new();
                let (spatial, direction) = match rng {
                    None => {
                        let spatial = HashGrid::new(config.spatial_grid.clone())?;
                        let direction = HashGrid::new(config.direction_grid.clone())?;
                        nets.extend(mlp_params("proj_s", spatial.output_dim(), config.proj_hidden, NUM_QUBITS, ParamKind::Network, None));
                        nets.extend(mlp_params("proj_v", direction.output_dim(), config.proj_hidden, NUM_QUBITS, ParamKind::Network, None));
                        nets.push(Param::zeros("ansatz", 1, per, ParamKind::Quantum));
                        nets.push(Param::zeros("decoder.w1", NUM_QUBITS, DECODER_HIDDEN, ParamKind::Quantum));
                        nets.push(Param::zeros("decoder.b1", 1, DECODER_HIDDEN, ParamKind::Quantum));
                        (spatial, direction)
                    }
                    Some(rng) => {
                        let spatial = HashGrid::with_uniform_init(config.spatial_grid.clone(), rng)?;
                        let direction = HashGrid::with_uniform_init(config.direction_grid.clone(), rng)?;
                        nets.extend(mlp_params("proj_s", spatial.output_dim(), config.proj_hidden, NUM_QUBITS, ParamKind::Network, Some(&mut **rng)));
                        nets.extend(mlp_params("proj_v", direction.output_dim(), config.proj_hidden, NUM_QUBITS, ParamKind::Network, Some(&mut **rng)));
                        nets.push(Param::uniform("ansatz", 1, per, ParamKind::Quantum, std::f64::consts::PI, rng));
                        let bound = 1.0 / (NUM_QUBITS as f64).sqrt();
                        nets.push(Param::uniform("decoder.w1", NUM_QUBITS, DECODER_HIDDEN, ParamKind::Quantum, bound, rng));
                        nets.push(Param::uniform("decoder.b1", 1, DECODER_HIDDEN, ParamKind::Quantum, bound, rng));
                        (spatial, direction)
                    }
                };
                nets.push(Param::zeros("decoder.w2", DECODER_HIDDEN, n_out, ParamKind::Quantum));
                nets.push(Param::zeros("decoder.b2", 1, n_out, ParamKind::Quantum));
                (Circuit::conditioned(layers), spatial, Some(direction), nets)
            }
        };
        Ok(Self { config, circuit, spatial, direction, nets })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn mode(&self) -> ModulationMode {
        self.config.modulation
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn spatial_grid(&self) -> &HashGrid {
        &self.spatial
    }

    pub fn direction_grid(&self) -> Option<&HashGrid> {
        self.direction.as_ref()
    }

    /// Names and shapes of all trainable groups, hash tables first.
    pub fn groups(&self) -> Vec<GroupInfo<'_>> {
        let mut out = Vec::new();
        let f = self.spatial.config().features_per_level;
        out.push(GroupInfo { name: HASH_SPATIAL, kind: ParamKind::Hash, rows: self.spatial.table().len() / f, cols: f });
        if let Some(d) = &self.direction {
            let f = d.config().features_per_level;
            out.push(GroupInfo { name: HASH_DIRECTION, kind: ParamKind::Hash, rows: d.table().len() / f, cols: f });
        }
        out.extend(self.nets.iter().map(|p| GroupInfo { name: &p.name, kind: p.kind, rows: p.rows, cols: p.cols }));
        out
    }

    pub fn group_values(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.spatial.table()];
        if let Some(d) = &self.direction {
            out.push(d.table());
        }
        out.extend(self.nets.iter().map(|p| p.values.as_slice()));
        out
    }

    pub fn group_values_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.spatial.table_mut()];
        if let Some(d) = &mut self.direction {
            out.push(d.table_mut());
        }
        out.extend(self.nets.iter_mut().map(|p| p.values.as_mut_slice()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.group_values().iter().map(|v| v.len()).sum()
    }

    /// Records the factor computation for Gaussians with means `mu`
    /// (`n x 3`) viewed along unit directions `dirs` (`n x 3`). Dropout is
    /// applied in the hypernetwork only when `dropout_rng` is given.
    pub fn record(&self, tape: &mut Tape, mu: Var, dirs: Var, dropout_rng: Option<&mut dyn RngCore>) -> Result<ModulatorVars> {
        let n = tape.shape(mu).0;
        if tape.shape(dirs) != (n, 3) || tape.shape(mu).1 != 3 {
            return Err(Error::Shape("modulator expects n x 3 means and directions".into()));
        }
        let infos: Vec<(usize, usize)> = self.groups().iter().map(|g| (g.rows, g.cols)).collect();
        let params: Vec<Var> = self.group_values().iter().zip(&infos).map(|(v, &(r, c))| tape.param(r, c, v.to_vec())).collect();
        let layers = self.config.ansatz_layers;
        let per = layers * AnsatzParams::PER_LAYER;
        let n_out = self.config.modulation.n_out();
        let factors = match self.config.kind {
            PipelineKind::I => {
                let feat = self.spatial.encode_on_tape(tape, mu, params[0])?;
                let dropout = match dropout_rng {
                    Some(rng) if self.config.dropout > 0.0 => Some((self.config.dropout, rng)),
                    _ => None,
                };
                let out = mlp_forward(tape, feat, &params[1..7], true, dropout)?;
                let angles = tape.slice_cols(out, 0, per)?;
                let w1 = tape.slice_cols(out, per, NUM_QUBITS * DECODER_HIDDEN)?;
                let b1 = tape.slice_cols(out, per + NUM_QUBITS * DECODER_HIDDEN, DECODER_HIDDEN)?;
                let o2 = per + NUM_QUBITS * DECODER_HIDDEN + DECODER_HIDDEN;
                let w2 = tape.slice_cols(out, o2, DECODER_HIDDEN * n_out)?;
                let b2 = tape.slice_cols(out, o2 + DECODER_HIDDEN * n_out, n_out)?;
                let z = quantum_on_tape(tape, &self.circuit, dirs, angles, None)?;
                let h = tape.batched_vecmat(z, w1, DECODER_HIDDEN)?;
                let h = tape.add(h, b1)?;
                let h = gelu(tape, h)?;
                let raw = tape.batched_vecmat(h, w2, n_out)?;
                let raw = tape.add(raw, b2)?;
                two_sigmoid(tape, raw)
            }
            PipelineKind::II => {
                let grid_d = self.direction.as_ref().expect("pipeline II has a direction grid");
                let fs = self.spatial.encode_on_tape(tape, mu, params[0])?;
                let fd = grid_d.encode_directions_on_tape(tape, dirs, params[1])?;
                let s = mlp_forward(tape, fs, &params[2..8], false, None)?;
                let v = mlp_forward(tape, fd, &params[8..14], false, None)?;
                let cond = tape.concat_cols(&[s, v])?;
                let z = quantum_on_tape(tape, &self.circuit, dirs, params[14], Some(cond))?;
                let h = linear(tape, z, params[15], params[16])?;
                let h = gelu(tape, h)?;
                let raw = linear(tape, h, params[17], params[18])?;
                two_sigmoid(tape, raw)
            }
        };
        Ok(ModulatorVars { params, factors })
    }

    /// Factors (`n x n_out`) without dropout, for evaluation.
    pub fn factors(&self, mu: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<Vec<f64>> {
        if mu.len() != dirs.len() {
            return Err(Error::Shape("one direction per mean required".into()));
        }
        let mut tape = Tape::new();
        let m = tape.constant(mu.len(), 3, mu.iter().flatten().copied().collect());
        let d = tape.constant(dirs.len(), 3, dirs.iter().flatten().copied().collect());
        let vars = self.record(&mut tape, m, d, None)?;
        Ok(tape.value(vars.factors).to_vec())
    }

    /// Renderer modulation for Gaussians with means `mu` seen from `position`.
    pub fn modulation(&self, mu: &[[f64; 3]], position: [f64; 3]) -> Result<Modulation> {
        let dirs: Vec<[f64; 3]> = mu
            .iter()
            .map(|m| {
                let v = [m[0] - position[0], m[1] - position[1], m[2] - position[2]];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [v[0] / n, v[1] / n, v[2] / n]
            })
            .collect();
        let f = self.factors(mu, &dirs)?;
        self.config.modulation.to_modulation(mu.len(), &f)
    }

    /// Pipeline I: the raw hypernetwork output `(angles, decoder)` for a
    /// point, without dropout.
    pub fn hypernet_generate(&self, mu: [f64; 3]) -> Result<(AnsatzParams, Vec<f64>)> {
        if self.config.kind != PipelineKind::I {
            return Err(Error::Config("hypernet_generate needs pipeline I".into()));
        }
        let mut tape = Tape::new();
        let values = self.group_values();
        let infos: Vec<(usize, usize)> = self.groups().iter().map(|g| (g.rows, g.cols)).collect();
        let vars: Vec<Var> = values.iter().zip(&infos).map(|(v, &(r, c))| tape.constant(r, c, v.to_vec())).collect();
        let m = tape.constant(1, 3, mu.to_vec());
        let feat = self.spatial.encode_on_tape(&mut tape, m, vars[0])?;
        let out = mlp_forward(&mut tape, feat, &vars[1..7], true, None)?;
        let v = tape.value(out);
        let per = self.config.ansatz_layers * AnsatzParams::PER_LAYER;
        Ok((AnsatzParams::from_flat(v[..per].to_vec())?, v[per..].to_vec()))
    }

    /// Replaces the values of group `index`.
    pub fn set_group(&mut self, index: usize, values: &[f64]) -> Result<()> {
        let mut groups = self.group_values_mut();
        let len = groups.len();
        let g = groups.get_mut(index).ok_or(Error::IndexOutOfRange { index, len })?;
        if g.len() != values.len() {
            return Err(Error::Shape(format!("group {index}: {} values, expected {}", values.len(), g.len())));
        }
        g.copy_from_slice(values);
        Ok(())
    }
}

/// `2 sigmoid(x)` as used by the factor head.
pub fn decode_scalar(x: f64) -> f64 {
    1.0 + (0.5 * x).tanh()
}

/// Standalone decode: maps raw decoder outputs to factors and splits them
/// per mode.
pub fn decode(raw: &[f64], mode: ModulationMode) -> Result<Modulation> {
    if raw.len() != mode.n_out() {
        return Err(Error::Shape(format!("decode: {} raw values, mode {} needs {}", raw.len(), mode, mode.n_out())));
    }
    let f: Vec<f64> = raw.iter().map(|&x| decode_scalar(x)).collect();
    mode.to_modulation(1, &f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_grid(bounds: Aabb) -> HashGridConfig {
        HashGridConfig { num_levels: 2, features_per_level: 2, table_size: 1 << 8, base_resolution: 2, max_resolution: 8, bounds }
    }

    fn config(kind: PipelineKind, mode: ModulationMode) -> PipelineConfig {
        let b = Aabb::new([-1.0; 3], [1.0; 3]);
        let mut c = PipelineConfig::desk(kind, mode, b);
        c.spatial_grid = small_grid(b);
        c.direction_grid = small_grid(Aabb::unit());
        c.hidden = 8;
        c.proj_hidden = 8;
        c
    }

    fn sample(rng: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
        let mu = (0..n).map(|_| [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)]).collect();
        let dirs = (0..n)
            .map(|_| {
                let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|x| x / n)
            })
            .collect();
        (mu, dirs)
    }

    #[test]
    fn n_out_and_hypernet_width() {
        assert_eq!(ModulationMode::Full.n_out(), 49);
        assert_eq!(ModulationMode::OnlyOpacity.n_out(), 1);
        assert_eq!(ModulationMode::OnlySh.n_out(), 48);
        assert_eq!(ModulationMode::NoSh.n_out(), 4);
        for m in ModulationMode::ALL {
            let k = m.n_out();
            assert_eq!(hypernet_output_dim(4, m), 24 + (3 * 3 + 3) + (3 * k + k));
            assert_eq!(m.as_str().parse::<ModulationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<ModulationMode>().is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_scalar(0.0), 1.0);
        assert!((decode_scalar(3f64.ln()) - 1.5).abs() < 1e-15);
        assert!((decode_scalar(60.0) - 2.0).abs() < 1e-12 && decode_scalar(-60.0) < 1e-12);
        assert!(decode(&[0.0; 3], ModulationMode::Full).is_err());
        let m = decode(&[0.0], ModulationMode::OnlyOpacity).unwrap();
        assert_eq!(m.opacity, Some(vec![1.0]));
        assert_eq!(m.color, ColorFactors::None);
    }

    #[test]
    fn identity_at_init_both_pipelines() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mu, dirs) = sample(&mut rng, 5);
        for kind in [PipelineKind::I, PipelineKind::II] {
            for mode in ModulationMode::ALL {
                let zero = Modulator::zeros(config(kind, mode)).unwrap();
                assert!(zero.factors(&mu, &dirs).unwrap().iter().all(|&f| f == 1.0));
                let init = Modulator::new(config(kind, mode), &mut rng).unwrap();
                assert!(init.factors(&mu, &dirs).unwrap().iter().all(|&f| f == 1.0), "{kind} {mode}");
            }
        }
    }

    #[test]
    fn factors_bounded_after_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mu, dirs) = sample(&mut rng, 6);
        for kind in [PipelineKind::I, PipelineKind::II] {
            let mut m = Modulator::new(config(kind, ModulationMode::Full), &mut rng).unwrap();
            for g in m.group_values_mut() {
                g.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
            let f = m.factors(&mu, &dirs).unwrap();
            assert!(f.iter().all(|&x| x > 0.0 && x < 2.0));
            assert!(f.iter().any(|&x| x != 1.0));
        }
    }

    #[test]
    fn pipeline_i_same_mean_same_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Modulator::new(config(PipelineKind::I, ModulationMode::Full), &mut rng).unwrap();
        for g in m.group_values_mut() {
            g.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let a = m.hypernet_generate([0.1, -0.2, 0.3]).unwrap();
        let b = m.hypernet_generate([0.1, -0.2, 0.3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), decoder_param_count(49));
        let c = m.hypernet_generate([0.5, 0.2, -0.3]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn group_layout() {
        let m = Modulator::zeros(config(PipelineKind::I, ModulationMode::Full)).unwrap();
        let names: Vec<&str> = m.groups().iter().map(|g| g.name).collect();
        assert_eq!(names, ["hash_spatial", "hyper.w0", "hyper.b0", "hyper.w1", "hyper.b1", "hyper.w2", "hyper.b2"]);
        let m = Modulator::zeros(config(PipelineKind::II, ModulationMode::NoSh)).unwrap();
        let g = m.groups();
        assert_eq!(g.len(), 2 + 12 + 5);
        assert_eq!(g[14].name, "ansatz");
        assert_eq!(g[18].cols, 4);
    }
}
