//! Exact statevector simulation of the 3-qubit direction encoder and the
//! variational ansatz.
//!
//! Basis states are indexed little-endian: qubit `j` is bit `j` of the
//! basis-state integer, so `|q2 q1 q0>` lives at index `q0 + 2 q1 + 4 q2`.
//!
//! Every circuit used by the pipelines is a straight-line sequence of
//! `Ry`, `Rz` and `CNOT` gates whose rotation angles are read from a flat
//! slot vector. [`Circuit`] owns such a sequence and provides the forward
//! simulation together with exact adjoint gradients for every slot.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const NUM_QUBITS: usize = 3;
pub const DIM: usize = 1 << NUM_QUBITS;

/// Default number of ansatz layers.
pub const DEFAULT_LAYERS: usize = 4;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Amplitudes of the 3-qubit register.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateVector {
    amps: [Complex64; DIM],
}

impl Default for StateVector {
    fn default() -> Self {
        Self::zero()
    }
}

impl StateVector {
    /// `|000>`.
    pub fn zero() -> Self {
        Self::basis(0)
    }

    pub fn basis(index: usize) -> Self {
        let mut amps = [ZERO; DIM];
        amps[index % DIM] = ONE;
        Self { amps }
    }

    pub fn from_amps(amps: [Complex64; DIM]) -> Self {
        Self { amps }
    }

    pub fn amps(&self) -> &[Complex64; DIM] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amps
            .iter()
            .zip(other.amps.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Fidelity `|<self|other>|^2`; equals 1 iff the states agree up to a
    /// global phase.
    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn apply_ry(&mut self, qubit: usize, angle: f64) -> Result<()> {
        check_qubit(qubit)?;
        ry(&mut self.amps, qubit, angle);
        Ok(())
    }

    pub fn apply_rz(&mut self, qubit: usize, angle: f64) -> Result<()> {
        check_qubit(qubit)?;
        rz(&mut self.amps, qubit, angle);
        Ok(())
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<()> {
        check_qubit(control)?;
        check_qubit(target)?;
        if control == target {
            return Err(Error::SameControlTarget(control));
        }
        cnot(&mut self.amps, control, target);
        Ok(())
    }

    /// Runs the full layered ansatz on this state.
    pub fn apply_ansatz(&mut self, params: &AnsatzParams) {
        for layer in 0..params.num_layers() {
            for q in 0..NUM_QUBITS {
                ry(&mut self.amps, q, params.theta(layer, q));
                rz(&mut self.amps, q, params.phi(layer, q));
            }
            entangle(&mut self.amps);
        }
    }

    pub fn measure_z(&self) -> ExpectationVector {
        let mut z = [0.0; NUM_QUBITS];
        for (k, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            for (j, zj) in z.iter_mut().enumerate() {
                if k >> j & 1 == 0 {
                    *zj += p;
                } else {
                    *zj -= p;
                }
            }
        }
        ExpectationVector { z }
    }
}

fn check_qubit(q: usize) -> Result<()> {
    if q < NUM_QUBITS {
        Ok(())
    } else {
        Err(Error::QubitOutOfRange(q))
    }
}

#[inline]
fn ry(amps: &mut [Complex64; DIM], q: usize, angle: f64) {
    let (s, c) = (0.5 * angle).sin_cos();
    let mask = 1 << q;
    for k in 0..DIM {
        if k & mask == 0 {
            let a0 = amps[k];
            let a1 = amps[k | mask];
            amps[k] = a0 * c - a1 * s;
            amps[k | mask] = a0 * s + a1 * c;
        }
    }
}

#[inline]
fn rz(amps: &mut [Complex64; DIM], q: usize, angle: f64) {
    let (s, c) = (0.5 * angle).sin_cos();
    let lo = Complex64::new(c, -s);
    let hi = Complex64::new(c, s);
    let mask = 1 << q;
    for (k, a) in amps.iter_mut().enumerate() {
        *a *= if k & mask == 0 { lo } else { hi };
    }
}

#[inline]
fn cnot(amps: &mut [Complex64; DIM], control: usize, target: usize) {
    let cm = 1 << control;
    let tm = 1 << target;
    for k in 0..DIM {
        if k & cm != 0 && k & tm == 0 {
            amps.swap(k, k | tm);
        }
    }
}

/// Ring entangler: CNOT 0->1, then 1->2, then 2->0.
#[inline]
fn entangle(amps: &mut [Complex64; DIM]) {
    cnot(amps, 0, 1);
    cnot(amps, 1, 2);
    cnot(amps, 2, 0);
}

/// `P |psi>` for the Pauli generator of a rotation gate.
fn apply_generator(amps: &[Complex64; DIM], q: usize, axis: Axis) -> [Complex64; DIM] {
    let mask = 1 << q;
    let mut out = [ZERO; DIM];
    match axis {
        Axis::Y => {
            let i = Complex64::new(0.0, 1.0);
            for k in 0..DIM {
                if k & mask == 0 {
                    out[k] = -i * amps[k | mask];
                    out[k | mask] = i * amps[k];
                }
            }
        }
        Axis::Z => {
            for k in 0..DIM {
                out[k] = if k & mask == 0 { amps[k] } else { -amps[k] };
            }
        }
    }
    out
}

/// Polar and azimuthal angle of a direction on the Bloch sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlochAngles {
    /// Polar angle in `[0, pi]`.
    pub theta: f64,
    /// Azimuth in `[0, 2 pi)`.
    pub phi: f64,
}

/// Maps a unit direction to its Bloch angles. Non-unit input is normalized
/// (with a warning if it is off by more than 1e-6).
pub fn bloch_angles(d: [f64; 3]) -> Result<BlochAngles> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroDirection);
    }
    if (n - 1.0).abs() > 1e-6 {
        log::warn!("bloch_angles: direction has norm {n}, normalizing");
    }
    let (x, y, z) = (d[0] / n, d[1] / n, d[2] / n);
    let theta = z.clamp(-1.0, 1.0).acos();
    let mut phi = y.atan2(x);
    if phi < 0.0 {
        phi += TAU;
    }
    // -0.0 + 2 pi and rounding can land exactly on 2 pi
    if phi >= TAU {
        phi -= TAU;
    }
    Ok(BlochAngles { theta, phi })
}

/// Product state `(Rz(phi) Ry(theta) |0>)^{(x)3}`.
pub fn encode_direction(angles: BlochAngles) -> StateVector {
    let mut s = StateVector::zero();
    for q in 0..NUM_QUBITS {
        ry(&mut s.amps, q, angles.theta);
        rz(&mut s.amps, q, angles.phi);
    }
    s
}

/// Trainable ansatz angles, flattened as `[layer][qubit][theta, phi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnsatzParams {
    values: Vec<f64>,
}

impl AnsatzParams {
    pub const PER_LAYER: usize = 2 * NUM_QUBITS;

    pub fn zeros(num_layers: usize) -> Self {
        Self { values: vec![0.0; num_layers * Self::PER_LAYER] }
    }

    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        if values.len() % Self::PER_LAYER != 0 {
            return Err(Error::Shape(format!(
                "ansatz parameter count {} is not a multiple of {}",
                values.len(),
                Self::PER_LAYER
            )));
        }
        Ok(Self { values })
    }

    pub fn num_layers(&self) -> usize {
        self.values.len() / Self::PER_LAYER
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn theta(&self, layer: usize, qubit: usize) -> f64 {
        self.values[layer * Self::PER_LAYER + 2 * qubit]
    }

    pub fn phi(&self, layer: usize, qubit: usize) -> f64 {
        self.values[layer * Self::PER_LAYER + 2 * qubit + 1]
    }

    pub fn set_theta(&mut self, layer: usize, qubit: usize, v: f64) {
        self.values[layer * Self::PER_LAYER + 2 * qubit] = v;
    }

    pub fn set_phi(&mut self, layer: usize, qubit: usize, v: f64) {
        self.values[layer * Self::PER_LAYER + 2 * qubit + 1] = v;
    }
}

/// `<Z_j>` for each qubit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpectationVector {
    pub z: [f64; NUM_QUBITS],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Y,
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Gate {
    Rot { axis: Axis, qubit: usize, slot: usize },
    Cnot { control: usize, target: usize },
}

/// Straight-line gate program over a flat vector of angle slots.
///
/// Slot layout: `[theta_enc, phi_enc]`, then (conditioned circuits only)
/// `[ry_0, ry_1, ry_2, rz_0, rz_1, rz_2]`, then the ansatz angles in
/// [`AnsatzParams`] order.
#[derive(Clone, Debug)]
pub struct Circuit {
    gates: Vec<Gate>,
    num_layers: usize,
    conditioned: bool,
}

/// Analytic gradients of `sum_j upstream_j <Z_j>`.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitGradients {
    pub expectation: ExpectationVector,
    pub enc_theta: f64,
    pub enc_phi: f64,
    /// Conditioning-layer gradients `[ry_0..2, rz_0..2]`; zero for plain circuits.
    pub conditioning: [f64; 2 * NUM_QUBITS],
    pub params: Vec<f64>,
}

impl Circuit {
    pub const COND_SLOTS: usize = 2 * NUM_QUBITS;

    /// Encoder followed by the ansatz.
    pub fn new(num_layers: usize) -> Self {
        Self::build(num_layers, false)
    }

    /// Encoder, a per-qubit `Ry(s_j) Rz(v_j)` conditioning layer, then the ansatz.
    pub fn conditioned(num_layers: usize) -> Self {
        Self::build(num_layers, true)
    }

    fn build(num_layers: usize, conditioned: bool) -> Self {
        let mut gates = Vec::new();
        for q in 0..NUM_QUBITS {
            gates.push(Gate::Rot { axis: Axis::Y, qubit: q, slot: 0 });
            gates.push(Gate::Rot { axis: Axis::Z, qubit: q, slot: 1 });
        }
        let mut base = 2;
        if conditioned {
            for q in 0..NUM_QUBITS {
                gates.push(Gate::Rot { axis: Axis::Y, qubit: q, slot: base + q });
                gates.push(Gate::Rot { axis: Axis::Z, qubit: q, slot: base + NUM_QUBITS + q });
            }
            base += Self::COND_SLOTS;
        }
        for layer in 0..num_layers {
            let off = base + layer * AnsatzParams::PER_LAYER;
            for q in 0..NUM_QUBITS {
                gates.push(Gate::Rot { axis: Axis::Y, qubit: q, slot: off + 2 * q });
                gates.push(Gate::Rot { axis: Axis::Z, qubit: q, slot: off + 2 * q + 1 });
            }
            gates.push(Gate::Cnot { control: 0, target: 1 });
            gates.push(Gate::Cnot { control: 1, target: 2 });
            gates.push(Gate::Cnot { control: 2, target: 0 });
        }
        Self { gates, num_layers, conditioned }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn is_conditioned(&self) -> bool {
        self.conditioned
    }

    pub fn num_slots(&self) -> usize {
        2 + if self.conditioned { Self::COND_SLOTS } else { 0 }
            + self.num_layers * AnsatzParams::PER_LAYER
    }

    /// Offset of the first ansatz slot.
    pub fn ansatz_offset(&self) -> usize {
        2 + if self.conditioned { Self::COND_SLOTS } else { 0 }
    }

    pub fn run(&self, slots: &[f64]) -> StateVector {
        assert_eq!(slots.len(), self.num_slots(), "circuit slot count");
        let mut s = StateVector::zero();
        for g in &self.gates {
            apply_gate(&mut s.amps, *g, slots, false);
        }
        s
    }

    /// Returns the expectations and `d(sum_j upstream_j <Z_j>)/d slot` for
    /// every slot, by one forward pass and one adjoint sweep.
    pub fn gradient(&self, slots: &[f64], upstream: [f64; NUM_QUBITS]) -> (ExpectationVector, Vec<f64>) {
        let psi_out = self.run(slots);
        let expectation = psi_out.measure_z();
        let mut grads = vec![0.0; slots.len()];
        if upstream.iter().all(|&u| u == 0.0) {
            return (expectation, grads);
        }

        let mut psi = psi_out.amps;
        let mut lambda = psi_out.amps;
        for (k, l) in lambda.iter_mut().enumerate() {
            let w: f64 = (0..NUM_QUBITS)
                .map(|j| if k >> j & 1 == 0 { upstream[j] } else { -upstream[j] })
                .sum();
            *l *= w;
        }

        for g in self.gates.iter().rev() {
            if let Gate::Rot { axis, qubit, slot } = *g {
                let p_psi = apply_generator(&psi, qubit, axis);
                let overlap: Complex64 = lambda.iter().zip(p_psi.iter()).map(|(l, p)| l.conj() * p).sum();
                grads[slot] += overlap.im;
            }
            apply_gate(&mut psi, *g, slots, true);
            apply_gate(&mut lambda, *g, slots, true);
        }
        (expectation, grads)
    }
}

#[inline]
fn apply_gate(amps: &mut [Complex64; DIM], g: Gate, slots: &[f64], inverse: bool) {
    match g {
        Gate::Rot { axis, qubit, slot } => {
            let a = if inverse { -slots[slot] } else { slots[slot] };
            match axis {
                Axis::Y => ry(amps, qubit, a),
                Axis::Z => rz(amps, qubit, a),
            }
        }
        Gate::Cnot { control, target } => cnot(amps, control, target),
    }
}

fn slots_for(enc: BlochAngles, cond: Option<&[f64; 2 * NUM_QUBITS]>, params: &AnsatzParams) -> Vec<f64> {
    let mut slots = Vec::with_capacity(2 + 2 * NUM_QUBITS + params.len());
    slots.push(enc.theta);
    slots.push(enc.phi);
    if let Some(c) = cond {
        slots.extend_from_slice(c);
    }
    slots.extend_from_slice(params.as_slice());
    slots
}

/// Encoder + ansatz + Z readout.
pub fn circuit_expectation(enc: BlochAngles, params: &AnsatzParams) -> ExpectationVector {
    let mut s = encode_direction(enc);
    s.apply_ansatz(params);
    s.measure_z()
}

/// Adjoint gradients of `upstream . <Z>` with respect to the encoding angles
/// and every ansatz angle.
pub fn circuit_gradients(enc: BlochAngles, params: &AnsatzParams, upstream: [f64; NUM_QUBITS]) -> CircuitGradients {
    let circuit = Circuit::new(params.num_layers());
    let slots = slots_for(enc, None, params);
    let (expectation, g) = circuit.gradient(&slots, upstream);
    CircuitGradients {
        expectation,
        enc_theta: g[0],
        enc_phi: g[1],
        conditioning: [0.0; 2 * NUM_QUBITS],
        params: g[2..].to_vec(),
    }
}

/// As [`circuit_gradients`] for the conditioned circuit
/// (`cond = [s_0, s_1, s_2, v_0, v_1, v_2]`).
pub fn conditioned_circuit_gradients(
    enc: BlochAngles,
    cond: &[f64; 2 * NUM_QUBITS],
    params: &AnsatzParams,
    upstream: [f64; NUM_QUBITS],
) -> CircuitGradients {
    let circuit = Circuit::conditioned(params.num_layers());
    let slots = slots_for(enc, Some(cond), params);
    let (expectation, g) = circuit.gradient(&slots, upstream);
    let mut conditioning = [0.0; 2 * NUM_QUBITS];
    conditioning.copy_from_slice(&g[2..2 + Circuit::COND_SLOTS]);
    CircuitGradients {
        expectation,
        enc_theta: g[0],
        enc_phi: g[1],
        conditioning,
        params: g[2 + Circuit::COND_SLOTS..].to_vec(),
    }
}

/// Jacobian of `(theta, phi)` with respect to a unit direction, as rows
/// `[d theta / d d, d phi / d d]`. Components that blow up at the poles are
/// returned as zero there.
pub fn bloch_angles_jacobian(d: [f64; 3]) -> [[f64; 3]; 2] {
    let mut jac = [[0.0; 3]; 2];
    let s2 = 1.0 - d[2] * d[2];
    if s2 > 1e-14 {
        jac[0][2] = -1.0 / s2.sqrt();
    }
    let r2 = d[0] * d[0] + d[1] * d[1];
    if r2 > 1e-14 {
        jac[1][0] = -d[1] / r2;
        jac[1][1] = d[0] / r2;
    }
    jac
}
