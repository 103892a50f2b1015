mod common;

use common::*;
use qgs_core::quantum::{
    bloch_angles, circuit_gradients, conditioned_circuit_gradients, encode_direction, AnsatzParams, BlochAngles,
    StateVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_params(rng: &mut ChaCha8Rng, layers: usize) -> AnsatzParams {
    AnsatzParams::from_flat((0..6 * layers).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap()
}

#[test]
fn ansatz_matches_dense_matrix_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let angles = bloch_angles(random_unit(&mut rng)).unwrap();
        let params = random_params(&mut rng, 4);
        let mut s = encode_direction(angles);
        s.apply_ansatz(&params);
        let dense = matvec(&ansatz_unitary(params.as_slice()), &encoded_state(angles.theta, angles.phi));
        // encoder and gates match exactly, not just up to phase
        for (a, b) in s.amps().iter().zip(dense.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_angle_ansatz_on_basis_state_matches_dense_oracle() {
    let u = ansatz_unitary(&[0.0; 24]);
    let mut input = [num_complex::Complex64::new(0.0, 0.0); 8];
    input[1] = num_complex::Complex64::new(1.0, 0.0);
    let expected = matvec(&u, &input);
    let mut s = StateVector::basis(1);
    s.apply_ansatz(&AnsatzParams::zeros(4));
    for (a, b) in s.amps().iter().zip(expected.iter()) {
        assert!((a - b).norm() < 1e-15);
    }
}

#[test]
fn encoding_reproduces_dz() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let d = random_unit(&mut rng);
        let z = encode_direction(bloch_angles(d).unwrap()).measure_z();
        for zj in z.z {
            assert!((zj - d[2]).abs() < 1e-12);
        }
    }
}

#[test]
fn adjoint_gradients_match_shift_rule_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        // keep away from the poles, where phi is degenerate
        let enc = BlochAngles { theta: rng.gen_range(0.2..2.9), phi: rng.gen_range(0.0..std::f64::consts::TAU) };
        let params = random_params(&mut rng, 4);
        let up = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let g = circuit_gradients(enc, &params, up);
        let mut analytic = vec![g.enc_theta, g.enc_phi];
        analytic.extend_from_slice(&g.params);

        let shift = parameter_shift(enc.theta, enc.phi, None, params.as_slice(), up);
        let fd = finite_difference(enc.theta, enc.phi, None, params.as_slice(), up, 1e-5);
        for i in 0..analytic.len() {
            assert!((analytic[i] - shift[i]).abs() < 1e-9, "slot {i}: {} vs shift {}", analytic[i], shift[i]);
            assert!(rel_err(analytic[i], fd[i]) < 1e-6, "slot {i}: {} vs fd {}", analytic[i], fd[i]);
        }
    }
}

#[test]
fn conditioned_gradients_match_shift_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let enc = BlochAngles { theta: rng.gen_range(0.2..2.9), phi: rng.gen_range(0.0..std::f64::consts::TAU) };
        let cond: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        let params = random_params(&mut rng, 2);
        let up = [0.3, -1.2, 0.7];
        let g = conditioned_circuit_gradients(enc, &cond, &params, up);
        let mut analytic = vec![g.enc_theta, g.enc_phi];
        analytic.extend_from_slice(&g.conditioning);
        analytic.extend_from_slice(&g.params);
        let shift = parameter_shift(enc.theta, enc.phi, Some(cond), params.as_slice(), up);
        for i in 0..analytic.len() {
            assert!((analytic[i] - shift[i]).abs() < 1e-9, "slot {i}");
        }
        let z = dense_expectation(enc.theta, enc.phi, Some(cond), params.as_slice());
        for j in 0..3 {
            assert!((g.expectation.z[j] - z[j]).abs() < 1e-12);
        }
    }
}
