//! Reverse-mode differentiation for the classical parts of the model, plus
//! the Adam optimizer.

mod adam;
mod tape;

pub use adam::AdamState;
pub use tape::{forward_backward, CustomOp, Gradients, Tape, Var};

use crate::error::Result;

/// `x * 0.5 * (1 + erf(x / sqrt 2))`.
pub fn gelu(tape: &mut Tape, x: Var) -> Result<Var> {
    let scaled = tape.scale(x, std::f64::consts::FRAC_1_SQRT_2);
    let e = tape.erf(scaled);
    let half = tape.add_scalar(e, 1.0);
    let half = tape.scale(half, 0.5);
    tape.mul(x, half)
}

/// `2 sigmoid(x)`, written as `1 + tanh(x / 2)` so that `x = 0` maps to
/// exactly 1.
pub fn two_sigmoid(tape: &mut Tape, x: Var) -> Var {
    let h = tape.scale(x, 0.5);
    let t = tape.tanh(h);
    tape.add_scalar(t, 1.0)
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_check(x0: f64, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> (f64, f64) {
        let (_, g) = forward_backward(&[(1, 1, vec![x0])], |t, p| f(t, p[0])).unwrap();
        let eval = |x: f64| {
            let mut t = Tape::new();
            let v = t.param(1, 1, vec![x]);
            let o = f(&mut t, v).unwrap();
            t.scalar(o)
        };
        let h = 1e-6;
        (g[0][0], (eval(x0 + h) - eval(x0 - h)) / (2.0 * h))
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #[test]
        fn unary_primitives_match_fd(x in 0.1f64..3.0) {
            let cases: Vec<Box<dyn Fn(&mut Tape, Var) -> Result<Var>>> = vec![
                Box::new(|t, v| Ok(t.exp(v))),
                Box::new(|t, v| t.ln(v)),
                Box::new(|t, v| Ok(t.tanh(v))),
                Box::new(|t, v| Ok(t.erf(v))),
                Box::new(|t, v| t.sqrt(v)),
                Box::new(gelu),
                Box::new(|t, v| Ok(two_sigmoid(t, v))),
                Box::new(|t, v| { let c = t.scalar_constant(1.3); t.div(c, v) }),
                Box::new(|t, v| { let c = t.scalar_constant(1.5); t.max(v, c) }),
            ];
            for f in cases {
                let (a, n) = fd_check(x, f);
                prop_assert!(close(a, n), "analytic {a} vs fd {n}");
            }
        }

        #[test]
        fn composite_matches_fd(a in -2.0f64..2.0, b in -2.0f64..2.0, c in 0.5f64..2.0) {
            let f = |t: &mut Tape, p: &[Var]| -> Result<Var> {
                let w = t.constant(2, 2, vec![0.3, -1.1, 0.7, 0.2]);
                let x = t.concat_cols(&[p[0], p[1]])?;
                let y = t.matmul(x, w)?;
                let g = gelu(t, y)?;
                let s = t.slice_cols(g, 1, 1)?;
                let q = t.div(s, p[2])?;
                let e = t.tanh(q);
                let rs = t.row_sum(g);
                let z = t.mul(e, rs)?;
                Ok(t.sum(z))
            };
            let vals = [a, b, c];
            let params: Vec<_> = vals.iter().map(|&v| (1, 1, vec![v])).collect();
            let (_, g) = forward_backward(&params, f).unwrap();
            for i in 0..3 {
                let eval = |delta: f64| {
                    let p: Vec<_> = vals.iter().enumerate()
                        .map(|(j, &v)| (1, 1, vec![if i == j { v + delta } else { v }])).collect();
                    forward_backward(&p, f).unwrap().0
                };
                let h = 1e-6;
                let n = (eval(h) - eval(-h)) / (2.0 * h);
                prop_assert!(close(g[i][0], n), "param {i}: {} vs {n}", g[i][0]);
            }
        }
    }

    #[test]
    fn batched_vecmat_matches_fd() {
        let x0 = vec![0.5, -1.0, 2.0, 0.1];
        let w0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = |t: &mut Tape, p: &[Var]| -> Result<Var> {
            let y = t.batched_vecmat(p[0], p[1], 3)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        };
        let (_, g) = forward_backward(&[(2, 2, x0.clone()), (2, 6, w0.clone())], f).unwrap();
        let h = 1e-6;
        for (which, base) in [(0usize, &x0), (1, &w0)] {
            for k in 0..base.len() {
                let eval = |d: f64| {
                    let mut xs = x0.clone();
                    let mut ws = w0.clone();
                    if which == 0 { xs[k] += d } else { ws[k] += d }
                    forward_backward(&[(2, 2, xs), (2, 6, ws)], f).unwrap().0
                };
                let n = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(close(g[which][k], n));
            }
        }
    }
}
