//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use seqmodes::distribution::ConditionalOperator;

/// Thin SVD by one-sided (Hestenes) Jacobi rotations, independent of any
/// library SVD. Returns singular values in descending order with matching
/// columns of `U` (m x r) and `V` (n x r), r = min(m, n).
pub fn jacobi_svd(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    if a.nrows() < a.ncols() {
        let (s, u, v) = jacobi_svd(&a.transpose());
        return (s, v, u);
    }
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = w.column(i).norm_squared();
                let beta = w.column(j).norm_squared();
                let gamma = w.column(i).dot(&w.column(j));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (x, y) = (w[(r, i)], w[(r, j)]);
                    w[(r, i)] = c * x - s * y;
                    w[(r, j)] = s * x + c * y;
                }
                for r in 0..n {
                    let (x, y) = (v[(r, i)], v[(r, j)]);
                    v[(r, i)] = c * x - s * y;
                    v[(r, j)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|i| w.column(i).norm()).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let s: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let u = DMatrix::from_fn(m, n, |r, c| {
        let i = order[c];
        if norms[i] > 0.0 { w[(r, i)] / norms[i] } else { 0.0 }
    });
    let vv = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (s, u, vv)
}

/// `C · diag(q^{1/2})`, built entry by entry.
pub fn scaled(op: &ConditionalOperator) -> DMatrix<f64> {
    DMatrix::from_fn(op.num_y(), op.num_x(), |y, x| op.matrix[(y, x)] * op.marginal[x].sqrt())
}

/// `|⟨a, b⟩|` for unit vectors: 1 when they agree up to sign.
pub fn alignment(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b).abs() / (a.norm() * b.norm())
}

/// Writes one acceptance line straight to the terminal, past the test harness's capture.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!("criterion {criterion:>2}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
}
