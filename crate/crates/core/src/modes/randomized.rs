use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::{assemble, checked_sqrt_marginal, scaled_matrix, ModeDecomposition};
use crate::distribution::ConditionalOperator;
use crate::error::{Error, Result};
use crate::rng;

const OVERSAMPLE: usize = 10;
const POWER_ITERATIONS: usize = 2;

/// Rank-`rank` randomized SVD of `C·D⁻¹` (range finder with power iterations).
///
/// The result is marked incomplete: no Λ⁰ or Λ⁺⁺ completion is attempted.
pub fn randomized_svd(op: &ConditionalOperator, rank: usize, rank_tol: f64, seed: u64) -> Result<ModeDecomposition> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be >= 1".into()));
    }
    let sqrt_q = checked_sqrt_marginal(op)?;
    let m = scaled_matrix(&op.matrix, &sqrt_q);
    let (ny, nx) = m.shape();
    let sketch = (rank + OVERSAMPLE).min(nx).min(ny);
    let mut g = rng::stream(seed, rng::SKETCH, 0);
    let omega = DMatrix::from_fn(nx, sketch, |_, _| StandardNormal.sample(&mut g));
    let mut q = (&m * omega).qr().q();
    for _ in 0..POWER_ITERATIONS {
        let z = m.tr_mul(&q).qr().q();
        q = (&m * z).qr().q();
    }
    let b = q.tr_mul(&m);
    let svd = b.svd(true, true);
    let (ub, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(v)) => (u, v),
        _ => return Err(Error::NonFinite("sketch SVD".into())),
    };
    let u = &q * ub;
    let keep = rank.min(svd.singular_values.len());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let triples: Vec<(f64, DVector<f64>, DVector<f64>)> = order[..keep]
        .iter()
        .map(|&i| (svd.singular_values[i], u.column(i).into_owned(), vt.row(i).transpose()))
        .collect();
    let (singular, left, right, n_plus) = assemble(triples, ny, nx, rank_tol, false);
    Ok(ModeDecomposition {
        k: op.k,
        l: op.l,
        alphabet_size: op.alphabet_size,
        x_labels: op.x_labels.clone(),
        y_labels: op.y_labels.clone(),
        singular_values: singular,
        left,
        right,
        sqrt_marginal: sqrt_q,
        n_plus,
        rank_tol,
        complete: false,
    })
}
