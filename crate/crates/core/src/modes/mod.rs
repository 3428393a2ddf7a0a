//! Modes of a conditional operator.
//!
//! The weighted SVD of `C` is computed as the ordinary SVD of `C·D⁻¹` with
//! `D⁻¹ = diag(q(x)^{1/2})`. Right singular vectors are kept in D-coordinates
//! `ṽ_α`; the dual functions are `v̂*_α(x) = ṽ_α(x)·q(x)^{-1/2}`.
//!
//! Elements of ℋ are stored as `|Y| x |X|` matrices `f[(y, x)]` with inner
//! product `⟨f, g⟩ = Σ_x q(x) Σ_y f(y, x) g(y, x)`.

mod randomized;
mod tucker;

pub use randomized::randomized_svd;
pub use tucker::{tucker_decompose, Tucker};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::join_ids;
use crate::distribution::ConditionalOperator;
use crate::error::{Error, Result};

pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Singular values closer than this (relative to `s_max`) count as tied.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModeDecomposition {
    pub k: usize,
    pub l: usize,
    pub alphabet_size: usize,
    pub x_labels: Vec<Vec<u32>>,
    pub y_labels: Vec<Vec<u32>>,
    /// `s_α` in the total order on Λ; zero on Λ⁰.
    pub singular_values: Vec<f64>,
    /// Columns `u_β`; the first `n_plus` pair with Λ⁺, the rest complete Λ⁺⁺.
    pub left: DMatrix<f64>,
    /// Columns `ṽ_α`.
    pub right: DMatrix<f64>,
    pub sqrt_marginal: DVector<f64>,
    /// `|Λ⁺|`.
    pub n_plus: usize,
    /// Relative threshold separating Λ⁺ from Λ⁰.
    pub rank_tol: f64,
    /// False for truncated (randomized) decompositions.
    pub complete: bool,
}

/// Weighted SVD of `op` with Λ⁺ = {α : s_α > rank_tol · s_max}.
pub fn weighted_svd(op: &ConditionalOperator, rank_tol: f64) -> Result<ModeDecomposition> {
    if !(rank_tol >= 0.0 && rank_tol.is_finite()) {
        return Err(Error::InvalidArgument(format!("rank_tol must be >= 0, got {rank_tol}")));
    }
    let sqrt_q = checked_sqrt_marginal(op)?;
    let m = scaled_matrix(&op.matrix, &sqrt_q);
    let (ny, nx) = m.shape();
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::NonFinite("SVD failed to produce U".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::NonFinite("SVD failed to produce V".into()))?;
    if svd.singular_values.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("singular values".into()));
    }
    let triples: Vec<(f64, DVector<f64>, DVector<f64>)> = (0..svd.singular_values.len())
        .map(|i| (svd.singular_values[i], u.column(i).into_owned(), v_t.row(i).transpose()))
        .collect();
    let (singular, left, right, n_plus) = assemble(triples, ny, nx, rank_tol, true);
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
        complete: true,
    })
}

pub(crate) fn checked_sqrt_marginal(op: &ConditionalOperator) -> Result<DVector<f64>> {
    if op.matrix.iter().chain(op.marginal.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conditional operator entries".into()));
    }
    if let Some(j) = op.marginal.iter().position(|&q| q <= 0.0) {
        return Err(Error::ZeroMarginal(op.x_labels[j].clone()));
    }
    Ok(op.marginal.map(f64::sqrt))
}

/// `C · diag(q^{1/2})`.
pub fn scaled_matrix(cond: &DMatrix<f64>, sqrt_q: &DVector<f64>) -> DMatrix<f64> {
    let mut m = cond.clone();
    for (mut col, s) in m.column_iter_mut().zip(sqrt_q.iter()) {
        col *= *s;
    }
    m
}

fn argmax_abs(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

/// Flips `v` so its largest-magnitude entry (lowest index on ties) is positive.
pub(crate) fn fix_sign(v: &mut DVector<f64>) {
    if v[argmax_abs(v)] < 0.0 {
        v.neg_mut();
    }
}

/// Orders raw singular triples, applies the sign convention and completes
/// both bases. Returns `(s, U, Ṽ, n_plus)`; with `complete = false` only the
/// given triples are kept.
pub(crate) fn assemble(
    mut triples: Vec<(f64, DVector<f64>, DVector<f64>)>,
    ny: usize,
    nx: usize,
    rank_tol: f64,
    complete: bool,
) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>, usize) {
    let s_max = triples.iter().map(|t| t.0).fold(0.0, f64::max);
    for t in triples.iter_mut() {
        let flip = t.1[argmax_abs(&t.1)] < 0.0;
        if flip {
            t.1.neg_mut();
            t.2.neg_mut();
        }
    }
    triples.sort_by(|a, b| b.0.total_cmp(&a.0));
    // within runs of tied values, order by the position of the dominant entry of u
    let mut start = 0;
    while start < triples.len() {
        let mut end = start + 1;
        while end < triples.len() && (triples[end - 1].0 - triples[end].0) <= TIE_TOL * s_max {
            end += 1;
        }
        triples[start..end].sort_by_key(|t| argmax_abs(&t.1));
        start = end;
    }
    let n_plus = triples.iter().take_while(|t| s_max > 0.0 && t.0 > rank_tol * s_max).count();
    if !complete {
        let r = triples.len();
        let singular = triples.iter().map(|t| if t.0 > rank_tol * s_max { t.0 } else { 0.0 }).collect();
        let left = DMatrix::from_fn(ny, r, |i, j| triples[j].1[i]);
        let right = DMatrix::from_fn(nx, r, |i, j| triples[j].2[i]);
        return (singular, left, right, n_plus);
    }
    let kept = &triples[..n_plus];
    let u_plus = DMatrix::from_fn(ny, n_plus, |i, j| kept[j].1[i]);
    let v_plus = DMatrix::from_fn(nx, n_plus, |i, j| kept[j].2[i]);
    let left = complete_basis(&u_plus);
    let mut right = complete_basis(&v_plus);
    for j in n_plus..nx {
        let mut c = right.column(j).into_owned();
        fix_sign(&mut c);
        right.set_column(j, &c);
    }
    let mut singular: Vec<f64> = kept.iter().map(|t| t.0).collect();
    singular.resize(nx, 0.0);
    (singular, left, right, n_plus)
}

/// Extends orthonormal columns to an orthonormal basis of the ambient space.
///
/// At each step the standard basis vector with the largest residual against
/// the current span (lowest index on ties) is orthogonalised twice and added.
pub fn complete_basis(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let mut cols: Vec<DVector<f64>> = q.column_iter().map(|c| c.into_owned()).collect();
    while cols.len() < n {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for i in 0..n {
            let mut r = DVector::zeros(n);
            r[i] = 1.0;
            for c in &cols {
                let d = c[i];
                r.axpy(-d, c, 1.0);
            }
            let norm = r.norm();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, r));
            }
        }
        let (_, mut r) = best.expect("n > 0");
        for c in &cols {
            let d = c.dot(&r);
            r.axpy(-d, c, 1.0);
        }
        r /= r.norm();
        cols.push(r);
    }
    DMatrix::from_columns(&cols)
}

impl ModeDecomposition {
    pub fn num_x(&self) -> usize {
        self.x_labels.len()
    }

    pub fn num_y(&self) -> usize {
        self.y_labels.len()
    }

    /// `|Λ|` (equals `|X|` for a complete decomposition).
    pub fn num_modes(&self) -> usize {
        self.singular_values.len()
    }

    fn require_complete(&self) -> Result<()> {
        if self.complete {
            Ok(())
        } else {
            Err(Error::IncompleteDecomposition)
        }
    }

    fn check(&self, alpha: usize, x: usize, y: usize) -> Result<()> {
        if alpha >= self.num_modes() {
            return Err(Error::OutOfRange { index: alpha, len: self.num_modes() });
        }
        if x >= self.num_x() {
            return Err(Error::OutOfRange { index: x, len: self.num_x() });
        }
        if y >= self.num_y() {
            return Err(Error::OutOfRange { index: y, len: self.num_y() });
        }
        Ok(())
    }

    /// `v̂*_α(x)`.
    pub fn dual_right(&self, alpha: usize, x: usize) -> f64 {
        self.right[(x, alpha)] / self.sqrt_marginal[x]
    }

    /// `v_α(x) = q(x)^{1/2} ṽ_α(x)` in 𝒱_k coordinates.
    pub fn primal_right(&self, alpha: usize, x: usize) -> f64 {
        self.right[(x, alpha)] * self.sqrt_marginal[x]
    }

    pub fn is_positive(&self, alpha: usize) -> bool {
        alpha < self.n_plus
    }

    /// `q(y|x,α) = s_α⁻¹ v̂*_α(x) u_α(y)` on Λ⁺ and 0 on Λ⁰.
    pub fn propensity(&self, alpha: usize, x: usize, y: usize) -> Result<f64> {
        self.check(alpha, x, y)?;
        if !self.is_positive(alpha) {
            return Ok(0.0);
        }
        Ok(self.dual_right(alpha, x) * self.left[(y, alpha)] / self.singular_values[alpha])
    }

    /// `q(α) = s_α²`.
    pub fn mode_weight(&self, alpha: usize) -> Result<f64> {
        let s = self
            .singular_values
            .get(alpha)
            .ok_or(Error::OutOfRange { index: alpha, len: self.num_modes() })?;
        Ok(s * s)
    }

    /// `Σ_{α ∈ Λ⁺} s_α v̂*_α(x) u_α(y)`.
    pub fn reconstruct_conditional(&self, x: usize, y: usize) -> Result<f64> {
        self.require_complete()?;
        self.check(0, x, y)?;
        Ok((0..self.n_plus)
            .map(|a| self.singular_values[a] * self.dual_right(a, x) * self.left[(y, a)])
            .sum())
    }

    /// Sum of the first `count` modes as a `|Y| x |X|` matrix.
    pub fn partial_reconstruction(&self, count: usize) -> DMatrix<f64> {
        let count = count.min(self.n_plus);
        let mut out = DMatrix::zeros(self.num_y(), self.num_x());
        for a in 0..count {
            for x in 0..self.num_x() {
                let c = self.singular_values[a] * self.dual_right(a, x);
                for y in 0..self.num_y() {
                    out[(y, x)] += c * self.left[(y, a)];
                }
            }
        }
        out
    }

    pub fn reconstruct_matrix(&self) -> Result<DMatrix<f64>> {
        self.require_complete()?;
        Ok(self.partial_reconstruction(self.n_plus))
    }

    /// `e_{αβ}(x)(y) = v̂*_α(x) u_β(y)`.
    pub fn mode_basis_eval(&self, alpha: usize, beta: usize, x: usize, y: usize) -> Result<f64> {
        self.check(alpha, x, 0)?;
        if beta >= self.left.ncols() {
            return Err(Error::OutOfRange { index: beta, len: self.left.ncols() });
        }
        if y >= self.num_y() {
            return Err(Error::OutOfRange { index: y, len: self.num_y() });
        }
        Ok(self.dual_right(alpha, x) * self.left[(y, beta)])
    }

    /// `e_{αβ}` as an element of ℋ.
    pub fn mode_basis_element(&self, alpha: usize, beta: usize) -> Result<DMatrix<f64>> {
        self.mode_basis_eval(alpha, beta, 0, 0)?;
        Ok(DMatrix::from_fn(self.num_y(), self.num_x(), |y, x| {
            self.dual_right(alpha, x) * self.left[(y, beta)]
        }))
    }

    /// Column index of `e_{αβ}` in [`Self::gram_mode_basis`].
    pub fn basis_index(&self, alpha: usize, beta: usize) -> usize {
        alpha * self.num_y() + beta
    }

    /// `⟨e_{αβ}, e_{γδ}⟩_ℋ` by the weighted sum over `(x, y)`.
    pub fn gram_mode_basis(&self) -> Result<DMatrix<f64>> {
        self.require_complete()?;
        let (nx, ny) = (self.num_x(), self.num_y());
        // rows (x, y) scaled by q(x)^{1/2}, columns (α, β)
        let eval = DMatrix::from_fn(nx * ny, nx * ny, |row, col| {
            let (x, y) = (row / ny, row % ny);
            let (a, b) = (col / ny, col % ny);
            self.sqrt_marginal[x] * self.dual_right(a, x) * self.left[(y, b)]
        });
        Ok(eval.tr_mul(&eval))
    }

    /// Coefficients `coef[(β, α)] = ⟨f, e_{αβ}⟩_ℋ`.
    pub fn coefficients(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.require_complete()?;
        self.check_shape(f)?;
        Ok(self.left.tr_mul(&scaled_matrix(f, &self.sqrt_marginal)) * &self.right)
    }

    /// Inverse of [`Self::coefficients`].
    pub fn from_coefficients(&self, coef: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.require_complete()?;
        self.check_shape(coef)?;
        let inv = self.sqrt_marginal.map(|s| 1.0 / s);
        Ok(scaled_matrix(&(&self.left * coef * self.right.transpose()), &inv))
    }

    fn check_shape(&self, f: &DMatrix<f64>) -> Result<()> {
        if f.shape() != (self.num_y(), self.num_x()) {
            return Err(Error::InvalidArgument(format!(
                "function has shape {:?}, expected ({}, {})",
                f.shape(),
                self.num_y(),
                self.num_x()
            )));
        }
        Ok(())
    }

    pub fn marginal(&self) -> DVector<f64> {
        self.sqrt_marginal.map(|s| s * s)
    }

    pub fn h_inner(&self, f: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
        h_inner(f, g, &self.sqrt_marginal)
    }

    /// Report with the top `top_n` loadings of each of the first `rank` components.
    ///
    /// Components past the decomposition are padded with zero singular values.
    pub fn report(&self, rank: usize, top_n: usize) -> DecompositionReport {
        let available = self.n_plus;
        let mut singular_values: Vec<f64> = self.singular_values.iter().take(rank).copied().collect();
        singular_values.resize(rank, 0.0);
        let components = (0..rank.min(available))
            .map(|a| Component {
                index: a,
                singular_value: self.singular_values[a],
                mode_weight: self.singular_values[a].powi(2),
                left: top_loadings(self.left.column(a).iter().copied(), &self.y_labels, top_n),
                right: top_loadings(self.right.column(a).iter().copied(), &self.x_labels, top_n),
            })
            .collect();
        DecompositionReport {
            k: self.k,
            l: self.l,
            num_x: self.num_x(),
            num_y: self.num_y(),
            rank_tol: self.rank_tol,
            n_plus: self.n_plus,
            complete: self.complete,
            requested_rank: rank,
            padded: rank > available,
            singular_values,
            components,
        }
    }
}

/// `Σ_x q(x) Σ_y f(y, x) g(y, x)`.
pub fn h_inner(f: &DMatrix<f64>, g: &DMatrix<f64>, sqrt_q: &DVector<f64>) -> f64 {
    f.column_iter()
        .zip(g.column_iter())
        .zip(sqrt_q.iter())
        .map(|((a, b), s)| s * s * a.dot(&b))
        .sum()
}

pub fn h_norm(f: &DMatrix<f64>, sqrt_q: &DVector<f64>) -> f64 {
    h_inner(f, f, sqrt_q).sqrt()
}

/// `Σ_{x,y} p(y|x) q(x) e_{αβ}(x)(y)` for a model conditional given per context.
pub fn pair_model_with_mode<F>(model_conditional: F, dec: &ModeDecomposition, alpha: usize, beta: usize) -> Result<f64>
where
    F: Fn(&[u32]) -> Vec<f64>,
{
    let e = dec.mode_basis_element(alpha, beta)?;
    let mut total = 0.0;
    for (xi, x) in dec.x_labels.iter().enumerate() {
        let p = model_conditional(x);
        if p.len() != dec.num_y() {
            return Err(Error::InvalidArgument(format!(
                "model conditional has {} entries, expected {}",
                p.len(),
                dec.num_y()
            )));
        }
        let q = dec.sqrt_marginal[xi].powi(2);
        total += q * p.iter().enumerate().map(|(y, py)| py * e[(y, xi)]).sum::<f64>();
    }
    Ok(total)
}

/// [`pair_model_with_mode`] for a model given as a `|Y| x |X|` matrix.
pub fn pair_matrix_with_mode(model: &DMatrix<f64>, dec: &ModeDecomposition, alpha: usize, beta: usize) -> Result<f64> {
    dec.check_shape(model)?;
    let e = dec.mode_basis_element(alpha, beta)?;
    Ok(h_inner(model, &e, &dec.sqrt_marginal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loading {
    pub index: usize,
    pub ids: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub index: usize,
    pub singular_value: f64,
    pub mode_weight: f64,
    pub left: Vec<Loading>,
    pub right: Vec<Loading>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub k: usize,
    pub l: usize,
    pub num_x: usize,
    pub num_y: usize,
    pub rank_tol: f64,
    pub n_plus: usize,
    pub complete: bool,
    pub requested_rank: usize,
    pub padded: bool,
    pub singular_values: Vec<f64>,
    pub components: Vec<Component>,
}

impl DecompositionReport {
    /// Plain-text listing in the style `0.512 × [3] + 0.204 × [7] + ...`.
    pub fn to_text(&self, labels: &dyn Fn(&str) -> String) -> String {
        let mut out = String::new();
        for c in &self.components {
            out.push_str(&format!("component {}: s = {:.6}\n", c.index, c.singular_value));
            for (name, side) in [("  u", &c.left), ("  v", &c.right)] {
                let terms: Vec<String> =
                    side.iter().map(|l| format!("{:.4} × [{}]", l.value, labels(&l.ids))).collect();
                out.push_str(&format!("{name} ≈ {}\n", terms.join(" + ")));
            }
        }
        out
    }
}

fn top_loadings(values: impl Iterator<Item = f64>, labels: &[Vec<u32>], top_n: usize) -> Vec<Loading> {
    let mut all: Vec<(usize, f64)> = values.enumerate().collect();
    all.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    all.into_iter()
        .take(top_n)
        .map(|(index, value)| Loading { index, ids: join_ids(&labels[index]), value })
        .collect()
}
