//! Effective distributions obtained by keeping only the leading modes.
//!
//! ℋ^{≤χ} is spanned by `e_{αβ}` with `α ≤ χ`, `β ≤ χ` and `β ∈ Λ⁺`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distribution::{conditional_operator, ConditionalOperator, DenseTensor, Language};
use crate::error::{Error, Result};
use crate::modes::{h_norm, weighted_svd, ModeDecomposition, DEFAULT_RANK_TOL};

/// Cutoff that keeps every mode.
pub const FULL: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    ProjectionOnly,
    Normalized,
    #[default]
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub chi: usize,
    pub solver: Solver,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for TruncationSpec {
    fn default() -> Self {
        Self { chi: FULL, solver: Solver::Kl, tolerance: 1e-9, max_iterations: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub chi: usize,
    pub solver: Solver,
    /// `D_KL(q‖q')` weighted by `q(x)`; infinite if `q'` misses support of `q`.
    pub kl: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the output lies in ℋ^{≤χ} and on the simplices within tolerance.
    pub feasible: bool,
    /// `‖q' − P^{≤χ} q'‖_ℋ`.
    pub subspace_distance: f64,
    pub column_sum_defect: f64,
    pub min_entry: f64,
    /// Interior margin reached by the feasibility phase, when it ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interior_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveDistribution {
    pub operator: ConditionalOperator,
    pub provenance: Provenance,
}

fn effective_chi(dec: &ModeDecomposition, chi: usize) -> usize {
    chi.min(dec.num_modes().saturating_sub(1))
}

/// `P^{≤χ} f`.
pub fn project_leq_chi(dec: &ModeDecomposition, f: &DMatrix<f64>, chi: usize) -> Result<DMatrix<f64>> {
    let mut coef = dec.coefficients(f)?;
    let chi = effective_chi(dec, chi);
    for a in 0..coef.ncols() {
        for b in 0..coef.nrows() {
            if a > chi || b > chi || b >= dec.n_plus {
                coef[(b, a)] = 0.0;
            }
        }
    }
    dec.from_coefficients(&coef)
}

/// Conditional matrix of `q` rebuilt from the decomposition, tiny negatives clipped.
fn truth(dec: &ModeDecomposition) -> Result<DMatrix<f64>> {
    Ok(dec.reconstruct_matrix()?.map(|v| v.max(0.0)))
}

/// `Σ_x q(x) Σ_y q(y|x) log(q(y|x) / p(y|x))`.
pub fn kl_divergence(q: &DMatrix<f64>, p: &DMatrix<f64>, marginal: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for x in 0..q.ncols() {
        let mut col = 0.0;
        for y in 0..q.nrows() {
            let a = q[(y, x)];
            if a > 0.0 {
                let b = p[(y, x)];
                if b <= 0.0 {
                    return f64::INFINITY;
                }
                col += a * (a / b).ln();
            }
        }
        total += marginal[x] * col;
    }
    total
}

fn diagnose(dec: &ModeDecomposition, p: &DMatrix<f64>, chi: usize, tol: f64) -> Result<(f64, f64, f64, bool)> {
    let dist = h_norm(&(p - project_leq_chi(dec, p, chi)?), &dec.sqrt_marginal);
    let defect = p.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
    let min = p.min();
    let feasible = dist <= tol.max(1e-10) && defect <= 1e-10 && min >= 0.0;
    Ok((dist, defect, min, feasible))
}

fn finish(
    dec: &ModeDecomposition,
    p: DMatrix<f64>,
    spec: &TruncationSpec,
    iterations: usize,
    converged: bool,
    interior_margin: Option<f64>,
) -> Result<EffectiveDistribution> {
    let q = truth(dec)?;
    let marginal = dec.marginal();
    let (subspace_distance, column_sum_defect, min_entry, feasible) = diagnose(dec, &p, spec.chi, spec.tolerance)?;
    let provenance = Provenance {
        chi: effective_chi(dec, spec.chi),
        solver: spec.solver,
        kl: kl_divergence(&q, &p, &marginal),
        iterations,
        converged,
        feasible,
        subspace_distance,
        column_sum_defect,
        min_entry,
        interior_margin,
    };
    let mut operator = ConditionalOperator::new(
        dec.k,
        dec.l,
        dec.alphabet_size,
        dec.x_labels.clone(),
        dec.y_labels.clone(),
        p,
        marginal.clone(),
    )?;
    operator.meta.source = Some(format!("truncation chi={}", provenance.chi));
    Ok(EffectiveDistribution { operator, provenance })
}

/// `max{0, Σ_{α≤χ} q(y|x,α) q(α)}`, normalised per column.
pub fn truncate_normalized(dec: &ModeDecomposition, chi: usize) -> Result<EffectiveDistribution> {
    let chi_eff = effective_chi(dec, chi);
    let mut p = dec.partial_reconstruction(chi_eff + 1).map(|v| v.max(0.0));
    for (x, mut col) in p.column_iter_mut().enumerate() {
        let s = col.sum();
        if s <= 0.0 {
            return Err(Error::EmptyColumn(dec.x_labels[x].clone()));
        }
        col /= s;
    }
    let spec = TruncationSpec { chi, solver: Solver::Normalized, ..Default::default() };
    finish(dec, p, &spec, 0, true, None)
}

/// Runs the solver named in `spec`.
pub fn truncate(dec: &ModeDecomposition, spec: &TruncationSpec) -> Result<EffectiveDistribution> {
    match spec.solver {
        Solver::Kl => truncate_kl(dec, spec.chi, spec),
        Solver::Normalized => truncate_normalized(dec, spec.chi),
        Solver::ProjectionOnly => {
            let q = truth(dec)?;
            let p = project_leq_chi(dec, &q, spec.chi)?;
            let (subspace_distance, column_sum_defect, min_entry, feasible) = diagnose(dec, &p, spec.chi, spec.tolerance)?;
            let marginal = dec.marginal();
            let provenance = Provenance {
                chi: effective_chi(dec, spec.chi),
                solver: spec.solver,
                kl: if min_entry >= 0.0 { kl_divergence(&q, &p, &marginal) } else { f64::NAN },
                iterations: 0,
                converged: true,
                feasible,
                subspace_distance,
                column_sum_defect,
                min_entry,
                interior_margin: None,
            };
            // the projection need not be a distribution, so bypass validation
            let operator = ConditionalOperator {
                k: dec.k,
                l: dec.l,
                alphabet_size: dec.alphabet_size,
                x_labels: dec.x_labels.clone(),
                y_labels: dec.y_labels.clone(),
                matrix: p,
                marginal,
                meta: Default::default(),
            };
            Ok(EffectiveDistribution { operator, provenance })
        }
    }
}

/// Orthonormal basis (columns) of the range of `m`, dropping directions below `rel_tol`.
fn range_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let cols: Vec<_> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel_tol * smax.max(1.0))
        .map(|i| u.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(m.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Affine parametrisation `p = p0 + G z` of the functions in ℋ^{≤χ} whose
/// columns sum to one, flattened column-major over `(y, x)`.
struct AffineSet {
    p0: DVector<f64>,
    g: DMatrix<f64>,
}

impl AffineSet {
    fn build(dec: &ModeDecomposition, chi: usize) -> Result<Self> {
        let (nx, ny) = (dec.num_x(), dec.num_y());
        let betas = (chi + 1).min(dec.n_plus);
        let pairs: Vec<(usize, usize)> = (0..=chi).flat_map(|a| (0..betas).map(move |b| (a, b))).collect();
        // evaluation map from coefficients to entries
        let eval = DMatrix::from_fn(nx * ny, pairs.len(), |row, j| {
            let (x, y) = (row / ny, row % ny);
            let (a, b) = pairs[j];
            dec.dual_right(a, x) * dec.left[(y, b)]
        });
        let basis = range_basis(&eval, 1e-12);
        // column sums as a linear map on the range coordinates
        let sums = DMatrix::from_fn(nx, basis.ncols(), |x, j| (0..ny).map(|y| basis[(x * ny + y, j)]).sum());
        let ones = DVector::from_element(nx, 1.0);
        let svd = sums.clone().svd(true, true);
        let c0 = svd
            .solve(&ones, 1e-12 * svd.singular_values.max().max(1.0))
            .map_err(|e| Error::Infeasible(e.to_string()))?;
        let residual = (&sums * &c0 - &ones).amax();
        if residual > 1e-9 {
            return Err(Error::Infeasible(format!(
                "no function in the truncated subspace has unit column sums (residual {residual:.3e})"
            )));
        }
        let p0 = &basis * &c0;
        // null space of the column-sum map inside the range
        let v_t = svd.v_t.expect("requested V");
        let smax = svd.singular_values.max().max(1.0);
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * smax).count();
        let row_space = if rank > 0 {
            let rows: Vec<_> = (0..svd.singular_values.len())
                .filter(|&i| svd.singular_values[i] > 1e-12 * smax)
                .map(|i| v_t.row(i).transpose())
                .collect();
            DMatrix::from_columns(&rows)
        } else {
            DMatrix::zeros(basis.ncols(), 0)
        };
        let null = if row_space.ncols() == basis.ncols() {
            DMatrix::zeros(basis.ncols(), 0)
        } else {
            let full = crate::modes::complete_basis(&row_space);
            full.columns(row_space.ncols(), basis.ncols() - row_space.ncols()).into_owned()
        };
        let g = &basis * null;
        // make p0 orthogonal to the directions of G
        let p0 = &p0 - &g * g.tr_mul(&p0);
        Ok(Self { p0, g })
    }

    fn project(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.p0 + &self.g * self.g.tr_mul(&(p - &self.p0))
    }

    fn point(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.p0 + &self.g * z
    }
}

/// Dykstra's alternating projections between the affine set and `{p ≥ τ}`.
///
/// Returns a point of the affine set with every entry `≥ τ / 2`.
fn phase_one(set: &AffineSet, tau: f64, max_iterations: usize) -> (Option<DVector<f64>>, usize, f64) {
    let mut p = set.p0.clone();
    let mut inc_affine = DVector::zeros(p.len());
    let mut inc_box = DVector::zeros(p.len());
    let mut gap = f64::INFINITY;
    for it in 0..max_iterations {
        let a = set.project(&(&p + &inc_affine));
        inc_affine = &p + &inc_affine - &a;
        if a.min() >= 0.5 * tau {
            return (Some(a), it + 1, 0.0);
        }
        let b = (&a + &inc_box).map(|v| v.max(tau));
        inc_box = &a + &inc_box - &b;
        gap = (&a - &b).amax();
        p = b;
    }
    (None, max_iterations, gap)
}

struct Barrier<'a> {
    set: &'a AffineSet,
    w: &'a DVector<f64>,
}

impl Barrier<'_> {
    /// `−Σ w log p − μ Σ log p`, or `None` outside the domain.
    fn value(&self, z: &DVector<f64>, mu: f64) -> Option<f64> {
        let p = self.set.point(z);
        if p.iter().any(|&v| v <= 0.0) {
            return None;
        }
        Some(p.iter().zip(self.w.iter()).map(|(pv, wv)| -(wv + mu) * pv.ln()).sum())
    }

    fn newton_step(&self, z: &DVector<f64>, mu: f64) -> Option<(DVector<f64>, f64)> {
        let p = self.set.point(z);
        let gp = DVector::from_fn(p.len(), |i, _| -(self.w[i] + mu) / p[i]);
        let hp = DVector::from_fn(p.len(), |i, _| (self.w[i] + mu) / (p[i] * p[i]));
        let grad = self.set.g.tr_mul(&gp);
        let mut scaled = self.set.g.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= hp[i].sqrt();
        }
        let hess = scaled.tr_mul(&scaled);
        let chol = hess.cholesky()?;
        let step = -chol.solve(&grad);
        let decrement = -grad.dot(&step);
        Some((step, decrement))
    }
}

/// KL-closest conditional distribution whose representative lies in ℋ^{≤χ}.
///
/// Feasibility is established by Dykstra projections onto
/// `{p ≥ τ} ∩ (affine constraints)`; the minimiser is then found by a
/// log-barrier Newton method in the affine coordinates.
pub fn truncate_kl(dec: &ModeDecomposition, chi: usize, spec: &TruncationSpec) -> Result<EffectiveDistribution> {
    let spec = TruncationSpec { chi, solver: Solver::Kl, ..*spec };
    if !dec.complete {
        return Err(Error::IncompleteDecomposition);
    }
    let chi_eff = effective_chi(dec, chi);
    let q = truth(dec)?;
    if chi_eff + 1 >= dec.n_plus {
        let mut p = q;
        for mut col in p.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        return finish(dec, p, &spec, 0, true, None);
    }
    let (nx, ny) = (dec.num_x(), dec.num_y());
    let set = AffineSet::build(dec, chi_eff)?;
    let marginal = dec.marginal();
    let w = DVector::from_fn(nx * ny, |i, _| marginal[i / ny] * q[(i % ny, i / ny)]);

    let mut start = None;
    let mut phase_iters = 0;
    let mut gaps = Vec::new();
    for scale in [1e-2, 1e-4, 1e-6] {
        let tau = scale / ny as f64;
        let (found, iters, gap) = phase_one(&set, tau, spec.max_iterations);
        phase_iters += iters;
        gaps.push((tau, gap));
        if let Some(p) = found {
            start = Some((p, tau));
            break;
        }
    }
    let (p_start, tau) = start.ok_or_else(|| {
        let detail: Vec<String> = gaps.iter().map(|(t, g)| format!("tau={t:.1e}: residual {g:.3e}")).collect();
        Error::Infeasible(format!(
            "no strictly positive distribution found in the chi = {chi_eff} subspace after {} iterations ({})",
            phase_iters,
            detail.join(", ")
        ))
    })?;

    let barrier = Barrier { set: &set, w: &w };
    let mut z = set.g.tr_mul(&(p_start - &set.p0));
    let mut mu = 1e-2;
    let m = (nx * ny) as f64;
    let mut iterations = phase_iters;
    let mut converged = false;
    'outer: loop {
        for _ in 0..200 {
            if iterations >= spec.max_iterations + phase_iters {
                break 'outer;
            }
            iterations += 1;
            let Some((step, decrement)) = barrier.newton_step(&z, mu) else { break 'outer };
            if decrement / 2.0 < 1e-14 {
                break;
            }
            let f0 = barrier.value(&z, mu).expect("iterate stays interior");
            let mut t = 1.0;
            let accepted = loop {
                let cand = &z + &step * t;
                if let Some(f1) = barrier.value(&cand, mu) {
                    if f1 <= f0 - 0.25 * t * decrement {
                        break Some(cand);
                    }
                }
                t *= 0.5;
                if t < 1e-16 {
                    break None;
                }
            };
            match accepted {
                Some(cand) => z = cand,
                None => break,
            }
        }
        if m * mu < spec.tolerance {
            converged = true;
            break;
        }
        mu /= 10.0;
    }
    let flat = set.point(&z);
    let mut p = DMatrix::from_fn(ny, nx, |y, x| flat[x * ny + y].max(0.0));
    for mut col in p.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    finish(dec, p, &spec, iterations, converged, Some(tau))
}

/// Composite effective joint built from a chain of `(k_i, l_i)` truncations.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeTruncation {
    pub joint: DenseTensor,
    pub pairs: Vec<(usize, usize)>,
    pub parts: Vec<EffectiveDistribution>,
    /// `Σ_i ε_i` when constants were supplied.
    pub summed_bound: Option<f64>,
}

pub fn validate_chain(big_k: usize, pairs: &[(usize, usize)]) -> Result<()> {
    let Some(&(k1, l1)) = pairs.first() else {
        return Err(Error::InvalidArgument("decomposition of K needs at least one pair".into()));
    };
    if k1 + l1 != big_k {
        return Err(Error::InvalidArgument(format!("k_1 + l_1 = {} but K = {big_k}", k1 + l1)));
    }
    for w in pairs.windows(2) {
        let ((k, _), (k2, l2)) = (w[0], w[1]);
        if k != k2 + l2 {
            return Err(Error::InvalidArgument(format!("k_i = {k} but k_(i+1) + l_(i+1) = {}", k2 + l2)));
        }
    }
    if pairs.iter().any(|&(k, l)| k == 0 || l == 0) {
        return Err(Error::InvalidArgument("every k_i and l_i must be >= 1".into()));
    }
    Ok(())
}

/// `q^{(χ̄)}(X_1⋯X_K) = Π_i q^{(χ_i)}(y_i | x_i) · q(X_1⋯X_{k_m})`, where pair
/// `i` conditions the next `l_i` tokens on the first `k_i`.
pub fn multi_length_truncation(
    lang: &Language,
    pairs: &[(usize, usize)],
    chis: &[usize],
    spec: &TruncationSpec,
    constants: Option<&[f64]>,
) -> Result<CompositeTruncation> {
    validate_chain(lang.max_len(), pairs)?;
    if chis.len() != pairs.len() {
        return Err(Error::InvalidArgument(format!("{} cutoffs for {} pairs", chis.len(), pairs.len())));
    }
    if let Some(c) = constants {
        if c.len() != pairs.len() {
            return Err(Error::InvalidArgument(format!("{} constants for {} pairs", c.len(), pairs.len())));
        }
    }
    let s = lang.alphabet_size();
    let big_k = lang.max_len();
    let k_m = pairs.last().map(|p| p.0).unwrap_or_default();
    let prefix = lang.fundamental_tensor(k_m)?;
    let mut parts = Vec::with_capacity(pairs.len());
    for (&(k, l), &chi) in pairs.iter().zip(chis) {
        let op = conditional_operator(lang, k, l)?;
        let dec = weighted_svd(&op, DEFAULT_RANK_TOL)?;
        parts.push(truncate(&dec, &TruncationSpec { chi, ..*spec })?);
    }
    let mut data = vec![0.0; s.pow(big_k as u32)];
    for (idx, slot) in data.iter_mut().enumerate() {
        let seq = crate::distribution::decode(idx, big_k, s);
        let mut p = prefix.get(&seq[..k_m]);
        for (part, &(k, l)) in parts.iter().zip(pairs) {
            if p == 0.0 {
                break;
            }
            let op = &part.operator;
            p *= match (op.x_index(&seq[..k]), op.y_index(&seq[k..k + l])) {
                (Some(x), Some(y)) => op.cond(y, x),
                _ => 0.0,
            };
        }
        *slot = p;
    }
    Ok(CompositeTruncation {
        joint: DenseTensor::new(s, big_k, data)?,
        pairs: pairs.to_vec(),
        parts,
        summed_bound: constants.map(|c| c.iter().sum()),
    })
}
