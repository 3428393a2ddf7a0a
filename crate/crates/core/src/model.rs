//! Softmax conditional models `p(y|x,w)` with hand-derived gradients.
//!
//! Losses are written against a weight matrix `W[(y, x)]` shaped like a
//! conditional operator: a population joint `q(x, y)`, empirical frequencies,
//! or minibatch frequencies. The loss is `−Σ W(y,x) log p(y|x,w)`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::join_ids;
use crate::distribution::ConditionalOperator;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Parametrization {
    /// One logit per `(x, y)` with the last logit of each row pinned to 0.
    FullTable,
    /// One free logit per `(x, y)`; singular along per-row shifts.
    FullTableUnpinned,
    /// `logit(x, y) = Σ_j a[x, j] b[y, j]`.
    LowRank { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    pub k: usize,
    pub l: usize,
    pub num_x: usize,
    pub num_y: usize,
    pub parametrization: Parametrization,
}

impl SoftmaxModel {
    pub fn new(k: usize, l: usize, num_x: usize, num_y: usize, parametrization: Parametrization) -> Result<Self> {
        if num_x == 0 || num_y < 2 {
            return Err(Error::InvalidArgument("models need |X| >= 1 and |Y| >= 2".into()));
        }
        if let Parametrization::LowRank { rank: 0 } = parametrization {
            return Err(Error::InvalidArgument("low-rank models need rank >= 1".into()));
        }
        Ok(Self { k, l, num_x, num_y, parametrization })
    }

    pub fn for_operator(op: &ConditionalOperator, parametrization: Parametrization) -> Result<Self> {
        Self::new(op.k, op.l, op.num_x(), op.num_y(), parametrization)
    }

    pub fn dim(&self) -> usize {
        match self.parametrization {
            Parametrization::FullTable => self.num_x * (self.num_y - 1),
            Parametrization::FullTableUnpinned => self.num_x * self.num_y,
            Parametrization::LowRank { rank } => rank * (self.num_x + self.num_y),
        }
    }

    fn check(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::InvalidArgument(format!("weights have length {}, expected {}", w.len(), self.dim())));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(())
    }

    fn logits(&self, w: &DVector<f64>, x: usize) -> Vec<f64> {
        let ny = self.num_y;
        match self.parametrization {
            Parametrization::FullTable => {
                let row = &w.as_slice()[x * (ny - 1)..(x + 1) * (ny - 1)];
                let mut z = row.to_vec();
                z.push(0.0);
                z
            }
            Parametrization::FullTableUnpinned => w.as_slice()[x * ny..(x + 1) * ny].to_vec(),
            Parametrization::LowRank { rank } => {
                let a = &w.as_slice()[x * rank..(x + 1) * rank];
                let b0 = self.num_x * rank;
                (0..ny)
                    .map(|y| {
                        let b = &w.as_slice()[b0 + y * rank..b0 + (y + 1) * rank];
                        a.iter().zip(b).map(|(p, q)| p * q).sum()
                    })
                    .collect()
            }
        }
    }

    /// `log p(·|x,w)` by a stable log-softmax.
    pub fn log_probs(&self, w: &DVector<f64>, x: usize) -> Vec<f64> {
        let z = self.logits(w, x);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    }

    pub fn probs(&self, w: &DVector<f64>, x: usize) -> Vec<f64> {
        self.log_probs(w, x).into_iter().map(f64::exp).collect()
    }

    /// `p(y|x,w)` as a `|Y| x |X|` matrix.
    pub fn conditional_matrix(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = (0..self.num_x).map(|x| self.probs(w, x)).collect();
        DMatrix::from_fn(self.num_y, self.num_x, |y, x| cols[x][y])
    }

    pub fn log_prob(&self, x: usize, y: usize, w: &DVector<f64>) -> Result<f64> {
        self.check(w)?;
        self.check_index(x, y)?;
        Ok(self.log_probs(w, x)[y])
    }

    fn check_index(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.num_x {
            return Err(Error::OutOfRange { index: x, len: self.num_x });
        }
        if y >= self.num_y {
            return Err(Error::OutOfRange { index: y, len: self.num_y });
        }
        Ok(())
    }

    /// `∇_w log p(y|x,w)`.
    pub fn grad_log_prob(&self, x: usize, y: usize, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(w)?;
        self.check_index(x, y)?;
        let p = self.probs(w, x);
        let dz: Vec<f64> = (0..self.num_y).map(|j| if j == y { 1.0 } else { 0.0 } - p[j]).collect();
        let mut g = DVector::zeros(self.dim());
        self.add_logit_grad(w, x, &dz, &mut g);
        Ok(g)
    }

    /// Accumulates `Σ_y dz[y] ∂logit(x,y)/∂w` into `g`.
    fn add_logit_grad(&self, w: &DVector<f64>, x: usize, dz: &[f64], g: &mut DVector<f64>) {
        let ny = self.num_y;
        match self.parametrization {
            Parametrization::FullTable => {
                for y in 0..ny - 1 {
                    g[x * (ny - 1) + y] += dz[y];
                }
            }
            Parametrization::FullTableUnpinned => {
                for y in 0..ny {
                    g[x * ny + y] += dz[y];
                }
            }
            Parametrization::LowRank { rank } => {
                let b0 = self.num_x * rank;
                for j in 0..rank {
                    let a = w[x * rank + j];
                    let mut ga = 0.0;
                    for (y, d) in dz.iter().enumerate() {
                        ga += d * w[b0 + y * rank + j];
                        g[b0 + y * rank + j] += d * a;
                    }
                    g[x * rank + j] += ga;
                }
            }
        }
    }

    fn check_weights_matrix(&self, weights: &DMatrix<f64>) -> Result<()> {
        if weights.shape() != (self.num_y, self.num_x) {
            return Err(Error::InvalidArgument(format!(
                "weight matrix has shape {:?}, expected ({}, {})",
                weights.shape(),
                self.num_y,
                self.num_x
            )));
        }
        Ok(())
    }

    /// `−Σ W(y,x) log p(y|x,w)`.
    pub fn weighted_loss(&self, w: &DVector<f64>, weights: &DMatrix<f64>) -> Result<f64> {
        self.check(w)?;
        self.check_weights_matrix(weights)?;
        let mut total = 0.0;
        for x in 0..self.num_x {
            let col = weights.column(x);
            if col.iter().all(|&v| v == 0.0) {
                continue;
            }
            let lp = self.log_probs(w, x);
            total -= col.iter().zip(&lp).filter(|(c, _)| **c != 0.0).map(|(c, l)| c * l).sum::<f64>();
        }
        Ok(total)
    }

    /// Loss and gradient of [`Self::weighted_loss`].
    pub fn weighted_loss_grad(&self, w: &DVector<f64>, weights: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
        self.check(w)?;
        self.check_weights_matrix(weights)?;
        let mut total = 0.0;
        let mut g = DVector::zeros(self.dim());
        for x in 0..self.num_x {
            let col = weights.column(x);
            let mass: f64 = col.sum();
            if col.iter().all(|&v| v == 0.0) {
                continue;
            }
            let lp = self.log_probs(w, x);
            total -= col.iter().zip(&lp).filter(|(c, _)| **c != 0.0).map(|(c, l)| c * l).sum::<f64>();
            let dz: Vec<f64> = (0..self.num_y).map(|y| mass * lp[y].exp() - col[y]).collect();
            self.add_logit_grad(w, x, &dz, &mut g);
        }
        Ok((total, g))
    }

    /// `Φ(w)(x) = Σ_y log p(y|x,w) y`, as a `|Y| x |X|` matrix.
    pub fn phi_map(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(w)?;
        let cols: Vec<Vec<f64>> = (0..self.num_x).map(|x| self.log_probs(w, x)).collect();
        Ok(DMatrix::from_fn(self.num_y, self.num_x, |y, x| cols[x][y]))
    }

    /// Weights realising the conditional `cond` exactly (full-table only,
    /// strictly positive `cond`).
    pub fn weights_for(&self, cond: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_weights_matrix(cond)?;
        if cond.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("exact weights need a strictly positive conditional".into()));
        }
        let ny = self.num_y;
        match self.parametrization {
            Parametrization::FullTable => Ok(DVector::from_fn(self.dim(), |i, _| {
                let (x, y) = (i / (ny - 1), i % (ny - 1));
                (cond[(y, x)] / cond[(ny - 1, x)]).ln()
            })),
            Parametrization::FullTableUnpinned => {
                Ok(DVector::from_fn(self.dim(), |i, _| cond[(i % ny, i / ny)].ln()))
            }
            Parametrization::LowRank { .. } => {
                Err(Error::InvalidArgument("exact weights are only available for full-table models".into()))
            }
        }
    }

    pub fn to_file(&self, w: &DVector<f64>, alphabet_size: usize) -> ModelFile {
        ModelFile {
            parametrization: self.parametrization,
            k: self.k,
            l: self.l,
            alphabet_size,
            num_x: self.num_x,
            num_y: self.num_y,
            dim: self.dim(),
            weights: w.iter().copied().collect(),
        }
    }
}

/// Serialized weights: header fields plus a flat array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub parametrization: Parametrization,
    pub k: usize,
    pub l: usize,
    pub alphabet_size: usize,
    pub num_x: usize,
    pub num_y: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl ModelFile {
    pub fn into_parts(self) -> Result<(SoftmaxModel, DVector<f64>)> {
        let model = SoftmaxModel::new(self.k, self.l, self.num_x, self.num_y, self.parametrization)?;
        if model.dim() != self.dim || self.weights.len() != self.dim {
            return Err(Error::InvalidArgument("weight count does not match the header".into()));
        }
        Ok((model, DVector::from_vec(self.weights)))
    }
}

/// Population loss `L(w) = −Σ q(x,y) log p(y|x,w)`.
pub fn population_loss(model: &SoftmaxModel, dist: &ConditionalOperator, w: &DVector<f64>) -> Result<f64> {
    model.weighted_loss(w, &dist.joint())
}

/// Samples of `(x, y)` as indices into an operator's contexts and continuations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub pairs: Vec<(usize, usize)>,
    pub num_x: usize,
    pub num_y: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn counts(&self) -> DMatrix<f64> {
        self.counts_of(0..self.len())
    }

    /// Counts of the samples at `indices`.
    pub fn counts_of(&self, indices: impl IntoIterator<Item = usize>) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.num_y, self.num_x);
        for i in indices {
            let (x, y) = self.pairs[i];
            c[(y, x)] += 1.0;
        }
        c
    }

    /// Empirical joint `counts / n`.
    pub fn frequencies(&self) -> Result<DMatrix<f64>> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        Ok(self.counts() / self.len() as f64)
    }

    /// One `x_ids<TAB>y_ids` line per sample.
    pub fn write_tsv<W: Write>(&self, op: &ConditionalOperator, mut w: W) -> Result<()> {
        for &(x, y) in &self.pairs {
            writeln!(w, "{}\t{}", join_ids(&op.x_labels[x]), join_ids(&op.y_labels[y]))?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(op: &ConditionalOperator, reader: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format { line: i + 1, message: format!("unknown sample `{line}`") };
            let (xs, ys) = line.split_once('\t').ok_or_else(bad)?;
            let parse = |s: &str| s.split(',').map(|t| t.trim().parse::<u32>()).collect::<std::result::Result<Vec<_>, _>>();
            let x = parse(xs).ok().and_then(|x| op.x_index(&x)).ok_or_else(bad)?;
            let y = parse(ys).ok().and_then(|y| op.y_index(&y)).ok_or_else(bad)?;
            pairs.push((x, y));
        }
        Ok(Self { pairs, num_x: op.num_x(), num_y: op.num_y() })
    }
}

/// `L_n(w)`, the mean negative log-likelihood over the dataset.
pub fn empirical_loss(model: &SoftmaxModel, dataset: &Dataset, w: &DVector<f64>) -> Result<f64> {
    model.weighted_loss(w, &dataset.frequencies()?)
}

fn inverse_cdf(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in weights.enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn total_mass(v: impl Iterator<Item = f64>) -> f64 {
    v.sum()
}

/// i.i.d. draws from `q(x, y) = q(y|x) q(x)`: `x` by inverse CDF of the
/// marginal, then `y` by inverse CDF of the column, one uniform each.
pub fn sample_dataset(dist: &ConditionalOperator, n: usize, seed: u64) -> Dataset {
    sample_coupled(&[dist], n, seed).pop().expect("one distribution")
}

/// Samples several conditionals sharing a marginal with the same uniforms, so
/// the `i`-th sample has the same `x` in every dataset.
pub fn sample_coupled(dists: &[&ConditionalOperator], n: usize, seed: u64) -> Vec<Dataset> {
    let first = dists[0];
    let mut g = rng::stream(seed, rng::DATASET, 0);
    let mut out: Vec<Dataset> = dists
        .iter()
        .map(|d| Dataset { pairs: Vec::with_capacity(n), num_x: d.num_x(), num_y: d.num_y() })
        .collect();
    let qx_total = total_mass(first.marginal.iter().copied());
    for _ in 0..n {
        let ux: f64 = g.random();
        let uy: f64 = g.random();
        let x = inverse_cdf(first.marginal.iter().copied(), ux * qx_total);
        for (d, ds) in dists.iter().zip(out.iter_mut()) {
            let col = d.matrix.column(x);
            let y = inverse_cdf(col.iter().copied(), uy * total_mass(col.iter().copied()));
            ds.pairs.push((x, y));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    Zero,
    /// Gaussian entries with the given scale from the INIT stream.
    Random { seed: u64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Stop once `‖∇L‖ <` this.
    pub tolerance: f64,
    pub init: Init,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { max_iterations: 200_000, tolerance: 1e-10, init: Init::Zero }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub w: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn weights(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.w)
    }
}

pub fn initial_weights(model: &SoftmaxModel, init: Init) -> DVector<f64> {
    match init {
        Init::Zero => DVector::zeros(model.dim()),
        Init::Random { seed, scale } => {
            let mut g = rng::stream(seed, rng::INIT, 0);
            DVector::from_fn(model.dim(), |_, _| {
                let z: f64 = StandardNormal.sample(&mut g);
                scale * z
            })
        }
    }
}

/// Full-batch gradient descent on `−Σ W log p`: Barzilai–Borwein trial steps
/// with Armijo backtracking, so the loss decreases monotonically.
///
/// Non-convergence is reported in the result, not as an error.
pub fn fit_model(model: &SoftmaxModel, weights: &DMatrix<f64>, config: &FitConfig) -> Result<FitResult> {
    let mut w = initial_weights(model, config.init);
    let (mut loss, mut g) = model.weighted_loss_grad(&w, weights)?;
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < config.max_iterations && g.norm() >= config.tolerance {
        iterations += 1;
        let gg = g.norm_squared();
        let (prev_w, prev_g) = (w.clone(), g.clone());
        let mut accepted = false;
        while step > 1e-20 {
            let cand = &w - &g * step;
            let (l2, g2) = model.weighted_loss_grad(&cand, weights)?;
            if l2 <= loss - 0.5 * step * gg {
                w = cand;
                loss = l2;
                g = g2;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        // Barzilai–Borwein trial step for the next iteration
        let s_k = &w - &prev_w;
        let y_k = &g - &prev_g;
        let sy = s_k.dot(&y_k);
        step = if sy > 0.0 { s_k.norm_squared() / sy } else { step * 2.0 };
    }
    let grad_norm = g.norm();
    Ok(FitResult {
        w: w.iter().copied().collect(),
        loss,
        grad_norm,
        iterations,
        converged: grad_norm < config.tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsensitivityReport {
    pub value: f64,
    pub per_point: Vec<f64>,
    /// Index into the sample where the maximum is attained.
    pub argmax: usize,
    pub evaluation_points: String,
}

fn check_pair(model: &SoftmaxModel, q: &DMatrix<f64>, q_prime: &DMatrix<f64>) -> Result<()> {
    model.check_weights_matrix(q)?;
    model.check_weights_matrix(q_prime)
}

fn report(per_point: Vec<f64>, what: &str) -> Result<InsensitivityReport> {
    if per_point.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation sample".into()));
    }
    let mut argmax = 0;
    for (i, v) in per_point.iter().enumerate() {
        if *v > per_point[argmax] {
            argmax = i;
        }
    }
    Ok(InsensitivityReport {
        value: per_point[argmax],
        evaluation_points: format!("max over {} sampled points ({what})", per_point.len()),
        per_point,
        argmax,
    })
}

/// `max_w ‖Σ_{x,y} (q − q')(x,y) ∇_w log p(y|x,w)‖₂` over the sample, for joints `q`, `q'`.
pub fn insensitivity_a(
    model: &SoftmaxModel,
    q: &DMatrix<f64>,
    q_prime: &DMatrix<f64>,
    sample: &[DVector<f64>],
) -> Result<InsensitivityReport> {
    check_pair(model, q, q_prime)?;
    let diff = q - q_prime;
    let per_point = sample
        .iter()
        .map(|w| model.weighted_loss_grad(w, &diff).map(|(_, g)| g.norm()))
        .collect::<Result<Vec<_>>>()?;
    report(per_point, "gradient pairing")
}

/// `max_w |Σ_{x,y} (q − q')(x,y) log p(y|x,w)|` over the sample.
pub fn insensitivity_b(
    model: &SoftmaxModel,
    q: &DMatrix<f64>,
    q_prime: &DMatrix<f64>,
    sample: &[DVector<f64>],
) -> Result<InsensitivityReport> {
    check_pair(model, q, q_prime)?;
    let diff = q - q_prime;
    let per_point = sample
        .iter()
        .map(|w| model.weighted_loss(w, &diff).map(f64::abs))
        .collect::<Result<Vec<_>>>()?;
    report(per_point, "log-probability pairing")
}

/// A differentiable empirical loss `L_n` with minibatch gradients.
pub trait Potential: Sync {
    fn dim(&self) -> usize;
    /// Dataset size `n`.
    fn n(&self) -> usize;
    fn loss(&self, w: &DVector<f64>) -> Result<f64>;
    fn full_grad(&self, w: &DVector<f64>) -> Result<DVector<f64>>;
    /// Gradient of the mean loss over the samples at `indices`.
    fn batch_grad(&self, w: &DVector<f64>, indices: &[usize]) -> Result<DVector<f64>>;
}

/// `L_n` of a softmax model on a dataset.
#[derive(Debug, Clone)]
pub struct ModelPotential<'a> {
    pub model: &'a SoftmaxModel,
    pub dataset: &'a Dataset,
    frequencies: DMatrix<f64>,
}

impl<'a> ModelPotential<'a> {
    pub fn new(model: &'a SoftmaxModel, dataset: &'a Dataset) -> Result<Self> {
        if dataset.num_x != model.num_x || dataset.num_y != model.num_y {
            return Err(Error::InvalidArgument("dataset and model disagree on |X| or |Y|".into()));
        }
        Ok(Self { model, dataset, frequencies: dataset.frequencies()? })
    }
}

impl Potential for ModelPotential<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn n(&self) -> usize {
        self.dataset.len()
    }

    fn loss(&self, w: &DVector<f64>) -> Result<f64> {
        self.model.weighted_loss(w, &self.frequencies)
    }

    fn full_grad(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.model.weighted_loss_grad(w, &self.frequencies)?.1)
    }

    fn batch_grad(&self, w: &DVector<f64>, indices: &[usize]) -> Result<DVector<f64>> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        let freq = self.dataset.counts_of(indices.iter().copied()) / indices.len() as f64;
        Ok(self.model.weighted_loss_grad(w, &freq)?.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// Largest Hessian spectral norm found over the sample.
    pub m: f64,
    /// Largest gradient norm found over the sample.
    pub q: f64,
    pub per_point_m: Vec<f64>,
    pub per_point_q: Vec<f64>,
    /// False if some power iteration stopped before converging; `m` is then
    /// the best lower bound found.
    pub converged: bool,
    pub note: String,
}

/// Spectral norm of the Hessian of `p` at `w` by power iteration on central
/// finite-difference Hessian-vector products. Returns `(estimate, converged)`.
pub fn hessian_norm<P: Potential + ?Sized>(p: &P, w: &DVector<f64>) -> Result<(f64, bool)> {
    let d = p.dim();
    let h = 1e-4;
    let hvp = |v: &DVector<f64>| -> Result<DVector<f64>> {
        let plus = p.full_grad(&(w + v * h))?;
        let minus = p.full_grad(&(w - v * h))?;
        Ok((plus - minus) / (2.0 * h))
    };
    let mut v = DVector::from_fn(d, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..500 {
        let hv = hvp(&v)?;
        let norm = hv.norm();
        if norm == 0.0 {
            return Ok((0.0, true));
        }
        let next = hv / norm;
        let change = (norm - estimate).abs();
        estimate = norm;
        v = next;
        if change <= 1e-9 * norm.max(1.0) {
            return Ok((estimate, true));
        }
    }
    Ok((estimate, false))
}

/// Empirical `(M, Q)`: maximum Hessian norm and gradient norm of `L_n` over the sample.
pub fn lipschitz_estimates<P: Potential + ?Sized>(p: &P, sample: &[DVector<f64>]) -> Result<LipschitzReport> {
    if sample.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation sample".into()));
    }
    let mut per_point_m = Vec::with_capacity(sample.len());
    let mut per_point_q = Vec::with_capacity(sample.len());
    let mut converged = true;
    for w in sample {
        let (m, ok) = hessian_norm(p, w)?;
        converged &= ok;
        per_point_m.push(m);
        per_point_q.push(p.full_grad(w)?.norm());
    }
    Ok(LipschitzReport {
        m: per_point_m.iter().copied().fold(0.0, f64::max),
        q: per_point_q.iter().copied().fold(0.0, f64::max),
        per_point_m,
        per_point_q,
        converged,
        note: format!("empirical maxima over {} sampled points, not certified bounds", sample.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBound {
    /// `((k+l)/2)·H − l·log₂|Σ| − 1`.
    pub exponent: f64,
    /// `2^exponent · A`.
    pub threshold: f64,
    /// `exponent > 0`, i.e. `k > (2 + 2l·log₂|Σ|)/H − l`.
    pub flag: bool,
    /// Smallest real `k` above which the flag holds.
    pub k_threshold: f64,
}

pub fn entropy_rate_bound(k: usize, l: usize, alphabet_size: usize, h: f64, a: f64) -> Result<EntropyBound> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("entropy rate must be positive, got {h}")));
    }
    if alphabet_size == 0 {
        return Err(Error::InvalidArgument("alphabet size must be >= 1".into()));
    }
    let log_sigma = (alphabet_size as f64).log2();
    let exponent = (k + l) as f64 / 2.0 * h - l as f64 * log_sigma - 1.0;
    Ok(EntropyBound {
        exponent,
        threshold: exponent.exp2() * a,
        flag: exponent > 0.0,
        k_threshold: (2.0 + 2.0 * l as f64 * log_sigma) / h - l as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{conditional_operator, random_language, Alphabet};
    use proptest::prelude::*;
    use rand::Rng;

    fn fixture(seed: u64, s: usize) -> ConditionalOperator {
        let lang = random_language(seed, Alphabet::new(s).unwrap(), 2, 1.0).unwrap();
        conditional_operator(&lang, 1, 1).unwrap()
    }

    fn random_w(model: &SoftmaxModel, seed: u64) -> DVector<f64> {
        initial_weights(model, Init::Random { seed, scale: 1.0 })
    }

    #[test]
    fn dimensions() {
        let m = |p| SoftmaxModel::new(1, 1, 3, 4, p).unwrap().dim();
        assert_eq!(m(Parametrization::FullTable), 9);
        assert_eq!(m(Parametrization::FullTableUnpinned), 12);
        assert_eq!(m(Parametrization::LowRank { rank: 2 }), 14);
    }

    #[test]
    fn uniform_at_zero() {
        let model = SoftmaxModel::new(1, 2, 3, 9, Parametrization::FullTable).unwrap();
        let w = DVector::zeros(model.dim());
        assert!((model.log_prob(1, 4, &w).unwrap() + 2.0 * 3f64.ln()).abs() < 1e-14);
        let phi = model.phi_map(&w).unwrap();
        assert!(phi.iter().all(|v| (v + 9f64.ln()).abs() < 1e-14));
        // ∂ log p(y|x)/∂logit(x,y') = δ − 1/|Y|
        let g = model.grad_log_prob(1, 4, &w).unwrap();
        for yp in 0..8 {
            let expected = if yp == 4 { 1.0 } else { 0.0 } - 1.0 / 9.0;
            assert!((g[8 + yp] - expected).abs() < 1e-15);
        }
        assert!(g.rows(0, 8).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn population_loss_at_truth_is_conditional_entropy() {
        let op = fixture(2, 3);
        let model = SoftmaxModel::for_operator(&op, Parametrization::FullTable).unwrap();
        let w = model.weights_for(&op.matrix).unwrap();
        let mut h = 0.0;
        for x in 0..3 {
            for y in 0..3 {
                let c = op.cond(y, x);
                h -= op.marginal[x] * c * c.ln();
            }
        }
        assert!((population_loss(&model, &op, &w).unwrap() - h).abs() < 1e-12);
        for seed in 0..20 {
            let other = random_w(&model, seed);
            assert!(population_loss(&model, &op, &other).unwrap() >= h - 1e-12);
        }
    }

    #[test]
    fn dataset_sampling() {
        let op = fixture(3, 3);
        assert!(sample_dataset(&op, 0, 1).is_empty());
        assert_eq!(sample_dataset(&op, 50, 4), sample_dataset(&op, 50, 4));
        let n = 100_000;
        let ds = sample_dataset(&op, n, 5);
        let freq = ds.frequencies().unwrap();
        let joint = op.joint();
        for (f, p) in freq.iter().zip(joint.iter()) {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() <= 3.0 * sigma + 1e-12, "{f} vs {p}");
        }
    }

    #[test]
    fn coupled_samples_share_contexts() {
        let a = fixture(3, 3);
        let b = a.with_matrix(DMatrix::from_element(3, 3, 1.0 / 3.0)).unwrap();
        let ds = sample_coupled(&[&a, &b], 200, 9);
        assert_eq!(ds[0], sample_dataset(&a, 200, 9));
        assert!(ds[0].pairs.iter().zip(&ds[1].pairs).all(|(p, q)| p.0 == q.0));
        let same = sample_coupled(&[&a, &a], 200, 9);
        assert_eq!(same[0], same[1]);
    }

    #[test]
    fn empirical_loss_is_population_loss_of_frequencies() {
        let op = fixture(4, 2);
        let model = SoftmaxModel::for_operator(&op, Parametrization::FullTable).unwrap();
        let ds = sample_dataset(&op, 500, 1);
        let w = random_w(&model, 3);
        let direct: f64 = -ds.pairs.iter().map(|&(x, y)| model.log_prob(x, y, &w).unwrap()).sum::<f64>() / 500.0;
        assert!((empirical_loss(&model, &ds, &w).unwrap() - direct).abs() < 1e-12);
        let empty = Dataset { pairs: vec![], num_x: 2, num_y: 2 };
        assert!(empirical_loss(&model, &empty, &w).is_err());
    }

    #[test]
    fn fit_realizable_full_table() {
        let op = fixture(5, 3);
        let model = SoftmaxModel::for_operator(&op, Parametrization::FullTable).unwrap();
        let fit = fit_model(&model, &op.joint(), &FitConfig::default()).unwrap();
        assert!(fit.converged, "{fit:?}");
        let p = model.conditional_matrix(&fit.weights());
        let kl = crate::truncation::kl_divergence(&op.matrix, &p, &op.marginal);
        assert!(kl < 1e-8, "{kl}");
        assert_eq!(fit, fit_model(&model, &op.joint(), &FitConfig::default()).unwrap());
    }

    #[test]
    fn low_rank_with_enough_capacity_matches_full_table() {
        let op = fixture(6, 3);
        let full = SoftmaxModel::for_operator(&op, Parametrization::FullTable).unwrap();
        let low = SoftmaxModel::for_operator(&op, Parametrization::LowRank { rank: 3 }).unwrap();
        let f = fit_model(&full, &op.joint(), &FitConfig::default()).unwrap();
        let cfg = FitConfig { init: Init::Random { seed: 1, scale: 0.5 }, tolerance: 1e-9, ..Default::default() };
        let g = fit_model(&low, &op.joint(), &cfg).unwrap();
        assert!((f.loss - g.loss).abs() < 1e-6, "{} {}", f.loss, g.loss);
    }

    #[test]
    fn insensitivity_constants() {
        let op = fixture(7, 2);
        let model = SoftmaxModel::for_operator(&op, Parametrization::FullTable).unwrap();
        let q = op.joint();
        let sample: Vec<_> = (0..5).map(|s| random_w(&model, s)).collect();
        assert_eq!(insensitivity_a(&model, &q, &q, &sample).unwrap().value, 0.0);
        assert_eq!(insensitivity_b(&model, &q, &q, &sample).unwrap().value, 0.0);
        assert!(insensitivity_a(&model, &q, &q, &[]).is_err());
        let qp = op.with_matrix(DMatrix::from_element(2, 2, 0.5)).unwrap().joint();
        let one = insensitivity_a(&model, &q, &qp, &sample[..1]).unwrap();
        let direct: DVector<f64> = (0..2)
            .flat_map(|x| (0..2).map(move |y| (x, y)))
            .map(|(x, y)| model.grad_log_prob(x, y, &sample[0]).unwrap() * (q[(y, x)] - qp[(y, x)]))
            .sum();
        assert!((one.value - direct.norm()).abs() < 1e-14);
        // uniform model: log p factors out and both joints have mass 1
        let zero = DVector::zeros(model.dim());
        assert!(insensitivity_b(&model, &q, &qp, &[zero]).unwrap().value < 1e-15);
    }

    struct Quadratic;

    impl Potential for Quadratic {
        fn dim(&self) -> usize {
            3
        }
        fn n(&self) -> usize {
            1
        }
        fn loss(&self, w: &DVector<f64>) -> Result<f64> {
            Ok(0.5 * w.norm_squared())
        }
        fn full_grad(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(w.clone())
        }
        fn batch_grad(&self, w: &DVector<f64>, _: &[usize]) -> Result<DVector<f64>> {
            Ok(w.clone())
        }
    }

    #[test]
    fn lipschitz_of_quadratic() {
        let sample = vec![DVector::from_vec(vec![1.0, 2.0, 2.0]), DVector::from_vec(vec![0.5, 0.0, 0.0])];
        let r = lipschitz_estimates(&Quadratic, &sample).unwrap();
        assert!((r.m - 1.0).abs() < 1e-8);
        assert!((r.q - 3.0).abs() < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn entropy_bound_examples() {
        let b = entropy_rate_bound(33, 1, 1 << 16, 1.0, 1.0).unwrap();
        assert_eq!(b.exponent, 0.0);
        assert_eq!(b.threshold, 1.0);
        assert!(!b.flag);
        assert_eq!(b.k_threshold, 33.0);
        assert!(entropy_rate_bound(34, 1, 1 << 16, 1.0, 1.0).unwrap().flag);
        assert_eq!(entropy_rate_bound(40, 1, 1 << 16, 1.0, 0.0).unwrap().threshold, 0.0);
        let t1 = entropy_rate_bound(40, 2, 8, 0.7, 1.5).unwrap().threshold;
        let t2 = entropy_rate_bound(40, 2, 8, 0.7, 3.0).unwrap().threshold;
        assert_eq!(t2, 2.0 * t1);
        assert!(entropy_rate_bound(1, 1, 2, 0.0, 1.0).is_err());
    }

    #[test]
    fn weights_file_roundtrip() {
        let model = SoftmaxModel::new(1, 1, 2, 3, Parametrization::LowRank { rank: 2 }).unwrap();
        let w = random_w(&model, 1);
        let text = serde_json::to_string(&model.to_file(&w, 3)).unwrap();
        let (m2, w2) = serde_json::from_str::<ModelFile>(&text).unwrap().into_parts().unwrap();
        assert_eq!(m2, model);
        assert_eq!(w2, w);
    }

    fn fd_check(model: &SoftmaxModel, seed: u64) -> f64 {
        let w = random_w(model, seed);
        let mut g = rng::stream(seed, rng::INIT, 1);
        let (x, y) = (g.random_range(0..model.num_x), g.random_range(0..model.num_y));
        let analytic = model.grad_log_prob(x, y, &w).unwrap();
        let h = 1e-5;
        let numeric = DVector::from_fn(model.dim(), |i, _| {
            let (mut a, mut b) = (w.clone(), w.clone());
            a[i] += h;
            b[i] -= h;
            (model.log_prob(x, y, &a).unwrap() - model.log_prob(x, y, &b).unwrap()) / (2.0 * h)
        });
        (&analytic - &numeric).norm() / analytic.norm().max(1e-12)
    }

    #[test]
    fn finite_difference_gradients() {
        for p in [Parametrization::FullTable, Parametrization::FullTableUnpinned, Parametrization::LowRank { rank: 2 }] {
            let model = SoftmaxModel::new(1, 1, 3, 3, p).unwrap();
            for seed in 0..100 {
                let err = fd_check(&model, seed);
                assert!(err < 1e-6, "{p:?} seed {seed}: {err}");
            }
        }
        let model = SoftmaxModel::new(1, 1, 2, 2, Parametrization::FullTable).unwrap();
        assert!(model.grad_log_prob(2, 0, &DVector::zeros(2)).is_err());
        assert!(model.log_prob(0, 0, &DVector::from_vec(vec![f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn weighted_gradient_matches_finite_difference() {
        let op = fixture(8, 3);
        let model = SoftmaxModel::for_operator(&op, Parametrization::LowRank { rank: 2 }).unwrap();
        let w = random_w(&model, 2);
        let q = op.joint();
        let (_, g) = model.weighted_loss_grad(&w, &q).unwrap();
        let h = 1e-5;
        for i in 0..model.dim() {
            let (mut a, mut b) = (w.clone(), w.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (model.weighted_loss(&a, &q).unwrap() - model.weighted_loss(&b, &q).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn phi_pairing_matches_double_sum() {
        let op = fixture(9, 3);
        let model = SoftmaxModel::for_operator(&op, Parametrization::FullTable).unwrap();
        let w = random_w(&model, 4);
        let phi = model.phi_map(&w).unwrap();
        assert!(phi.iter().all(|v| v.is_finite()));
        let q = op.joint();
        let qp = op.with_matrix(DMatrix::from_element(3, 3, 1.0 / 3.0)).unwrap().joint();
        let mut brute = 0.0;
        for x in 0..3 {
            for y in 0..3 {
                brute += (q[(y, x)] - qp[(y, x)]) * model.log_prob(x, y, &w).unwrap();
            }
        }
        let pairing: f64 = phi.component_mul(&(&q - &qp)).sum();
        assert!((pairing - brute).abs() < 1e-14);
        let b = insensitivity_b(&model, &q, &qp, &[w]).unwrap();
        assert!((b.value - brute.abs()).abs() < 1e-14);
    }

    #[test]
    fn hessian_norm_matches_dense_oracle() {
        let op = fixture(10, 3);
        let model = SoftmaxModel::for_operator(&op, Parametrization::FullTable).unwrap();
        let ds = sample_dataset(&op, 300, 2);
        let pot = ModelPotential::new(&model, &ds).unwrap();
        let freq = ds.frequencies().unwrap();
        for seed in 0..3 {
            let w = random_w(&model, seed);
            // block-diagonal Hessian: m_x (diag(p) − p pᵀ) on the free logits of x
            let d = model.dim();
            let mut hess = DMatrix::zeros(d, d);
            for x in 0..3 {
                let p = model.probs(&w, x);
                let mass = freq.column(x).sum();
                for i in 0..2 {
                    for j in 0..2 {
                        let delta = if i == j { p[i] } else { 0.0 };
                        hess[(2 * x + i, 2 * x + j)] = mass * (delta - p[i] * p[j]);
                    }
                }
            }
            let exact = hess.symmetric_eigen().eigenvalues.amax();
            let (est, ok) = hessian_norm(&pot, &w).unwrap();
            assert!(ok);
            assert!((est - exact).abs() < 1e-6 * exact.max(1.0), "{est} vs {exact}");
            assert!(est <= freq.column_sum().max() + 1e-9);
        }
    }

    proptest! {
        #[test]
        fn softmax_normalizes(seed in 0u64..1000, p in 0usize..3) {
            let param = [Parametrization::FullTable, Parametrization::FullTableUnpinned, Parametrization::LowRank { rank: 2 }][p];
            let model = SoftmaxModel::new(1, 1, 3, 4, param).unwrap();
            let w = initial_weights(&model, Init::Random { seed, scale: 3.0 });
            for x in 0..3 {
                let s: f64 = model.probs(&w, x).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(model.probs(&w, x).iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn entropy_bound_monotone(k in 1usize..60, l in 1usize..4, h in 0.1f64..3.0) {
            let b = |k, l| entropy_rate_bound(k, l, 16, h, 1.0).unwrap().threshold;
            prop_assert!(b(k + 1, l) > b(k, l));
            // k fixed, larger l lowers the threshold whenever H < 2 log₂|Σ|
            prop_assert!(b(k, l + 1) < b(k, l));
        }

        #[test]
        fn insensitivity_monotone_in_sample(seed in 0u64..200) {
            let op = fixture(seed, 2);
            let model = SoftmaxModel::for_operator(&op, Parametrization::FullTable).unwrap();
            let qp = op.with_matrix(DMatrix::from_element(2, 2, 0.5)).unwrap().joint();
            let sample: Vec<_> = (0..4).map(|s| random_w(&model, seed * 10 + s)).collect();
            let small = insensitivity_a(&model, &op.joint(), &qp, &sample[..2]).unwrap().value;
            let big = insensitivity_a(&model, &op.joint(), &qp, &sample).unwrap().value;
            prop_assert!(big >= small);
            let small = insensitivity_b(&model, &op.joint(), &qp, &sample[..2]).unwrap().value;
            let big = insensitivity_b(&model, &op.joint(), &qp, &sample).unwrap().value;
            prop_assert!(big >= small);
        }
    }
}
