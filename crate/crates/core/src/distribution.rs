//! Exact finite sequence distributions.
//!
//! A [`Language`] is stored as its top-level joint `q_K` over `Σ^K`; every
//! lower fundamental tensor is obtained by marginalisation. Sequences are
//! indexed row-major with the first token most significant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Sum-to-one tolerance applied when a joint is validated.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alphabet {
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("alphabet size must be >= 1".into()));
        }
        Ok(Self { size, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut a = Self::new(labels.len())?;
        a.labels = Some(labels);
        Ok(a)
    }

    pub fn label(&self, token: u32) -> String {
        match &self.labels {
            Some(l) => l.get(token as usize).cloned().unwrap_or_else(|| token.to_string()),
            None => token.to_string(),
        }
    }
}

/// Row-major index of `seq` in `Σ^len`.
pub fn encode(seq: &[u32], alphabet: usize) -> usize {
    seq.iter().fold(0usize, |acc, &t| acc * alphabet + t as usize)
}

pub fn decode(mut index: usize, len: usize, alphabet: usize) -> Vec<u32> {
    let mut out = vec![0u32; len];
    for slot in out.iter_mut().rev() {
        *slot = (index % alphabet) as u32;
        index /= alphabet;
    }
    out
}

/// All sequences of length `len`, in index order.
pub fn all_sequences(len: usize, alphabet: usize) -> Vec<Vec<u32>> {
    (0..alphabet.pow(len as u32)).map(|i| decode(i, len, alphabet)).collect()
}

/// Dense order-`order` tensor over `(R^Σ)^{⊗order}` in the word basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub alphabet: usize,
    pub order: usize,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(alphabet: usize, order: usize, data: Vec<f64>) -> Result<Self> {
        let expected = alphabet.checked_pow(order as u32).ok_or_else(|| {
            Error::InvalidArgument(format!("tensor Σ^{order} too large for |Σ| = {alphabet}"))
        })?;
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "tensor over Σ^{order} needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { alphabet, order, data })
    }

    pub fn get(&self, seq: &[u32]) -> f64 {
        self.data[encode(seq, self.alphabet)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Applies `ε^{⊗i} ⊗ 1^{⊗(K-i-j)} ⊗ ε^{⊗j}`: sums out the first `i` and last `j` positions.
pub fn marginalize(tensor: &DenseTensor, i: usize, j: usize) -> Result<DenseTensor> {
    if i + j >= tensor.order {
        return Err(Error::InvalidArgument(format!(
            "cannot marginalize {i} + {j} positions of an order-{} tensor",
            tensor.order
        )));
    }
    let s = tensor.alphabet;
    let kept = tensor.order - i - j;
    let inner = s.pow(kept as u32);
    let tail = s.pow(j as u32);
    let head = s.pow(i as u32);
    let mut out = vec![0.0; inner];
    for a in 0..head {
        for (b, slot) in out.iter_mut().enumerate() {
            let base = (a * inner + b) * tail;
            *slot += tensor.data[base..base + tail].iter().sum::<f64>();
        }
    }
    DenseTensor::new(s, kept, out)
}

/// Deviation of a family `{A_1, ..., A_K}` from the language condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LanguageReport {
    pub max_deviation: f64,
    /// `(k, i, j)` at which the maximum was attained.
    pub worst: Option<(usize, usize, usize)>,
}

/// Compares every window marginal of `A_K` with the supplied `A_k`.
///
/// `family[k - 1]` must hold `A_k`.
pub fn check_language(family: &[DenseTensor]) -> Result<LanguageReport> {
    let top = family
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty family".into()))?;
    let big_k = family.len();
    for (idx, t) in family.iter().enumerate() {
        if t.alphabet != top.alphabet {
            return Err(Error::AlphabetMismatch(t.alphabet, top.alphabet));
        }
        if t.order != idx + 1 {
            return Err(Error::InvalidArgument(format!(
                "family entry {idx} has order {}, expected {}",
                t.order,
                idx + 1
            )));
        }
    }
    let mut report = LanguageReport { max_deviation: 0.0, worst: None };
    for k in 1..big_k {
        let target = &family[k - 1];
        for i in 0..=(big_k - k) {
            let j = big_k - k - i;
            let dev = marginalize(top, i, j)?.max_abs_diff(target);
            if dev > report.max_deviation || report.worst.is_none() {
                report.max_deviation = report.max_deviation.max(dev);
                if dev >= report.max_deviation {
                    report.worst = Some((k, i, j));
                }
            }
        }
    }
    Ok(report)
}

/// A consistent family of joint distributions, stored as `q_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Language {
    pub alphabet: Alphabet,
    joint: DenseTensor,
    /// Set when exact zeros were planted, relaxing `q(x) > 0`.
    pub positivity_relaxed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageFile {
    pub alphabet_size: usize,
    #[serde(rename = "K")]
    pub big_k: usize,
    pub probabilities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub positivity_relaxed: bool,
}

impl Language {
    pub fn from_joint(alphabet: Alphabet, joint: DenseTensor) -> Result<Self> {
        if joint.alphabet != alphabet.size {
            return Err(Error::AlphabetMismatch(joint.alphabet, alphabet.size));
        }
        if joint.order == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        if let Some(v) = joint.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid probability {v}")));
        }
        let total = joint.sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidArgument(format!("joint sums to {total}, not 1")));
        }
        let joint = DenseTensor::new(
            joint.alphabet,
            joint.order,
            joint.data.iter().map(|v| v / total).collect(),
        )?;
        let lang = Self { alphabet, joint, positivity_relaxed: false };
        let unigram = lang.fundamental_tensor(1)?;
        if unigram.data.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidArgument("unigram marginal has a zero entry".into()));
        }
        Ok(lang)
    }

    fn relaxed(alphabet: Alphabet, data: Vec<f64>, order: usize) -> Result<Self> {
        let total: f64 = data.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("construction zeroes the whole distribution".into()));
        }
        let joint = DenseTensor::new(alphabet.size, order, data.into_iter().map(|v| v / total).collect())?;
        Ok(Self { alphabet, joint, positivity_relaxed: true })
    }

    pub fn max_len(&self) -> usize {
        self.joint.order
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.size
    }

    pub fn joint(&self) -> &DenseTensor {
        &self.joint
    }

    /// `A_k`, taken as the marginal of the first `k` positions of `q_K`.
    pub fn fundamental_tensor(&self, k: usize) -> Result<DenseTensor> {
        if k == 0 || k > self.max_len() {
            return Err(Error::OutOfRange { index: k, len: self.max_len() });
        }
        if k == self.max_len() {
            return Ok(self.joint.clone());
        }
        marginalize(&self.joint, 0, self.max_len() - k)
    }

    /// `{A_1, ..., A_K}`.
    pub fn family(&self) -> Result<Vec<DenseTensor>> {
        (1..=self.max_len()).map(|k| self.fundamental_tensor(k)).collect()
    }

    pub fn prob(&self, seq: &[u32]) -> Result<f64> {
        Ok(self.fundamental_tensor(seq.len())?.get(seq))
    }

    pub fn to_file(&self) -> LanguageFile {
        LanguageFile {
            alphabet_size: self.alphabet.size,
            big_k: self.max_len(),
            probabilities: self.joint.data.clone(),
            labels: self.alphabet.labels.clone(),
            positivity_relaxed: self.positivity_relaxed,
        }
    }

    pub fn from_file(file: LanguageFile) -> Result<Self> {
        let alphabet = Alphabet { size: file.alphabet_size, labels: file.labels };
        let joint = DenseTensor::new(file.alphabet_size, file.big_k, file.probabilities)?;
        if file.positivity_relaxed {
            return Self::relaxed(alphabet, joint.data, joint.order);
        }
        Self::from_joint(alphabet, joint)
    }
}

/// The matrix of `q(y|x)` restricted to retained contexts and continuations.
///
/// Rows are continuations `y`, columns are contexts `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalOperator {
    pub k: usize,
    pub l: usize,
    pub alphabet_size: usize,
    pub x_labels: Vec<Vec<u32>>,
    pub y_labels: Vec<Vec<u32>>,
    pub matrix: DMatrix<f64>,
    pub marginal: DVector<f64>,
    pub meta: OperatorMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ConditionalOperator {
    pub fn new(
        k: usize,
        l: usize,
        alphabet_size: usize,
        x_labels: Vec<Vec<u32>>,
        y_labels: Vec<Vec<u32>>,
        matrix: DMatrix<f64>,
        marginal: DVector<f64>,
    ) -> Result<Self> {
        if matrix.nrows() != y_labels.len() || matrix.ncols() != x_labels.len() {
            return Err(Error::InvalidArgument(format!(
                "matrix is {}x{} but labels are {}x{}",
                matrix.nrows(),
                matrix.ncols(),
                y_labels.len(),
                x_labels.len()
            )));
        }
        if marginal.len() != x_labels.len() {
            return Err(Error::InvalidArgument("marginal length differs from column count".into()));
        }
        if matrix.iter().chain(marginal.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conditional operator entries".into()));
        }
        if matrix.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative conditional probability".into()));
        }
        if let Some(j) = marginal.iter().position(|&q| q <= 0.0) {
            return Err(Error::ZeroMarginal(x_labels[j].clone()));
        }
        let total = marginal.sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidArgument(format!("marginal sums to {total}, not 1")));
        }
        Ok(Self {
            k,
            l,
            alphabet_size,
            x_labels,
            y_labels,
            matrix,
            marginal: marginal / total,
            meta: OperatorMeta::default(),
        })
    }

    pub fn num_x(&self) -> usize {
        self.x_labels.len()
    }

    pub fn num_y(&self) -> usize {
        self.y_labels.len()
    }

    pub fn cond(&self, y: usize, x: usize) -> f64 {
        self.matrix[(y, x)]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.matrix.column_iter().map(|c| c.sum()).collect()
    }

    /// Largest deviation of a column sum from 1.
    pub fn stochasticity_defect(&self) -> f64 {
        self.column_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    /// `q(x, y) = q(y|x) q(x)` as a matrix shaped like `matrix`.
    pub fn joint(&self) -> DMatrix<f64> {
        joint_from(&self.matrix, &self.marginal)
    }

    pub fn x_index(&self, x: &[u32]) -> Option<usize> {
        self.x_labels.iter().position(|s| s == x)
    }

    pub fn y_index(&self, y: &[u32]) -> Option<usize> {
        self.y_labels.iter().position(|s| s == y)
    }

    /// Same contexts and marginal, different conditional matrix.
    pub fn with_matrix(&self, matrix: DMatrix<f64>) -> Result<Self> {
        let mut out = Self::new(
            self.k,
            self.l,
            self.alphabet_size,
            self.x_labels.clone(),
            self.y_labels.clone(),
            matrix,
            self.marginal.clone(),
        )?;
        out.meta = self.meta.clone();
        Ok(out)
    }
}

pub fn joint_from(cond: &DMatrix<f64>, marginal: &DVector<f64>) -> DMatrix<f64> {
    let mut j = cond.clone();
    for (mut col, q) in j.column_iter_mut().zip(marginal.iter()) {
        col *= *q;
    }
    j
}

/// `C_{k,l}` of a language: entry `(y, x) = q(xy) / q(x)`.
///
/// Zero-probability contexts are an error unless the language carries planted
/// zeros, in which case they are dropped from the domain.
pub fn conditional_operator(lang: &Language, k: usize, l: usize) -> Result<ConditionalOperator> {
    if k == 0 || l == 0 || k + l > lang.max_len() {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k, 1 <= l, k + l <= K = {}, got k = {k}, l = {l}",
            lang.max_len()
        )));
    }
    let s = lang.alphabet_size();
    let joint = lang.fundamental_tensor(k + l)?;
    let ny = s.pow(l as u32);
    let nx = s.pow(k as u32);
    let mut x_labels = Vec::new();
    let mut columns = Vec::new();
    let mut marginal = Vec::new();
    for xi in 0..nx {
        let row = &joint.data[xi * ny..(xi + 1) * ny];
        let qx: f64 = row.iter().sum();
        if qx <= 0.0 {
            if lang.positivity_relaxed {
                continue;
            }
            return Err(Error::ZeroMarginal(decode(xi, k, s)));
        }
        x_labels.push(decode(xi, k, s));
        marginal.push(qx);
        columns.push(row.iter().map(|v| v / qx).collect::<Vec<_>>());
    }
    let matrix = DMatrix::from_fn(ny, columns.len(), |y, x| columns[x][y]);
    let mut op = ConditionalOperator::new(
        k,
        l,
        s,
        x_labels,
        all_sequences(l, s),
        matrix,
        DVector::from_vec(marginal),
    )?;
    op.meta.source = Some("language".into());
    Ok(op)
}

fn gamma_simplex<R: Rng>(rng: &mut R, len: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..len).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|p| *p /= total);
    v
}

/// Stationary distribution of a row-stochastic `n x n` transition matrix.
fn stationary(transition: &DMatrix<f64>) -> DVector<f64> {
    let n = transition.nrows();
    if n <= 512 {
        // Solve π (P - I) = 0 with the last equation replaced by Σπ = 1.
        let mut a = transition.transpose() - DMatrix::identity(n, n);
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(n);
        b[n - 1] = 1.0;
        if let Some(pi) = a.lu().solve(&b) {
            let pi = pi.map(|v: f64| v.max(0.0));
            let total = pi.sum();
            return pi / total;
        }
    }
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..200_000 {
        let next = transition.tr_mul(&pi);
        let delta = (&next - &pi).amax();
        pi = next;
        if delta < 1e-17 {
            break;
        }
    }
    let total = pi.sum();
    pi / total
}

/// A strictly positive, shift-invariant language.
///
/// For `K = 1` the joint is a symmetric Dirichlet draw. For `K >= 2` the
/// transition kernels of an order-`(K-1)` Markov chain are drawn from a
/// symmetric Dirichlet and the joint is the chain's stationary law over
/// windows of length `K`, so every window marginal agrees with `A_k`.
pub fn random_language(seed: u64, alphabet: Alphabet, big_k: usize, concentration: f64) -> Result<Language> {
    if alphabet.size < 2 {
        return Err(Error::InvalidArgument("random languages need |Σ| >= 2".into()));
    }
    if big_k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidArgument(format!("concentration must be positive, got {concentration}")));
    }
    let s = alphabet.size;
    let mut rng = rng::stream(seed, rng::LANGUAGE, 0);
    let data = if big_k == 1 {
        gamma_simplex(&mut rng, s, concentration)
    } else {
        let states = s.pow((big_k - 1) as u32);
        let kernels: Vec<Vec<f64>> = (0..states).map(|_| gamma_simplex(&mut rng, s, concentration)).collect();
        let mut transition = DMatrix::zeros(states, states);
        for (st, kernel) in kernels.iter().enumerate() {
            let shifted = (st * s) % states;
            for (sigma, p) in kernel.iter().enumerate() {
                transition[(st, shifted + sigma)] += p;
            }
        }
        let pi = stationary(&transition);
        let mut data = Vec::with_capacity(states * s);
        for (st, kernel) in kernels.iter().enumerate() {
            for p in kernel {
                data.push(pi[st] * p);
            }
        }
        data
    };
    Language::from_joint(alphabet, DenseTensor::new(s, big_k, data)?)
}

/// Rescales a positive square matrix to be doubly stochastic (Sinkhorn).
fn sinkhorn(m: &mut DMatrix<f64>) {
    for _ in 0..100_000 {
        for mut row in m.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        for mut col in m.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        let defect = m.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
        if defect < 1e-15 {
            break;
        }
    }
}

/// A strictly positive language whose windows of every length are uniformly
/// distributed below `K`.
///
/// For every suffix `s'` of length `K-2` the kernel `P(σ | s₁ s')`, viewed as
/// a matrix in `(s₁, σ)`, is a Sinkhorn-balanced Dirichlet draw. The uniform
/// law on `Σ^{K-1}` is then stationary, so continuation marginals are uniform.
pub fn uniform_marginal_language(
    seed: u64,
    alphabet: Alphabet,
    big_k: usize,
    concentration: f64,
) -> Result<Language> {
    if alphabet.size < 2 {
        return Err(Error::InvalidArgument("random languages need |Σ| >= 2".into()));
    }
    if big_k < 2 {
        return Err(Error::InvalidArgument("uniform-marginal languages need K >= 2".into()));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidArgument(format!("concentration must be positive, got {concentration}")));
    }
    let s = alphabet.size;
    let suffixes = s.pow((big_k - 2) as u32);
    let states = s.pow((big_k - 1) as u32);
    let mut rng = rng::stream(seed, rng::LANGUAGE, 1);
    let mut data = vec![0.0; states * s];
    for suffix in 0..suffixes {
        let rows: Vec<Vec<f64>> = (0..s).map(|_| gamma_simplex(&mut rng, s, concentration)).collect();
        let mut m = DMatrix::from_fn(s, s, |i, j| rows[i][j]);
        sinkhorn(&mut m);
        for first in 0..s {
            let state = first * suffixes + suffix;
            for sigma in 0..s {
                data[state * s + sigma] = m[(first, sigma)] / states as f64;
            }
        }
    }
    Language::from_joint(alphabet, DenseTensor::new(s, big_k, data)?)
}

fn split_pair(lang: &Language, x: &[u32], y: &[u32]) -> Result<(usize, usize, usize)> {
    if x.is_empty() || y.is_empty() || x.len() + y.len() != lang.max_len() {
        return Err(Error::InvalidArgument(format!(
            "planted pair needs |x| + |y| = K = {}",
            lang.max_len()
        )));
    }
    let s = lang.alphabet_size();
    for &t in x.iter().chain(y) {
        if t as usize >= s {
            return Err(Error::TokenOutOfRange { token: t, alphabet: s });
        }
    }
    Ok((encode(x, s), encode(y, s), s.pow(y.len() as u32)))
}

/// Zeroes `q(xz)` for `z != y` and `q(ty)` for `t != x`, then renormalises.
pub fn plant_absolute_bigram(lang: &Language, x: &[u32], y: &[u32]) -> Result<Language> {
    let (xi, yi, ny) = split_pair(lang, x, y)?;
    let mut data = lang.joint().data.clone();
    if data[xi * ny + yi] <= 0.0 {
        return Err(Error::InvalidArgument("q(xy) = 0: planting would leave no mass on xy".into()));
    }
    let nx = data.len() / ny;
    for z in 0..ny {
        if z != yi {
            data[xi * ny + z] = 0.0;
        }
    }
    for t in 0..nx {
        if t != xi {
            data[t * ny + yi] = 0.0;
        }
    }
    Language::relaxed(lang.alphabet.clone(), data, lang.max_len())
}

pub fn is_absolute_bigram(lang: &Language, x: &[u32], y: &[u32]) -> Result<bool> {
    let (xi, yi, ny) = split_pair(lang, x, y)?;
    let data = &lang.joint().data;
    let nx = data.len() / ny;
    let row_ok = (0..ny).all(|z| z == yi || data[xi * ny + z] == 0.0);
    let col_ok = (0..nx).all(|t| t == xi || data[t * ny + yi] == 0.0);
    Ok(data[xi * ny + yi] > 0.0 && row_ok && col_ok)
}

/// Makes every context in `contexts` deterministically followed by `y` and
/// removes `y` as a continuation of every other context, keeping `q(x)`.
pub fn plant_collective_bigram(lang: &Language, contexts: &[Vec<u32>], y: &[u32]) -> Result<Language> {
    let first = contexts
        .first()
        .ok_or_else(|| Error::InvalidArgument("collective bigram needs a non-empty context set".into()))?;
    let (_, yi, ny) = split_pair(lang, first, y)?;
    let s = lang.alphabet_size();
    let mut members = Vec::with_capacity(contexts.len());
    for c in contexts {
        let (ci, _, _) = split_pair(lang, c, y)?;
        members.push(ci);
    }
    let mut data = lang.joint().data.clone();
    let nx = data.len() / ny;
    for t in 0..nx {
        let row = &mut data[t * ny..(t + 1) * ny];
        let mass: f64 = row.iter().sum();
        if members.contains(&t) {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[yi] = mass;
        } else {
            let rest = mass - row[yi];
            if mass > 0.0 && rest <= 0.0 {
                return Err(Error::Infeasible(format!(
                    "context {:?} has no continuation other than y",
                    decode(t, lang.max_len() - y.len(), s)
                )));
            }
            row[yi] = 0.0;
            if rest > 0.0 {
                row.iter_mut().for_each(|v| *v *= mass / rest);
            }
        }
    }
    Language::relaxed(lang.alphabet.clone(), data, lang.max_len())
}
