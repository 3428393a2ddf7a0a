//! Localized SGLD, the LLC estimator, coupled chains and their bounds.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Potential;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StepSchedule {
    Constant { epsilon: f64 },
    /// `ε_t` interpolates geometrically from `start` at t = 1 to `end` at t = T.
    Geometric { start: f64, end: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SGLDConfig {
    /// Dataset size.
    pub n: usize,
    /// The product `nβ`.
    pub n_beta: f64,
    pub gamma: f64,
    /// Minibatch size `m`; `m = n` uses the full gradient.
    pub batch_size: usize,
    /// Chain length `T`, counting the initial point.
    pub steps: usize,
    pub schedule: StepSchedule,
    pub seed: u64,
    pub weight_norm_cap: Option<f64>,
    /// Fraction of the chain discarded before averaging.
    pub burn_in: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `nβ = 10`, `γ = 300`, `T = 100`, `ε = 1e-4`.
    Paper,
    /// `β = 1`, `γ = 1`, `T = 4000`, `ε = 5e-5`: long enough to resolve `d/2`
    /// on small regular models.
    Tuned,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "tuned" => Ok(Preset::Tuned),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}` (expected paper or tuned)"))),
        }
    }
}

impl SGLDConfig {
    pub fn preset(preset: Preset, n: usize, seed: u64) -> Self {
        match preset {
            Preset::Paper => Self {
                n,
                n_beta: 10.0,
                gamma: 300.0,
                batch_size: n,
                steps: 100,
                schedule: StepSchedule::Constant { epsilon: 1e-4 },
                seed,
                weight_norm_cap: None,
                burn_in: 0.5,
            },
            Preset::Tuned => Self {
                n,
                n_beta: n as f64,
                gamma: 1.0,
                batch_size: n,
                steps: 4000,
                schedule: StepSchedule::Constant { epsilon: 5e-5 },
                seed,
                weight_norm_cap: None,
                burn_in: 0.5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n == 0 || self.batch_size == 0 || self.batch_size > self.n {
            return bad("need 1 <= m <= n");
        }
        if self.steps == 0 {
            return bad("chain length must be >= 1");
        }
        if !(self.n_beta > 0.0 && self.n_beta.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("nβ and γ must be positive");
        }
        let (lo, hi) = (self.epsilon_min(), self.epsilon_max());
        if !(lo > 0.0 && hi.is_finite()) {
            return bad("step sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad("burn-in fraction must lie in [0, 1)");
        }
        if let Some(cap) = self.weight_norm_cap {
            if !(cap > 0.0) {
                return bad("weight norm cap must be positive");
            }
        }
        Ok(())
    }

    /// `ε_t` for `t = 1..T`.
    pub fn epsilon(&self, t: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant { epsilon } => epsilon,
            StepSchedule::Geometric { start, end } => {
                if self.steps <= 1 {
                    start
                } else {
                    let frac = (t.saturating_sub(1)) as f64 / (self.steps - 1) as f64;
                    start * (end / start).powf(frac)
                }
            }
        }
    }

    pub fn epsilon_min(&self) -> f64 {
        match self.schedule {
            StepSchedule::Constant { epsilon } => epsilon,
            StepSchedule::Geometric { start, end } => start.min(end),
        }
    }

    pub fn epsilon_max(&self) -> f64 {
        match self.schedule {
            StepSchedule::Constant { epsilon } => epsilon,
            StepSchedule::Geometric { start, end } => start.max(end),
        }
    }
}

/// `Mnβ ∈ (γ − 2/ε_max, γ)` and the resulting contraction factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowCheck {
    pub mnb: f64,
    pub lower: f64,
    pub upper: f64,
    pub holds: bool,
}

pub fn window_check(config: &SGLDConfig, m: f64) -> WindowCheck {
    let mnb = m * config.n_beta;
    let lower = config.gamma - 2.0 / config.epsilon_max();
    let upper = config.gamma;
    WindowCheck { mnb, lower, upper, holds: mnb > lower && mnb < upper }
}

fn require_window(config: &SGLDConfig, m: f64) -> Result<WindowCheck> {
    let w = window_check(config, m);
    if w.holds {
        Ok(w)
    } else {
        Err(Error::WindowViolation { mnb: w.mnb, lower: w.lower, upper: w.upper })
    }
}

/// `μ = 1 + (ε_min/2)(Mnβ − γ)`.
pub fn bound_mu(config: &SGLDConfig, m: f64) -> Result<f64> {
    require_window(config, m)?;
    let mu = 1.0 + config.epsilon_min() / 2.0 * (m * config.n_beta - config.gamma);
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::NonFinite(format!("contraction factor {mu} outside (0, 1)")));
    }
    Ok(mu)
}

/// `g(t, A) = (ε_max/ε_min) (A + ξ) / (γ/nβ − M) · (1 − μ^{t−1})`.
pub fn bound_g(t: usize, a: f64, xi: f64, config: &SGLDConfig, m: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidArgument("steps are numbered from 1".into()));
    }
    let mu = bound_mu(config, m)?;
    let ratio = config.epsilon_max() / config.epsilon_min();
    Ok(ratio * (a + xi) / (config.gamma / config.n_beta - m) * (1.0 - mu.powi((t - 1) as i32)))
}

/// `f(t, δ) = tδ`.
pub fn bound_f(t: usize, delta: f64) -> f64 {
    t as f64 * delta
}

/// `(ε_max/ε_min) nβ Q (A + ξ) / (γ/nβ − M) + 2nβ(B + κ)`.
#[allow(clippy::too_many_arguments)]
pub fn main_theorem_bound(a: f64, b: f64, xi: f64, kappa: f64, q: f64, m: f64, config: &SGLDConfig) -> Result<f64> {
    require_window(config, m)?;
    let nb = config.n_beta;
    let ratio = config.epsilon_max() / config.epsilon_min();
    Ok(ratio * nb * q * (a + xi) / (config.gamma / nb - m) + 2.0 * nb * (b + kappa))
}

/// One localized SGLD update from `w` given the loss gradient and the noise.
pub fn sgld_step(
    w: &DVector<f64>,
    grad: &DVector<f64>,
    w_star: &DVector<f64>,
    noise: &DVector<f64>,
    epsilon: f64,
    config: &SGLDConfig,
) -> DVector<f64> {
    let drift = grad * (-config.n_beta) + (w_star - w) * config.gamma;
    w + drift * (epsilon / 2.0) + noise
}

/// `η_t ~ N(0, ε_t I)` from the noise stream at `(seed, t)`.
pub fn noise(seed: u64, t: usize, dim: usize, epsilon: f64) -> DVector<f64> {
    let mut g = rng::stream(seed, rng::NOISE, t as u64);
    let scale = epsilon.sqrt();
    DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut g);
        scale * z
    })
}

/// Minibatch indices for step `t`, sorted; `None` when `m = n`.
pub fn minibatch(seed: u64, t: usize, n: usize, m: usize) -> Option<Vec<usize>> {
    if m >= n {
        return None;
    }
    let mut g = rng::stream(seed, rng::MINIBATCH, t as u64);
    let mut idx = index::sample(&mut g, n, m).into_vec();
    idx.sort_unstable();
    Some(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    /// `w_1, ..., w_T` with `w_1` the initial point.
    pub states: Vec<Vec<f64>>,
    /// `L_n(w_t)`.
    pub losses: Vec<f64>,
    /// `ε_t` used to move from `w_t` to `w_{t+1}`.
    pub epsilons: Vec<f64>,
    /// Steps whose state exceeded the weight-norm cap.
    pub cap_violations: Vec<usize>,
    pub noise_stream: String,
    pub config: SGLDConfig,
}

impl ChainTrace {
    pub fn state(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.states[t - 1])
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn vectors(&self) -> Vec<DVector<f64>> {
        self.states.iter().map(|s| DVector::from_column_slice(s)).collect()
    }
}

fn gradient<P: Potential + ?Sized>(p: &P, w: &DVector<f64>, config: &SGLDConfig, t: usize) -> Result<DVector<f64>> {
    match minibatch(config.seed, t, p.n(), config.batch_size) {
        None => p.full_grad(w),
        Some(idx) => p.batch_grad(w, &idx),
    }
}

/// Runs a chain from `w_star`, localized at `w_star`.
pub fn run_chain<P: Potential + ?Sized>(p: &P, w_star: &DVector<f64>, config: &SGLDConfig) -> Result<ChainTrace> {
    config.validate()?;
    if p.n() != config.n {
        return Err(Error::InvalidArgument(format!("config n = {} but dataset has {}", config.n, p.n())));
    }
    if w_star.len() != p.dim() {
        return Err(Error::InvalidArgument("w* has the wrong dimension".into()));
    }
    let mut trace = ChainTrace {
        states: Vec::with_capacity(config.steps),
        losses: Vec::with_capacity(config.steps),
        epsilons: Vec::with_capacity(config.steps),
        cap_violations: Vec::new(),
        noise_stream: format!("seed={} namespace=noise counter=t", config.seed),
        config: config.clone(),
    };
    let mut w = w_star.clone();
    for t in 1..=config.steps {
        let loss = p.loss(&w)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t, message: format!("loss {loss}") });
        }
        if config.weight_norm_cap.is_some_and(|cap| w.norm() > cap) {
            trace.cap_violations.push(t);
        }
        let eps = config.epsilon(t);
        trace.states.push(w.iter().copied().collect());
        trace.losses.push(loss);
        trace.epsilons.push(eps);
        if t == config.steps {
            break;
        }
        let g = gradient(p, &w, config, t)?;
        let next = sgld_step(&w, &g, w_star, &noise(config.seed, t, w.len(), eps), eps, config);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: t, message: "non-finite state".into() });
        }
        w = next;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LLCEstimate {
    pub lambda_hat: f64,
    /// Mean of `L_n(w_t)` over the retained steps.
    pub mean_loss: f64,
    /// `L_n(w*)`.
    pub reference_loss: f64,
    pub n_beta: f64,
    pub burn_in: f64,
    pub samples_used: usize,
}

/// `λ̂ = nβ [mean_t L_n(w_t) − L_n(w*)]` after discarding `⌊burn_in · T⌋` steps.
pub fn llc_estimate<P: Potential + ?Sized>(trace: &ChainTrace, p: &P, w_star: &DVector<f64>) -> Result<LLCEstimate> {
    llc_from_losses(&trace.losses, p.loss(w_star)?, &trace.config)
}

pub fn llc_from_losses(losses: &[f64], reference_loss: f64, config: &SGLDConfig) -> Result<LLCEstimate> {
    let skip = (config.burn_in * losses.len() as f64).floor() as usize;
    let kept = &losses[skip.min(losses.len())..];
    if kept.is_empty() {
        return Err(Error::InvalidArgument("no samples left after burn-in".into()));
    }
    let mean_loss = kept.iter().sum::<f64>() / kept.len() as f64;
    Ok(LLCEstimate {
        lambda_hat: config.n_beta * (mean_loss - reference_loss),
        mean_loss,
        reference_loss,
        n_beta: config.n_beta,
        burn_in: config.burn_in,
        samples_used: kept.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledRun {
    pub chain: ChainTrace,
    pub chain_chi: ChainTrace,
    /// `Δ_t = ‖w_t − w̃_t‖₂`.
    pub divergence: Vec<f64>,
    pub window: Option<WindowCheck>,
    pub warning: Option<String>,
}

/// Two chains with the same seed, noise and minibatch schedule, driven by
/// `p` and `p_chi`. `m` (if known) is used for the window warning only.
pub fn run_coupled_chains<P: Potential + ?Sized, R: Potential + ?Sized>(
    p: &P,
    p_chi: &R,
    w_star: &DVector<f64>,
    config: &SGLDConfig,
    m: Option<f64>,
) -> Result<CoupledRun> {
    if p.n() != p_chi.n() || p.dim() != p_chi.dim() {
        return Err(Error::InvalidArgument("coupled datasets must match in size and model dimension".into()));
    }
    let (a, b) = rayon::join(|| run_chain(p, w_star, config), || run_chain(p_chi, w_star, config));
    let (chain, chain_chi) = (a?, b?);
    let divergence = chain
        .states
        .iter()
        .zip(&chain_chi.states)
        .map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .collect();
    let window = m.map(|m| window_check(config, m));
    let warning = window.filter(|w| !w.holds).map(|w| {
        format!("window violated: Mnβ = {:.6} not in ({:.6}, {:.6}); no bound is claimed", w.mnb, w.lower, w.upper)
    });
    Ok(CoupledRun { chain, chain_chi, divergence, window, warning })
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with `t, epsilon, loss, dist_to_star`.
pub fn write_trace_csv<W: Write>(trace: &ChainTrace, w_star: &DVector<f64>, mut out: W) -> Result<()> {
    writeln!(out, "t,epsilon,loss,dist_to_star")?;
    for (i, s) in trace.states.iter().enumerate() {
        let d = s.iter().zip(w_star.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        writeln!(out, "{},{},{},{}", i + 1, fmt(trace.epsilons[i]), fmt(trace.losses[i]), fmt(d))?;
    }
    Ok(())
}

/// CSV of a coupled run; `g` holds `g(t, Â)` per step when the window holds.
pub fn write_coupled_csv<W: Write>(run: &CoupledRun, w_star: &DVector<f64>, g: Option<&[f64]>, mut out: W) -> Result<()> {
    writeln!(out, "t,epsilon,loss,loss_chi,dist_to_star,delta,g")?;
    for i in 0..run.divergence.len() {
        let d = run.chain.states[i].iter().zip(w_star.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let g = g.map(|g| fmt(g[i])).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            i + 1,
            fmt(run.chain.epsilons[i]),
            fmt(run.chain.losses[i]),
            fmt(run.chain_chi.losses[i]),
            fmt(d),
            fmt(run.divergence[i]),
            g
        )?;
    }
    Ok(())
}

/// `L_n(w) = ½‖w‖²` independent of the data; the Gibbs posterior is Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticPotential {
    pub dim: usize,
    pub n: usize,
}

impl Potential for QuadraticPotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n(&self) -> usize {
        self.n
    }

    fn loss(&self, w: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * w.norm_squared())
    }

    fn full_grad(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(w.clone())
    }

    fn batch_grad(&self, w: &DVector<f64>, _indices: &[usize]) -> Result<DVector<f64>> {
        Ok(w.clone())
    }
}

/// Closed-form `nβ E[L]` for `L = ½‖w‖²` under `exp(−nβL − (γ/2)‖w‖²)`.
pub fn quadratic_llc(dim: usize, n_beta: f64, gamma: f64) -> f64 {
    dim as f64 * n_beta / (2.0 * (n_beta + gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeFit {
    pub lambda: f64,
    /// Multiplicity of the `(−log ε)^{m−1}` factor, 1 when no correction is needed.
    pub m: usize,
    /// Fitted exponent of `(−log ε)`, i.e. `m − 1` before rounding.
    pub log_coefficient: f64,
    pub lambda_plain: f64,
    pub rss_plain: f64,
    pub rss_log: f64,
    pub condition_number: f64,
    pub epsilons: Vec<f64>,
    pub volumes: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    pub dim: usize,
    pub radius: f64,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub num_epsilons: usize,
    pub samples: usize,
    pub seed: u64,
}

const CHUNK: usize = 1 << 16;
const MIN_HITS: usize = 100;

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, f64, f64)> {
    let svd = x.clone().svd(true, true);
    let s = &svd.singular_values;
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = s.max() / smin;
    if !(cond.is_finite() && cond < 1e10) {
        return Err(Error::DegenerateFit(format!("design matrix condition number {cond:e}")));
    }
    let beta = svd.solve(y, 0.0).map_err(|e| Error::DegenerateFit(e.to_string()))?;
    let rss = (x * &beta - y).norm_squared();
    Ok((beta, rss, cond))
}

/// Estimates the volume-scaling exponent of `loss` near its zero set by Monte
/// Carlo on a ball, regressing `log V(ε)` on `log ε` and `log(−log ε)`.
pub fn volume_scaling_fit<F>(loss: F, cfg: &VolumeConfig) -> Result<VolumeFit>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if cfg.dim == 0 || cfg.dim > 3 {
        return Err(Error::InvalidArgument("volume fits support 1 to 3 dimensions".into()));
    }
    if !(0.0 < cfg.epsilon_min && cfg.epsilon_min < cfg.epsilon_max && cfg.epsilon_max < 1.0) || cfg.num_epsilons < 4 {
        return Err(Error::InvalidArgument("need 0 < ε_min < ε_max < 1 and at least 4 ε values".into()));
    }
    let eps: Vec<f64> = (0..cfg.num_epsilons)
        .map(|i| {
            let f = i as f64 / (cfg.num_epsilons - 1) as f64;
            cfg.epsilon_min * (cfg.epsilon_max / cfg.epsilon_min).powf(f)
        })
        .collect();
    let chunks = cfg.samples.div_ceil(CHUNK);
    let hits: Vec<usize> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut g = rng::stream(cfg.seed, rng::SKETCH, c as u64);
            let mut local = vec![0usize; eps.len()];
            let mut point = vec![0.0; cfg.dim];
            let todo = CHUNK.min(cfg.samples - c * CHUNK);
            for _ in 0..todo {
                loop {
                    for v in point.iter_mut() {
                        *v = g.random_range(-1.0..1.0);
                    }
                    if point.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                        break;
                    }
                }
                point.iter_mut().for_each(|v| *v *= cfg.radius);
                let l = loss(&point);
                for (h, e) in local.iter_mut().zip(&eps) {
                    if l < *e {
                        *h += 1;
                    }
                }
            }
            local
        })
        .reduce(|| vec![0; eps.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let (mut xs, mut vols) = (Vec::new(), Vec::new());
    for (e, h) in eps.iter().zip(&hits) {
        if *h >= MIN_HITS {
            xs.push(*e);
            vols.push(*h as f64 / cfg.samples as f64);
        }
    }
    if xs.len() < 4 {
        return Err(Error::DegenerateFit(format!("only {} ε values have at least {MIN_HITS} hits", xs.len())));
    }
    let y = DVector::from_iterator(xs.len(), vols.iter().map(|v| v.ln()));
    let plain = DMatrix::from_fn(xs.len(), 2, |i, j| if j == 0 { 1.0 } else { xs[i].ln() });
    let with_log = DMatrix::from_fn(xs.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => xs[i].ln(),
        _ => (-xs[i].ln()).ln(),
    });
    let (b1, rss_plain, _) = least_squares(&plain, &y)?;
    let (b2, rss_log, condition_number) = least_squares(&with_log, &y)?;
    let use_log = b2[2] > 0.25 && rss_log < rss_plain / 4.0;
    Ok(VolumeFit {
        lambda: if use_log { b2[1] } else { b1[1] },
        m: if use_log { 1 + b2[2].round().max(0.0) as usize } else { 1 },
        log_coefficient: b2[2],
        lambda_plain: b1[1],
        rss_plain,
        rss_log,
        condition_number,
        epsilons: xs,
        volumes: vols,
    })
}
