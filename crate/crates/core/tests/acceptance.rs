//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test -p seqmodes --test acceptance -- --nocapture` to see
//! the lines interleaved with the harness output; they are written to stderr
//! directly and show up either way.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use seqmodes::distribution::{
    check_language, conditional_operator, marginalize, plant_absolute_bigram, plant_collective_bigram,
    random_language, uniform_marginal_language, Alphabet, ConditionalOperator, DenseTensor, Language,
};
use seqmodes::experiment::{coupled_experiment, llc_experiment, rounding_allowance};
use seqmodes::model::{FitConfig, Parametrization, SoftmaxModel};
use seqmodes::modes::{weighted_svd, ModeDecomposition, DEFAULT_RANK_TOL};
use seqmodes::rng;
use seqmodes::sgld::{
    llc_estimate, quadratic_llc, run_chain, volume_scaling_fit, Preset, QuadraticPotential, SGLDConfig,
    StepSchedule, VolumeConfig,
};
use seqmodes::truncation::{multi_length_truncation, truncate_kl, truncate_normalized, Solver, TruncationSpec, FULL};

use common::{jacobi_svd, report, scaled};

const TEST_STREAM: u64 = 0x6163_6365_7074_0007;

fn gaussian(seed: u64, counter: u64, len: usize) -> DVector<f64> {
    let mut g = rng::stream(seed, TEST_STREAM, counter);
    DVector::from_fn(len, |_, _| g.sample(StandardNormal))
}

/// The twenty `(seed, |Σ|, k, l)` fixtures shared by the structural criteria.
fn fixtures() -> Vec<(u64, usize, usize, usize)> {
    let shapes = [(1, 1), (2, 1), (1, 2)];
    (0..20u64)
        .map(|i| {
            let (k, l) = shapes[(i as usize / 3) % 3];
            (100 + i, 2 + (i as usize % 3), k, l)
        })
        .collect()
}

fn fixture_language(seed: u64, s: usize, k: usize, l: usize) -> Language {
    random_language(seed, Alphabet::new(s).unwrap(), k + l, 1.0).unwrap()
}

fn identity_defect(g: &DMatrix<f64>) -> f64 {
    (g - DMatrix::identity(g.nrows(), g.ncols())).amax()
}

/// `q(y|x)` straight from a joint over `Σ^{k+l}`.
fn conditional_from_joint(joint: &DenseTensor, k: usize, l: usize) -> DMatrix<f64> {
    let s = joint.alphabet;
    let (nx, ny) = (s.pow(k as u32), s.pow(l as u32));
    let mut c = DMatrix::zeros(ny, nx);
    for x in 0..nx {
        let row = &joint.data[x * ny..(x + 1) * ny];
        let mass: f64 = row.iter().sum();
        for y in 0..ny {
            c[(y, x)] = row[y] / mass;
        }
    }
    c
}

fn sign_free_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax().min((a + b).amax())
}

#[test]
fn criterion_01_mode_basis_orthonormality() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (seed, s, k, l) in fixtures() {
        let op = conditional_operator(&fixture_language(seed, s, k, l), k, l).unwrap();
        let dec = weighted_svd(&op, DEFAULT_RANK_TOL).unwrap();
        worst = worst.max(identity_defect(&dec.gram_mode_basis().unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-10 && secs < 10.0;
    report(1, pass, &format!("20 languages, max |G - I| = {worst:.3e} (< 1e-10), {secs:.2}s (< 10s)"));
    assert!(pass);
}

#[test]
fn criterion_02_exact_reconstruction() {
    let mut worst = 0.0f64;
    for (seed, s, k, l) in fixtures() {
        let lang = fixture_language(seed, s, k, l);
        let op = conditional_operator(&lang, k, l).unwrap();
        let dec = weighted_svd(&op, DEFAULT_RANK_TOL).unwrap();
        let truth = conditional_from_joint(lang.joint(), k, l);
        for x in 0..op.num_x() {
            for y in 0..op.num_y() {
                let total: f64 = (0..dec.num_modes())
                    .map(|a| dec.propensity(a, x, y).unwrap() * dec.mode_weight(a).unwrap())
                    .sum();
                worst = worst.max((total - truth[(y, x)]).abs());
            }
        }
    }
    let pass = worst < 1e-10;
    report(2, pass, &format!("max |Σ_α q(y|x,α)q(α) - q(y|x)| = {worst:.3e} (< 1e-10)"));
    assert!(pass);
}

/// Library triple for the mode whose left vector peaks at `y`.
fn mode_at(dec: &ModeDecomposition, y: usize) -> usize {
    (0..dec.n_plus).max_by(|&a, &b| dec.left[(y, a)].abs().total_cmp(&dec.left[(y, b)].abs())).unwrap()
}

/// Oracle index whose left vector peaks at `y`.
fn oracle_at(u: &DMatrix<f64>, s: &[f64], y: usize) -> usize {
    (0..s.len()).filter(|&i| s[i] > 0.0).max_by(|&a, &b| u[(y, a)].abs().total_cmp(&u[(y, b)].abs())).unwrap()
}

#[test]
fn criterion_03_absolute_bigram() {
    let cases: [(u64, usize, &[u32], &[u32]); 4] =
        [(13, 3, &[1], &[2]), (21, 4, &[0], &[3]), (34, 3, &[2, 0], &[1]), (55, 2, &[1], &[0, 1])];
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (seed, s, x, y) in cases {
        let (k, l) = (x.len(), y.len());
        let lang = random_language(seed, Alphabet::new(s).unwrap(), k + l, 1.0).unwrap();
        let planted = plant_absolute_bigram(&lang, x, y).unwrap();
        let op = conditional_operator(&planted, k, l).unwrap();
        let dec = weighted_svd(&op, DEFAULT_RANK_TOL).unwrap();
        let (xi, yi) = (op.x_index(x).unwrap(), op.y_index(y).unwrap());
        let ny = s.pow(l as u32);
        let enc = x.iter().fold(0usize, |acc, &t| acc * s + t as usize);
        let qx: f64 = planted.joint().data[enc * ny..(enc + 1) * ny].iter().sum();
        let (os, ou, ov) = jacobi_svd(&scaled(&op));
        let o = oracle_at(&ou, &os, yi);
        let a = mode_at(&dec, yi);
        let errs = [
            (dec.singular_values[a] - os[o]).abs(),
            (os[o] - qx.sqrt()).abs(),
            // the planted pair occupies one basis direction on each side
            (dec.right[(xi, a)].abs() - 1.0).abs(),
            (dec.left[(yi, a)].abs() - 1.0).abs(),
            sign_free_distance(&dec.left.column(a).into_owned(), &ou.column(o).into_owned()),
            sign_free_distance(&dec.right.column(a).into_owned(), &ov.column(o).into_owned()),
        ];
        let e = errs.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(e);
        lines.push(format!("x={x:?} y={y:?} s={:.12} q(x)^1/2={:.12}", dec.singular_values[a], qx.sqrt()));
    }
    let pass = worst < 1e-10;
    report(3, pass, &format!("{} | max triple error vs Jacobi oracle {worst:.3e} (< 1e-10)", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_04_collective_bigram() {
    let cases: [(u64, usize, Vec<Vec<u32>>, Vec<u32>); 3] = [
        (5, 4, vec![vec![0], vec![1]], vec![2]),
        (8, 3, vec![vec![0], vec![2]], vec![1]),
        (9, 4, vec![vec![0, 0], vec![1, 2], vec![2, 1]], vec![3]),
    ];
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (seed, s, contexts, y) in cases {
        let (k, l) = (contexts[0].len(), y.len());
        let lang = random_language(seed, Alphabet::new(s).unwrap(), k + l, 1.0).unwrap();
        let planted = plant_collective_bigram(&lang, &contexts, &y).unwrap();
        let op = conditional_operator(&planted, k, l).unwrap();
        let dec = weighted_svd(&op, DEFAULT_RANK_TOL).unwrap();
        let yi = op.y_index(&y).unwrap();
        let (os, ou, ov) = jacobi_svd(&scaled(&op));
        let o = oracle_at(&ou, &os, yi);
        let a = mode_at(&dec, yi);
        let errs = [
            (dec.singular_values[a] - os[o]).abs(),
            sign_free_distance(&dec.left.column(a).into_owned(), &ou.column(o).into_owned()),
            sign_free_distance(&dec.right.column(a).into_owned(), &ov.column(o).into_owned()),
        ];
        let e = errs.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(e);
        // y follows exactly the contexts in S, so q(y) = Σ_{s∈S} q(s)
        let q_s: Vec<f64> = contexts.iter().map(|c| op.marginal[op.x_index(c).unwrap()]).collect();
        let q_y: f64 = q_s.iter().sum();
        let stated = q_y.sqrt() * (contexts.len() as f64).sqrt();
        lines.push(format!(
            "|S|={} oracle s={:.12} sqrt(Σq(s))={:.12} q(y)^1/2|S|^1/2={:.12}",
            contexts.len(),
            os[o],
            q_y.sqrt(),
            stated
        ));
    }
    let pass = worst < 1e-10;
    report(4, pass, &format!("{} | max triple error vs Jacobi oracle {worst:.3e} (< 1e-10)", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_05_language_consistency() {
    let mut langs: Vec<Language> = fixtures().into_iter().map(|(seed, s, k, l)| fixture_language(seed, s, k, l)).collect();
    for seed in 0..5 {
        langs.push(uniform_marginal_language(seed, Alphabet::new(3).unwrap(), 3, 1.0).unwrap());
        langs.push(random_language(seed, Alphabet::new(2).unwrap(), 4, 0.5).unwrap());
    }
    let mut worst = 0.0f64;
    let mut weakest_detection = f64::INFINITY;
    for lang in &langs {
        let family = lang.family().unwrap();
        worst = worst.max(check_language(&family).unwrap().max_deviation);
        let last = family.len() - 1;
        for (which, idx) in [(0, 0), (last, family[last].data.len() - 1)] {
            let mut bad = family.clone();
            bad[which].data[idx] += 0.1;
            weakest_detection = weakest_detection.min(check_language(&bad).unwrap().max_deviation);
        }
    }
    let pass = worst < 1e-12 && weakest_detection >= 0.099;
    report(
        5,
        pass,
        &format!("{} languages, max deviation {worst:.3e} (< 1e-12), smallest detected perturbation {weakest_detection:.6} (>= 0.099)", langs.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_06_parseval() {
    let cases = fixtures();
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let (seed, s, k, l) = cases[i as usize % cases.len()];
        let op = conditional_operator(&fixture_language(seed, s, k, l), k, l).unwrap();
        let dec = weighted_svd(&op, DEFAULT_RANK_TOL).unwrap();
        let (ny, nx) = (op.num_y(), op.num_x());
        let f = DMatrix::from_column_slice(ny, nx, gaussian(6, i, ny * nx).as_slice());
        let norm2: f64 = (0..nx).map(|x| op.marginal[x] * f.column(x).norm_squared()).sum();
        let coef2 = dec.coefficients(&f).unwrap().norm_squared();
        worst = worst.max((norm2 - coef2).abs() / norm2);
    }
    let pass = worst < 1e-8;
    report(6, pass, &format!("50 random f, max relative error {worst:.3e} (< 1e-8)"));
    assert!(pass);
}

fn central_difference(f: impl Fn(&DVector<f64>) -> f64, w: &DVector<f64>) -> DVector<f64> {
    let h = 1e-5;
    DVector::from_fn(w.len(), |i, _| {
        let (mut a, mut b) = (w.clone(), w.clone());
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    })
}

fn relative(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
}

#[test]
fn criterion_07_gradients() {
    let mut lines = Vec::new();
    let mut pass = true;
    for (name, p) in [("full_table", Parametrization::FullTable), ("low_rank", Parametrization::LowRank { rank: 2 })] {
        let model = SoftmaxModel::new(2, 1, 9, 3, p).unwrap();
        let mut worst = 0.0f64;
        for i in 0..100u64 {
            let w = gaussian(7, i, model.dim());
            let mut g = rng::stream(7, TEST_STREAM, 1000 + i);
            let (x, y) = (g.random_range(0..9), g.random_range(0..3));
            let analytic = model.grad_log_prob(x, y, &w).unwrap();
            let numeric = central_difference(|v| model.log_prob(x, y, v).unwrap(), &w);
            worst = worst.max(relative(&analytic, &numeric));
            let weights = DMatrix::from_fn(3, 9, |_, _| g.random_range(0.0..1.0));
            let (_, analytic) = model.weighted_loss_grad(&w, &weights).unwrap();
            let numeric = central_difference(|v| model.weighted_loss(v, &weights).unwrap(), &w);
            worst = worst.max(relative(&analytic, &numeric));
        }
        pass &= worst < 1e-6;
        lines.push(format!("{name} max relative error {worst:.3e}"));
    }
    report(7, pass, &format!("100 evaluations each: {} (< 1e-6)", lines.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_08_regular_model_llc() {
    let start = Instant::now();
    let lang = random_language(0, Alphabet::new(2).unwrap(), 2, 1.0).unwrap();
    let op = conditional_operator(&lang, 1, 1).unwrap();
    let config = SGLDConfig::preset(Preset::Tuned, 10_000, 0);
    let report_ = llc_experiment(&op, Parametrization::FullTable, &config, 8, &FitConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let lambda = report_.mean_lambda_hat;
    let pass = report_.dim == 2 && (0.75..=1.25).contains(&lambda) && secs < 300.0 && report_.fit.converged;
    let per: Vec<String> = report_.estimates.iter().map(|e| format!("{:.3}", e.lambda_hat)).collect();
    report(8, pass, &format!("d=2, mean λ̂ = {lambda:.4} in [0.75, 1.25], chains [{}], {secs:.1}s (< 300s)", per.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_09_volume_oracles() {
    let p = QuadraticPotential { dim: 1, n: 1000 };
    let config = |seed| SGLDConfig {
        n: 1000,
        n_beta: 1000.0,
        gamma: 1.0,
        batch_size: 1000,
        steps: 40_000,
        schedule: StepSchedule::Constant { epsilon: 5e-5 },
        seed,
        weight_norm_cap: None,
        burn_in: 0.5,
    };
    let zero = DVector::zeros(1);
    let est: Vec<f64> = (0..16u64)
        .into_par_iter()
        .map(|s| {
            let trace = run_chain(&p, &zero, &config(s)).unwrap();
            llc_estimate(&trace, &p, &zero).unwrap().lambda_hat
        })
        .collect();
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    let exact = quadratic_llc(1, 1000.0, 1.0);
    let sgld_err = (mean / exact - 1.0).abs();

    let cfg = |dim, lo| VolumeConfig {
        dim,
        radius: 1.0,
        epsilon_min: lo,
        epsilon_max: 1e-2,
        num_epsilons: 25,
        samples: 4_000_000,
        seed: 1,
    };
    let fits = [
        ("w^2", 0.5, volume_scaling_fit(|w: &[f64]| w[0] * w[0], &cfg(1, 1e-8)).unwrap().lambda),
        ("w1^2+w2^2", 1.0, volume_scaling_fit(|w: &[f64]| w[0] * w[0] + w[1] * w[1], &cfg(2, 1e-4)).unwrap().lambda),
        ("w1^2 w2^2", 0.5, volume_scaling_fit(|w: &[f64]| (w[0] * w[1]).powi(2), &cfg(2, 1e-8)).unwrap().lambda),
    ];
    let vol_ok = fits.iter().all(|&(_, target, got)| (got / target - 1.0).abs() < 0.1);
    let pass = sgld_err < 0.05 && vol_ok;
    let vols: Vec<String> = fits.iter().map(|(n, t, g)| format!("{n}: {g:.4} vs {t}")).collect();
    report(
        9,
        pass,
        &format!("SGLD λ̂ {mean:.5} vs {exact:.5} ({:.2}% < 5%); volume fits {} (< 10%)", 100.0 * sgld_err, vols.join(", ")),
    );
    assert!(pass);
}

/// `|Σ| = 3`, `k = l = 1`, uniform-marginal language with `χ = 1` of three modes.
fn coupled_fixture() -> (ConditionalOperator, ConditionalOperator) {
    let lang = uniform_marginal_language(3, Alphabet::new(3).unwrap(), 2, 1.0).unwrap();
    let op = conditional_operator(&lang, 1, 1).unwrap();
    let dec = weighted_svd(&op, DEFAULT_RANK_TOL).unwrap();
    let chi = truncate_kl(&dec, 1, &TruncationSpec::default()).unwrap().operator;
    (op, chi)
}

struct CoupledOutcome {
    window: bool,
    trajectory: bool,
    trajectory_strict: bool,
    main: bool,
}

fn coupled_outcomes() -> &'static [CoupledOutcome] {
    static CELL: std::sync::OnceLock<Vec<CoupledOutcome>> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let (op, chi) = coupled_fixture();
        (0..100u64)
            .into_par_iter()
            .map(|seed| {
                let config = SGLDConfig::preset(Preset::Paper, 1000, seed);
                let (r, run) = coupled_experiment(&op, &chi, Parametrization::FullTable, &config, &FitConfig::default())
                    .unwrap();
                let strict = r.window.holds && r.divergence.iter().zip(&r.g).all(|(d, g)| d <= g);
                // sanity: the allowance is a few ulps of the state norm
                debug_assert!(r.g.is_empty() || rounding_allowance(&run, 1) < 1e-12);
                CoupledOutcome {
                    window: r.window.holds,
                    trajectory: r.trajectory_bound_holds == Some(true),
                    trajectory_strict: strict,
                    main: r.main_bound_holds == Some(true),
                }
            })
            .collect()
    })
}

#[test]
fn criterion_10_trajectory_bound() {
    let start = Instant::now();
    let out = coupled_outcomes();
    let secs = start.elapsed().as_secs_f64();
    let window = out.iter().filter(|o| o.window).count();
    let held = out.iter().filter(|o| o.trajectory).count();
    let strict = out.iter().filter(|o| o.trajectory_strict).count();
    let pass = held >= 95 && secs < 600.0;
    report(
        10,
        pass,
        &format!(
            "Δ_t <= g(t, Â) for all t in {held}/100 runs (>= 95; {strict}/100 without the rounding allowance), window held in {window}/100, {secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_11_main_bound() {
    let out = coupled_outcomes();
    let held = out.iter().filter(|o| o.main).count();
    let pass = held >= 95;
    report(11, pass, &format!("|λ̂ - λ̂^(χ)| <= bound(Â, B̂, 0, 0, Q̂, M̂) in {held}/100 runs (>= 95)"));
    assert!(pass);
}

fn kl(q: &DMatrix<f64>, p: &DMatrix<f64>, marginal: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for x in 0..q.ncols() {
        for y in 0..q.nrows() {
            let a = q[(y, x)];
            if a > 0.0 {
                total += marginal[x] * a * (a / p[(y, x)]).ln();
            }
        }
    }
    total
}

#[test]
fn criterion_12_truncation_optimality() {
    let mut langs = Vec::new();
    for seed in 0..4 {
        langs.push((uniform_marginal_language(seed, Alphabet::new(3).unwrap(), 2, 1.0).unwrap(), 1, 1));
        langs.push((uniform_marginal_language(seed, Alphabet::new(4).unwrap(), 2, 1.0).unwrap(), 1, 1));
        langs.push((uniform_marginal_language(seed, Alphabet::new(3).unwrap(), 3, 1.0).unwrap(), 2, 1));
    }
    let (mut compared, mut optimal, mut monotone, mut full_err) = (0, true, true, 0.0f64);
    let mut worst_gap = f64::NEG_INFINITY;
    for (lang, k, l) in &langs {
        let op = conditional_operator(lang, *k, *l).unwrap();
        let dec = weighted_svd(&op, DEFAULT_RANK_TOL).unwrap();
        let mut previous = f64::INFINITY;
        for chi in 0..dec.num_modes() {
            let best = truncate_kl(&dec, chi, &TruncationSpec::default()).unwrap();
            let d = kl(&op.matrix, &best.operator.matrix, &op.marginal);
            // the barrier solver stops within its 1e-9 tolerance of the optimum
            monotone &= d <= previous + 1e-9;
            previous = d;
            let normalized = truncate_normalized(&dec, chi).unwrap();
            if normalized.provenance.feasible {
                compared += 1;
                let gap = d - kl(&op.matrix, &normalized.operator.matrix, &op.marginal);
                worst_gap = worst_gap.max(gap);
                optimal &= gap <= 1e-9;
            }
        }
        let full = truncate_kl(&dec, FULL, &TruncationSpec::default()).unwrap();
        full_err = full_err.max((&full.operator.matrix - &op.matrix).amax());
    }
    let pass = optimal && monotone && full_err < 1e-10;
    report(
        12,
        pass,
        &format!(
            "{} operators: KL(kl) - KL(normalized) <= {worst_gap:.3e} over {compared} feasible comparisons, non-increasing in χ: {monotone}, full cutoff error {full_err:.3e} (< 1e-10)",
            langs.len()
        ),
    );
    assert!(pass);
}

/// `-Σ q(seq) log p(seq)` and the rounding scale `Σ |q(seq) log p(seq)|`.
fn composite_loss(joint: &DenseTensor, logp: &[f64]) -> (f64, f64) {
    joint.data.iter().zip(logp).fold((0.0, 0.0), |(l, a), (q, lp)| (l - q * lp, a + (q * lp).abs()))
}

struct CompositeCheck {
    full_err: f64,
    eps: Vec<f64>,
    summed: f64,
    worst: f64,
    strict: usize,
    held: usize,
}

/// Full-cutoff reconstruction plus `|L - L^(χ̄)| <= Σ ε_i` on 50 random `w`
/// for the model `p(X_1) p(X_2|X_1) p(X_3|X_1X_2)` over `Σ^3`.
fn composite_check(lang: &Language, chis: &[usize], spec: &TruncationSpec, grid_seed: u64) -> CompositeCheck {
    let s = lang.alphabet_size();
    let pairs = [(2, 1), (1, 1)];
    let full = multi_length_truncation(lang, &pairs, &[FULL, FULL], spec, None).unwrap();
    let full_err = full.joint.max_abs_diff(lang.joint());

    let mixed = multi_length_truncation(lang, &pairs, chis, spec, None).unwrap();
    let models = [
        SoftmaxModel::new(2, 1, s * s, s, Parametrization::FullTable).unwrap(),
        SoftmaxModel::new(1, 1, s, s, Parametrization::FullTable).unwrap(),
    ];
    let prefix = SoftmaxModel::new(0, 1, 1, s, Parametrization::FullTable).unwrap();
    // marginals of q and q^(χ̄) on the first k_i + l_i positions
    let windows: Vec<(DenseTensor, DenseTensor)> = pairs
        .iter()
        .map(|&(k, l)| {
            let cut = 3 - (k + l);
            (marginalize(lang.joint(), 0, cut).unwrap(), marginalize(&mixed.joint, 0, cut).unwrap())
        })
        .collect();
    let mut measured = Vec::new();
    let mut per_pair = Vec::new();
    for i in 0..50u64 {
        let ws: Vec<DVector<f64>> =
            models.iter().enumerate().map(|(j, m)| gaussian(grid_seed, 3 * i + j as u64, m.dim())).collect();
        let w0 = gaussian(grid_seed, 3 * i + 2, prefix.dim());
        let logs: Vec<DMatrix<f64>> =
            models.iter().zip(&ws).map(|(m, w)| m.conditional_matrix(w).map(f64::ln)).collect();
        let lp0 = prefix.log_probs(&w0, 0);
        let logp: Vec<f64> = (0..s.pow(3))
            .map(|idx| {
                let (a, b, c) = (idx / (s * s), (idx / s) % s, idx % s);
                lp0[a] + logs[1][(b, a)] + logs[0][(c, a * s + b)]
            })
            .collect();
        let (l, scale) = composite_loss(lang.joint(), &logp);
        let (l_bar, scale_bar) = composite_loss(&mixed.joint, &logp);
        let rounding = logp.len() as f64 * f64::EPSILON * (scale + scale_bar);
        measured.push(((l - l_bar).abs(), rounding));
        per_pair.push(
            windows
                .iter()
                .zip(&logs)
                .map(|((q, qbar), lg)| {
                    let ny = lg.nrows();
                    let sum: f64 = q
                        .data
                        .iter()
                        .zip(&qbar.data)
                        .enumerate()
                        .map(|(idx, (a, b))| (a - b) * lg[(idx % ny, idx / ny)])
                        .sum();
                    sum.abs()
                })
                .collect::<Vec<f64>>(),
        );
    }
    let eps: Vec<f64> = (0..pairs.len()).map(|j| per_pair.iter().map(|v| v[j]).fold(0.0, f64::max)).collect();
    let summed = multi_length_truncation(lang, &pairs, chis, spec, Some(&eps)).unwrap().summed_bound.unwrap();
    CompositeCheck {
        full_err,
        worst: measured.iter().map(|m| m.0).fold(0.0, f64::max),
        strict: measured.iter().filter(|m| m.0 <= summed).count(),
        held: measured.iter().filter(|m| m.0 <= summed + m.1).count(),
        eps,
        summed,
    }
}

#[test]
fn criterion_13_composite_truncation() {
    // lower windows of a uniform-marginal language are uniform, so the (1,1)
    // factor is exact and the bound is attained: equality up to rounding
    let tied = composite_check(
        &uniform_marginal_language(2, Alphabet::new(3).unwrap(), 3, 1.0).unwrap(),
        &[1, 0],
        &TruncationSpec::default(),
        13,
    );
    // a generic language under the normalized solver truncates both factors
    let generic = composite_check(
        &random_language(4, Alphabet::new(3).unwrap(), 3, 1.0).unwrap(),
        &[1, 0],
        &TruncationSpec { solver: Solver::Normalized, ..TruncationSpec::default() },
        14,
    );
    let describe = |name: &str, c: &CompositeCheck| {
        format!(
            "{name}: full error {:.3e}, Σε_i = {:.6e} (ε = {:.3e}, {:.3e}) vs max |L - L^(χ̄)| = {:.6e}, held {}/50 ({} strict)",
            c.full_err, c.summed, c.eps[0], c.eps[1], c.worst, c.held, c.strict
        )
    };
    let pass = [&tied, &generic].iter().all(|c| c.full_err < 1e-10 && c.held == 50);
    report(13, pass, &format!("χ̄ = (1, 0); {}; {}", describe("uniform-marginal kl", &tied), describe("generic normalized", &generic)));
    assert!(pass);
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_14_pipeline_determinism() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&out);
        let status = Command::new(env!("CARGO_BIN_EXE_seqmodes"))
            .arg("pipeline")
            .arg("--config")
            .arg(fixtures.join("pipeline.json"))
            .arg("--corpus")
            .arg(fixtures.join("pipeline_corpus.txt"))
            .arg("--out")
            .arg(&out)
            .args(["--seed", "11"])
            .output()
            .unwrap();
        assert!(status.status.success(), "pipeline failed: {}", String::from_utf8_lossy(&status.stderr));
        runs.push(snapshot(&out));
    }
    let identical = runs[0] == runs[1];
    let differing: Vec<&String> = runs[0].keys().filter(|k| runs[1].get(*k) != runs[0].get(*k)).collect();
    let pass = identical && !runs[0].is_empty();
    report(
        14,
        pass,
        &format!("{} output files, bit-identical across two runs: {identical} {:?}", runs[0].len(), differing),
    );
    assert!(pass);
}
