//! Independent oracles for the sampler's conditionals. Densities here are
//! assembled from statrs distributions and normalized numerically, never
//! from the closed forms under test.

use dce_bhm::hierarchy::ModelState;
use dce_bhm::kinetics::{ctc_model, KineticParams};
use dce_bhm::sampler::conditionals::{
    effects_conditional, effects_vector, noise_variance_conditional, patient_variance_conditional,
    voxel_variance_conditional, BlockIndex,
};
use dce_bhm::sampler::{ChainContext, ProposalScales};
use dce_bhm::studyio::StudyData;
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Continuous, InverseGamma, Normal};

use super::grid_normalize;

const LOG_GRID: (f64, f64, usize) = (-25.0, 25.0, 40_001);

fn ln_norm(x: f64, mean: f64, var: f64) -> f64 {
    Normal::new(mean, var.sqrt()).unwrap().ln_pdf(x)
}

fn oracle_mean(state: &ModelState, scan: usize, patient: usize, l: usize) -> f64 {
    let x = if scan == 1 { 1.0 } else { 0.0 };
    state.fixed.alpha[l] + x * state.fixed.beta[l] + state.patient.gamma[patient][l] + x * state.patient.delta[patient][l]
}

/// Max abs deviation between `pdf` and the oracle log-density normalized on
/// a log-spaced grid over `(0, inf)`.
fn variance_deviation(ln_oracle: impl Fn(f64) -> f64, pdf: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi, n) = LOG_GRID;
    let step = (hi - lo) / (n - 1) as f64;
    let us: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    // density of u = ln x is f(e^u) e^u
    let ln_g: Vec<f64> = us.iter().map(|&u| ln_oracle(u.exp()) + u).collect();
    let g = grid_normalize(&ln_g, step);
    us.iter().zip(&g).map(|(&u, gu)| (gu / u.exp() - pdf(u.exp())).abs()).fold(0.0, f64::max)
}

pub fn patient_variance_deviation(effect: f64) -> f64 {
    let prior = InverseGamma::new(1.0, 1.0).unwrap();
    let cond = patient_variance_conditional(effect);
    variance_deviation(|x| prior.ln_pdf(x) + ln_norm(effect, 0.0, x), |x| cond.pdf(x))
}

pub fn voxel_variance_deviation(data: &StudyData, state: &ModelState, group: usize, l: usize) -> f64 {
    let (i, j) = data.layout().scan_patient(group);
    let m = oracle_mean(state, i, j, l);
    let psi = &state.voxel.psi[group];
    let prior = InverseGamma::new(1.0, 1e-5).unwrap();
    let mut mean = [0.0; 2];
    mean[l] = m;
    mean[1 - l] = oracle_mean(state, i, j, 1 - l);
    let cond = voxel_variance_conditional(psi, mean, l);
    variance_deviation(
        |x| prior.ln_pdf(x) + psi.iter().map(|p| ln_norm(p[l], m, x)).sum::<f64>(),
        |x| cond.pdf(x),
    )
}

pub fn noise_variance_deviation(data: &StudyData, state: &ModelState, group: usize) -> f64 {
    let series = data.group(group);
    let residuals: Vec<f64> = series
        .voxels
        .iter()
        .enumerate()
        .flat_map(|(k, y)| {
            let psi = state.voxel.psi[group][k];
            let p = KineticParams::new(psi[0].exp(), psi[1].exp(), state.nuisance.vp[group][k]);
            let model = ctc_model(&p, &series.grid, &data.aif);
            y.values.iter().zip(model.values).map(|(a, b)| a - b).collect::<Vec<_>>()
        })
        .collect();
    // the sampler's conditional built from its cached residuals
    let ctx = ChainContext::new(data, state.clone(), ProposalScales::default(), 0).unwrap();
    let cond = noise_variance_conditional(residuals.len(), ctx.group_sse(group));
    let prior = InverseGamma::new(1.0, 1e-2).unwrap();
    variance_deviation(
        |x| prior.ln_pdf(x) + residuals.iter().map(|r| ln_norm(*r, 0.0, x)).sum::<f64>(),
        |x| cond.pdf(x),
    )
}

fn set_coordinate(state: &mut ModelState, l: usize, idx: usize, value: f64) {
    let j = state.patient.gamma.len();
    let b = BlockIndex { n_patients: j };
    match idx {
        BlockIndex::ALPHA => state.fixed.alpha[l] = value,
        BlockIndex::BETA => state.fixed.beta[l] = value,
        i if i < b.delta(0) => state.patient.gamma[i - b.gamma(0)][l] = value,
        i => state.patient.delta[i - b.delta(0)][l] = value,
    }
}

/// Unnormalized log conditional of the effects of parameter `l`: voxel
/// pseudo-observations plus the patient-effect priors.
fn effects_ln_oracle(data: &StudyData, state: &ModelState, l: usize) -> f64 {
    let layout = data.layout();
    let mut total = 0.0;
    for g in 0..layout.n_groups() {
        let (i, j) = layout.scan_patient(g);
        let m = oracle_mean(state, i, j, l);
        let tau2 = state.hypers.tau2_eps[g][l];
        total += state.voxel.psi[g].iter().map(|p| ln_norm(p[l], m, tau2)).sum::<f64>();
    }
    for j in 0..layout.n_patients() {
        total += ln_norm(state.patient.gamma[j][l], 0.0, state.hypers.tau2_gamma[j][l]);
        total += ln_norm(state.patient.delta[j][l], 0.0, state.hypers.tau2_delta[j][l]);
    }
    total
}

/// Largest deviation over every coordinate of both effects blocks between
/// the block's 1-D conditional and the grid-normalized oracle.
pub fn effects_slice_deviation(data: &StudyData, state: &ModelState) -> f64 {
    let mut worst: f64 = 0.0;
    for l in 0..2 {
        let block = effects_conditional(state, data.layout(), l).unwrap();
        let at = effects_vector(state, l);
        for idx in 0..block.dim() {
            let (m, v) = block.coordinate_conditional(idx, &at);
            let sd = v.sqrt();
            let n = 4001;
            let (lo, hi) = (m - 12.0 * sd, m + 12.0 * sd);
            let step = (hi - lo) / (n - 1) as f64;
            let xs: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
            let mut s = state.clone();
            let ln: Vec<f64> = xs
                .iter()
                .map(|&x| {
                    set_coordinate(&mut s, l, idx, x);
                    effects_ln_oracle(data, &s, l)
                })
                .collect();
            let dens = grid_normalize(&ln, step);
            let normal = Normal::new(m, sd).unwrap();
            for (x, d) in xs.iter().zip(&dens) {
                worst = worst.max((normal.pdf(*x) - d).abs());
            }
        }
    }
    worst
}

/// Precision matrix and right-hand side of the effects block, built from
/// one design row per voxel. Order: alpha, beta, gamma_1..J, delta_1..J.
pub fn effects_system(data: &StudyData, state: &ModelState, l: usize) -> (DMatrix<f64>, DVector<f64>) {
    let layout = data.layout();
    let jn = layout.n_patients();
    let p = 2 + 2 * jn;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for g in 0..layout.n_groups() {
        let (i, j) = layout.scan_patient(g);
        let x = if i == 1 { 1.0 } else { 0.0 };
        let mut z = DVector::<f64>::zeros(p);
        z[0] = 1.0;
        z[1] = x;
        z[2 + j] = 1.0;
        z[2 + jn + j] = x;
        let w = 1.0 / state.hypers.tau2_eps[g][l];
        for psi in &state.voxel.psi[g] {
            a += w * &z * z.transpose();
            b += w * psi[l] * &z;
        }
    }
    for j in 0..jn {
        a[(2 + j, 2 + j)] += 1.0 / state.hypers.tau2_gamma[j][l];
        a[(2 + jn + j, 2 + jn + j)] += 1.0 / state.hypers.tau2_delta[j][l];
    }
    (a, b)
}

/// Mean and covariance from the explicit normal equations.
pub fn effects_normal_equations(data: &StudyData, state: &ModelState, l: usize) -> (DVector<f64>, DMatrix<f64>) {
    let (a, b) = effects_system(data, state, l);
    let cov = a.clone().try_inverse().unwrap();
    (a.lu().solve(&b).unwrap(), cov)
}

/// A one-patient, one-voxel-per-scan problem with every parameter except
/// the voxel-level ones held at its generating value.
pub fn single_voxel_problem(seed: u64, noise_sd: f64) -> (StudyData, ModelState) {
    use dce_bhm::studyio::{simulate_study, SimulationSpec};
    let spec = SimulationSpec {
        n_patients: 1,
        voxels_per_scan: 1,
        sigma2: noise_sd * noise_sd,
        tau2_eps: [0.05, 0.05],
        ..SimulationSpec::default()
    };
    let (data, truth) = simulate_study(&spec, seed).unwrap();
    (data, truth.state)
}

fn voxel_ln_likelihood(data: &StudyData, state: &ModelState, psi: [f64; 2], vp: f64) -> f64 {
    let series = data.group(0);
    let sd = state.nuisance.sigma2[0].sqrt();
    let model = ctc_model(&KineticParams::new(psi[0].exp(), psi[1].exp(), vp), &series.grid, &data.aif);
    series.voxels[0]
        .values
        .iter()
        .zip(&model.values)
        .map(|(y, m)| Normal::new(*m, sd).unwrap().ln_pdf(*y))
        .sum()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Grid marginal of `psi_1` for voxel (group 0, voxel 0): abscissae,
/// normalized density, and the posterior sds of both components.
pub fn psi1_grid_marginal(data: &StudyData, state: &ModelState) -> (Vec<f64>, Vec<f64>, [f64; 2]) {
    let mean = [oracle_mean(state, 0, 0, 0), oracle_mean(state, 0, 0, 1)];
    let tau2 = state.hypers.tau2_eps[0];
    let vp = state.nuisance.vp[0][0];
    let ln_target = |p: [f64; 2]| {
        voxel_ln_likelihood(data, state, p, vp) + ln_norm(p[0], mean[0], tau2[0]) + ln_norm(p[1], mean[1], tau2[1])
    };
    // coarse pass to locate the mass, then a fine grid over it
    let centre = state.voxel.psi[0][0];
    let coarse: Vec<[f64; 2]> = linspace(centre[0] - 2.0, centre[0] + 2.0, 161)
        .into_iter()
        .flat_map(|a| linspace(centre[1] - 2.0, centre[1] + 2.0, 161).into_iter().map(move |b| [a, b]))
        .collect();
    let lv: Vec<f64> = coarse.iter().map(|p| ln_target(*p)).collect();
    let top = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<&[f64; 2]> = coarse.iter().zip(&lv).filter(|(_, v)| **v > top - 40.0).map(|(p, _)| p).collect();
    let pad = 4.0 / 160.0 * 2.0;
    let bound = |c: usize| {
        let lo = keep.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min) - pad;
        let hi = keep.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max) + pad;
        (lo, hi)
    };
    let (a0, a1) = bound(0);
    let (b0, b1) = bound(1);
    let n = 601;
    let xs = linspace(a0, a1, n);
    let ys = linspace(b0, b1, n);
    let mut ln = vec![0.0; n * n];
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            ln[i * n + j] = ln_target([*x, *y]);
        }
    }
    let m = ln.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = ln.iter().map(|v| (v - m).exp()).collect();
    let dy = ys[1] - ys[0];
    let dx = xs[1] - xs[0];
    let row_sums: Vec<f64> = (0..n).map(|i| super::simpson(&w[i * n..(i + 1) * n], dy)).collect();
    let col_sums: Vec<f64> = (0..n).map(|j| super::simpson(&(0..n).map(|i| w[i * n + j]).collect::<Vec<_>>(), dx)).collect();
    let z = super::simpson(&row_sums, dx);
    let marg: Vec<f64> = row_sums.iter().map(|v| v / z).collect();
    let sd_of = |g: &[f64], d: &[f64]| {
        let mu: f64 = g.iter().zip(d).map(|(x, p)| x * p).sum::<f64>() / d.iter().sum::<f64>();
        (g.iter().zip(d).map(|(x, p)| (x - mu).powi(2) * p).sum::<f64>() / d.iter().sum::<f64>()).sqrt()
    };
    let sds = [sd_of(&xs, &row_sums), sd_of(&ys, &col_sums)];
    (xs, marg, sds)
}

/// KS distance between `n_draws` thinned MH draws of `psi_1` and the grid
/// posterior, with every other parameter frozen.
pub fn mh_psi_ks(seed: u64, n_draws: usize, noise_sd: f64) -> f64 {
    use dce_bhm::sampler::mh_voxel_psi;
    use rand::SeedableRng;
    let (data, state) = single_voxel_problem(seed, noise_sd);
    let (grid, density, sds) = psi1_grid_marginal(&data, &state);
    let cdf = super::cumulative(&grid, &density);
    let sd = 1.7 * 0.5 * (sds[0] + sds[1]);
    let mut ctx = ChainContext::new(&data, state, ProposalScales::default(), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1000);
    let thin = 10;
    for _ in 0..2_000 {
        mh_voxel_psi(&mut ctx, 0, 0, sd, &mut rng);
    }
    let mut draws = Vec::with_capacity(n_draws);
    for it in 0..n_draws * thin {
        mh_voxel_psi(&mut ctx, 0, 0, sd, &mut rng);
        if it % thin == 0 {
            draws.push(ctx.state.voxel.psi[0][0][0]);
        }
    }
    super::ks_distance(&mut draws, &grid, &cdf)
}

/// KS distance between thinned MH draws of `v_p` and its grid posterior on
/// `[0, 1]`.
pub fn mh_vp_ks(seed: u64, n_draws: usize, noise_sd: f64) -> f64 {
    use dce_bhm::sampler::mh_vp;
    use rand::SeedableRng;
    use statrs::distribution::Beta;
    let (data, state) = single_voxel_problem(seed, noise_sd);
    let psi = state.voxel.psi[0][0];
    let prior = Beta::new(1.0, 19.0).unwrap();
    let n = 200_001;
    let grid = linspace(0.0, 1.0, n);
    let ln: Vec<f64> = grid
        .iter()
        .map(|&v| {
            if v >= 1.0 {
                f64::NEG_INFINITY
            } else {
                voxel_ln_likelihood(&data, &state, psi, v) + prior.ln_pdf(v)
            }
        })
        .collect();
    let density = grid_normalize(&ln, grid[1] - grid[0]);
    let cdf = super::cumulative(&grid, &density);
    let mean: f64 = grid.iter().zip(&density).map(|(x, p)| x * p).sum::<f64>() * (grid[1] - grid[0]);
    let var: f64 = grid.iter().zip(&density).map(|(x, p)| (x - mean).powi(2) * p).sum::<f64>() * (grid[1] - grid[0]);
    let sd = 2.4 * var.sqrt() / (mean * (1.0 - mean));
    let mut ctx = ChainContext::new(&data, state, ProposalScales::default(), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 2000);
    let thin = 10;
    for _ in 0..2_000 {
        mh_vp(&mut ctx, 0, 0, sd, &mut rng);
    }
    let mut draws = Vec::with_capacity(n_draws);
    for it in 0..n_draws * thin {
        mh_vp(&mut ctx, 0, 0, sd, &mut rng);
        if it % thin == 0 {
            draws.push(ctx.state.nuisance.vp[0][0]);
        }
    }
    super::ks_distance(&mut draws, &grid, &cdf)
}

/// Worst relative parameter error when refitting noiseless curves: random
/// generating values fitted from the default start (with restarts), plus
/// the reference values fitted from a start perturbed by x2 per parameter.
pub fn nls_noiseless_worst(n_random: usize, seed: u64) -> f64 {
    use dce_bhm::baseline::{fit_voxel_with_restarts, nls_fit_voxel};
    use dce_bhm::kinetics::{AifParams, TimeGrid};
    use rand::{Rng, SeedableRng};
    let grid = TimeGrid::uniform(40, 11.9, 4).unwrap();
    let aif = AifParams::default();
    let rel = |a: &KineticParams, b: &KineticParams| {
        ((a.ktrans - b.ktrans) / b.ktrans)
            .abs()
            .max(((a.kep - b.kep) / b.kep).abs())
            .max(((a.vp - b.vp) / b.vp).abs())
    };
    let truth = KineticParams::new(0.2, 0.5, 0.05);
    let y = ctc_model(&truth, &grid, &aif);
    let mut worst: f64 = 0.0;
    for s in [2.0, 0.5] {
        let init = KineticParams::new(truth.ktrans * s, truth.kep * s, truth.vp * s);
        let fit = nls_fit_voxel(&y, &grid, &aif, &init).unwrap();
        worst = worst.max(if fit.converged { rel(&fit.params, &truth) } else { f64::INFINITY });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut log_uniform = |lo: f64, hi: f64| lo * (hi / lo).powf(rng.random::<f64>());
    for _ in 0..n_random {
        let p = KineticParams::new(log_uniform(0.05, 1.0), log_uniform(0.1, 3.0), log_uniform(0.01, 0.15));
        let y = ctc_model(&p, &grid, &aif);
        let fit = fit_voxel_with_restarts(&y, &grid, &aif).unwrap();
        worst = worst.max(if fit.converged { rel(&fit.params, &p) } else { f64::INFINITY });
    }
    worst
}

/// Relative bias of the mean least-squares estimate of each parameter over
/// `reps` noisy replications of the reference curve (noise sd `sd`).
pub fn nls_noisy_bias(reps: usize, sd: f64, seed: u64) -> [f64; 3] {
    use dce_bhm::baseline::fit_voxel_with_restarts;
    use dce_bhm::kinetics::{AifParams, CtcSeries, TimeGrid};
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let grid = TimeGrid::uniform(40, 11.9, 4).unwrap();
    let aif = AifParams::default();
    let truth = KineticParams::new(0.2, 0.5, 0.05);
    let clean = ctc_model(&truth, &grid, &aif);
    let noise = rand_distr::Normal::new(0.0, sd).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut sums = [0.0; 3];
    for _ in 0..reps {
        let y = CtcSeries::new(clean.values.iter().map(|v| v + noise.sample(&mut rng)).collect());
        let f = fit_voxel_with_restarts(&y, &grid, &aif).unwrap();
        sums[0] += f.params.ktrans;
        sums[1] += f.params.kep;
        sums[2] += f.params.vp;
    }
    let t = [truth.ktrans, truth.kep, truth.vp];
    [0, 1, 2].map(|i| (sums[i] / reps as f64 - t[i]).abs() / t[i])
}
