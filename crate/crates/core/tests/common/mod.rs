#![allow(dead_code)]

pub mod checks;

use dce_bhm::hierarchy::ModelState;
use dce_bhm::studyio::{simulate_study, SimulationSpec, StudyData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small simulated study and a perturbed, randomized state on it.
pub fn random_problem(seed: u64, n_patients: usize, n_voxels: usize) -> (StudyData, ModelState) {
    let spec = SimulationSpec {
        n_patients,
        voxels_per_scan: n_voxels,
        n_frames: 20,
        ..SimulationSpec::default()
    };
    let (data, truth) = simulate_study(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut s = truth.state;
    let mut jitter = |v: &mut f64, scale: f64| *v += scale * (rng.random::<f64>() - 0.5);
    for l in 0..2 {
        jitter(&mut s.fixed.alpha[l], 0.4);
        jitter(&mut s.fixed.beta[l], 0.4);
    }
    for p in s.patient.gamma.iter_mut().chain(s.patient.delta.iter_mut()) {
        jitter(&mut p[0], 0.3);
        jitter(&mut p[1], 0.3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut positive = |lo: f64, hi: f64| lo * (hi / lo).powf(rng.random::<f64>());
    for t in s.hypers.tau2_gamma.iter_mut().chain(s.hypers.tau2_delta.iter_mut()) {
        *t = [positive(0.01, 1.0), positive(0.01, 1.0)];
    }
    for t in s.hypers.tau2_eps.iter_mut() {
        *t = [positive(0.01, 0.2), positive(0.01, 0.2)];
    }
    for v in s.nuisance.sigma2.iter_mut() {
        *v = positive(1e-3, 1e-2);
    }
    (data, s)
}

/// Composite Simpson weights for `n` (odd) equally spaced points.
pub fn simpson(values: &[f64], step: f64) -> f64 {
    let n = values.len();
    assert!(n % 2 == 1 && n >= 3);
    let mut acc = values[0] + values[n - 1];
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * v;
    }
    acc * step / 3.0
}

/// Normalizes `ln_density` on an equally spaced grid and returns the
/// normalized density values.
pub fn grid_normalize(ln_density: &[f64], step: f64) -> Vec<f64> {
    let m = ln_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let un: Vec<f64> = ln_density.iter().map(|v| (v - m).exp()).collect();
    let z = simpson(&un, step);
    un.iter().map(|v| v / z).collect()
}

/// Kolmogorov-Smirnov distance between a sample and a CDF tabulated at
/// increasing abscissae (linear interpolation in between).
pub fn ks_distance(sample: &mut [f64], grid: &[f64], cdf: &[f64]) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    let interp = |x: f64| -> f64 {
        if x <= grid[0] {
            return 0.0;
        }
        if x >= grid[grid.len() - 1] {
            return 1.0;
        }
        let i = grid.partition_point(|g| *g <= x) - 1;
        let w = (x - grid[i]) / (grid[i + 1] - grid[i]);
        cdf[i] + w * (cdf[i + 1] - cdf[i])
    };
    let mut d: f64 = 0.0;
    for (i, x) in sample.iter().enumerate() {
        let f = interp(*x);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Cumulative trapezoid of a density on a grid, scaled to end at one.
pub fn cumulative(grid: &[f64], density: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        c[i] = c[i - 1] + 0.5 * (grid[i] - grid[i - 1]) * (density[i] + density[i - 1]);
    }
    let total = c[c.len() - 1];
    c.iter().map(|v| v / total).collect()
}
