//! Starting states for the sampler.

use crate::baseline::{median_of, NlsFit};
use crate::error::{Error, Result};
use crate::hierarchy::{ModelState, N_KINETIC};
use crate::studyio::StudyData;

pub const FALLBACK_ALPHA: [f64; N_KINETIC] = [-1.609_437_912_434_100_3, 0.0]; // ln 0.2, ln 1
pub const FALLBACK_SIGMA2: f64 = 0.01;
pub const INITIAL_VP: f64 = 0.05;

/// Largest distance of an initial voxel log-rate from the fixed effect.
const MAX_PSI_OFFSET: f64 = 10.0;

/// Per-group noise variance estimated from the frames before injection: the
/// mean over voxels of each voxel's sample variance. Groups without at least
/// two such frames, or with a zero estimate, get [`FALLBACK_SIGMA2`].
pub fn pre_injection_noise(data: &StudyData) -> Vec<f64> {
    data.groups()
        .iter()
        .map(|s| {
            let pre: Vec<usize> = (0..s.grid.len()).filter(|&t| s.grid.times()[t] < 0.0).collect();
            if pre.len() < 2 || s.voxels.is_empty() {
                return FALLBACK_SIGMA2;
            }
            let n = pre.len() as f64;
            let mean_var = s
                .voxels
                .iter()
                .map(|v| {
                    let m = pre.iter().map(|&t| v.values[t]).sum::<f64>() / n;
                    pre.iter().map(|&t| (v.values[t] - m).powi(2)).sum::<f64>() / (n - 1.0)
                })
                .sum::<f64>()
                / s.voxels.len() as f64;
            if mean_var > 0.0 && mean_var.is_finite() {
                mean_var
            } else {
                FALLBACK_SIGMA2
            }
        })
        .collect()
}

fn state_with(data: &StudyData, alpha: [f64; N_KINETIC]) -> ModelState {
    let mut s = ModelState::neutral(data.layout(), alpha, FALLBACK_SIGMA2, INITIAL_VP);
    s.nuisance.sigma2 = pre_injection_noise(data);
    s
}

/// Default start without least-squares fits: fallback fixed effects, every
/// random effect zero, unit variances, `v_p = 0.05`.
pub fn initial_state(data: &StudyData) -> ModelState {
    state_with(data, FALLBACK_ALPHA)
}

/// Start informed by voxel-wise least-squares fits (`fits[group][voxel]`).
/// `alpha` is the log of the median converged estimate of each rate, and
/// each voxel's log-rates start at its own converged fit. Starting voxels
/// at the common mean would make the voxel variances collapse towards their
/// prior scale in the first sweeps.
pub fn initial_state_from_fits(data: &StudyData, fits: &[Vec<NlsFit>]) -> Result<ModelState> {
    let layout = data.layout();
    if fits.len() != layout.n_groups()
        || fits.iter().zip(data.groups()).any(|(f, s)| f.len() != s.voxels.len())
    {
        return Err(Error::LayoutMismatch("fits do not match the study layout".into()));
    }
    let converged = || fits.iter().flatten().filter(|f| f.converged);
    let mut ktrans: Vec<f64> = converged().map(|f| f.params.ktrans).collect();
    let mut kep: Vec<f64> = converged().map(|f| f.params.kep).collect();
    let alpha = if ktrans.is_empty() {
        FALLBACK_ALPHA
    } else {
        [median_of(&mut ktrans).ln(), median_of(&mut kep).ln()]
    };
    let mut state = state_with(data, alpha);
    for (g, group) in fits.iter().enumerate() {
        for (k, f) in group.iter().enumerate() {
            if f.converged {
                let clamp = |v: f64, a: f64| v.clamp(a - MAX_PSI_OFFSET, a + MAX_PSI_OFFSET);
                state.voxel.psi[g][k] = [clamp(f.params.ktrans.ln(), alpha[0]), clamp(f.params.kep.ln(), alpha[1])];
            }
        }
    }
    Ok(state)
}
