//! Additive model for the log kinetic parameters.
//!
//! For scan `i`, patient `j`, voxel `k` and kinetic parameter `l`
//! (`l = 0` is `ln K^trans`, `l = 1` is `ln k_ep`):
//!
//! ```text
//! psi[i,j,k,l] = alpha[l] + x_i beta[l] + gamma[j,l] + x_i delta[j,l] + eps[i,j,k,l]
//! ```
//!
//! with `x_i = 1` for the post-treatment scan and `0` at baseline. Scan,
//! patient and voxel indices are zero-based throughout the library.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::KineticParams;

pub const N_SCANS: usize = 2;
pub const N_KINETIC: usize = 2;

pub const TAU2_PATIENT_PRIOR: InverseGammaPrior = InverseGammaPrior { shape: 1.0, scale: 1.0 };
pub const TAU2_VOXEL_PRIOR: InverseGammaPrior = InverseGammaPrior { shape: 1.0, scale: 1e-5 };
pub const SIGMA2_PRIOR: InverseGammaPrior = InverseGammaPrior { shape: 1.0, scale: 1e-2 };
/// Beta(1, b) prior on the vascular fraction.
pub const VP_PRIOR_BETA: f64 = 19.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGammaPrior {
    pub shape: f64,
    pub scale: f64,
}

/// Scan covariate: 1 after treatment, 0 at baseline.
#[inline]
pub fn treatment_indicator(scan: usize) -> f64 {
    if scan == 1 {
        1.0
    } else {
        0.0
    }
}

/// Number of scans, patients and voxels per (scan, patient).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyLayout {
    n_patients: usize,
    /// `voxel_counts[scan][patient]`
    voxel_counts: Vec<Vec<usize>>,
}

impl StudyLayout {
    pub fn new(voxel_counts: Vec<Vec<usize>>) -> Result<Self> {
        if voxel_counts.len() != N_SCANS {
            return Err(Error::LayoutMismatch(format!(
                "exactly {N_SCANS} scans are supported, got {}",
                voxel_counts.len()
            )));
        }
        let n_patients = voxel_counts[0].len();
        if n_patients == 0 {
            return Err(Error::LayoutMismatch("at least one patient is required".into()));
        }
        for (i, row) in voxel_counts.iter().enumerate() {
            if row.len() != n_patients {
                return Err(Error::LayoutMismatch(format!(
                    "scan {} lists {} patients, expected {n_patients}",
                    i + 1,
                    row.len()
                )));
            }
            if let Some(j) = row.iter().position(|&n| n == 0) {
                return Err(Error::LayoutMismatch(format!(
                    "scan {}, patient {} has no voxels",
                    i + 1,
                    j + 1
                )));
            }
        }
        Ok(StudyLayout {
            n_patients,
            voxel_counts,
        })
    }

    /// Same voxel count everywhere.
    pub fn balanced(n_patients: usize, n_voxels: usize) -> Result<Self> {
        Self::new(vec![vec![n_voxels; n_patients]; N_SCANS])
    }

    pub fn n_scans(&self) -> usize {
        N_SCANS
    }

    pub fn n_patients(&self) -> usize {
        self.n_patients
    }

    pub fn n_groups(&self) -> usize {
        N_SCANS * self.n_patients
    }

    pub fn n_voxels(&self, scan: usize, patient: usize) -> usize {
        self.voxel_counts[scan][patient]
    }

    pub fn total_voxels(&self) -> usize {
        self.voxel_counts.iter().flatten().sum()
    }

    /// Flat index of the (scan, patient) group.
    #[inline]
    pub fn group(&self, scan: usize, patient: usize) -> usize {
        scan * self.n_patients + patient
    }

    /// Inverse of [`StudyLayout::group`].
    #[inline]
    pub fn scan_patient(&self, group: usize) -> (usize, usize) {
        (group / self.n_patients, group % self.n_patients)
    }

    pub fn check_indices(&self, scan: usize, patient: usize) -> Result<()> {
        if scan >= N_SCANS {
            return Err(Error::IndexOutOfRange(format!("scan {scan} (zero-based)")));
        }
        if patient >= self.n_patients {
            return Err(Error::IndexOutOfRange(format!(
                "patient {patient} (zero-based) with {} patients",
                self.n_patients
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub alpha: [f64; N_KINETIC],
    pub beta: [f64; N_KINETIC],
}

/// Patient main effects and patient-by-treatment interactions, `[patient][l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEffects {
    pub gamma: Vec<[f64; N_KINETIC]>,
    pub delta: Vec<[f64; N_KINETIC]>,
}

/// Voxel log-parameters `psi`, stored per group then voxel. The voxel random
/// effect is `psi` minus [`psi_mean`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelEffects {
    pub psi: Vec<Vec<[f64; N_KINETIC]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypers {
    /// `[patient][l]`
    pub tau2_gamma: Vec<[f64; N_KINETIC]>,
    /// `[patient][l]`
    pub tau2_delta: Vec<[f64; N_KINETIC]>,
    /// `[group][l]`
    pub tau2_eps: Vec<[f64; N_KINETIC]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceParams {
    /// `[group]`
    pub sigma2: Vec<f64>,
    /// `[group][voxel]`
    pub vp: Vec<Vec<f64>>,
}

/// Complete parameter vector of the hierarchical model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub fixed: FixedEffects,
    pub patient: PatientEffects,
    pub voxel: VoxelEffects,
    pub hypers: Hypers,
    pub nuisance: NuisanceParams,
}

impl ModelState {
    /// All effects zero, unit variances, `psi` at the fixed effects.
    pub fn neutral(layout: &StudyLayout, alpha: [f64; N_KINETIC], sigma2: f64, vp: f64) -> Self {
        let j = layout.n_patients();
        let groups = layout.n_groups();
        let psi = (0..groups)
            .map(|g| {
                let (i, jj) = layout.scan_patient(g);
                vec![alpha; layout.n_voxels(i, jj)]
            })
            .collect();
        let vps = (0..groups)
            .map(|g| {
                let (i, jj) = layout.scan_patient(g);
                vec![vp; layout.n_voxels(i, jj)]
            })
            .collect();
        ModelState {
            fixed: FixedEffects {
                alpha,
                beta: [0.0; N_KINETIC],
            },
            patient: PatientEffects {
                gamma: vec![[0.0; N_KINETIC]; j],
                delta: vec![[0.0; N_KINETIC]; j],
            },
            voxel: VoxelEffects { psi },
            hypers: Hypers {
                tau2_gamma: vec![[1.0; N_KINETIC]; j],
                tau2_delta: vec![[1.0; N_KINETIC]; j],
                tau2_eps: vec![[1.0; N_KINETIC]; groups],
            },
            nuisance: NuisanceParams {
                sigma2: vec![sigma2; groups],
                vp: vps,
            },
        }
    }

    /// Checks array shapes against `layout` and the support of every
    /// variance and fraction.
    pub fn validate(&self, layout: &StudyLayout) -> Result<()> {
        let j = layout.n_patients();
        let groups = layout.n_groups();
        let shape_err = |what: &str| Err(Error::LayoutMismatch(format!("state {what} does not match layout")));
        if self.patient.gamma.len() != j || self.patient.delta.len() != j {
            return shape_err("patient effects");
        }
        if self.hypers.tau2_gamma.len() != j
            || self.hypers.tau2_delta.len() != j
            || self.hypers.tau2_eps.len() != groups
        {
            return shape_err("variance components");
        }
        if self.nuisance.sigma2.len() != groups
            || self.nuisance.vp.len() != groups
            || self.voxel.psi.len() != groups
        {
            return shape_err("voxel arrays");
        }
        for g in 0..groups {
            let (i, jj) = layout.scan_patient(g);
            let n = layout.n_voxels(i, jj);
            if self.voxel.psi[g].len() != n || self.nuisance.vp[g].len() != n {
                return Err(Error::LayoutMismatch(format!(
                    "state voxel count for scan {}, patient {} does not match layout",
                    i + 1,
                    jj + 1
                )));
            }
        }
        let positive = self
            .hypers
            .tau2_gamma
            .iter()
            .chain(&self.hypers.tau2_delta)
            .chain(&self.hypers.tau2_eps)
            .flatten()
            .chain(&self.nuisance.sigma2)
            .all(|&v| v > 0.0 && v.is_finite());
        if !positive {
            return Err(Error::InvalidParameter("variances must be positive and finite".into()));
        }
        if !self.nuisance.vp.iter().flatten().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("vascular fractions must lie in [0, 1]".into()));
        }
        let finite = self
            .fixed
            .alpha
            .iter()
            .chain(&self.fixed.beta)
            .chain(self.patient.gamma.iter().flatten())
            .chain(self.patient.delta.iter().flatten())
            .chain(self.voxel.psi.iter().flatten().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("effects must be finite".into()));
        }
        Ok(())
    }

    /// Voxel random effect `psi - psi_mean`.
    pub fn epsilon(&self, layout: &StudyLayout, scan: usize, patient: usize, voxel: usize) -> [f64; N_KINETIC] {
        let mean = psi_mean_unchecked(scan, patient, self);
        let psi = self.voxel.psi[layout.group(scan, patient)][voxel];
        [psi[0] - mean[0], psi[1] - mean[1]]
    }
}

/// Covariate matrix `Z_i = [X_i X_i]` acting on
/// `(alpha1, beta1, alpha2, beta2, gamma_j1, delta_j1, gamma_j2, delta_j2)`.
pub fn design_row(scan: usize) -> Result<SMatrix<f64, 2, 8>> {
    if scan >= N_SCANS {
        return Err(Error::IndexOutOfRange(format!("scan {scan} (zero-based)")));
    }
    let x = treatment_indicator(scan);
    #[rustfmt::skip]
    let xi = [
        1.0, x, 0.0, 0.0,
        0.0, 0.0, 1.0, x,
    ];
    let mut z = SMatrix::<f64, 2, 8>::zeros();
    for r in 0..2 {
        for c in 0..4 {
            z[(r, c)] = xi[r * 4 + c];
            z[(r, c + 4)] = xi[r * 4 + c];
        }
    }
    Ok(z)
}

#[inline]
pub(crate) fn psi_mean_unchecked(scan: usize, patient: usize, state: &ModelState) -> [f64; N_KINETIC] {
    let x = treatment_indicator(scan);
    let f = &state.fixed;
    let g = &state.patient.gamma[patient];
    let d = &state.patient.delta[patient];
    [
        f.alpha[0] + x * f.beta[0] + g[0] + x * d[0],
        f.alpha[1] + x * f.beta[1] + g[1] + x * d[1],
    ]
}

/// Effect-only part of `psi` for (scan, patient).
pub fn psi_mean(scan: usize, patient: usize, state: &ModelState) -> Result<[f64; N_KINETIC]> {
    if scan >= N_SCANS {
        return Err(Error::IndexOutOfRange(format!("scan {scan} (zero-based)")));
    }
    if patient >= state.patient.gamma.len() || patient >= state.patient.delta.len() {
        return Err(Error::IndexOutOfRange(format!("patient {patient} (zero-based)")));
    }
    Ok(psi_mean_unchecked(scan, patient, state))
}

#[inline]
pub fn kinetic_from_psi(psi1: f64, psi2: f64, vp: f64) -> KineticParams {
    KineticParams::new(psi1.exp(), psi2.exp(), vp)
}

#[inline]
fn ln_normal(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - x * x / (2.0 * var)
}

/// `ln IG(x; a, b)`; only ever called with `a = 1` so no gamma function is
/// needed beyond `ln Γ(1) = 0`.
#[inline]
fn ln_inverse_gamma_shape_one(x: f64, prior: InverseGammaPrior) -> f64 {
    debug_assert_eq!(prior.shape, 1.0);
    prior.scale.ln() - 2.0 * x.ln() - prior.scale / x
}

#[inline]
pub(crate) fn ln_vp_prior(vp: f64) -> f64 {
    VP_PRIOR_BETA.ln() + (VP_PRIOR_BETA - 1.0) * (1.0 - vp).ln()
}

/// Log prior density of `state`. Fixed effects have flat priors and
/// contribute nothing.
pub fn log_prior_density(state: &ModelState, layout: &StudyLayout) -> Result<f64> {
    state.validate(layout)?;
    let mut total = 0.0;
    for j in 0..layout.n_patients() {
        for l in 0..N_KINETIC {
            let tg = state.hypers.tau2_gamma[j][l];
            let td = state.hypers.tau2_delta[j][l];
            total += ln_normal(state.patient.gamma[j][l], tg);
            total += ln_normal(state.patient.delta[j][l], td);
            total += ln_inverse_gamma_shape_one(tg, TAU2_PATIENT_PRIOR);
            total += ln_inverse_gamma_shape_one(td, TAU2_PATIENT_PRIOR);
        }
    }
    for g in 0..layout.n_groups() {
        let (i, j) = layout.scan_patient(g);
        let mean = psi_mean_unchecked(i, j, state);
        let tau2 = state.hypers.tau2_eps[g];
        for psi in &state.voxel.psi[g] {
            for l in 0..N_KINETIC {
                total += ln_normal(psi[l] - mean[l], tau2[l]);
            }
        }
        for l in 0..N_KINETIC {
            total += ln_inverse_gamma_shape_one(tau2[l], TAU2_VOXEL_PRIOR);
        }
        total += ln_inverse_gamma_shape_one(state.nuisance.sigma2[g], SIGMA2_PRIOR);
        total += state.nuisance.vp[g].iter().map(|&v| ln_vp_prior(v)).sum::<f64>();
    }
    Ok(total)
}
