//! Closed-form full conditional distributions used by the Gibbs steps.
//!
//! Every variance is stored as a variance; wherever a Gaussian term needs a
//! precision it uses `1 / tau2`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::hierarchy::{
    treatment_indicator, InverseGammaPrior, ModelState, StudyLayout, N_SCANS, SIGMA2_PRIOR,
    TAU2_PATIENT_PRIOR, TAU2_VOXEL_PRIOR,
};

/// `IG(shape, scale)` with density `b^a / Γ(a) x^{-a-1} e^{-b/x}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "inverse gamma needs positive shape and scale, got ({shape}, {scale})"
            )));
        }
        Ok(InverseGamma { shape, scale })
    }

    /// Conjugate update of `prior` after `n` Gaussian observations with
    /// sum of squared deviations `ss`.
    pub fn posterior(prior: InverseGammaPrior, n: usize, ss: f64) -> Self {
        InverseGamma {
            shape: prior.shape + 0.5 * n as f64,
            scale: prior.scale + 0.5 * ss,
        }
    }

    /// Defined for `shape > 1`.
    pub fn mean(&self) -> f64 {
        self.scale / (self.shape - 1.0)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln()
            - self.scale / x
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // 1/x ~ Gamma(shape, rate = scale)
        let g = Gamma::new(self.shape, 1.0 / self.scale).expect("validated parameters");
        1.0 / g.sample(rng)
    }
}

/// `tau2_gamma[j,l]` (or `tau2_delta`) given its single effect.
pub fn patient_variance_conditional(effect: f64) -> InverseGamma {
    InverseGamma::posterior(TAU2_PATIENT_PRIOR, 1, effect * effect)
}

/// `tau2_eps[i,j,l]` given the voxel log-parameters of that group and
/// their effect-only mean.
pub fn voxel_variance_conditional(psi: &[[f64; 2]], mean: [f64; 2], l: usize) -> InverseGamma {
    let ss = psi.iter().map(|p| (p[l] - mean[l]).powi(2)).sum();
    InverseGamma::posterior(TAU2_VOXEL_PRIOR, psi.len(), ss)
}

/// `sigma2[i,j]` given `n_obs` residuals with sum of squares `sse`.
pub fn noise_variance_conditional(n_obs: usize, sse: f64) -> InverseGamma {
    InverseGamma::posterior(SIGMA2_PRIOR, n_obs, sse)
}

/// Position of each coefficient in the effects block for one kinetic
/// parameter: `(alpha, beta, gamma_0..gamma_{J-1}, delta_0..delta_{J-1})`.
#[derive(Debug, Clone, Copy)]
pub struct BlockIndex {
    pub n_patients: usize,
}

impl BlockIndex {
    pub const ALPHA: usize = 0;
    pub const BETA: usize = 1;

    pub fn gamma(&self, j: usize) -> usize {
        2 + j
    }

    pub fn delta(&self, j: usize) -> usize {
        2 + self.n_patients + j
    }

    pub fn len(&self) -> usize {
        2 + 2 * self.n_patients
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Multivariate Gaussian in canonical form `N(V^{-1} m, V^{-1})`.
#[derive(Debug, Clone)]
pub struct GaussianBlock {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianBlock {
    pub fn from_canonical(precision: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        let chol = Cholesky::new(precision.clone()).ok_or_else(|| {
            Error::Numerical("effects precision matrix is not positive definite".into())
        })?;
        let mean = chol.solve(&shift);
        Ok(GaussianBlock {
            mean,
            precision,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Draw via `mean + L^{-T} z` where `V = L L^T`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let l = self.chol.l_dirty();
        let noise = l
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal");
        &self.mean + noise
    }

    /// Mean and variance of coordinate `idx` given every other coordinate
    /// at its value in `at`.
    pub fn coordinate_conditional(&self, idx: usize, at: &DVector<f64>) -> (f64, f64) {
        let q = &self.precision;
        let mut shift = 0.0;
        for c in 0..self.dim() {
            if c != idx {
                shift += q[(idx, c)] * (at[c] - self.mean[c]);
            }
        }
        let var = 1.0 / q[(idx, idx)];
        (self.mean[idx] - shift * var, var)
    }
}

/// Current values of the effects block for parameter `l`, ordered as in
/// [`BlockIndex`].
pub fn effects_vector(state: &ModelState, l: usize) -> DVector<f64> {
    let j = state.patient.gamma.len();
    let idx = BlockIndex { n_patients: j };
    let mut v = DVector::zeros(idx.len());
    v[BlockIndex::ALPHA] = state.fixed.alpha[l];
    v[BlockIndex::BETA] = state.fixed.beta[l];
    for p in 0..j {
        v[idx.gamma(p)] = state.patient.gamma[p][l];
        v[idx.delta(p)] = state.patient.delta[p][l];
    }
    v
}

/// Full conditional of the fixed and patient effects of kinetic parameter
/// `l`. Each voxel's `psi` acts as a Gaussian observation of
/// `alpha + x beta + gamma_j + x delta_j` with variance `tau2_eps[i,j,l]`;
/// `gamma` and `delta` carry zero-mean Gaussian priors and the fixed
/// effects are flat.
pub fn effects_conditional(state: &ModelState, layout: &StudyLayout, l: usize) -> Result<GaussianBlock> {
    let j_count = layout.n_patients();
    let idx = BlockIndex { n_patients: j_count };
    let p = idx.len();
    let mut prec = DMatrix::<f64>::zeros(p, p);
    let mut shift = DVector::<f64>::zeros(p);

    for i in 0..N_SCANS {
        let x = treatment_indicator(i);
        for j in 0..j_count {
            let g = layout.group(i, j);
            let tau2 = state.hypers.tau2_eps[g][l];
            if !(tau2 > 0.0) {
                return Err(Error::Numerical(format!("non-positive voxel variance in group {g}")));
            }
            let w = 1.0 / tau2;
            let psi = &state.voxel.psi[g];
            let n = psi.len() as f64;
            let sum: f64 = psi.iter().map(|v| v[l]).sum();

            let cols = [BlockIndex::ALPHA, BlockIndex::BETA, idx.gamma(j), idx.delta(j)];
            let coef = [1.0, x, 1.0, x];
            for (a, &ca) in cols.iter().zip(&coef) {
                if ca == 0.0 {
                    continue;
                }
                shift[*a] += w * ca * sum;
                for (b, &cb) in cols.iter().zip(&coef) {
                    prec[(*a, *b)] += n * w * ca * cb;
                }
            }
        }
    }
    for j in 0..j_count {
        prec[(idx.gamma(j), idx.gamma(j))] += 1.0 / state.hypers.tau2_gamma[j][l];
        prec[(idx.delta(j), idx.delta(j))] += 1.0 / state.hypers.tau2_delta[j][l];
    }
    GaussianBlock::from_canonical(prec, shift)
}
