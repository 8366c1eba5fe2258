//! Voxel-wise least-squares fitting of the compartmental model.
//!
//! The fit runs Levenberg-Marquardt in `(ln K^trans, ln k_ep, logit v_p)`
//! so the parameter support needs no explicit constraints.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{AifBasis, AifParams, CtcSeries, KineticParams, TimeGrid};
use crate::studyio::StudyData;

pub const MAX_ITERATIONS: usize = 200;
pub const RSS_TOLERANCE: f64 = 1e-8;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
/// Largest accepted change of any transformed parameter in one iteration.
/// Without it a single undamped step can leap into the flat `k_ep -> 0`
/// region and stall there.
pub const MAX_STEP: f64 = 1.0;

pub const DEFAULT_INIT: KineticParams = KineticParams {
    ktrans: 0.2,
    kep: 0.5,
    vp: 0.05,
};
pub const RESTARTS: [KineticParams; 2] = [
    KineticParams {
        ktrans: 0.05,
        kep: 0.1,
        vp: 0.01,
    },
    KineticParams {
        ktrans: 1.0,
        kep: 2.0,
        vp: 0.1,
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlsFit {
    pub params: KineticParams,
    pub converged: bool,
    pub rss: f64,
    pub iterations: usize,
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn to_params(theta: &Vector3<f64>) -> KineticParams {
    KineticParams::new(theta[0].exp(), theta[1].exp(), sigmoid(theta[2]))
}

fn to_theta(p: &KineticParams) -> Vector3<f64> {
    Vector3::new(p.ktrans.ln(), p.kep.ln(), (p.vp / (1.0 - p.vp)).ln())
}

struct Problem<'a> {
    basis: &'a AifBasis,
    y: &'a [f64],
    conv: Vec<f64>,
    conv_hi: Vec<f64>,
    conv_lo: Vec<f64>,
}

impl Problem<'_> {
    fn residuals(&mut self, theta: &Vector3<f64>, out: &mut [f64]) -> f64 {
        let p = to_params(theta);
        self.basis.unit_convolution(p.kep, &mut self.conv);
        let cp = self.basis.plasma();
        let mut rss = 0.0;
        for t in 0..self.y.len() {
            let r = self.y[t] - p.vp * cp[t] - p.ktrans * self.conv[t];
            out[t] = r;
            rss += r * r;
        }
        rss
    }

    /// Jacobian of the model curve, one row per frame. `self.conv` must
    /// hold the unit convolution at `theta`.
    fn jacobian(&mut self, theta: &Vector3<f64>, jac: &mut [[f64; 3]]) {
        const H: f64 = 1e-5;
        let p = to_params(theta);
        self.basis.unit_convolution((theta[1] + H).exp(), &mut self.conv_hi);
        self.basis.unit_convolution((theta[1] - H).exp(), &mut self.conv_lo);
        let cp = self.basis.plasma();
        let dvp = p.vp * (1.0 - p.vp);
        for t in 0..self.y.len() {
            jac[t] = [
                p.ktrans * self.conv[t],
                p.ktrans * (self.conv_hi[t] - self.conv_lo[t]) / (2.0 * H),
                dvp * cp[t],
            ];
        }
    }
}

fn levenberg_marquardt(basis: &AifBasis, y: &[f64], init: &KineticParams) -> NlsFit {
    let n = y.len();
    let mut prob = Problem {
        basis,
        y,
        conv: vec![0.0; n],
        conv_hi: vec![0.0; n],
        conv_lo: vec![0.0; n],
    };
    let mut theta = to_theta(init);
    let mut resid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut jac = vec![[0.0; 3]; n];
    let mut rss = prob.residuals(&theta, &mut resid);
    let mut lambda = 1e-3;
    let failed = |theta: Vector3<f64>, rss, it| NlsFit {
        params: to_params(&theta),
        converged: false,
        rss,
        iterations: it,
    };
    if !rss.is_finite() {
        return failed(theta, rss, 0);
    }

    for it in 1..=MAX_ITERATIONS {
        if rss == 0.0 {
            return NlsFit { params: to_params(&theta), converged: true, rss, iterations: it - 1 };
        }
        // conv is current for theta here
        prob.residuals(&theta, &mut resid);
        prob.jacobian(&theta, &mut jac);
        let mut a = Matrix3::<f64>::zeros();
        let mut g = Vector3::<f64>::zeros();
        for t in 0..n {
            let row = Vector3::from(jac[t]);
            a += row * row.transpose();
            g += row * resid[t];
        }
        if g.norm() < GRADIENT_TOLERANCE {
            return NlsFit { params: to_params(&theta), converged: true, rss, iterations: it - 1 };
        }

        let mut improved = false;
        while lambda < 1e16 {
            let mut damped = a;
            for d in 0..3 {
                damped[(d, d)] += lambda * a[(d, d)].max(1e-12);
            }
            let step = match damped.cholesky() {
                Some(c) => c.solve(&g),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            if step.amax() > MAX_STEP {
                lambda *= 10.0;
                continue;
            }
            let cand = theta + step;
            let cand_rss = prob.residuals(&cand, &mut trial);
            if cand_rss.is_finite() && cand_rss < rss {
                let rel = (rss - cand_rss) / rss;
                theta = cand;
                rss = cand_rss;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < RSS_TOLERANCE {
                    return NlsFit { params: to_params(&theta), converged: true, rss, iterations: it };
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent left at machine precision: a stationary point
            return NlsFit { params: to_params(&theta), converged: true, rss, iterations: it };
        }
    }
    failed(theta, rss, MAX_ITERATIONS)
}

fn fit_on_basis(basis: &AifBasis, ctc: &CtcSeries, init: &KineticParams) -> NlsFit {
    let mut fit = levenberg_marquardt(basis, &ctc.values, init);
    if fit.converged && !fit.params.is_valid() {
        fit.converged = false;
    }
    fit
}

/// Single least-squares fit from `init`.
pub fn nls_fit_voxel(ctc: &CtcSeries, grid: &TimeGrid, aif: &AifParams, init: &KineticParams) -> Result<NlsFit> {
    if ctc.len() != grid.len() {
        return Err(Error::InvalidParameter(format!(
            "curve has {} values for {} frames",
            ctc.len(),
            grid.len()
        )));
    }
    if !init.is_valid() || init.vp <= 0.0 || init.vp >= 1.0 {
        return Err(Error::InvalidParameter(format!("initial values outside the support: {init:?}")));
    }
    let basis = AifBasis::new(grid, aif);
    Ok(fit_on_basis(&basis, ctc, init))
}

/// Fits that end with a rate or fraction pinned near the edge of its
/// support are flat in that direction and usually a spurious stationary point.
fn is_degenerate(p: &KineticParams) -> bool {
    const EDGE: f64 = 1e-6;
    p.ktrans < EDGE || p.kep < EDGE || p.vp < EDGE || p.vp > 1.0 - EDGE
}

fn fit_with_restarts_on(basis: &AifBasis, ctc: &CtcSeries) -> NlsFit {
    let first = fit_on_basis(basis, ctc, &DEFAULT_INIT);
    if first.converged && !is_degenerate(&first.params) {
        return first;
    }
    let attempts: Vec<NlsFit> = std::iter::once(first)
        .chain(RESTARTS.iter().map(|init| fit_on_basis(basis, ctc, init)))
        .collect();
    let best = |only_converged: bool| {
        attempts
            .iter()
            .filter(|f| !only_converged || f.converged)
            .filter(|f| f.rss.is_finite())
            .min_by(|a, b| a.rss.total_cmp(&b.rss))
            .copied()
    };
    best(true).or_else(|| best(false)).unwrap_or(first)
}

/// Fit from the default start, retrying from two alternative starts when it
/// does not converge or lands on the edge of the parameter space. The converged attempt with the smallest RSS wins.
pub fn fit_voxel_with_restarts(ctc: &CtcSeries, grid: &TimeGrid, aif: &AifParams) -> Result<NlsFit> {
    if ctc.len() != grid.len() {
        return Err(Error::InvalidParameter(format!(
            "curve has {} values for {} frames",
            ctc.len(),
            grid.len()
        )));
    }
    let basis = AifBasis::new(grid, aif);
    Ok(fit_with_restarts_on(&basis, ctc))
}

/// Fits every voxel of the study, `fits[group][voxel]`.
pub fn fit_study(data: &StudyData) -> Vec<Vec<NlsFit>> {
    data.groups()
        .iter()
        .map(|s| {
            let basis = AifBasis::new(&s.grid, &data.aif);
            s.voxels.iter().map(|v| fit_with_restarts_on(&basis, v)).collect()
        })
        .collect()
}

pub(crate) fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median `K^trans` over the converged fits of one region.
pub fn roi_median_ktrans(fits: &[NlsFit]) -> Result<f64> {
    let mut k: Vec<f64> = fits.iter().filter(|f| f.converged).map(|f| f.params.ktrans).collect();
    if k.is_empty() {
        return Err(Error::EmptyInput("no converged fits in region".into()));
    }
    Ok(median_of(&mut k))
}
