//! Compartmental tracer-kinetic model driven by a bi-exponential arterial
//! input function.
//!
//! All times are in minutes and concentrations in mmol/l. Frames acquired
//! before injection (`t < 0`) have model concentration zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this gap between `k_ep` and an AIF decay rate the convolution uses
/// its analytic limit.
pub const SINGULARITY_THRESHOLD: f64 = 1e-8;

/// Bi-exponential plasma input `C_p(t) = D (a1 e^{-m1 t} + a2 e^{-m2 t})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AifParams {
    /// mmol/kg
    pub dose: f64,
    /// kg/l
    pub a1: f64,
    pub a2: f64,
    /// 1/min
    pub m1: f64,
    pub m2: f64,
}

impl Default for AifParams {
    /// Fritz-Hansen constants with a 0.1 mmol/kg dose.
    fn default() -> Self {
        AifParams {
            dose: 0.1,
            a1: 24.0,
            a2: 6.20,
            m1: 3.00,
            m2: 0.016,
        }
    }
}

impl AifParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dose > 0.0
            && self.a1 > 0.0
            && self.a2 > 0.0
            && self.m1 >= 0.0
            && self.m2 >= 0.0
            && [self.dose, self.a1, self.a2, self.m1, self.m2]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid AIF parameters {self:?}")))
        }
    }

    #[inline]
    fn terms(&self) -> [(f64, f64); 2] {
        [(self.a1, self.m1), (self.a2, self.m2)]
    }
}

/// Plasma concentration at time `t` (min).
#[inline]
pub fn aif_concentration(t: f64, aif: &AifParams) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    aif.dose * (aif.a1 * (-aif.m1 * t).exp() + aif.a2 * (-aif.m2 * t).exp())
}

/// Strictly increasing acquisition times in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs at least 2 points, got {}",
                times.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("time grid contains non-finite values".into()));
        }
        if let Some(w) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(format!(
                "time grid not strictly increasing at index {}",
                w + 1
            )));
        }
        Ok(TimeGrid { times })
    }

    pub fn from_seconds(seconds: &[f64]) -> Result<Self> {
        Self::new(seconds.iter().map(|s| s / 60.0).collect())
    }

    /// `n` frames `spacing_s` seconds apart, the first `n_pre` before injection.
    pub fn uniform(n: usize, spacing_s: f64, n_pre: usize) -> Result<Self> {
        let secs: Vec<f64> = (0..n)
            .map(|k| (k as f64 - n_pre as f64) * spacing_s)
            .collect();
        Self::from_seconds(&secs)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn to_seconds(&self) -> Vec<f64> {
        self.times.iter().map(|t| t * 60.0).collect()
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        TimeGrid::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.times
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    /// 1/min
    pub ktrans: f64,
    /// 1/min
    pub kep: f64,
    pub vp: f64,
}

impl KineticParams {
    pub fn new(ktrans: f64, kep: f64, vp: f64) -> Self {
        KineticParams { ktrans, kep, vp }
    }

    pub fn is_valid(&self) -> bool {
        self.ktrans > 0.0
            && self.kep > 0.0
            && (0.0..=1.0).contains(&self.vp)
            && self.ktrans.is_finite()
            && self.kep.is_finite()
    }
}

/// One voxel's concentration time curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CtcSeries {
    pub values: Vec<f64>,
}

impl CtcSeries {
    pub fn new(values: Vec<f64>) -> Self {
        CtcSeries { values }
    }

    pub fn zeros(n: usize) -> Self {
        CtcSeries { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// `(e^{-m t} - e^{-k t}) / (k - m)`, stable for `k` close to `m`.
#[inline]
fn exp_conv_kernel(m: f64, k: f64, t: f64, exp_mt: f64, exp_kt: f64) -> f64 {
    let d = k - m;
    let dt = d * t;
    if d.abs() < SINGULARITY_THRESHOLD {
        t * exp_kt
    } else if dt.abs() < 0.1 {
        // e^{-mt} (1 - e^{-dt}) / d, free of cancellation
        exp_mt * (-(-dt).exp_m1()) / d
    } else {
        // at most one digit lost to the subtraction
        (exp_mt - exp_kt) / d
    }
}

/// Grid-dependent quantities shared by every voxel on the same grid.
///
/// Evaluating a curve for a new `k_ep` then costs one exponential per
/// post-injection frame.
#[derive(Debug, Clone)]
pub struct AifBasis {
    aif: AifParams,
    times: Vec<f64>,
    plasma: Vec<f64>,
    decay: Vec<[f64; 2]>,
    /// index of the first frame with `t >= 0`
    first_post: usize,
}

impl AifBasis {
    pub fn new(grid: &TimeGrid, aif: &AifParams) -> Self {
        let times = grid.times().to_vec();
        let first_post = times.iter().position(|&t| t >= 0.0).unwrap_or(times.len());
        let plasma = times.iter().map(|&t| aif_concentration(t, aif)).collect();
        let decay = times
            .iter()
            .map(|&t| {
                if t < 0.0 {
                    [0.0, 0.0]
                } else {
                    [(-aif.m1 * t).exp(), (-aif.m2 * t).exp()]
                }
            })
            .collect();
        AifBasis {
            aif: *aif,
            times,
            plasma,
            decay,
            first_post,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `C_p` on the grid.
    pub fn plasma(&self) -> &[f64] {
        &self.plasma
    }

    /// Convolution of `C_p` with `e^{-k_ep t}` (the model's tissue term at
    /// `K^trans = 1`), written into `out`.
    pub fn unit_convolution(&self, kep: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.times.len());
        out[..self.first_post].fill(0.0);
        let d = self.aif.dose;
        let terms = self.aif.terms();
        for idx in self.first_post..self.times.len() {
            let t = self.times[idx];
            let [e1, e2] = self.decay[idx];
            let ek = (-kep * t).exp();
            let s = terms[0].0 * exp_conv_kernel(terms[0].1, kep, t, e1, ek)
                + terms[1].0 * exp_conv_kernel(terms[1].1, kep, t, e2, ek);
            out[idx] = d * s;
        }
    }

    /// Full model curve into `out`.
    pub fn curve_into(&self, params: &KineticParams, out: &mut [f64]) {
        self.unit_convolution(params.kep, out);
        for (o, cp) in out.iter_mut().zip(&self.plasma) {
            *o = params.vp * cp + params.ktrans * *o;
        }
    }
}

/// Closed-form model concentration on `grid`.
pub fn ctc_model(params: &KineticParams, grid: &TimeGrid, aif: &AifParams) -> CtcSeries {
    let basis = AifBasis::new(grid, aif);
    let mut out = vec![0.0; grid.len()];
    basis.curve_into(params, &mut out);
    CtcSeries::new(out)
}

/// Model concentration with the convolution integral evaluated by the
/// trapezoidal rule with step at most `dt` minutes. Reference only.
pub fn ctc_model_numeric(
    params: &KineticParams,
    grid: &TimeGrid,
    aif: &AifParams,
    dt: f64,
) -> Result<CtcSeries> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("quadrature step must be > 0, got {dt}")));
    }
    let values = grid
        .times()
        .iter()
        .map(|&t| {
            if t < 0.0 {
                return 0.0;
            }
            let plasma = params.vp * aif_concentration(t, aif);
            if params.ktrans == 0.0 || t == 0.0 {
                return plasma;
            }
            let n = (t / dt).ceil().max(1.0) as usize;
            let h = t / n as f64;
            let f = |u: f64| aif_concentration(u, aif) * (-params.kep * (t - u)).exp();
            let mut acc = 0.5 * (f(0.0) + f(t));
            for s in 1..n {
                acc += f(s as f64 * h);
            }
            plasma + params.ktrans * acc * h
        })
        .collect();
    Ok(CtcSeries::new(values))
}

/// Sum of squared residuals between two equal-length series.
#[inline]
pub fn residual_sum_of_squares(y: &[f64], model: &[f64]) -> f64 {
    y.iter().zip(model).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Gaussian log-likelihood of `y` around `model` with i.i.d. noise variance
/// `sigma2`.
pub fn log_likelihood(y: &CtcSeries, model: &CtcSeries, sigma2: f64) -> Result<f64> {
    if y.len() != model.len() {
        return Err(Error::InvalidParameter(format!(
            "series length mismatch: {} vs {}",
            y.len(),
            model.len()
        )));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("noise variance must be > 0, got {sigma2}")));
    }
    let n = y.len() as f64;
    let rss = residual_sum_of_squares(&y.values, &model.values);
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln() - rss / (2.0 * sigma2))
}
