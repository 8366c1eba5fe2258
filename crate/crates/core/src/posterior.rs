//! Summaries of retained draws: transformed point estimates, equal-tailed
//! credible intervals, the treatment test, voxel maps and kernel densities.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{psi_mean, ModelState, N_KINETIC};
use crate::sampler::ChainSamples;

/// Probabilities reported by default: the equal-tailed 95% interval and
/// the median.
pub const DEFAULT_PROBS: [f64; 3] = [0.025, 0.5, 0.975];
pub const KDE_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    pub prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    /// Ascending in `prob`.
    pub quantiles: Vec<QuantilePoint>,
}

impl PosteriorSummary {
    pub fn quantile(&self, prob: f64) -> Option<f64> {
        self.quantiles.iter().find(|q| q.prob == prob).map(|q| q.value)
    }

    /// The 2.5% and 97.5% quantiles, when requested at summary time.
    pub fn interval95(&self) -> Option<(f64, f64)> {
        Some((self.quantile(0.025)?, self.quantile(0.975)?))
    }
}

/// Which kinetic rate a transform refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rate {
    Ktrans,
    Kep,
}

impl Rate {
    pub fn index(self) -> usize {
        match self {
            Rate::Ktrans => 0,
            Rate::Kep => 1,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Rate::Ktrans => "ktrans",
            Rate::Kep => "kep",
        }
    }
}

fn nonempty(samples: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples".into()));
    }
    if let Some(v) = samples.iter().find(|v| v.is_nan()) {
        return Err(Error::InvalidParameter(format!("sample is {v}")));
    }
    Ok(())
}

/// Type-7 quantile of sorted data: linear interpolation between order
/// statistics at position `(n - 1) p`.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(samples: &[f64], p: f64) -> Result<f64> {
    nonempty(samples)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("probability {p} outside [0, 1]")));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&s, p))
}

pub fn summarize(samples: &[f64], probs: &[f64]) -> Result<PosteriorSummary> {
    nonempty(samples)?;
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidParameter(format!("probability {p} outside [0, 1]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = if sorted.len() > 1 {
        (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut ps = probs.to_vec();
    ps.sort_by(f64::total_cmp);
    ps.dedup();
    Ok(PosteriorSummary {
        median: quantile_sorted(&sorted, 0.5),
        mean,
        sd,
        quantiles: ps.into_iter().map(|prob| QuantilePoint { prob, value: quantile_sorted(&sorted, prob) }).collect(),
    })
}

/// Fraction of samples strictly above zero.
pub fn prob_positive(samples: &[f64]) -> Result<f64> {
    nonempty(samples)?;
    Ok(samples.iter().filter(|v| **v > 0.0).count() as f64 / samples.len() as f64)
}

/// Summary of `100 (exp(x) - 1)`; negative values are reductions.
pub fn percent_change(log_effects: &[f64]) -> Result<PosteriorSummary> {
    nonempty(log_effects)?;
    let t: Vec<f64> = log_effects.iter().map(|x| 100.0 * x.exp_m1()).collect();
    summarize(&t, &DEFAULT_PROBS)
}

fn per_draw(chain: &ChainSamples, f: impl Fn(&ModelState) -> f64) -> Result<Vec<f64>> {
    if chain.is_empty() {
        return Err(Error::EmptyInput("chain has no draws".into()));
    }
    Ok(chain.draws.iter().map(f).collect())
}

fn check_scan(scan: usize) -> Result<()> {
    if scan >= 2 {
        return Err(Error::IndexOutOfRange(format!("scan {} (expected 1 or 2)", scan + 1)));
    }
    Ok(())
}

/// Draws of a named scalar: `alpha`, `beta`, ... indexed by rate.
pub fn fixed_effect_draws(chain: &ChainSamples, rate: Rate, treatment: bool) -> Result<Vec<f64>> {
    let l = rate.index();
    per_draw(chain, |s| if treatment { s.fixed.beta[l] } else { s.fixed.alpha[l] })
}

/// Study-level rate, `exp(alpha)` at the first scan and `exp(alpha + beta)`
/// at the second (`scan` is zero-based).
pub fn study_level_rate(chain: &ChainSamples, scan: usize, rate: Rate) -> Result<PosteriorSummary> {
    check_scan(scan)?;
    let l = rate.index();
    let x = if scan == 1 { 1.0 } else { 0.0 };
    let v = per_draw(chain, |s| (s.fixed.alpha[l] + x * s.fixed.beta[l]).exp())?;
    summarize(&v, &DEFAULT_PROBS)
}

pub fn study_level(chain: &ChainSamples, scan: usize) -> Result<PosteriorSummary> {
    study_level_rate(chain, scan, Rate::Ktrans)
}

/// Patient-level rate including the patient's random effects.
pub fn patient_level_rate(chain: &ChainSamples, patient: usize, scan: usize, rate: Rate) -> Result<PosteriorSummary> {
    check_scan(scan)?;
    if patient >= chain.layout.n_patients() {
        return Err(Error::IndexOutOfRange(format!(
            "patient {} of {}",
            patient + 1,
            chain.layout.n_patients()
        )));
    }
    let l = rate.index();
    let v = per_draw(chain, |s| psi_mean(scan, patient, s).map(|m| m[l].exp()).unwrap_or(f64::NAN))?;
    summarize(&v, &DEFAULT_PROBS)
}

pub fn patient_level(chain: &ChainSamples, patient: usize, scan: usize) -> Result<PosteriorSummary> {
    patient_level_rate(chain, patient, scan, Rate::Ktrans)
}

/// Draws of a patient's log treatment effect `beta + delta_j`.
pub fn patient_effect_draws(chain: &ChainSamples, patient: usize, rate: Rate) -> Result<Vec<f64>> {
    if patient >= chain.layout.n_patients() {
        return Err(Error::IndexOutOfRange(format!("patient {}", patient + 1)));
    }
    let l = rate.index();
    per_draw(chain, |s| s.fixed.beta[l] + s.patient.delta[patient][l])
}

/// Per-voxel posterior median of `exp(psi_ijk1)`, the full transform
/// including the voxel effect.
pub fn voxel_median_map(chain: &ChainSamples, scan: usize, patient: usize) -> Result<Vec<f64>> {
    chain.layout.check_indices(scan, patient)?;
    if chain.is_empty() {
        return Err(Error::EmptyInput("chain has no draws".into()));
    }
    let g = chain.layout.group(scan, patient);
    let mut column = vec![0.0; chain.len()];
    (0..chain.layout.n_voxels(scan, patient))
        .map(|k| {
            for (d, s) in chain.draws.iter().enumerate() {
                column[d] = s.voxel.psi[g][k][0].exp();
            }
            column.sort_by(f64::total_cmp);
            Ok(quantile_sorted(&column, 0.5))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["grid", "density"])?;
        for (x, y) in self.grid.iter().zip(&self.density) {
            w.write_record([x.to_string(), y.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR / 1.34) n^(-1/5)`. Falls back
/// to the sd when the IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let s = summarize(values, &[0.25, 0.75])?;
    let iqr = s.quantiles[1].value - s.quantiles[0].value;
    let spread = if iqr > 0.0 { s.sd.min(iqr / 1.34) } else { s.sd };
    Ok(0.9 * spread * (values.len() as f64).powf(-0.2))
}

/// Gaussian kernel density at a single point.
pub fn kde_density_at(values: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * PI).sqrt());
    norm * values.iter().map(|v| (-0.5 * ((x - v) / bandwidth).powi(2)).exp()).sum::<f64>()
}

/// Gaussian kernel density on [`KDE_POINTS`] points spanning the data
/// widened by three bandwidths on each side.
pub fn kde(values: &[f64], bandwidth: Option<f64>) -> Result<DensityCurve> {
    nonempty(values)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite value".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::EmptyInput("kernel density needs at least two distinct values".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::InvalidParameter(format!("bandwidth {h} must be positive"))),
        None => silverman_bandwidth(values)?,
    };
    let (a, b) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (b - a) / (KDE_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_POINTS).map(|i| a + step * i as f64).collect();
    let density = grid.iter().map(|&x| kde_density_at(values, h, x)).collect();
    Ok(DensityCurve { grid, density, bandwidth: h })
}

/// Split potential scale reduction factor over several chains of one
/// scalar. Each chain is halved, giving `2m` sequences of equal length.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if n < 2 {
        return Err(Error::EmptyInput("split R-hat needs chains of at least 4 draws".into()));
    }
    let halves: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..n], &c[n..2 * n]]).collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return Err(Error::Numerical("zero within-chain variance".into()));
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

/// Named summaries of one chain, ready for JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub n_draws: usize,
    /// Posterior probability that each treatment effect is positive,
    /// keyed by rate.
    pub prob_positive: BTreeMap<String, f64>,
    pub summaries: BTreeMap<String, PosteriorSummary>,
}

impl SummaryReport {
    pub fn from_chain(chain: &ChainSamples) -> Result<Self> {
        let mut summaries = BTreeMap::new();
        let mut prob = BTreeMap::new();
        for rate in [Rate::Ktrans, Rate::Kep] {
            let name = rate.label();
            summaries.insert(format!("{name}/baseline"), study_level_rate(chain, 0, rate)?);
            summaries.insert(format!("{name}/post"), study_level_rate(chain, 1, rate)?);
            let beta = fixed_effect_draws(chain, rate, true)?;
            summaries.insert(format!("{name}/percent_change"), percent_change(&beta)?);
            prob.insert(name.to_string(), prob_positive(&beta)?);
            for j in 0..chain.layout.n_patients() {
                let p = j + 1;
                summaries.insert(format!("{name}/patient{p}/baseline"), patient_level_rate(chain, j, 0, rate)?);
                summaries.insert(format!("{name}/patient{p}/post"), patient_level_rate(chain, j, 1, rate)?);
                summaries.insert(
                    format!("{name}/patient{p}/percent_change"),
                    percent_change(&patient_effect_draws(chain, j, rate)?)?,
                );
            }
        }
        debug_assert_eq!(N_KINETIC, 2);
        Ok(SummaryReport { n_draws: chain.len(), prob_positive: prob, summaries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
