//! Synthetic studies drawn forward from the hierarchical model, with the
//! generating parameters kept as ground truth.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{
    kinetic_from_psi, psi_mean, FixedEffects, Hypers, ModelState, NuisanceParams, PatientEffects,
    StudyLayout, VoxelEffects, N_KINETIC, N_SCANS,
};
use crate::kinetics::{AifBasis, AifParams, CtcSeries, TimeGrid};
use crate::studyio::study::{ScanSeries, StudyData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VpDistribution {
    Beta { a: f64, b: f64 },
    Fixed { value: f64 },
}

/// Generating configuration. Variances may be zero, which switches the
/// corresponding effect off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSpec {
    pub study_id: String,
    pub n_patients: usize,
    pub voxels_per_scan: usize,
    pub n_frames: usize,
    pub frame_spacing_s: f64,
    pub n_pre_injection: usize,
    pub aif: AifParams,
    pub alpha: [f64; N_KINETIC],
    pub beta: [f64; N_KINETIC],
    pub tau2_gamma: [f64; N_KINETIC],
    pub tau2_delta: [f64; N_KINETIC],
    pub tau2_eps: [f64; N_KINETIC],
    pub sigma2: f64,
    pub vp: VpDistribution,
}

impl Default for SimulationSpec {
    /// Desk-scale study: 4 patients, 25 voxels per scan, 40 frames.
    fn default() -> Self {
        SimulationSpec {
            study_id: "synthetic".into(),
            n_patients: 4,
            voxels_per_scan: 25,
            n_frames: 40,
            frame_spacing_s: 11.9,
            n_pre_injection: 4,
            aif: AifParams::default(),
            alpha: [0.2f64.ln(), 0.5f64.ln()],
            beta: [0.77f64.ln(), 0.0],
            tau2_gamma: [0.04, 0.04],
            tau2_delta: [0.02, 0.02],
            tau2_eps: [0.05, 0.05],
            sigma2: 0.05 * 0.05,
            vp: VpDistribution::Beta { a: 1.0, b: 19.0 },
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("simulation spec: {m}")));
        if self.n_patients == 0 || self.voxels_per_scan == 0 {
            return bad("need at least one patient and one voxel");
        }
        if self.n_frames < 2 || self.n_pre_injection >= self.n_frames {
            return bad("need at least 2 frames and one post-injection frame");
        }
        if !(self.frame_spacing_s > 0.0) {
            return bad("frame spacing must be positive");
        }
        self.aif.validate()?;
        let vars = self
            .tau2_gamma
            .iter()
            .chain(&self.tau2_delta)
            .chain(&self.tau2_eps)
            .chain(std::iter::once(&self.sigma2));
        if vars.clone().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("variances must be finite and non-negative");
        }
        if self.alpha.iter().chain(&self.beta).any(|v| !v.is_finite()) {
            return bad("fixed effects must be finite");
        }
        match self.vp {
            VpDistribution::Beta { a, b } if a > 0.0 && b > 0.0 => {}
            VpDistribution::Fixed { value } if (0.0..=1.0).contains(&value) => {}
            _ => return bad("invalid vascular fraction distribution"),
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.n_frames, self.frame_spacing_s, self.n_pre_injection)
    }
}

/// Generating state plus the noise-free curves, `clean[group][voxel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub state: ModelState,
    pub clean: Vec<Vec<CtcSeries>>,
}

impl GroundTruth {
    /// Recomputes the noise-free curves from the stored state.
    pub fn regenerate(&self, data: &StudyData) -> Vec<Vec<CtcSeries>> {
        clean_curves(&self.state, data.layout(), &data.bases())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn clean_curves(state: &ModelState, layout: &StudyLayout, bases: &[AifBasis]) -> Vec<Vec<CtcSeries>> {
    (0..layout.n_groups())
        .map(|g| {
            let basis = &bases[g];
            state.voxel.psi[g]
                .iter()
                .zip(&state.nuisance.vp[g])
                .map(|(psi, &vp)| {
                    let mut out = vec![0.0; basis.len()];
                    basis.curve_into(&kinetic_from_psi(psi[0], psi[1], vp), &mut out);
                    CtcSeries::new(out)
                })
                .collect()
        })
        .collect()
}

#[inline]
fn gaussian<R: Rng>(rng: &mut R, var: f64) -> f64 {
    if var == 0.0 {
        0.0
    } else {
        var.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Draws a study from the model. Deterministic in `seed`.
pub fn simulate_study(spec: &SimulationSpec, seed: u64) -> Result<(StudyData, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jn = spec.n_patients;
    let layout = StudyLayout::balanced(jn, spec.voxels_per_scan)?;
    let grid = spec.grid()?;
    let basis = AifBasis::new(&grid, &spec.aif);

    let mut gamma = vec![[0.0; N_KINETIC]; jn];
    let mut delta = vec![[0.0; N_KINETIC]; jn];
    for j in 0..jn {
        for l in 0..N_KINETIC {
            gamma[j][l] = gaussian(&mut rng, spec.tau2_gamma[l]);
            delta[j][l] = gaussian(&mut rng, spec.tau2_delta[l]);
        }
    }
    let mut state = ModelState {
        fixed: FixedEffects {
            alpha: spec.alpha,
            beta: spec.beta,
        },
        patient: PatientEffects { gamma, delta },
        voxel: VoxelEffects { psi: Vec::new() },
        hypers: Hypers {
            tau2_gamma: vec![spec.tau2_gamma; jn],
            tau2_delta: vec![spec.tau2_delta; jn],
            tau2_eps: vec![spec.tau2_eps; layout.n_groups()],
        },
        nuisance: NuisanceParams {
            sigma2: vec![spec.sigma2; layout.n_groups()],
            vp: Vec::new(),
        },
    };
    let vp_dist = match spec.vp {
        VpDistribution::Beta { a, b } => Some(
            Beta::new(a, b).map_err(|e| Error::InvalidParameter(format!("vp distribution: {e}")))?,
        ),
        VpDistribution::Fixed { .. } => None,
    };

    for g in 0..layout.n_groups() {
        let (i, j) = layout.scan_patient(g);
        let mean = psi_mean(i, j, &state)?;
        let n = layout.n_voxels(i, j);
        let mut psi = Vec::with_capacity(n);
        let mut vps = Vec::with_capacity(n);
        for _ in 0..n {
            psi.push([
                mean[0] + gaussian(&mut rng, spec.tau2_eps[0]),
                mean[1] + gaussian(&mut rng, spec.tau2_eps[1]),
            ]);
            vps.push(match (&vp_dist, spec.vp) {
                (Some(d), _) => d.sample(&mut rng),
                (None, VpDistribution::Fixed { value }) => value,
                (None, _) => unreachable!(),
            });
        }
        state.voxel.psi.push(psi);
        state.nuisance.vp.push(vps);
    }

    let bases = vec![basis; layout.n_groups()];
    let clean = clean_curves(&state, &layout, &bases);
    let mut series: Vec<Vec<ScanSeries>> = (0..N_SCANS).map(|_| Vec::with_capacity(jn)).collect();
    for g in 0..layout.n_groups() {
        let (i, _) = layout.scan_patient(g);
        let voxels = clean[g]
            .iter()
            .map(|c| {
                CtcSeries::new(
                    c.values
                        .iter()
                        .map(|v| v + gaussian(&mut rng, spec.sigma2))
                        .collect(),
                )
            })
            .collect();
        series[i].push(ScanSeries::new(grid.clone(), voxels));
    }
    let data = StudyData::new(spec.study_id.clone(), spec.aif, series)?;
    Ok((data, GroundTruth { state, clean }))
}
