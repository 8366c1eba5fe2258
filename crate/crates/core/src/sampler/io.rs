//! Chain files: one CSV row per retained draw, one column per scalar
//! parameter, plus a JSON sidecar carrying the configuration, seed, layout
//! and acceptance report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{
    FixedEffects, Hypers, ModelState, NuisanceParams, PatientEffects, StudyLayout, VoxelEffects,
    N_KINETIC,
};
use crate::sampler::chain::{AcceptanceReport, ChainSamples, McmcConfig};

pub const CHAIN_FORMAT: &str = "dce-bhm-chain/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    seed: u64,
    n_draws: usize,
    n_columns: usize,
    config: McmcConfig,
    layout: StudyLayout,
    acceptance: AcceptanceReport,
}

/// Column names in file order, indices one-based.
pub fn column_names(layout: &StudyLayout) -> Vec<String> {
    let mut c = Vec::new();
    for l in 1..=N_KINETIC {
        c.push(format!("alpha[{l}]"));
    }
    for l in 1..=N_KINETIC {
        c.push(format!("beta[{l}]"));
    }
    for name in ["gamma", "delta", "tau2_gamma", "tau2_delta"] {
        for j in 1..=layout.n_patients() {
            for l in 1..=N_KINETIC {
                c.push(format!("{name}[{j},{l}]"));
            }
        }
    }
    for g in 0..layout.n_groups() {
        let (i, j) = layout.scan_patient(g);
        for l in 1..=N_KINETIC {
            c.push(format!("tau2_eps[{},{},{l}]", i + 1, j + 1));
        }
    }
    for g in 0..layout.n_groups() {
        let (i, j) = layout.scan_patient(g);
        c.push(format!("sigma2[{},{}]", i + 1, j + 1));
    }
    for g in 0..layout.n_groups() {
        let (i, j) = layout.scan_patient(g);
        for k in 1..=layout.n_voxels(i, j) {
            c.push(format!("vp[{},{},{k}]", i + 1, j + 1));
        }
    }
    for g in 0..layout.n_groups() {
        let (i, j) = layout.scan_patient(g);
        for k in 1..=layout.n_voxels(i, j) {
            for l in 1..=N_KINETIC {
                c.push(format!("psi[{},{},{k},{l}]", i + 1, j + 1));
            }
        }
    }
    c
}

/// Scalars of `state` in [`column_names`] order.
pub fn flatten_state(state: &ModelState) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend_from_slice(&state.fixed.alpha);
    v.extend_from_slice(&state.fixed.beta);
    for arr in [
        &state.patient.gamma,
        &state.patient.delta,
        &state.hypers.tau2_gamma,
        &state.hypers.tau2_delta,
    ] {
        v.extend(arr.iter().flatten());
    }
    v.extend(state.hypers.tau2_eps.iter().flatten());
    v.extend(&state.nuisance.sigma2);
    v.extend(state.nuisance.vp.iter().flatten());
    v.extend(state.voxel.psi.iter().flatten().flatten());
    v
}

struct Cursor<'a> {
    row: &'a [f64],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> f64 {
        let v = self.row[self.pos];
        self.pos += 1;
        v
    }

    fn pair(&mut self) -> [f64; 2] {
        [self.next(), self.next()]
    }

    fn pairs(&mut self, n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|_| self.pair()).collect()
    }
}

fn unflatten_state(layout: &StudyLayout, row: &[f64]) -> ModelState {
    let mut cur = Cursor { row, pos: 0 };
    let jn = layout.n_patients();
    let groups = layout.n_groups();
    let alpha = cur.pair();
    let beta = cur.pair();
    let gamma = cur.pairs(jn);
    let delta = cur.pairs(jn);
    let tau2_gamma = cur.pairs(jn);
    let tau2_delta = cur.pairs(jn);
    let tau2_eps = cur.pairs(groups);
    let sigma2 = (0..groups).map(|_| cur.next()).collect();
    let counts: Vec<usize> = (0..groups)
        .map(|g| {
            let (i, j) = layout.scan_patient(g);
            layout.n_voxels(i, j)
        })
        .collect();
    let vp = counts.iter().map(|&n| (0..n).map(|_| cur.next()).collect()).collect();
    let psi = counts.iter().map(|&n| cur.pairs(n)).collect();
    ModelState {
        fixed: FixedEffects { alpha, beta },
        patient: PatientEffects { gamma, delta },
        voxel: VoxelEffects { psi },
        hypers: Hypers {
            tau2_gamma,
            tau2_delta,
            tau2_eps,
        },
        nuisance: NuisanceParams { sigma2, vp },
    }
}

pub fn sidecar_path(chain_csv: &Path) -> PathBuf {
    chain_csv.with_extension("json")
}

/// Writes `chain_csv` and its sidecar next to it.
pub fn save_chain(samples: &ChainSamples, chain_csv: &Path) -> Result<()> {
    let cols = column_names(&samples.layout);
    let mut w = csv::Writer::from_path(chain_csv)?;
    w.write_record(&cols)?;
    let mut record = csv::StringRecord::with_capacity(cols.len() * 12, cols.len());
    for draw in &samples.draws {
        record.clear();
        for v in flatten_state(draw) {
            record.push_field(&v.to_string());
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(chain_csv, e))?;

    let side = Sidecar {
        format: CHAIN_FORMAT.into(),
        seed: samples.config.seed,
        n_draws: samples.draws.len(),
        n_columns: cols.len(),
        config: samples.config.clone(),
        layout: samples.layout.clone(),
        acceptance: samples.acceptance.clone(),
    };
    let path = sidecar_path(chain_csv);
    let text = serde_json::to_string_pretty(&side)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_chain(chain_csv: &Path) -> Result<ChainSamples> {
    let side_path = sidecar_path(chain_csv);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::schema(side_path.display().to_string(), e.to_string()))?;
    if side.format != CHAIN_FORMAT {
        return Err(Error::schema(
            side_path.display().to_string(),
            format!("unsupported format `{}`", side.format),
        ));
    }
    let loc = chain_csv.display().to_string();
    let expected = column_names(&side.layout);
    let mut rdr = csv::ReaderBuilder::new().from_path(chain_csv)?;
    let header = rdr.headers()?.clone();
    if header.len() != expected.len() || header.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(Error::schema(&loc, "header does not match the layout in the sidecar"));
    }
    let mut draws = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, f)| {
                f.parse::<f64>().map_err(|_| {
                    Error::schema(format!("{loc}, row {}, column {}", r + 2, expected[c]), format!("not a number: `{f}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        draws.push(unflatten_state(&side.layout, &row));
    }
    if draws.len() != side.n_draws {
        return Err(Error::schema(
            &loc,
            format!("sidecar declares {} draws, file has {}", side.n_draws, draws.len()),
        ));
    }
    Ok(ChainSamples {
        layout: side.layout,
        config: side.config,
        acceptance: side.acceptance,
        draws,
    })
}
