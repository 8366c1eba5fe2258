//! Study data model and its on-disk form: a JSON manifest next to one CSV
//! matrix per (scan, patient) with one row per voxel and one column per
//! frame. Times are written in seconds and held in minutes in memory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{StudyLayout, N_SCANS};
use crate::kinetics::{AifBasis, AifParams, CtcSeries, TimeGrid};

pub const STUDY_FORMAT: &str = "dce-bhm-study/1";

/// All voxel curves of one (scan, patient) pair on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSeries {
    pub grid: TimeGrid,
    pub voxels: Vec<CtcSeries>,
}

impl ScanSeries {
    pub fn new(grid: TimeGrid, voxels: Vec<CtcSeries>) -> Self {
        ScanSeries { grid, voxels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyData {
    pub study_id: String,
    pub aif: AifParams,
    /// Whether frames before injection were dropped at load.
    pub drop_pre_injection: bool,
    layout: StudyLayout,
    /// indexed by [`StudyLayout::group`]
    groups: Vec<ScanSeries>,
}

impl StudyData {
    /// `series[scan][patient]`.
    pub fn new(study_id: impl Into<String>, aif: AifParams, series: Vec<Vec<ScanSeries>>) -> Result<Self> {
        aif.validate()?;
        if series.len() != N_SCANS {
            return Err(Error::LayoutMismatch(format!(
                "expected {N_SCANS} scans, got {}",
                series.len()
            )));
        }
        let counts = series
            .iter()
            .map(|row| row.iter().map(|s| s.voxels.len()).collect())
            .collect();
        let layout = StudyLayout::new(counts)?;
        let mut groups = Vec::with_capacity(layout.n_groups());
        for (i, row) in series.into_iter().enumerate() {
            for (j, s) in row.into_iter().enumerate() {
                for (k, v) in s.voxels.iter().enumerate() {
                    if v.len() != s.grid.len() {
                        return Err(Error::LayoutMismatch(format!(
                            "scan {}, patient {}, voxel {}: {} values for {} frames",
                            i + 1,
                            j + 1,
                            k + 1,
                            v.len(),
                            s.grid.len()
                        )));
                    }
                    if v.values.iter().any(|x| !x.is_finite()) {
                        return Err(Error::InvalidParameter(format!(
                            "scan {}, patient {}, voxel {}: non-finite concentration",
                            i + 1,
                            j + 1,
                            k + 1
                        )));
                    }
                }
                groups.push(s);
            }
        }
        Ok(StudyData {
            study_id: study_id.into(),
            aif,
            drop_pre_injection: false,
            layout,
            groups,
        })
    }

    pub fn layout(&self) -> &StudyLayout {
        &self.layout
    }

    pub fn series(&self, scan: usize, patient: usize) -> &ScanSeries {
        &self.groups[self.layout.group(scan, patient)]
    }

    pub fn group(&self, group: usize) -> &ScanSeries {
        &self.groups[group]
    }

    pub fn groups(&self) -> &[ScanSeries] {
        &self.groups
    }

    pub fn bases(&self) -> Vec<AifBasis> {
        self.groups.iter().map(|s| AifBasis::new(&s.grid, &self.aif)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Units {
    time: String,
    concentration: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeriesEntry {
    scan: usize,
    patient: usize,
    n_voxels: usize,
    times: Vec<f64>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    study_id: String,
    units: Units,
    aif: AifParams,
    n_patients: usize,
    #[serde(default)]
    drop_pre_injection: bool,
    series: Vec<SeriesEntry>,
}

/// Seconds value that maps back to `minutes` exactly under division by 60,
/// when one exists within a few ulps of `60 * minutes`.
fn seconds_for(minutes: f64) -> f64 {
    let s = minutes * 60.0;
    if s / 60.0 == minutes {
        return s;
    }
    let mut lo = s;
    let mut hi = s;
    for _ in 0..4 {
        lo = lo.next_down();
        hi = hi.next_up();
        if lo / 60.0 == minutes {
            return lo;
        }
        if hi / 60.0 == minutes {
            return hi;
        }
    }
    s
}

fn series_file_name(scan: usize, patient: usize) -> String {
    format!("scan{}_patient{}.csv", scan + 1, patient + 1)
}

/// Writes `<dir>/study.json` and the per-(scan, patient) CSV matrices.
/// Returns the manifest path.
pub fn save_study(data: &StudyData, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layout = data.layout();
    let mut entries = Vec::new();
    for i in 0..N_SCANS {
        for j in 0..layout.n_patients() {
            let s = data.series(i, j);
            let file = series_file_name(i, j);
            let path = dir.join(&file);
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
            for v in &s.voxels {
                w.write_record(v.values.iter().map(|x| x.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            entries.push(SeriesEntry {
                scan: i + 1,
                patient: j + 1,
                n_voxels: s.voxels.len(),
                times: s.grid.times().iter().map(|&t| seconds_for(t)).collect(),
                file,
            });
        }
    }
    let manifest = Manifest {
        format: STUDY_FORMAT.into(),
        study_id: data.study_id.clone(),
        units: Units {
            time: "s".into(),
            concentration: "mmol/l".into(),
        },
        aif: data.aif,
        n_patients: layout.n_patients(),
        drop_pre_injection: data.drop_pre_injection,
        series: entries,
    };
    let path = dir.join("study.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_matrix(path: &Path, location: &str) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::schema(location, format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::schema(location, e.to_string()))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, f)| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::schema(
                        format!("{location}, row {}, column {}", r + 1, c + 1),
                        format!("not a number: `{f}`"),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads and validates a study manifest, converting units to minutes and
/// mmol/l.
pub fn load_study(manifest_path: &Path) -> Result<StudyData> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::schema(manifest_path.display().to_string(), e.to_string()))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let loc = |what: &str| format!("{}: {what}", manifest_path.display());

    if m.format != STUDY_FORMAT {
        return Err(Error::schema(loc("format"), format!("unsupported format `{}`", m.format)));
    }
    let time_scale = match m.units.time.as_str() {
        "s" => 1.0 / 60.0,
        "min" => 1.0,
        other => return Err(Error::schema(loc("units.time"), format!("unknown unit `{other}`"))),
    };
    let conc_scale = match m.units.concentration.as_str() {
        "mmol/l" | "mM" => 1.0,
        "umol/l" | "uM" => 1e-3,
        other => {
            return Err(Error::schema(
                loc("units.concentration"),
                format!("unknown unit `{other}`"),
            ))
        }
    };
    if m.n_patients == 0 {
        return Err(Error::schema(loc("n_patients"), "must be at least 1"));
    }
    m.aif.validate().map_err(|e| Error::schema(loc("aif"), e.to_string()))?;

    let mut slots: Vec<Vec<Option<ScanSeries>>> = vec![vec![None; m.n_patients]; N_SCANS];
    for (e_idx, e) in m.series.iter().enumerate() {
        let where_ = format!("series[{e_idx}] (scan {}, patient {})", e.scan, e.patient);
        if e.scan == 0 || e.scan > N_SCANS || e.patient == 0 || e.patient > m.n_patients {
            return Err(Error::schema(loc(&where_), "scan or patient out of range"));
        }
        let slot = &mut slots[e.scan - 1][e.patient - 1];
        if slot.is_some() {
            return Err(Error::schema(loc(&where_), "duplicate entry"));
        }
        let times: Vec<f64> = e.times.iter().map(|t| t * time_scale).collect();
        let mut keep: Vec<bool> = vec![true; times.len()];
        if m.drop_pre_injection {
            for (k, t) in keep.iter_mut().zip(&times) {
                *k = *t >= 0.0;
            }
        }
        let kept_times: Vec<f64> = times.iter().zip(&keep).filter(|(_, k)| **k).map(|(t, _)| *t).collect();
        let grid = TimeGrid::new(kept_times).map_err(|err| Error::schema(loc(&where_), err.to_string()))?;
        let rows = read_matrix(&root.join(&e.file), &format!("{} ({})", e.file, where_))?;
        if rows.len() != e.n_voxels {
            return Err(Error::schema(
                loc(&where_),
                format!("voxel count mismatch: manifest says {}, file has {} rows", e.n_voxels, rows.len()),
            ));
        }
        let mut voxels = Vec::with_capacity(rows.len());
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != times.len() {
                return Err(Error::schema(
                    format!("{}, row {}", e.file, r + 1),
                    format!("{} values for {} frames", row.len(), times.len()),
                ));
            }
            let values = row
                .into_iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(v, _)| v * conc_scale)
                .collect();
            voxels.push(CtcSeries::new(values));
        }
        *slot = Some(ScanSeries::new(grid, voxels));
    }
    let mut series = Vec::with_capacity(N_SCANS);
    for (i, row) in slots.into_iter().enumerate() {
        let mut out = Vec::with_capacity(m.n_patients);
        for (j, s) in row.into_iter().enumerate() {
            out.push(s.ok_or_else(|| {
                Error::schema(loc("series"), format!("missing entry for scan {}, patient {}", i + 1, j + 1))
            })?);
        }
        series.push(out);
    }
    let mut data = StudyData::new(m.study_id, m.aif, series)
        .map_err(|e| Error::schema(manifest_path.display().to_string(), e.to_string()))?;
    data.drop_pre_injection = m.drop_pre_injection;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> StudyData {
        let grid = TimeGrid::uniform(5, 11.9, 1).unwrap();
        let curve = |s: f64| CtcSeries::new(vec![0.0, 0.5 * s, 0.4 * s, 0.3 * s, 0.25 * s]);
        StudyData::new(
            "minimal",
            AifParams::default(),
            vec![
                vec![ScanSeries::new(grid.clone(), vec![curve(1.0)])],
                vec![ScanSeries::new(grid, vec![curve(0.8)])],
            ],
        )
        .unwrap()
    }

    #[test]
    fn minimal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = minimal();
        let path = save_study(&data, dir.path()).unwrap();
        let back = load_study(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(back.layout().total_voxels(), 2);
    }

    #[test]
    fn voxel_count_mismatch_names_scan_and_patient() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_study(&minimal(), dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut m: Manifest = serde_json::from_str(&text).unwrap();
        m.series[1].n_voxels = 3;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_study(&path).unwrap_err().to_string();
        assert!(err.contains("scan 2, patient 1"), "{err}");
        assert!(err.contains("voxel count mismatch"), "{err}");
    }

    #[test]
    fn bad_number_reports_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_study(&minimal(), dir.path()).unwrap();
        fs::write(dir.path().join("scan1_patient1.csv"), "0,0.5,abc,0.3,0.2\n").unwrap();
        let err = load_study(&path).unwrap_err().to_string();
        assert!(err.contains("row 1, column 3"), "{err}");
    }

    #[test]
    fn pre_injection_frames_can_be_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_study(&minimal(), dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut m: Manifest = serde_json::from_str(&text).unwrap();
        m.drop_pre_injection = true;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let d = load_study(&path).unwrap();
        assert_eq!(d.series(0, 0).grid.len(), 4);
        assert_eq!(d.series(0, 0).voxels[0].values[0], 0.5);
    }

    #[test]
    fn seconds_round_trip_for_acquisition_grids() {
        for k in -10..60 {
            let s = k as f64 * 11.9;
            let t = s / 60.0;
            assert_eq!(seconds_for(t) / 60.0, t);
        }
    }
}
