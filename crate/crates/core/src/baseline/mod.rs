//! The two-stage comparison analysis: voxel-wise least squares, region
//! medians, and a paired signed-rank test across patients.

mod nls;
mod wilcoxon;

use std::path::Path;

pub use nls::{
    fit_study, fit_voxel_with_restarts, nls_fit_voxel, roi_median_ktrans, NlsFit, DEFAULT_INIT,
    GRADIENT_TOLERANCE, MAX_ITERATIONS, RESTARTS, RSS_TOLERANCE,
};
pub use wilcoxon::{midranks, wilcoxon_one_sided, WilcoxonResult, EXACT_LIMIT};

pub(crate) use nls::median_of;

use crate::error::{Error, Result};
use crate::hierarchy::StudyLayout;
use crate::studyio::PairedSamples;

/// Per-patient region medians, `pre` from the first scan and `post` from
/// the second.
pub fn patient_medians(layout: &StudyLayout, fits: &[Vec<NlsFit>]) -> Result<PairedSamples> {
    if fits.len() != layout.n_groups() {
        return Err(Error::LayoutMismatch(format!(
            "{} fitted groups for {} in the layout",
            fits.len(),
            layout.n_groups()
        )));
    }
    let mut out = PairedSamples { ids: Vec::new(), pre: Vec::new(), post: Vec::new() };
    for j in 0..layout.n_patients() {
        let median = |i| {
            roi_median_ktrans(&fits[layout.group(i, j)]).map_err(|_| {
                Error::EmptyInput(format!("no converged fits for scan {}, patient {}", i + 1, j + 1))
            })
        };
        out.ids.push((j + 1).to_string());
        out.pre.push(median(0)?);
        out.post.push(median(1)?);
    }
    Ok(out)
}

/// One row per voxel: `scan,patient,voxel,ktrans,kep,vp,converged,rss`.
pub fn write_fits_csv(layout: &StudyLayout, fits: &[Vec<NlsFit>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scan", "patient", "voxel", "ktrans", "kep", "vp", "converged", "rss"])?;
    for (g, group) in fits.iter().enumerate() {
        let (i, j) = layout.scan_patient(g);
        for (k, f) in group.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                (j + 1).to_string(),
                (k + 1).to_string(),
                f.params.ktrans.to_string(),
                f.params.kep.to_string(),
                f.params.vp.to_string(),
                f.converged.to_string(),
                f.rss.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `patient,pre,post`, readable by [`crate::studyio::load_paired_csv`].
pub fn write_paired_csv(samples: &PairedSamples, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient", "pre", "post"])?;
    for ((id, a), b) in samples.ids.iter().zip(&samples.pre).zip(&samples.post) {
        w.write_record([id.clone(), a.to_string(), b.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::KineticParams;
    use crate::studyio::load_paired_csv;

    fn fit(k: f64) -> NlsFit {
        NlsFit { params: KineticParams::new(k, 0.5, 0.05), converged: true, rss: 0.0, iterations: 3 }
    }

    #[test]
    fn medians_follow_layout() {
        let layout = StudyLayout::balanced(2, 1).unwrap();
        let fits = vec![vec![fit(0.1)], vec![fit(0.2)], vec![fit(0.3)], vec![fit(0.4)]];
        let m = patient_medians(&layout, &fits).unwrap();
        assert_eq!(m.pre, vec![0.1, 0.2]);
        assert_eq!(m.post, vec![0.3, 0.4]);
        assert!(patient_medians(&layout, &fits[..2]).is_err());
    }

    #[test]
    fn paired_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let s = PairedSamples { ids: vec!["a".into()], pre: vec![0.125], post: vec![0.1] };
        write_paired_csv(&s, &p).unwrap();
        assert_eq!(load_paired_csv(&p).unwrap(), s);
    }
}
