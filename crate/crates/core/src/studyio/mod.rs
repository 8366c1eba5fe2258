//! Study data, file formats and synthetic study generation.

mod simulate;
mod study;

use std::path::Path;

pub use simulate::{simulate_study, GroundTruth, SimulationSpec, VpDistribution};
pub use study::{load_study, save_study, ScanSeries, StudyData, STUDY_FORMAT};

use crate::error::{Error, Result};

/// Bundled fixture from a standard analysis: median `K^trans` per patient before and
/// after treatment.
pub const TABLE1_CSV: &str = include_str!("../../fixtures/table1.csv");

/// Paired measurements with a `pre` and a `post` column (an optional
/// leading identifier column is ignored).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    pub ids: Vec<String>,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

pub fn parse_paired_csv(text: &str, location: &str) -> Result<PairedSamples> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::schema(location, format!("missing `{name}` column")))
    };
    let pre_c = col("pre")?;
    let post_c = col("post")?;
    let id_c = headers.iter().position(|h| h != "pre" && h != "post");
    let mut out = PairedSamples {
        ids: Vec::new(),
        pre: Vec::new(),
        post: Vec::new(),
    };
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            let f = rec.get(c).unwrap_or("");
            f.parse().map_err(|_| {
                Error::schema(format!("{location}, row {}", r + 2), format!("not a number: `{f}`"))
            })
        };
        out.pre.push(num(pre_c)?);
        out.post.push(num(post_c)?);
        out.ids.push(
            id_c.and_then(|c| rec.get(c))
                .map(str::to_owned)
                .unwrap_or_else(|| (r + 1).to_string()),
        );
    }
    Ok(out)
}

pub fn load_paired_csv(path: &Path) -> Result<PairedSamples> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_paired_csv(&text, &path.display().to_string())
}
