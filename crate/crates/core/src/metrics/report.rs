use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{estimate_downbeats, pitch_metrics, timing_dynamics};
use crate::error::{Error, Result};
use crate::midi;
use crate::notes::PerformedNote;

pub const METRIC_NAMES: [&str; 7] = ["upc", "pr", "aps", "dstd", "ds", "ioi", "avi"];

/// The seven metrics; `None` marks a value that is undefined for the input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MetricValues {
    pub upc: Option<f64>,
    pub pr: Option<f64>,
    pub aps: Option<f64>,
    pub dstd: Option<f64>,
    pub ds: Option<f64>,
    pub ioi: Option<f64>,
    pub avi: Option<f64>,
}

impl MetricValues {
    pub fn as_array(&self) -> [Option<f64>; 7] {
        [self.upc, self.pr, self.aps, self.dstd, self.ds, self.ioi, self.avi]
    }

    fn from_array(a: [Option<f64>; 7]) -> Self {
        Self {
            upc: a[0],
            pr: a[1],
            aps: a[2],
            dstd: a[3],
            ds: a[4],
            ioi: a[5],
            avi: a[6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PieceMetrics {
    pub piece: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

pub fn evaluate_notes(piece: impl Into<String>, notes: &[PerformedNote]) -> PieceMetrics {
    let piece = piece.into();
    let mut v = MetricValues::default();
    match pitch_metrics(notes) {
        Ok(p) => {
            v.upc = Some(p.upc);
            v.pr = Some(p.pr);
            v.aps = p.aps;
        }
        Err(_) => log::warn!("{piece}: no notes"),
    }
    if let Some(d) = estimate_downbeats(notes) {
        v.dstd = Some(d.dstd);
        v.ds = Some(d.ds);
    }
    if let Some((ioi, avi)) = timing_dynamics(notes) {
        v.ioi = Some(ioi);
        v.avi = Some(avi);
    }
    PieceMetrics { piece, values: v }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counts {
    pub pieces: usize,
    /// Pieces for which each metric was undefined, in column order.
    pub missing: [usize; 7],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub pieces: Vec<PieceMetrics>,
    /// Means over the pieces where each metric is defined.
    pub means: MetricValues,
    pub counts: Counts,
}

impl MetricReport {
    pub fn from_pieces(pieces: Vec<PieceMetrics>) -> Self {
        let mut sums = [0.0; 7];
        let mut present = [0usize; 7];
        for p in &pieces {
            for (j, v) in p.values.as_array().into_iter().enumerate() {
                if let Some(x) = v {
                    sums[j] += x;
                    present[j] += 1;
                }
            }
        }
        let means = std::array::from_fn(|j| (present[j] > 0).then(|| sums[j] / present[j] as f64));
        let counts = Counts {
            pieces: pieces.len(),
            missing: std::array::from_fn(|j| pieces.len() - present[j]),
        };
        Self {
            pieces,
            means: MetricValues::from_array(means),
            counts,
        }
    }

    /// One row per piece and a final `mean` row; missing values are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["piece"];
        header.extend(METRIC_NAMES);
        w.write_record(&header)?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mean_row = PieceMetrics {
            piece: "mean".into(),
            values: self.means,
        };
        for p in self.pieces.iter().chain(std::iter::once(&mean_row)) {
            let mut row = vec![p.piece.clone()];
            row.extend(p.values.as_array().into_iter().map(cell));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// The seven corpus means and the counts.
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (name, v) in METRIC_NAMES.iter().zip(self.means.as_array()) {
            obj.insert((*name).into(), serde_json::json!(v));
        }
        let missing: serde_json::Map<String, serde_json::Value> = METRIC_NAMES
            .iter()
            .zip(self.counts.missing)
            .map(|(n, c)| ((*n).to_string(), c.into()))
            .collect();
        obj.insert(
            "counts".into(),
            serde_json::json!({"pieces": self.counts.pieces, "missing": missing}),
        );
        serde_json::Value::Object(obj)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.to_json())?)?;
        Ok(())
    }
}

/// Evaluates every `.mid` file in a directory, at most `limit` of them in
/// name order.
pub fn evaluate_corpus(dir: &Path, limit: Option<usize>) -> Result<MetricReport> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    files.sort();
    if let Some(n) = limit {
        files.truncate(n);
    }
    if files.is_empty() {
        return Err(Error::Corpus(format!("no MIDI files in {}", dir.display())));
    }
    let mut pieces = Vec::with_capacity(files.len());
    for f in &files {
        let notes = midi::read_performance(f)?;
        let name = f
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        pieces.push(evaluate_notes(name, &notes));
    }
    Ok(MetricReport::from_pieces(pieces))
}
