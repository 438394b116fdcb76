//! Ingestion of note-aligned score/performance pairs and of score-only files.
//!
//! An alignment file holds one JSON object per piece (a single object or an
//! array of them):
//!
//! ```json
//! {"piece_id": "...",
//!  "score": [{"id": "...", "pitch": 60, "onset_beats": 0.0, "duration_beats": 1.0}],
//!  "performance": [{"pitch": 60, "onset_sec": 0.0, "duration_sec": 0.4, "velocity": 64}],
//!  "alignment": [{"score_id": "...", "perf_index": 0}]}
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::midi;
use crate::notes::{sort_aligned, sort_score, AlignedNote, PerformedNote, ScoreNote};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub pitch: i64,
    pub onset_beats: f64,
    pub duration_beats: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRecord {
    pub pitch: i64,
    pub onset_sec: f64,
    pub duration_sec: f64,
    pub velocity: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub score_id: String,
    pub perf_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceRecord {
    pub piece_id: String,
    pub score: Vec<ScoreRecord>,
    pub performance: Vec<PerformanceRecord>,
    pub alignment: Vec<AlignmentRecord>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    Many(Vec<T>),
    One(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPiece {
    pub piece_id: String,
    /// Sorted by score onset, then pitch.
    pub notes: Vec<AlignedNote>,
    pub alignment_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub pieces_read: usize,
    pub pieces_retained: usize,
    pub below_rate: usize,
    pub too_few_notes: usize,
    /// Score or performance notes without a partner.
    pub unmatched_notes: usize,
    /// Pairs dropped for pitch mismatch or invalid note data.
    pub rejected_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCorpus {
    pub source: PathBuf,
    pub pieces: Vec<AlignedPiece>,
    pub report: LoadReport,
}

fn schema(path: &Path, msg: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn json_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

pub fn read_piece_records(path: &Path) -> Result<Vec<PieceRecord>> {
    let mut out = Vec::new();
    for file in json_files(path)? {
        let bytes = fs::read(&file)?;
        let parsed: OneOrMany<PieceRecord> = serde_json::from_slice(&bytes).or_else(|_| {
            // retry strictly as a single object for a field-level message
            serde_json::from_slice::<PieceRecord>(&bytes)
                .map(OneOrMany::One)
                .map_err(|e| schema(&file, e.to_string()))
        })?;
        match parsed {
            OneOrMany::Many(v) => out.extend(v),
            OneOrMany::One(p) => out.push(p),
        }
    }
    Ok(out)
}

/// Pairs score and performance notes of one piece. Returns the aligned notes
/// and the alignment rate: matched pairs over the larger of the two note
/// counts.
pub fn align_piece(
    record: &PieceRecord,
    path: &Path,
    report: &mut LoadReport,
) -> Result<AlignedPiece> {
    let mut by_id: HashMap<&str, &ScoreRecord> = HashMap::with_capacity(record.score.len());
    for s in &record.score {
        if by_id.insert(s.id.as_str(), s).is_some() {
            return Err(schema(
                path,
                format!("piece {}: duplicate score.id {:?}", record.piece_id, s.id),
            ));
        }
    }
    let mut used_scores = HashSet::new();
    let mut used_perf = HashSet::new();
    let mut notes = Vec::with_capacity(record.alignment.len());
    for a in &record.alignment {
        let s = by_id.get(a.score_id.as_str()).ok_or_else(|| {
            schema(
                path,
                format!("piece {}: alignment.score_id {:?} not found", record.piece_id, a.score_id),
            )
        })?;
        let p = record.performance.get(a.perf_index).ok_or_else(|| {
            schema(
                path,
                format!(
                    "piece {}: alignment.perf_index out of bounds ({} >= {})",
                    record.piece_id,
                    a.perf_index,
                    record.performance.len()
                ),
            )
        })?;
        if !used_scores.insert(a.score_id.as_str()) || !used_perf.insert(a.perf_index) {
            report.rejected_pairs += 1;
            continue;
        }
        match make_pair(s, p) {
            Ok(n) => notes.push(n),
            Err(e) => {
                log::debug!("piece {}: {e}", record.piece_id);
                report.rejected_pairs += 1;
            }
        }
    }
    report.unmatched_notes += record.score.len() + record.performance.len()
        - used_scores.len()
        - used_perf.len();
    let denom = record.score.len().max(record.performance.len()).max(1);
    sort_aligned(&mut notes);
    Ok(AlignedPiece {
        piece_id: record.piece_id.clone(),
        alignment_rate: record.alignment.len().min(denom) as f64 / denom as f64,
        notes,
    })
}

fn make_pair(s: &ScoreRecord, p: &PerformanceRecord) -> Result<AlignedNote> {
    let pitch = |x: i64| {
        u8::try_from(x).map_err(|_| Error::InvalidNote(format!("pitch {x} out of range")))
    };
    let velocity = u8::try_from(p.velocity)
        .ok()
        .filter(|&v| v <= 127)
        .ok_or_else(|| Error::InvalidNote(format!("velocity {}", p.velocity)))?;
    AlignedNote::new(
        ScoreNote::new(s.id.clone(), pitch(s.pitch)?, s.onset_beats, s.duration_beats)?,
        PerformedNote::new(pitch(p.pitch)?, p.onset_sec, p.duration_sec, velocity)?,
    )
}

/// Loads an alignment file or a directory of them, keeping pieces whose
/// alignment rate reaches `min_alignment_rate` and that have at least two
/// aligned notes.
pub fn load_alignment_corpus(path: &Path, min_alignment_rate: f64) -> Result<AlignedCorpus> {
    let records = read_piece_records(path)?;
    let mut report = LoadReport {
        pieces_read: records.len(),
        ..LoadReport::default()
    };
    let mut seen = HashSet::new();
    let mut pieces = Vec::new();
    for r in &records {
        if !seen.insert(r.piece_id.clone()) {
            return Err(schema(path, format!("duplicate piece_id {:?}", r.piece_id)));
        }
        let piece = align_piece(r, path, &mut report)?;
        if piece.alignment_rate < min_alignment_rate {
            report.below_rate += 1;
            continue;
        }
        if piece.notes.len() < 2 {
            log::warn!("piece {} has fewer than 2 aligned notes", piece.piece_id);
            report.too_few_notes += 1;
            continue;
        }
        pieces.push(piece);
    }
    report.pieces_retained = pieces.len();
    log::info!(
        "alignment corpus: {} of {} pieces retained ({} below rate, {} too short)",
        report.pieces_retained,
        report.pieces_read,
        report.below_rate,
        report.too_few_notes
    );
    if pieces.is_empty() {
        return Err(Error::Corpus(format!(
            "empty corpus after filtering {} (min alignment rate {min_alignment_rate})",
            path.display()
        )));
    }
    Ok(AlignedCorpus {
        source: path.to_path_buf(),
        pieces,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorePiece {
    pub piece_id: String,
    pub notes: Vec<ScoreNote>,
}

#[derive(Deserialize)]
struct ScoreFile {
    #[serde(default)]
    piece_id: Option<String>,
    score: Vec<ScoreRecord>,
}

/// Reads one score from a `.mid`, `.midi` or score JSON file.
pub fn read_score_file(path: &Path) -> Result<ScorePiece> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let is_midi = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
    let mut notes = if is_midi {
        midi::score_from_bytes(&fs::read(path)?)?
    } else {
        let file: ScoreFile = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| schema(path, e.to_string()))?;
        let notes = file
            .score
            .iter()
            .filter_map(|s| {
                let pitch = u8::try_from(s.pitch).ok()?;
                ScoreNote::new(s.id.clone(), pitch, s.onset_beats, s.duration_beats).ok()
            })
            .collect();
        return Ok(ScorePiece {
            piece_id: file.piece_id.unwrap_or(stem),
            notes: sorted(notes),
        });
    };
    sort_score(&mut notes);
    Ok(ScorePiece {
        piece_id: stem,
        notes,
    })
}

fn sorted(mut notes: Vec<ScoreNote>) -> Vec<ScoreNote> {
    sort_score(&mut notes);
    notes
}

/// Reads every `.mid`, `.midi` and `.json` score in a directory. Unreadable
/// files are skipped with a warning.
pub fn load_score_pieces(dir: &Path) -> Result<Vec<ScorePiece>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| {
                let e = e.to_ascii_lowercase();
                e == "mid" || e == "midi" || e == "json"
            })
        })
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in &files {
        match read_score_file(f) {
            Ok(p) if !p.notes.is_empty() => out.push(p),
            Ok(_) => log::warn!("{}: no notes", f.display()),
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Corpus(format!(
            "no pretraining scores found in {}",
            dir.display()
        )));
    }
    Ok(out)
}
