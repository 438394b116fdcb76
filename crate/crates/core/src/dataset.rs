//! Windowed segmentation, piece-level splitting and padded batches.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_aligned, encode_score};
use crate::corpus::{load_score_pieces, AlignedCorpus};
use crate::dump::{read_cache, write_cache, CacheEntry, CacheIndex};
use crate::error::{Error, Result};
use crate::notes::{AlignedNote, ScoreNote};
use crate::quantize::QuantizationSpec;
use crate::token::{EcpSequence, IGNORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub window: usize,
    pub stride: usize,
    pub test_fraction: f64,
    pub min_alignment_rate: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            window: 256,
            stride: 16,
            test_fraction: 0.10,
            min_alignment_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Index into `SegmentedDataset::piece_ids`.
    pub piece: usize,
    /// Index of the first note of the window within its piece.
    pub note_start: usize,
    pub seq: EcpSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedDataset {
    pub piece_ids: Vec<String>,
    /// One label per piece.
    pub splits: Vec<Split>,
    pub segments: Vec<Segment>,
    pub fingerprint: String,
}

impl SegmentedDataset {
    pub fn split_of(&self, segment: usize) -> Split {
        self.splits[self.segments[segment].piece]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.segments.len())
            .filter(|&i| self.split_of(i) == split)
            .collect()
    }

    pub fn pieces_in(&self, split: Split) -> BTreeSet<&str> {
        self.piece_ids
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn sequences(&self, indices: &[usize]) -> Vec<&EcpSequence> {
        indices.iter().map(|&i| &self.segments[i].seq).collect()
    }

    /// Keeps only the given pieces, in their original order.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut remap = vec![None; self.piece_ids.len()];
        let mut out = Self {
            piece_ids: Vec::new(),
            splits: Vec::new(),
            segments: Vec::new(),
            fingerprint: self.fingerprint.clone(),
        };
        for (i, id) in self.piece_ids.iter().enumerate() {
            if keep(i) {
                remap[i] = Some(out.piece_ids.len());
                out.piece_ids.push(id.clone());
                out.splits.push(self.splits[i]);
            }
        }
        for s in &self.segments {
            if let Some(p) = remap[s.piece] {
                out.segments.push(Segment { piece: p, ..s.clone() });
            }
        }
        out
    }
}

/// Start indices of the note windows of a piece with `n` notes.
///
/// Full windows start every `stride` notes. A piece no longer than the
/// window yields a single segment. A trailing partial window would start
/// `stride` notes after the last full one and is kept when at least
/// `stride` notes remain past the last full window.
pub fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    if n <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
    let last = *starts.last().expect("non-empty");
    if n - (last + window) >= stride {
        starts.push(last + stride);
    }
    starts
}

fn check_window(window: usize, stride: usize) -> Result<()> {
    if stride == 0 || window <= stride {
        return Err(Error::Config(format!(
            "window ({window}) must exceed stride ({stride}) > 0"
        )));
    }
    Ok(())
}

fn shift_score(n: &ScoreNote, by: f64) -> ScoreNote {
    ScoreNote {
        onset: n.onset - by,
        ..n.clone()
    }
}

/// Encodes every window of every piece. Each window is shifted so that its
/// first onset falls inside beat 0, keeping the within-beat phase.
pub fn segment(
    corpus: &AlignedCorpus,
    window: usize,
    stride: usize,
    spec: &QuantizationSpec,
) -> Result<SegmentedDataset> {
    check_window(window, stride)?;
    let mut ds = SegmentedDataset {
        piece_ids: Vec::with_capacity(corpus.pieces.len()),
        splits: Vec::with_capacity(corpus.pieces.len()),
        segments: Vec::new(),
        fingerprint: spec.fingerprint(),
    };
    for piece in &corpus.pieces {
        let n = piece.notes.len();
        if n < stride {
            log::warn!("piece {} has only {n} notes; kept as one segment", piece.piece_id);
        }
        let index = ds.piece_ids.len();
        let mut any = false;
        for start in window_starts(n, window, stride) {
            let notes = &piece.notes[start..(start + window).min(n)];
            let shift = notes[0].score.onset.floor();
            let shifted: Vec<AlignedNote> = notes
                .iter()
                .map(|a| AlignedNote {
                    score: shift_score(&a.score, shift),
                    performed: a.performed,
                })
                .collect();
            match encode_aligned(&shifted, spec) {
                Ok(seq) => {
                    ds.segments.push(Segment {
                        piece: index,
                        note_start: start,
                        seq,
                    });
                    any = true;
                }
                Err(e) => log::warn!("piece {} window {start}: {e}", piece.piece_id),
            }
        }
        if any {
            ds.piece_ids.push(piece.piece_id.clone());
            ds.splits.push(Split::Train);
        }
    }
    if ds.segments.is_empty() {
        return Err(Error::Corpus("no segment could be encoded".into()));
    }
    Ok(ds)
}

/// Score-only counterpart of [`segment`]: windows of a score-only piece
/// carry IGNORE performance ids.
pub fn segment_scores(
    pieces: &[(String, Vec<ScoreNote>)],
    window: usize,
    stride: usize,
    spec: &QuantizationSpec,
) -> Result<SegmentedDataset> {
    check_window(window, stride)?;
    let mut ds = SegmentedDataset {
        piece_ids: Vec::new(),
        splits: Vec::new(),
        segments: Vec::new(),
        fingerprint: spec.fingerprint(),
    };
    for (id, notes) in pieces {
        if notes.is_empty() {
            continue;
        }
        let n = notes.len();
        if n < stride {
            log::warn!("piece {id} has only {n} notes; kept as one segment");
        }
        let index = ds.piece_ids.len();
        ds.piece_ids.push(id.clone());
        ds.splits.push(Split::Train);
        for start in window_starts(n, window, stride) {
            let part = &notes[start..(start + window).min(n)];
            let shift = part[0].onset.floor();
            let shifted: Vec<ScoreNote> = part.iter().map(|s| shift_score(s, shift)).collect();
            ds.segments.push(Segment {
                piece: index,
                note_start: start,
                seq: encode_score(&shifted, spec),
            });
        }
    }
    Ok(ds)
}

/// Loads `.mid`/`.json` scores from a directory and segments them.
pub fn load_score_corpus(
    dir: &Path,
    window: usize,
    stride: usize,
    spec: &QuantizationSpec,
) -> Result<SegmentedDataset> {
    let pieces: Vec<(String, Vec<ScoreNote>)> = load_score_pieces(dir)?
        .into_iter()
        .map(|p| (p.piece_id, p.notes))
        .collect();
    segment_scores(&pieces, window, stride, spec)
}

/// Chooses `round(fraction * n)` items (at least one, leaving at least one
/// unchosen) with a seeded shuffle. Returns a membership mask.
pub fn choose_holdout(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut mask = vec![false; n];
    if n < 2 {
        return mask;
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// Assigns whole pieces to the test split.
pub fn split_by_piece(mut ds: SegmentedDataset, test_fraction: f64, seed: u64) -> Result<SegmentedDataset> {
    if ds.piece_ids.len() < 2 {
        return Err(Error::Corpus(format!(
            "need at least 2 pieces to split, found {}",
            ds.piece_ids.len()
        )));
    }
    let test = choose_holdout(ds.piece_ids.len(), test_fraction, seed);
    ds.splits = test
        .into_iter()
        .map(|t| if t { Split::Test } else { Split::Train })
        .collect();
    Ok(ds)
}

/// A padded batch in row-major flat buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub t_max: usize,
    /// `size * t_max * 4`
    pub score_ids: Vec<u32>,
    /// `size * t_max * 4`
    pub perf_ids: Vec<u32>,
    /// `size * t_max * 4`
    pub pv: Vec<f32>,
    /// `size * t_max`; padding repeats the last beat id.
    pub beat_ids: Vec<u32>,
    /// `size * t_max`; true on real steps.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    /// Caller-supplied index of each row's source sequence.
    pub sources: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&EcpSequence], sources: Vec<usize>) -> Self {
        assert_eq!(seqs.len(), sources.len());
        let size = seqs.len();
        let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut b = Batch {
            size,
            t_max,
            score_ids: vec![IGNORE; size * t_max * 4],
            perf_ids: vec![IGNORE; size * t_max * 4],
            pv: vec![0.0; size * t_max * 4],
            beat_ids: vec![0; size * t_max],
            mask: vec![false; size * t_max],
            lengths: seqs.iter().map(|s| s.len()).collect(),
            sources,
        };
        for (r, seq) in seqs.iter().enumerate() {
            let beats = seq.beat_segment_ids();
            for (t, tok) in seq.tokens.iter().enumerate() {
                let at = (r * t_max + t) * 4;
                b.score_ids[at..at + 4].copy_from_slice(&tok.score);
                b.perf_ids[at..at + 4].copy_from_slice(&tok.perf);
                b.pv[at..at + 4].copy_from_slice(&seq.pv[t]);
                b.beat_ids[r * t_max + t] = beats[t];
                b.mask[r * t_max + t] = true;
            }
            let last = beats.last().copied().unwrap_or(0);
            for t in seq.len()..t_max {
                b.beat_ids[r * t_max + t] = last;
            }
        }
        b
    }

    /// The unpadded sequence of row `r`.
    pub fn row(&self, r: usize) -> EcpSequence {
        let mut tokens = Vec::with_capacity(self.lengths[r]);
        let mut pv = Vec::with_capacity(self.lengths[r]);
        for t in 0..self.lengths[r] {
            let at = (r * self.t_max + t) * 4;
            let mut ids = [0u32; 8];
            ids[..4].copy_from_slice(&self.score_ids[at..at + 4]);
            ids[4..].copy_from_slice(&self.perf_ids[at..at + 4]);
            tokens.push(crate::token::CompoundToken::from_ids(ids));
            pv.push(self.pv[at..at + 4].try_into().expect("4 values"));
        }
        EcpSequence { tokens, pv }
    }
}

/// Groups indices into batches, optionally shuffled with a seed. Every
/// index appears in exactly one batch.
pub fn batch_indices(indices: &[usize], batch_size: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One epoch of training batches over the segments of `split`.
pub fn make_batches(
    ds: &SegmentedDataset,
    split: Split,
    batch_size: usize,
    shuffle: Option<u64>,
) -> Vec<Batch> {
    batch_indices(&ds.indices(split), batch_size, shuffle)
        .into_iter()
        .map(|idx| Batch::from_sequences(&ds.sequences(&idx), idx))
        .collect()
}

pub fn save_dataset(ds: &SegmentedDataset, dir: &Path) -> Result<()> {
    let mut row = 0;
    let segments = ds
        .segments
        .iter()
        .map(|s| {
            let e = CacheEntry {
                piece: ds.piece_ids[s.piece].clone(),
                split: ds.splits[s.piece].to_string(),
                note_start: s.note_start,
                row,
                len: s.seq.len(),
            };
            row += s.seq.len();
            e
        })
        .collect();
    let index = CacheIndex {
        fingerprint: ds.fingerprint.clone(),
        segments,
    };
    let seqs: Vec<&EcpSequence> = ds.segments.iter().map(|s| &s.seq).collect();
    write_cache(dir, &index, &seqs)
}

/// Reads a cached dataset, rejecting caches built with other quantization
/// tables.
pub fn load_dataset(dir: &Path, spec: &QuantizationSpec) -> Result<SegmentedDataset> {
    let (index, seqs) = read_cache(dir)?;
    if index.fingerprint != spec.fingerprint() {
        return Err(Error::Config(format!(
            "{} was built with different quantization tables",
            dir.display()
        )));
    }
    let mut ds = SegmentedDataset {
        piece_ids: Vec::new(),
        splits: Vec::new(),
        segments: Vec::with_capacity(seqs.len()),
        fingerprint: index.fingerprint,
    };
    for (e, seq) in index.segments.into_iter().zip(seqs) {
        let split = match e.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::Config(format!("unknown split {other:?}"))),
        };
        let piece = match ds.piece_ids.iter().position(|p| *p == e.piece) {
            Some(p) => p,
            None => {
                ds.piece_ids.push(e.piece);
                ds.splits.push(split);
                ds.piece_ids.len() - 1
            }
        };
        if ds.splits[piece] != split {
            return Err(Error::Config(format!(
                "piece {} appears in both splits",
                ds.piece_ids[piece]
            )));
        }
        ds.segments.push(Segment {
            piece,
            note_start: e.note_start,
            seq,
        });
    }
    Ok(ds)
}
