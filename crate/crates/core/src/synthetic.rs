//! Seeded synthetic aligned pieces for smoke runs and tests: grid-aligned
//! scores with chords, played with smooth rubato, onset jitter, varying
//! articulation and a dynamics contour.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AlignedCorpus, AlignedPiece, LoadReport};
use crate::notes::{sort_aligned, AlignedNote, PerformedNote, ScoreNote};

const STEPS: [f64; 5] = [0.25, 0.5, 0.5, 1.0, 0.75];
const CHORD_INTERVALS: [u8; 3] = [3, 4, 7];

/// A score of `n` notes: onsets on sixteenth-note multiples, occasional
/// two-note chords, pitches on a bounded random walk.
pub fn synthetic_score(rng: &mut impl Rng, n: usize) -> Vec<ScoreNote> {
    let mut notes = Vec::with_capacity(n);
    let mut onset = rng.random_range(0..4) as f64 * 0.25;
    let mut pitch: i32 = rng.random_range(55..72);
    while notes.len() < n {
        let step = STEPS[rng.random_range(0..STEPS.len())];
        let id = notes.len();
        notes.push(ScoreNote::new(format!("n{id}"), pitch as u8, onset, step).expect("valid synthetic note"));
        if notes.len() < n && rng.random_bool(0.3) {
            let upper = pitch as u8 + CHORD_INTERVALS[rng.random_range(0..CHORD_INTERVALS.len())];
            let id = notes.len();
            notes.push(ScoreNote::new(format!("n{id}"), upper, onset, step).expect("valid synthetic note"));
        }
        pitch = (pitch + rng.random_range(-4..=4)).clamp(40, 90);
        onset += step;
    }
    notes
}

/// Plays a score with sinusoidal rubato around a base tempo.
pub fn synthetic_performance(score: &[ScoreNote], rng: &mut impl Rng) -> Vec<AlignedNote> {
    let base = rng.random_range(0.4..0.7);
    let depth = rng.random_range(0.03..0.12);
    let omega = std::f64::consts::TAU / rng.random_range(8.0..24.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    // integral of base * (1 + depth * sin(omega * b + phase))
    let time = |b: f64| base * (b - depth / omega * ((omega * b + phase).cos() - phase.cos()));
    let loudness = rng.random_range(55.0..80.0);
    let mut out: Vec<AlignedNote> = score
        .iter()
        .map(|s| {
            let onset = time(s.onset) + rng.random_range(-0.012..0.012);
            let span = time(s.onset + s.duration) - time(s.onset);
            let duration = span * rng.random_range(0.7..1.1);
            let velocity = (loudness + 15.0 * (s.onset * 0.4).sin() + rng.random_range(-6.0..6.0))
                .round()
                .clamp(20.0, 110.0) as u8;
            let played = PerformedNote::new(s.pitch, onset, duration, velocity).expect("valid synthetic note");
            AlignedNote::new(s.clone(), played).expect("matching pitch")
        })
        .collect();
    sort_aligned(&mut out);
    out
}

pub fn synthetic_piece(seed: u64, n: usize) -> Vec<AlignedNote> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let score = synthetic_score(&mut rng, n);
    synthetic_performance(&score, &mut rng)
}

/// `pieces` synthetic pieces of `notes` notes each, named `synth-<i>`.
pub fn synthetic_corpus(seed: u64, pieces: usize, notes: usize) -> AlignedCorpus {
    let pieces: Vec<AlignedPiece> = (0..pieces)
        .map(|i| AlignedPiece {
            piece_id: format!("synth-{i:03}"),
            notes: synthetic_piece(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), notes),
            alignment_rate: 1.0,
        })
        .collect();
    AlignedCorpus {
        source: PathBuf::from("synthetic"),
        report: LoadReport {
            pieces_read: pieces.len(),
            pieces_retained: pieces.len(),
            ..LoadReport::default()
        },
        pieces,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_aligned;
    use crate::grammar::validate_grammar;
    use crate::quantize::QuantizationSpec;

    #[test]
    fn seeded_and_encodable() {
        assert_eq!(synthetic_piece(3, 40), synthetic_piece(3, 40));
        assert_ne!(synthetic_piece(3, 40), synthetic_piece(4, 40));
        let notes = synthetic_piece(5, 64);
        assert_eq!(notes.len(), 64);
        let seq = encode_aligned(&notes, &QuantizationSpec::default()).unwrap();
        assert!(validate_grammar(&seq).is_empty());
        assert_eq!(seq.note_count(), 64);
    }

    #[test]
    fn performance_is_monotone_in_score_time() {
        let notes = synthetic_piece(9, 200);
        for w in notes.windows(2) {
            if w[1].score.onset > w[0].score.onset + 0.2 {
                assert!(w[1].performed.onset > w[0].performed.onset);
            }
        }
    }
}
