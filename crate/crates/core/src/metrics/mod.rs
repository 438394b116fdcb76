//! Objective metrics over performed note lists.
//!
//! | metric | meaning |
//! |--------|---------|
//! | UPC  | distinct pitch classes |
//! | PR   | highest minus lowest pitch |
//! | APS  | mean absolute interval between consecutive notes |
//! | DSTD | std of intervals between estimated downbeats (s) |
//! | DS   | mean envelope salience at estimated downbeats |
//! | IOI  | mean inter-onset interval (s) |
//! | AVI  | mean absolute velocity change between consecutive notes |

mod downbeat;
mod report;

pub use downbeat::{estimate_downbeats, onset_envelope, Downbeats, FRAME_SECONDS};
pub use report::{
    evaluate_corpus, evaluate_notes, Counts, MetricReport, MetricValues, PieceMetrics, METRIC_NAMES,
};

use crate::error::{Error, Result};
use crate::notes::PerformedNote;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchMetrics {
    pub upc: f64,
    pub pr: f64,
    /// Missing for a single note.
    pub aps: Option<f64>,
}

/// Notes ordered by onset, ties by pitch.
fn ordered(notes: &[PerformedNote]) -> Vec<PerformedNote> {
    let mut v = notes.to_vec();
    crate::notes::sort_performed(&mut v);
    v
}

pub fn pitch_metrics(notes: &[PerformedNote]) -> Result<PitchMetrics> {
    if notes.is_empty() {
        return Err(Error::Corpus("pitch metrics of an empty piece".into()));
    }
    let mut classes = [false; 12];
    for n in notes {
        classes[(n.pitch % 12) as usize] = true;
    }
    let hi = notes.iter().map(|n| n.pitch).max().unwrap_or(0);
    let lo = notes.iter().map(|n| n.pitch).min().unwrap_or(0);
    let seq = ordered(notes);
    let aps = (seq.len() >= 2).then(|| {
        seq.windows(2)
            .map(|w| (w[1].pitch as f64 - w[0].pitch as f64).abs())
            .sum::<f64>()
            / (seq.len() - 1) as f64
    });
    Ok(PitchMetrics {
        upc: classes.iter().filter(|&&c| c).count() as f64,
        pr: (hi - lo) as f64,
        aps,
    })
}

/// Mean inter-onset interval and mean absolute velocity interval, or `None`
/// for fewer than two notes.
pub fn timing_dynamics(notes: &[PerformedNote]) -> Option<(f64, f64)> {
    if notes.len() < 2 {
        return None;
    }
    let seq = ordered(notes);
    let k = (seq.len() - 1) as f64;
    let ioi = seq.windows(2).map(|w| w[1].onset - w[0].onset).sum::<f64>() / k;
    let avi = seq
        .windows(2)
        .map(|w| (w[1].velocity as f64 - w[0].velocity as f64).abs())
        .sum::<f64>()
        / k;
    Some((ioi, avi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn notes(spec: &[(u8, f64, u8)]) -> Vec<PerformedNote> {
        spec.iter()
            .map(|&(p, t, v)| PerformedNote::new(p, t, 0.1, v).unwrap())
            .collect()
    }

    #[test]
    fn pitch_examples() {
        let m = pitch_metrics(&notes(&[(60, 0.0, 64), (64, 1.0, 64), (67, 2.0, 64), (72, 3.0, 64)])).unwrap();
        assert_eq!((m.upc, m.pr), (3.0, 12.0));
        let m = pitch_metrics(&notes(&[(60, 0.0, 64), (64, 1.0, 64), (67, 2.0, 64)])).unwrap();
        assert_eq!(m.aps, Some(3.5));
        let chromatic: Vec<_> = (0..12).map(|i| (60 + i as u8, i as f64, 64)).collect();
        assert_eq!(pitch_metrics(&notes(&chromatic)).unwrap().upc, 12.0);
        assert_eq!(pitch_metrics(&notes(&[(60, 0.0, 64)])).unwrap().aps, None);
        assert!(pitch_metrics(&[]).is_err());
    }

    #[test]
    fn timing_examples() {
        let (ioi, avi) = timing_dynamics(&notes(&[(60, 0.0, 60), (60, 0.5, 70), (60, 1.2, 66)])).unwrap();
        assert!((ioi - 0.6).abs() < 1e-12);
        assert_eq!(avi, 7.0);
        assert_eq!(timing_dynamics(&notes(&[(60, 0.0, 60)])), None);
        let flat = notes(&[(60, 0.0, 50), (62, 0.3, 50), (64, 0.9, 50)]);
        assert_eq!(timing_dynamics(&flat).unwrap().1, 0.0);
    }

    fn arb_notes() -> impl Strategy<Value = Vec<PerformedNote>> {
        proptest::collection::vec((30u8..90, 0.0f64..20.0, 1u8..100), 2..60).prop_map(|v| {
            v.into_iter()
                .map(|(p, t, vel)| PerformedNote::new(p, t, 0.2, vel).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn translation_invariance(ns in arb_notes(), shift in 0.0f64..100.0) {
            let moved: Vec<_> = ns.iter().map(|n| PerformedNote { onset: n.onset + shift, ..*n }).collect();
            let (a, b) = (pitch_metrics(&ns).unwrap(), pitch_metrics(&moved).unwrap());
            prop_assert_eq!(a.upc, b.upc);
            prop_assert_eq!(a.pr, b.pr);
            let (ioi_a, avi_a) = timing_dynamics(&ns).unwrap();
            let (ioi_b, avi_b) = timing_dynamics(&moved).unwrap();
            prop_assert!((ioi_a - ioi_b).abs() < 1e-9);
            prop_assert_eq!(avi_a, avi_b);
        }

        #[test]
        fn transposition_invariance(ns in arb_notes()) {
            let up: Vec<_> = ns.iter().map(|n| PerformedNote { pitch: n.pitch + 12, ..*n }).collect();
            let (a, b) = (pitch_metrics(&ns).unwrap(), pitch_metrics(&up).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn velocity_offset_invariance(ns in arb_notes(), add in 0u8..27) {
            let louder: Vec<_> = ns.iter().map(|n| PerformedNote { velocity: n.velocity + add, ..*n }).collect();
            prop_assert_eq!(timing_dynamics(&ns).unwrap().1, timing_dynamics(&louder).unwrap().1);
        }
    }
}
