use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::notes::AlignedNote;

/// Real-valued expressive parameters of one performed note.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpressiveParams {
    /// Performed seconds per score beat.
    pub beat_period: f64,
    pub velocity: u8,
    /// Tempo-grid onset minus performed onset, in beats.
    pub timing: f64,
    /// Performed duration over the tempo-scaled score duration.
    pub articulation: f64,
}

impl ExpressiveParams {
    pub fn is_valid(&self) -> bool {
        self.beat_period.is_finite()
            && self.beat_period > 0.0
            && self.timing.is_finite()
            && self.articulation.is_finite()
            && self.articulation > 0.0
            && self.velocity <= 127
    }

    pub fn as_row(&self) -> [f32; 4] {
        [
            self.beat_period as f32,
            self.velocity as f32,
            self.timing as f32,
            self.articulation as f32,
        ]
    }
}

/// Index ranges of notes sharing one score onset, in input order.
pub(crate) fn onset_groups(onsets: impl Iterator<Item = f64>) -> Vec<std::ops::Range<usize>> {
    let mut groups: Vec<std::ops::Range<usize>> = Vec::new();
    let mut last = f64::NAN;
    for (i, s) in onsets.enumerate() {
        match groups.last_mut() {
            Some(g) if s == last => g.end = i + 1,
            _ => groups.push(i..i + 1),
        }
        last = s;
    }
    groups
}

/// Per-group beat periods from the inter-onset interval between the first
/// note of each group and the last note of the previous group.
///
/// The first group inherits the second group's value. A non-positive
/// estimate (a chord member played before the previous onset) inherits the
/// previous group's value.
pub(crate) fn group_beat_periods(
    groups: &[std::ops::Range<usize>],
    score_onset: impl Fn(usize) -> f64,
    perf_onset: impl Fn(usize) -> f64,
) -> Result<Vec<f64>> {
    if groups.len() < 2 {
        return Err(Error::Tempo(format!(
            "need at least 2 distinct score onsets, got {}",
            groups.len()
        )));
    }
    let mut raw = vec![f64::NAN; groups.len()];
    for g in 1..groups.len() {
        let first = groups[g].start;
        let prev = first - 1;
        let ds = score_onset(first) - score_onset(prev);
        raw[g] = (perf_onset(first) - perf_onset(prev)) / ds;
    }
    let valid = |x: f64| x.is_finite() && x > 0.0;
    let fallback = match raw.iter().copied().find(|&x| valid(x)) {
        Some(x) => x,
        None => {
            let (a, b) = (groups[0].start, groups[groups.len() - 1].start);
            let avg = (perf_onset(b) - perf_onset(a)) / (score_onset(b) - score_onset(a));
            if !valid(avg) {
                return Err(Error::Tempo(
                    "performed onsets do not advance with the score".into(),
                ));
            }
            avg
        }
    };
    let mut out = Vec::with_capacity(groups.len());
    let mut replaced = 0usize;
    for (g, &r) in raw.iter().enumerate() {
        let value = if valid(r) {
            r
        } else {
            if g > 0 {
                replaced += 1;
            }
            out.last().copied().unwrap_or(fallback)
        };
        out.push(value);
    }
    if replaced > 0 {
        log::warn!("{replaced} non-positive inter-onset beat periods replaced by the previous value");
    }
    Ok(out)
}

/// Computes beat period, timing, articulation and velocity for every note.
///
/// `notes` must be sorted by score onset. Notes sharing a score onset share
/// the beat period of their group. Timing is measured against a tempo grid
/// that starts at the first performed onset and advances by each group's
/// beat period.
pub fn compute_expressive_params(notes: &[AlignedNote]) -> Result<Vec<ExpressiveParams>> {
    if notes
        .windows(2)
        .any(|w| w[1].score.onset < w[0].score.onset)
    {
        return Err(Error::InvalidNote(
            "aligned notes must be sorted by score onset".into(),
        ));
    }
    let groups = onset_groups(notes.iter().map(|n| n.score.onset));
    let periods = group_beat_periods(
        &groups,
        |i| notes[i].score.onset,
        |i| notes[i].performed.onset,
    )?;

    let spread = groups
        .iter()
        .filter(|g| {
            let first = notes[g.start].performed.onset;
            notes[(*g).clone()].iter().any(|n| n.performed.onset != first)
        })
        .count();
    if spread > 0 {
        log::debug!("{spread} chords with spread performed onsets");
    }

    let mut out = Vec::with_capacity(notes.len());
    let mut grid = notes[0].performed.onset;
    for (g, range) in groups.iter().enumerate() {
        let bp = periods[g];
        if g > 0 {
            let ds = notes[range.start].score.onset - notes[groups[g - 1].start].score.onset;
            grid += bp * ds;
        }
        for n in &notes[range.clone()] {
            out.push(ExpressiveParams {
                beat_period: bp,
                velocity: n.performed.velocity,
                timing: (grid - n.performed.onset) / bp,
                articulation: n.performed.duration / (n.score.duration * bp),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notes::{PerformedNote, ScoreNote};

    fn aligned(pitch: u8, s_on: f64, s_dur: f64, p_on: f64, p_dur: f64, vel: u8) -> AlignedNote {
        AlignedNote::new(
            ScoreNote::new(format!("n{pitch}-{s_on}"), pitch, s_on, s_dur).unwrap(),
            PerformedNote::new(pitch, p_on, p_dur, vel).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn steady_tempo() {
        let notes = vec![
            aligned(60, 0.0, 1.0, 0.0, 0.25, 70),
            aligned(62, 1.0, 1.0, 0.5, 0.5, 71),
            aligned(64, 2.0, 1.0, 1.0, 0.5, 72),
        ];
        let p = compute_expressive_params(&notes).unwrap();
        for x in &p {
            assert_eq!(x.beat_period, 0.5);
            assert_eq!(x.timing, 0.0);
        }
        assert_eq!(p[0].articulation, 0.5);
        assert_eq!(p[1].articulation, 1.0);
        assert_eq!(p[2].velocity, 72);
    }

    #[test]
    fn chord_timing_spread() {
        let notes = vec![
            aligned(55, 0.0, 1.0, 0.0, 0.5, 60),
            aligned(60, 1.0, 1.0, 0.5, 0.5, 60),
            aligned(64, 1.0, 1.0, 0.52, 0.5, 60),
            aligned(67, 2.0, 1.0, 1.0, 0.5, 60),
        ];
        let p = compute_expressive_params(&notes).unwrap();
        assert_eq!(p[1].beat_period, 0.5);
        assert_eq!(p[2].beat_period, 0.5);
        assert!(((p[1].timing - p[2].timing) - 0.04).abs() < 1e-12);
        // (grid 0.5 - 0.52) / 0.5
        assert!((p[2].timing + 0.04).abs() < 1e-12);
    }

    #[test]
    fn needs_two_onsets() {
        let notes = vec![
            aligned(60, 0.0, 1.0, 0.0, 0.5, 60),
            aligned(64, 0.0, 1.0, 0.01, 0.5, 60),
        ];
        assert!(matches!(
            compute_expressive_params(&notes),
            Err(Error::Tempo(_))
        ));
    }

    #[test]
    fn negative_ioi_inherits_previous_period() {
        // chord at beat 1 has its last note late; the next onset is played
        // before it, so the raw estimate is negative
        let notes = vec![
            aligned(60, 0.0, 1.0, 0.0, 0.5, 60),
            aligned(62, 1.0, 1.0, 0.5, 0.5, 60),
            aligned(65, 1.0, 1.0, 0.9, 0.5, 60),
            aligned(67, 1.5, 1.0, 0.8, 0.5, 60),
        ];
        let p = compute_expressive_params(&notes).unwrap();
        assert_eq!(p[3].beat_period, 0.5);
        assert!(p.iter().all(|x| x.is_valid()));
    }

    #[test]
    fn unsorted_input_rejected() {
        let notes = vec![
            aligned(60, 1.0, 1.0, 0.0, 0.5, 60),
            aligned(64, 0.0, 1.0, 0.5, 0.5, 60),
        ];
        assert!(compute_expressive_params(&notes).is_err());
    }
}
