//! Symbolic downbeat estimation.
//!
//! Onsets are accumulated into a velocity-weighted envelope of 50 ms
//! frames, normalized to a peak of 1. An initial period between 1 s and
//! 4 s and a phase are chosen by maximizing the mean envelope value on the
//! implied grid. Downbeats are then tracked one period at a time, snapping
//! to the strongest frame within a quarter period of each prediction.

use crate::notes::PerformedNote;

pub const FRAME_SECONDS: f64 = 0.05;
const MIN_NOTES: usize = 8;
const MIN_SPAN_SECONDS: f64 = 4.0;
const MIN_PERIOD_FRAMES: usize = 20;
const MAX_PERIOD_FRAMES: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct Downbeats {
    /// Estimated downbeat times in seconds.
    pub times: Vec<f64>,
    pub dstd: f64,
    pub ds: f64,
    /// Initial grid chosen by the search, in seconds.
    pub period: f64,
    pub phase: f64,
    /// Mean envelope value on the initial grid.
    pub grid_salience: f64,
}

/// Velocity-weighted onset envelope normalized to a maximum of 1, with the
/// time of frame 0. `None` when there are no notes or all velocities are 0.
pub fn onset_envelope(notes: &[PerformedNote]) -> Option<(Vec<f64>, f64)> {
    let t0 = notes.iter().map(|n| n.onset).fold(f64::INFINITY, f64::min);
    let t1 = notes.iter().map(|n| n.onset).fold(f64::NEG_INFINITY, f64::max);
    if !t0.is_finite() {
        return None;
    }
    let frame = |t: f64| ((t - t0) / FRAME_SECONDS).round() as usize;
    let mut env = vec![0.0; frame(t1) + 1];
    for n in notes {
        env[frame(n.onset)] += n.velocity as f64;
    }
    let peak = env.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return None;
    }
    env.iter_mut().for_each(|e| *e /= peak);
    Some((env, t0))
}

fn grid_mean(env: &[f64], period: usize, phase: usize) -> f64 {
    let hits: Vec<f64> = (phase..env.len()).step_by(period).map(|i| env[i]).collect();
    hits.iter().sum::<f64>() / hits.len() as f64
}

/// Returns `None` (metrics missing) for fewer than 8 notes or a span under
/// 4 seconds.
pub fn estimate_downbeats(notes: &[PerformedNote]) -> Option<Downbeats> {
    if notes.len() < MIN_NOTES {
        return None;
    }
    let (env, t0) = onset_envelope(notes)?;
    let span = notes.iter().map(|n| n.onset - t0).fold(0.0, f64::max);
    if span < MIN_SPAN_SECONDS {
        return None;
    }

    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for period in MIN_PERIOD_FRAMES..=MAX_PERIOD_FRAMES {
        for phase in 0..period.min(env.len()) {
            let s = grid_mean(&env, period, phase);
            if s > best.0 {
                best = (s, period, phase);
            }
        }
    }
    let (grid_salience, period0, phase0) = best;

    let mut frames = vec![phase0];
    let mut tau = period0 as f64;
    loop {
        let current = *frames.last().expect("non-empty");
        let predicted = current as f64 + tau;
        let centre = predicted.round() as usize;
        if centre >= env.len() {
            break;
        }
        let reach = (0.25 * tau).round() as usize;
        let lo = centre.saturating_sub(reach).max(current + 1);
        let hi = (centre + reach).min(env.len() - 1);
        let mut pick = centre;
        let mut strength = 0.0;
        for i in lo..=hi {
            let closer = i.abs_diff(centre) < pick.abs_diff(centre);
            if env[i] > strength || (env[i] == strength && strength > 0.0 && closer) {
                pick = i;
                strength = env[i];
            }
        }
        tau = (tau + (pick - current) as f64) / 2.0;
        frames.push(pick);
    }

    let intervals: Vec<f64> = frames.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let dstd = if intervals.is_empty() {
        0.0
    } else {
        let mean = intervals.iter().sum::<f64>() / intervals.len() as f64;
        let var = intervals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / intervals.len() as f64;
        var.sqrt() * FRAME_SECONDS
    };
    let ds = frames.iter().map(|&f| env[f]).sum::<f64>() / frames.len() as f64;
    Some(Downbeats {
        times: frames.iter().map(|&f| t0 + f as f64 * FRAME_SECONDS).collect(),
        dstd,
        ds,
        period: period0 as f64 * FRAME_SECONDS,
        phase: phase0 as f64 * FRAME_SECONDS,
        grid_salience,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metronome(n: usize, ioi: f64, accent_every: usize) -> Vec<PerformedNote> {
        (0..n)
            .map(|i| {
                let vel = if i % accent_every == 0 { 100 } else { 50 };
                PerformedNote::new(60, i as f64 * ioi, 0.1, vel).unwrap()
            })
            .collect()
    }

    #[test]
    fn metronomic_accents_are_regular() {
        let d = estimate_downbeats(&metronome(40, 0.5, 4)).unwrap();
        assert_eq!(d.dstd, 0.0);
        assert!((d.period - 2.0).abs() < 1e-12);
        assert_eq!(d.ds, 1.0);
        assert_eq!(d.times.len(), 10);
    }

    #[test]
    fn displaced_downbeat_raises_dstd() {
        // bars of 3 s, so no half-time grid fits inside the period range
        let mut notes = metronome(40, 0.75, 4);
        assert_eq!(estimate_downbeats(&notes).unwrap().dstd, 0.0);
        notes[16].onset += 0.1;
        assert!(estimate_downbeats(&notes).unwrap().dstd > 0.0);
    }

    #[test]
    fn short_or_sparse_input_is_missing() {
        assert!(estimate_downbeats(&metronome(7, 1.0, 4)).is_none());
        assert!(estimate_downbeats(&metronome(20, 0.1, 4)).is_none());
        let chord: Vec<_> = (0..10)
            .map(|i| PerformedNote::new(50 + i, 1.0, 0.5, 80).unwrap())
            .collect();
        assert!(estimate_downbeats(&chord).is_none());
    }

    #[test]
    fn simultaneous_reordering_is_invisible() {
        let mut notes = metronome(40, 0.5, 4);
        notes.extend((0..10).map(|i| PerformedNote::new(72, i as f64 * 2.0, 0.1, 30).unwrap()));
        let a = estimate_downbeats(&notes).unwrap();
        notes.reverse();
        assert_eq!(a, estimate_downbeats(&notes).unwrap());
    }
}
