//! Conversion between aligned note lists and compound-token sequences.
//!
//! Layout of a sequence: `BOS`, then for every beat from beat 0 up to the
//! last onset a `METRIC(BEAT)` marker, a `METRIC(POS_k)` marker for every
//! non-zero tick inside the beat that holds onsets, the notes at that
//! position in ascending pitch order, and finally `EOS`.
//!
//! Performance tokens are encoded against the quantized tempo map: the beat
//! periods are quantized first, the tempo grid is integrated from the
//! quantized values, and timing and articulation are measured against that
//! grid. Decoding integrates the same grid, so onset errors do not
//! accumulate over the sequence.

use crate::error::{Error, Result};
use crate::expressive::{compute_expressive_params, onset_groups, ExpressiveParams};
use crate::grammar::{validate_grammar, validate_score_grammar};
use crate::notes::{sort_performed, AlignedNote, PerformedNote, ScoreNote, PIANO_HIGH, PIANO_LOW};
use crate::quantize::{PerfBins, QuantizationSpec};
use crate::token::{
    BeatPosition, CompoundToken, EcpSequence, Family, IGNORE, PERF_FIELD_NAMES,
};

/// Seconds per beat used when a sequence carries no performance tokens.
pub const NOMINAL_BEAT_PERIOD: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
struct Snapped {
    tick: u64,
    pitch: u8,
    duration: usize,
    source: usize,
}

fn snap_all(
    notes: impl Iterator<Item = (u8, f64, f64)>,
    spec: &QuantizationSpec,
) -> Vec<Snapped> {
    let tpb = spec.ticks_per_beat as f64;
    let mut dropped = 0usize;
    let mut out: Vec<Snapped> = notes
        .enumerate()
        .filter_map(|(source, (pitch, onset, duration))| {
            if !(PIANO_LOW..=PIANO_HIGH).contains(&pitch) || !onset.is_finite() || onset < 0.0 {
                dropped += 1;
                return None;
            }
            Some(Snapped {
                tick: (onset * tpb).round() as u64,
                pitch,
                duration: spec.duration_index(duration * tpb),
                source,
            })
        })
        .collect();
    if dropped > 0 {
        log::warn!("dropped {dropped} notes outside the piano range");
    }
    out.sort_by_key(|n| (n.tick, n.pitch));
    out
}

fn layout(
    snapped: &[Snapped],
    perf: Option<&[(PerfBins, [f32; 4])]>,
    spec: &QuantizationSpec,
) -> EcpSequence {
    let tpb = spec.ticks_per_beat as u64;
    let mut tokens = vec![CompoundToken::bos()];
    let mut pv = vec![[0.0f32; 4]];
    let mut next_beat = 0u64;
    let mut position: Option<u64> = None;
    for (i, n) in snapped.iter().enumerate() {
        let (beat, tick) = (n.tick / tpb, n.tick % tpb);
        while next_beat <= beat {
            tokens.push(CompoundToken::metric(BeatPosition::Beat));
            pv.push([0.0; 4]);
            next_beat += 1;
            position = Some(beat * tpb);
        }
        if position != Some(n.tick) {
            tokens.push(CompoundToken::metric(BeatPosition::Pos(tick as u8)));
            pv.push([0.0; 4]);
            position = Some(n.tick);
        }
        let (bins, row) = match perf {
            Some(p) => (Some(p[i].0), p[i].1),
            None => (None, [0.0; 4]),
        };
        tokens.push(CompoundToken::note(n.pitch, n.duration, bins));
        pv.push(row);
    }
    tokens.push(CompoundToken::eos());
    pv.push([0.0; 4]);
    EcpSequence { tokens, pv }
}

/// Encodes a score without performance information. Note steps carry
/// IGNORE performance ids.
pub fn encode_score(score: &[ScoreNote], spec: &QuantizationSpec) -> EcpSequence {
    let snapped = snap_all(score.iter().map(|n| (n.pitch, n.onset, n.duration)), spec);
    layout(&snapped, None, spec)
}

/// Encodes aligned notes into a sequence with performance tokens and the
/// real-valued parameters they were quantized from.
pub fn encode_aligned(notes: &[AlignedNote], spec: &QuantizationSpec) -> Result<EcpSequence> {
    let snapped = snap_all(
        notes
            .iter()
            .map(|n| (n.score.pitch, n.score.onset, n.score.duration)),
        spec,
    );
    if snapped.is_empty() {
        return Ok(layout(&snapped, None, spec));
    }
    let tpb = spec.ticks_per_beat as f64;
    let grid: Vec<AlignedNote> = snapped
        .iter()
        .map(|s| {
            let src = &notes[s.source];
            AlignedNote {
                score: ScoreNote {
                    id: src.score.id.clone(),
                    pitch: s.pitch,
                    onset: s.tick as f64 / tpb,
                    duration: spec.durations[s.duration] as f64 / tpb,
                },
                performed: src.performed,
            }
        })
        .collect();
    let params = compute_expressive_params(&grid)?;

    let groups = onset_groups(grid.iter().map(|n| n.score.onset));
    let mut perf = Vec::with_capacity(grid.len());
    let first = &grid[0];
    let bp0 = spec
        .beat_period
        .representative(spec.beat_period.bin_of(params[0].beat_period));
    let origin = first.performed.onset - bp0 * first.score.onset;
    let mut tempo_grid = 0.0;
    let mut prev_onset = 0.0;
    for range in groups {
        let lead = &params[range.start];
        let bp_bin = spec.beat_period.bin_of(lead.beat_period);
        let bp = spec.beat_period.representative(bp_bin);
        let s = grid[range.start].score.onset;
        tempo_grid += bp * (s - prev_onset);
        prev_onset = s;
        for i in range {
            let n = &grid[i];
            let refined = ExpressiveParams {
                beat_period: lead.beat_period,
                velocity: params[i].velocity,
                timing: (tempo_grid - (n.performed.onset - origin)) / bp,
                articulation: n.performed.duration / (n.score.duration * bp),
            };
            let mut bins = spec.quantize(&refined);
            bins.beat_period = bp_bin;
            perf.push((bins, refined.as_row()));
        }
    }
    Ok(layout(&snapped, Some(&perf), spec))
}

#[derive(Debug, Clone, Copy)]
struct NoteStep {
    index: usize,
    tick: i64,
    pitch: u8,
    duration_ticks: u32,
}

/// Walks a grammar-valid sequence, returning note steps and the tick of
/// every beat marker.
fn walk(seq: &EcpSequence, spec: &QuantizationSpec) -> Result<(Vec<NoteStep>, Vec<i64>)> {
    let tpb = spec.ticks_per_beat as i64;
    let mut beat: i64 = -1;
    let mut tick: i64 = 0;
    let mut notes = Vec::new();
    let mut beats = Vec::new();
    for (index, t) in seq.tokens.iter().enumerate() {
        match t.family() {
            Some(Family::Metric) => match t.beat_position() {
                Some(BeatPosition::Beat) => {
                    beat += 1;
                    tick = 0;
                    beats.push(beat * tpb);
                }
                Some(BeatPosition::Pos(k)) => tick = k as i64,
                None => unreachable!("grammar checked"),
            },
            Some(Family::Note) => {
                let duration = t
                    .duration_index()
                    .and_then(|d| spec.duration_ticks(d))
                    .ok_or_else(|| Error::IdOutOfRange(format!("duration at token {index}")))?;
                notes.push(NoteStep {
                    index,
                    tick: beat * tpb + tick,
                    pitch: t.pitch().expect("grammar checked"),
                    duration_ticks: duration,
                });
            }
            _ => {}
        }
    }
    Ok((notes, beats))
}

/// Reconstructs the notated notes. Ids are assigned in sequence order.
pub fn decode_score(seq: &EcpSequence, spec: &QuantizationSpec) -> Result<Vec<ScoreNote>> {
    if let Some(d) = validate_score_grammar(seq).first() {
        return Err(Error::Grammar(*d));
    }
    let tpb = spec.ticks_per_beat as f64;
    let (steps, _) = walk(seq, spec)?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(i, s)| ScoreNote {
            id: format!("n{i}"),
            pitch: s.pitch,
            onset: s.tick as f64 / tpb,
            duration: s.duration_ticks as f64 / tpb,
        })
        .collect())
}

/// Decoded performance with the information needed for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    /// Performed notes in sequence order.
    pub notes: Vec<PerformedNote>,
    /// Dequantized parameters of each note, in sequence order.
    pub params: Vec<ExpressiveParams>,
    /// Performed time of every beat marker.
    pub beat_times: Vec<f64>,
}

/// Piecewise-linear map from score ticks to seconds through the group points.
struct TempoMap {
    /// (tick, seconds, beat period on the segment ending at this point)
    points: Vec<(i64, f64, f64)>,
    tpb: f64,
}

impl TempoMap {
    fn at(&self, tick: i64) -> f64 {
        let Some(&(t0, _, bp0)) = self.points.first() else {
            return tick as f64 / self.tpb * NOMINAL_BEAT_PERIOD;
        };
        if tick < t0 {
            return tick as f64 / self.tpb * bp0;
        }
        let g = self
            .points
            .iter()
            .rposition(|&(t, _, _)| t <= tick)
            .unwrap_or(0);
        let (t, secs, bp) = self.points[g];
        let slope = self.points.get(g + 1).map_or(bp, |p| p.2);
        secs + slope * (tick - t) as f64 / self.tpb
    }
}

/// Decodes note steps and beat markers into performed time.
pub fn performance_timeline(seq: &EcpSequence, spec: &QuantizationSpec) -> Result<Timeline> {
    for (index, t) in seq.tokens.iter().enumerate() {
        if t.is(Family::Note) {
            if let Some(j) = t.perf.iter().position(|&x| x == IGNORE) {
                return Err(Error::IgnoreId {
                    index,
                    field: PERF_FIELD_NAMES[j],
                });
            }
        }
    }
    if let Some(d) = validate_grammar(seq).first() {
        return Err(Error::Grammar(*d));
    }
    let tpb = spec.ticks_per_beat as f64;
    let (steps, beats) = walk(seq, spec)?;

    let mut params = Vec::with_capacity(steps.len());
    for s in &steps {
        let bins = seq.tokens[s.index].perf_bins().expect("checked above");
        params.push(spec.dequantize(&bins)?);
    }

    // A group is a run of note steps under one position marker.
    let mut map = TempoMap {
        points: Vec::new(),
        tpb,
    };
    let mut notes = Vec::with_capacity(steps.len());
    let mut group_secs = 0.0;
    let mut prev_tick = 0i64;
    for (k, s) in steps.iter().enumerate() {
        let new_group = k == 0 || s.index != steps[k - 1].index + 1;
        let p = &params[k];
        if new_group {
            let bp = p.beat_period;
            group_secs += bp * (s.tick - prev_tick) as f64 / tpb;
            prev_tick = s.tick;
            map.points.push((s.tick, group_secs, bp));
        }
        notes.push(PerformedNote {
            pitch: s.pitch,
            onset: group_secs - p.timing * p.beat_period,
            duration: s.duration_ticks as f64 / tpb * p.articulation * p.beat_period,
            velocity: p.velocity,
        });
    }
    let beat_times = beats.iter().map(|&b| map.at(b)).collect();
    Ok(Timeline {
        notes,
        params,
        beat_times,
    })
}

/// Renders the performance tokens to performed notes sorted by onset.
///
/// Time zero is the performed time of score beat 0.
pub fn decode_performance(seq: &EcpSequence, spec: &QuantizationSpec) -> Result<Vec<PerformedNote>> {
    let mut notes = performance_timeline(seq, spec)?.notes;
    sort_performed(&mut notes);
    Ok(notes)
}

/// Score-only rendering at a fixed tempo, used for plotting and auditioning
/// sequences without performance tokens.
pub fn nominal_timeline(seq: &EcpSequence, spec: &QuantizationSpec) -> Result<Timeline> {
    let score = decode_score(seq, spec)?;
    let (_, beats) = walk(seq, spec)?;
    let tpb = spec.ticks_per_beat as f64;
    let notes = score
        .iter()
        .map(|n| PerformedNote {
            pitch: n.pitch,
            onset: n.onset * NOMINAL_BEAT_PERIOD,
            duration: n.duration * NOMINAL_BEAT_PERIOD,
            velocity: 64,
        })
        .collect();
    Ok(Timeline {
        notes,
        params: Vec::new(),
        beat_times: beats
            .iter()
            .map(|&b| b as f64 / tpb * NOMINAL_BEAT_PERIOD)
            .collect(),
    })
}
