//! Standard MIDI File reading and writing.
//!
//! Performances are written as a single track at a fixed 120 BPM with 960
//! ticks per quarter note, so one tick is 1/1920 s. Expressive timing lives
//! entirely in the note events. Reading honours arbitrary tempo maps.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use crate::error::{Error, Result};
use crate::notes::{sort_performed, PerformedNote, ScoreNote, PIANO_HIGH, PIANO_LOW};

pub const TICKS_PER_QUARTER: u16 = 960;
pub const MICROS_PER_QUARTER: u32 = 500_000;

/// Ticks per second at the fixed output tempo.
pub const TICKS_PER_SECOND: f64 =
    TICKS_PER_QUARTER as f64 * 1_000_000.0 / MICROS_PER_QUARTER as f64;

/// Serializes notes to SMF bytes. Notes starting before 0 s shift the whole
/// performance so that the earliest onset lands at 0; velocity 0 is written
/// as 1 because a zero-velocity note-on means note-off.
pub fn performance_to_bytes(notes: &[PerformedNote]) -> Result<Vec<u8>> {
    let shift = notes
        .iter()
        .map(|n| n.onset)
        .fold(0.0f64, f64::min)
        .min(0.0);
    // (tick, is_on, key, vel)
    let mut events: Vec<(u64, bool, u8, u8)> = Vec::with_capacity(notes.len() * 2);
    for n in notes {
        n.check()?;
        let on = ((n.onset - shift) * TICKS_PER_SECOND).round() as u64;
        let off = (((n.offset() - shift) * TICKS_PER_SECOND).round() as u64).max(on + 1);
        events.push((on, true, n.pitch, n.velocity.max(1)));
        events.push((off, false, n.pitch, 0));
    }
    // note-offs first at equal ticks so repeated pitches re-trigger cleanly
    events.sort_by_key(|&(tick, on, key, _)| (tick, on, key));

    let mut track = Vec::with_capacity(events.len() + 2);
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(MICROS_PER_QUARTER))),
    });
    let mut last = 0u64;
    for (tick, on, key, vel) in events {
        let delta = u32::try_from(tick - last)
            .ok()
            .filter(|&d| d <= u28::max_value().as_int())
            .ok_or_else(|| Error::Midi(format!("delta of {} ticks is too large", tick - last)))?;
        last = tick;
        let message = if on {
            MidiMessage::NoteOn {
                key: u7::new(key),
                vel: u7::new(vel),
            }
        } else {
            MidiMessage::NoteOff {
                key: u7::new(key),
                vel: u7::new(0),
            }
        };
        track.push(TrackEvent {
            delta: u28::new(delta),
            kind: TrackEventKind::Midi {
                channel: u4::new(0),
                message,
            },
        });
    }
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    });
    let mut smf = Smf::new(Header::new(
        Format::SingleTrack,
        Timing::Metrical(u15::new(TICKS_PER_QUARTER)),
    ));
    smf.tracks.push(track);
    let mut out = Vec::new();
    smf.write_std(&mut out)?;
    Ok(out)
}

pub fn write_performance(notes: &[PerformedNote], path: &Path) -> Result<()> {
    fs::write(path, performance_to_bytes(notes)?)?;
    Ok(())
}

/// A note in raw ticks, before tempo conversion.
#[derive(Debug, Clone, Copy)]
struct RawNote {
    key: u8,
    vel: u8,
    on: u64,
    off: u64,
}

struct Parsed {
    notes: Vec<RawNote>,
    /// (tick, micros per quarter), sorted by tick, starting at tick 0
    tempi: Vec<(u64, u32)>,
    timing: Timing,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let smf = Smf::parse(bytes).map_err(|e| Error::Midi(e.to_string()))?;
    let mut notes = Vec::new();
    let mut tempi = vec![(0u64, MICROS_PER_QUARTER)];
    for track in &smf.tracks {
        let mut tick = 0u64;
        let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
        for ev in track {
            tick += ev.delta.as_int() as u64;
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::Tempo(t)) => tempi.push((tick, t.as_int())),
                TrackEventKind::Midi { channel, message } => {
                    let ch = channel.as_int();
                    match message {
                        MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                            open.entry((ch, key.as_int()))
                                .or_default()
                                .push_back((tick, vel.as_int()));
                        }
                        MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                            if let Some((on, vel)) =
                                open.get_mut(&(ch, key.as_int())).and_then(|q| q.pop_front())
                            {
                                notes.push(RawNote {
                                    key: key.as_int(),
                                    vel,
                                    on,
                                    off: tick,
                                });
                            }
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        for ((_, key), queue) in open {
            for (on, vel) in queue {
                notes.push(RawNote {
                    key,
                    vel,
                    on,
                    off: tick.max(on + 1),
                });
            }
        }
    }
    // a tempo event at tick 0 replaces the default
    tempi.sort_by_key(|&(t, _)| t);
    let mut dedup: Vec<(u64, u32)> = Vec::with_capacity(tempi.len());
    for (t, m) in tempi {
        match dedup.last_mut() {
            Some(last) if last.0 == t => last.1 = m,
            _ => dedup.push((t, m)),
        }
    }
    Ok(Parsed {
        notes,
        tempi: dedup,
        timing: smf.header.timing,
    })
}

fn seconds_at(tick: u64, parsed: &Parsed) -> f64 {
    match parsed.timing {
        Timing::Metrical(ppq) => {
            let ppq = ppq.as_int() as f64;
            let mut secs = 0.0;
            let mut prev_tick = 0u64;
            let mut prev_tempo = MICROS_PER_QUARTER;
            for &(t, m) in &parsed.tempi {
                if t >= tick {
                    break;
                }
                secs += (t - prev_tick) as f64 / ppq * prev_tempo as f64 / 1e6;
                prev_tick = t;
                prev_tempo = m;
            }
            secs + (tick - prev_tick) as f64 / ppq * prev_tempo as f64 / 1e6
        }
        Timing::Timecode(fps, sub) => tick as f64 / (fps.as_f32() as f64 * sub as f64),
    }
}

pub fn performance_from_bytes(bytes: &[u8]) -> Result<Vec<PerformedNote>> {
    let parsed = parse(bytes)?;
    let mut out: Vec<PerformedNote> = parsed
        .notes
        .iter()
        .map(|n| {
            let onset = seconds_at(n.on, &parsed);
            PerformedNote {
                pitch: n.key,
                onset,
                duration: (seconds_at(n.off, &parsed) - onset).max(1.0 / TICKS_PER_SECOND),
                velocity: n.vel,
            }
        })
        .collect();
    sort_performed(&mut out);
    Ok(out)
}

pub fn read_performance(path: &Path) -> Result<Vec<PerformedNote>> {
    performance_from_bytes(&fs::read(path)?)
}

/// Reads a MIDI file as a score: one beat per quarter note. Pitches outside
/// the piano range are dropped.
pub fn score_from_bytes(bytes: &[u8]) -> Result<Vec<ScoreNote>> {
    let parsed = parse(bytes)?;
    let Timing::Metrical(ppq) = parsed.timing else {
        return Err(Error::Midi("score files need metrical timing".into()));
    };
    let ppq = ppq.as_int() as f64;
    let mut raw = parsed.notes;
    raw.sort_by_key(|n| (n.on, n.key));
    Ok(raw
        .iter()
        .filter(|n| (PIANO_LOW..=PIANO_HIGH).contains(&n.key))
        .enumerate()
        .map(|(i, n)| ScoreNote {
            id: format!("n{i}"),
            pitch: n.key,
            onset: n.on as f64 / ppq,
            duration: (n.off - n.on).max(1) as f64 / ppq,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_performance_is_valid_midi() {
        let bytes = performance_to_bytes(&[]).unwrap();
        assert!(performance_from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn round_trip_within_a_tick() {
        let notes = vec![
            PerformedNote::new(60, 0.0, 0.5, 80).unwrap(),
            PerformedNote::new(64, 0.0, 0.25, 70).unwrap(),
            PerformedNote::new(60, 0.5, 0.3333, 1).unwrap(),
            PerformedNote::new(72, 1.23456, 2.0, 127).unwrap(),
        ];
        let back = performance_from_bytes(&performance_to_bytes(&notes).unwrap()).unwrap();
        assert_eq!(back.len(), notes.len());
        let mut sorted = notes.clone();
        sort_performed(&mut sorted);
        let tick = 1.0 / TICKS_PER_SECOND;
        for (a, b) in sorted.iter().zip(&back) {
            assert_eq!(a.pitch, b.pitch);
            assert_eq!(a.velocity, b.velocity);
            assert!((a.onset - b.onset).abs() <= tick);
            assert!((a.duration - b.duration).abs() <= 2.0 * tick);
        }
    }

    #[test]
    fn negative_onsets_shift() {
        let notes = vec![
            PerformedNote::new(60, -0.1, 0.5, 80).unwrap(),
            PerformedNote::new(62, 0.4, 0.5, 80).unwrap(),
        ];
        let back = performance_from_bytes(&performance_to_bytes(&notes).unwrap()).unwrap();
        assert_eq!(back[0].onset, 0.0);
        assert!((back[1].onset - 0.5).abs() < 1e-3);
    }

    #[test]
    fn honours_tempo_changes_and_reads_scores() {
        // two quarter notes at 120 BPM, then a tempo change to 60 BPM
        let mut smf = Smf::new(Header::new(Format::SingleTrack, Timing::Metrical(u15::new(480))));
        let on = |key: u8, delta: u32| TrackEvent {
            delta: u28::new(delta),
            kind: TrackEventKind::Midi {
                channel: u4::new(0),
                message: MidiMessage::NoteOn { key: u7::new(key), vel: u7::new(90) },
            },
        };
        let off = |key: u8, delta: u32| TrackEvent {
            delta: u28::new(delta),
            kind: TrackEventKind::Midi {
                channel: u4::new(0),
                message: MidiMessage::NoteOn { key: u7::new(key), vel: u7::new(0) },
            },
        };
        smf.tracks.push(vec![
            on(60, 0),
            off(60, 480),
            TrackEvent {
                delta: u28::new(0),
                kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(1_000_000))),
            },
            on(62, 0),
            off(62, 480),
            on(10, 0),
            off(10, 480),
            TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) },
        ]);
        let mut bytes = Vec::new();
        smf.write_std(&mut bytes).unwrap();
        let perf = performance_from_bytes(&bytes).unwrap();
        assert_eq!(perf.len(), 3);
        assert!((perf[1].onset - 0.5).abs() < 1e-12);
        assert!((perf[1].duration - 1.0).abs() < 1e-12);

        let score = score_from_bytes(&bytes).unwrap();
        assert_eq!(score.len(), 2);
        assert_eq!(score[1].onset, 1.0);
        assert_eq!(score[1].duration, 1.0);
    }
}
