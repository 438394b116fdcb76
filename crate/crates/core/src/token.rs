use serde::{Deserialize, Serialize};

use crate::notes::{PIANO_HIGH, PIANO_LOW};
use crate::quantize::{
    PerfBins, QuantizationSpec, ARTICULATION_BINS, BEAT_PERIOD_BINS, TIMING_BINS,
    TICKS_PER_BEAT, VELOCITY_BINS,
};

/// Id 0 of every sub-token vocabulary: the field does not apply at this step.
pub const IGNORE: u32 = 0;

// Score sub-token columns.
pub const FAMILY: usize = 0;
pub const BEAT_POSITION: usize = 1;
pub const PITCH: usize = 2;
pub const DURATION: usize = 3;

// Performance sub-token columns.
pub const BEAT_PERIOD: usize = 0;
pub const VELOCITY: usize = 1;
pub const TIMING: usize = 2;
pub const ARTICULATION: usize = 3;

pub const SCORE_FIELD_NAMES: [&str; 4] = ["family", "beat_position", "pitch", "duration"];
pub const PERF_FIELD_NAMES: [&str; 4] = ["beat_period", "velocity", "timing", "articulation"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Bos,
    Eos,
    Metric,
    Note,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Bos, Family::Eos, Family::Metric, Family::Note];

    pub fn id(self) -> u32 {
        match self {
            Family::Bos => 1,
            Family::Eos => 2,
            Family::Metric => 3,
            Family::Note => 4,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.id() == id)
    }
}

/// `Beat` opens a new beat and doubles as position 0; `Pos(k)` is tick `k`
/// (1..=23) inside the current beat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BeatPosition {
    Beat,
    Pos(u8),
}

impl BeatPosition {
    pub fn id(self) -> u32 {
        match self {
            BeatPosition::Beat => 1,
            BeatPosition::Pos(k) => k as u32 + 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(BeatPosition::Beat),
            k if k >= 2 && k <= TICKS_PER_BEAT => Some(BeatPosition::Pos((k - 1) as u8)),
            _ => None,
        }
    }

    pub fn tick(self) -> u32 {
        match self {
            BeatPosition::Beat => 0,
            BeatPosition::Pos(k) => k as u32,
        }
    }
}

/// Vocabulary sizes per sub-token, IGNORE included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub score: [usize; 4],
    pub perf: [usize; 4],
}

impl Vocabulary {
    pub fn from_spec(spec: &QuantizationSpec) -> Self {
        Self {
            score: [
                1 + Family::ALL.len(),
                1 + TICKS_PER_BEAT as usize,
                1 + (PIANO_HIGH - PIANO_LOW + 1) as usize,
                1 + spec.durations.len(),
            ],
            perf: [
                1 + spec.beat_period.bins(),
                1 + VELOCITY_BINS,
                1 + spec.timing.bins(),
                1 + spec.articulation.bins(),
            ],
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            score: [5, 25, 89, 52],
            perf: [
                1 + BEAT_PERIOD_BINS,
                1 + VELOCITY_BINS,
                1 + TIMING_BINS,
                1 + ARTICULATION_BINS,
            ],
        }
    }
}

pub fn pitch_id(pitch: u8) -> u32 {
    (pitch - PIANO_LOW) as u32 + 1
}

pub fn pitch_from_id(id: u32) -> Option<u8> {
    (1..=(PIANO_HIGH - PIANO_LOW + 1) as u32)
        .contains(&id)
        .then(|| (id - 1) as u8 + PIANO_LOW)
}

/// One time step: four score and four performance sub-token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CompoundToken {
    pub score: [u32; 4],
    pub perf: [u32; 4],
}

impl CompoundToken {
    pub fn bos() -> Self {
        Self {
            score: [Family::Bos.id(), IGNORE, IGNORE, IGNORE],
            perf: [IGNORE; 4],
        }
    }

    pub fn eos() -> Self {
        Self {
            score: [Family::Eos.id(), IGNORE, IGNORE, IGNORE],
            perf: [IGNORE; 4],
        }
    }

    pub fn metric(position: BeatPosition) -> Self {
        Self {
            score: [Family::Metric.id(), position.id(), IGNORE, IGNORE],
            perf: [IGNORE; 4],
        }
    }

    pub fn note(pitch: u8, duration_index: usize, perf: Option<PerfBins>) -> Self {
        let perf = perf.map_or([IGNORE; 4], |b| b.as_array().map(|x| x as u32 + 1));
        Self {
            score: [
                Family::Note.id(),
                IGNORE,
                pitch_id(pitch),
                duration_index as u32 + 1,
            ],
            perf,
        }
    }

    pub fn family(&self) -> Option<Family> {
        Family::from_id(self.score[FAMILY])
    }

    pub fn is(&self, family: Family) -> bool {
        self.score[FAMILY] == family.id()
    }

    pub fn beat_position(&self) -> Option<BeatPosition> {
        BeatPosition::from_id(self.score[BEAT_POSITION])
    }

    pub fn is_beat(&self) -> bool {
        self.is(Family::Metric) && self.beat_position() == Some(BeatPosition::Beat)
    }

    pub fn pitch(&self) -> Option<u8> {
        pitch_from_id(self.score[PITCH])
    }

    pub fn duration_index(&self) -> Option<usize> {
        self.score[DURATION].checked_sub(1).map(|d| d as usize)
    }

    /// Performance bins, or `None` if any performance id is IGNORE.
    pub fn perf_bins(&self) -> Option<PerfBins> {
        if self.perf.contains(&IGNORE) {
            return None;
        }
        Some(PerfBins::from_array(self.perf.map(|x| (x - 1) as usize)))
    }

    pub fn ids(&self) -> [u32; 8] {
        let mut out = [0; 8];
        out[..4].copy_from_slice(&self.score);
        out[4..].copy_from_slice(&self.perf);
        out
    }

    pub fn from_ids(ids: [u32; 8]) -> Self {
        Self {
            score: [ids[0], ids[1], ids[2], ids[3]],
            perf: [ids[4], ids[5], ids[6], ids[7]],
        }
    }

    pub fn strip_performance(mut self) -> Self {
        self.perf = [IGNORE; 4];
        self
    }
}

/// A compound-token sequence with its real-valued expressive parameters.
///
/// `pv[i]` holds `[beat_period, velocity, timing, articulation]` for note
/// steps and zeros elsewhere.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EcpSequence {
    pub tokens: Vec<CompoundToken>,
    pub pv: Vec<[f32; 4]>,
}

impl EcpSequence {
    pub fn from_tokens(tokens: Vec<CompoundToken>) -> Self {
        let pv = vec![[0.0; 4]; tokens.len()];
        Self { tokens, pv }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn note_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is(Family::Note)).count()
    }

    pub fn beat_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_beat()).count()
    }

    /// True when every note step carries performance ids.
    pub fn has_performance(&self) -> bool {
        self.tokens
            .iter()
            .filter(|t| t.is(Family::Note))
            .all(|t| t.perf_bins().is_some())
    }

    /// Beat index of every step: 0 before the first beat marker, then
    /// incremented at each `METRIC(BEAT)`.
    pub fn beat_segment_ids(&self) -> Vec<u32> {
        let mut current = 0u32;
        self.tokens
            .iter()
            .map(|t| {
                if t.is_beat() {
                    current += 1;
                }
                current
            })
            .collect()
    }

    pub fn score_only(&self) -> Self {
        Self {
            tokens: self.tokens.iter().map(|t| t.strip_performance()).collect(),
            pv: vec![[0.0; 4]; self.tokens.len()],
        }
    }
}
