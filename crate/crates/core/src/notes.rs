use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest and highest MIDI pitch of an 88-key piano.
pub const PIANO_LOW: u8 = 21;
pub const PIANO_HIGH: u8 = 108;

/// A notated note. Onset and duration are in beats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNote {
    pub id: String,
    pub pitch: u8,
    pub onset: f64,
    pub duration: f64,
}

impl ScoreNote {
    pub fn new(id: impl Into<String>, pitch: u8, onset: f64, duration: f64) -> Result<Self> {
        let note = Self {
            id: id.into(),
            pitch,
            onset,
            duration,
        };
        note.check()?;
        Ok(note)
    }

    pub fn check(&self) -> Result<()> {
        if !(PIANO_LOW..=PIANO_HIGH).contains(&self.pitch) {
            return Err(Error::InvalidNote(format!(
                "score note {} has pitch {} outside {PIANO_LOW}..={PIANO_HIGH}",
                self.id, self.pitch
            )));
        }
        if !(self.onset.is_finite() && self.onset >= 0.0) {
            return Err(Error::InvalidNote(format!(
                "score note {} has onset {}",
                self.id, self.onset
            )));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::InvalidNote(format!(
                "score note {} has duration {}",
                self.id, self.duration
            )));
        }
        Ok(())
    }
}

/// A played note. Onset and duration are in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformedNote {
    pub pitch: u8,
    pub onset: f64,
    pub duration: f64,
    pub velocity: u8,
}

impl PerformedNote {
    pub fn new(pitch: u8, onset: f64, duration: f64, velocity: u8) -> Result<Self> {
        let note = Self {
            pitch,
            onset,
            duration,
            velocity,
        };
        note.check()?;
        Ok(note)
    }

    pub fn check(&self) -> Result<()> {
        if self.pitch > 127 || self.velocity > 127 {
            return Err(Error::InvalidNote(format!(
                "performed note pitch {} velocity {}",
                self.pitch, self.velocity
            )));
        }
        if !self.onset.is_finite() || !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::InvalidNote(format!(
                "performed note onset {} duration {}",
                self.onset, self.duration
            )));
        }
        Ok(())
    }

    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }
}

/// A score note paired with the performed note that realizes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedNote {
    pub score: ScoreNote,
    pub performed: PerformedNote,
}

impl AlignedNote {
    pub fn new(score: ScoreNote, performed: PerformedNote) -> Result<Self> {
        if score.pitch != performed.pitch {
            return Err(Error::InvalidNote(format!(
                "alignment pairs score pitch {} with performed pitch {}",
                score.pitch, performed.pitch
            )));
        }
        score.check()?;
        performed.check()?;
        Ok(Self { score, performed })
    }
}

/// Sorts notes by onset, then pitch. The sort is stable.
pub fn sort_performed(notes: &mut [PerformedNote]) {
    notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
}

pub fn sort_score(notes: &mut [ScoreNote]) {
    notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
}

pub fn sort_aligned(notes: &mut [AlignedNote]) {
    notes.sort_by(|a, b| {
        a.score
            .onset
            .total_cmp(&b.score.onset)
            .then(a.score.pitch.cmp(&b.score.pitch))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pitch() {
        assert!(ScoreNote::new("a", 20, 0.0, 1.0).is_err());
        assert!(ScoreNote::new("a", 109, 0.0, 1.0).is_err());
        assert!(ScoreNote::new("a", 21, 0.0, 1.0).is_ok());
    }

    #[test]
    fn rejects_non_positive_duration() {
        assert!(ScoreNote::new("a", 60, 0.0, 0.0).is_err());
        assert!(PerformedNote::new(60, 0.0, -1.0, 64).is_err());
    }

    #[test]
    fn alignment_requires_equal_pitch() {
        let s = ScoreNote::new("a", 60, 0.0, 1.0).unwrap();
        let p = PerformedNote::new(61, 0.0, 0.5, 64).unwrap();
        assert!(AlignedNote::new(s, p).is_err());
    }
}
