use std::fmt;

use serde::{Serialize, Serializer};

use crate::token::{
    BeatPosition, CompoundToken, EcpSequence, Family, Vocabulary, BEAT_POSITION, DURATION,
    FAMILY, IGNORE, PITCH,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    EmptySequence,
    IdOutOfRange,
    FamilyMissing,
    BosFirst,
    BosMisplaced,
    EosNotLast,
    EosDuplicate,
    IdsForbiddenOnSentinel,
    PositionRequiredOnMetric,
    ScoreIdsForbiddenOnMetric,
    PositionBeforeBeat,
    ScoreIdsRequiredOnNote,
    PositionForbiddenOnNote,
    PerfIdsRequiredOnNote,
    PerfIdsForbiddenOffNote,
    NoteWithoutMetric,
    PvLengthMismatch,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::EmptySequence => "empty-sequence",
            Rule::IdOutOfRange => "id-out-of-range",
            Rule::FamilyMissing => "family-missing",
            Rule::BosFirst => "bos-first",
            Rule::BosMisplaced => "bos-misplaced",
            Rule::EosNotLast => "eos-not-last",
            Rule::EosDuplicate => "eos-duplicate",
            Rule::IdsForbiddenOnSentinel => "ids-forbidden-on-sentinel",
            Rule::PositionRequiredOnMetric => "position-required-on-metric",
            Rule::ScoreIdsForbiddenOnMetric => "score-ids-forbidden-on-metric",
            Rule::PositionBeforeBeat => "position-before-beat",
            Rule::ScoreIdsRequiredOnNote => "score-ids-required-on-note",
            Rule::PositionForbiddenOnNote => "position-forbidden-on-note",
            Rule::PerfIdsRequiredOnNote => "perf-ids-required-on-note",
            Rule::PerfIdsForbiddenOffNote => "perf-ids-forbidden-off-note",
            Rule::NoteWithoutMetric => "note-without-metric",
            Rule::PvLengthMismatch => "pv-length-mismatch",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Rule {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub index: usize,
    pub rule: Rule,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at token {}", self.rule, self.index)
    }
}

/// Checks every token and sequence invariant of a performance sequence.
/// Returns an empty list iff the sequence is well formed.
pub fn validate_grammar(seq: &EcpSequence) -> Vec<Diagnostic> {
    validate(seq, true)
}

/// Like [`validate_grammar`] but accepts note steps without performance ids,
/// as produced for score-only corpora.
pub fn validate_score_grammar(seq: &EcpSequence) -> Vec<Diagnostic> {
    validate(seq, false)
}

fn validate(seq: &EcpSequence, require_performance: bool) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |index, rule| out.push(Diagnostic { index, rule });
    let tokens = &seq.tokens;
    if tokens.is_empty() {
        push(0, Rule::EmptySequence);
        return out;
    }
    if seq.pv.len() != tokens.len() {
        push(seq.pv.len().min(tokens.len()), Rule::PvLengthMismatch);
    }
    let vocab = Vocabulary::default();
    let last = tokens.len() - 1;
    let mut seen_beat = false;
    let mut seen_eos = false;
    for (i, t) in tokens.iter().enumerate() {
        if !ids_in_range(t, &vocab) {
            push(i, Rule::IdOutOfRange);
            continue;
        }
        let perf_set = t.perf.iter().any(|&x| x != IGNORE);
        match t.family() {
            None => push(i, Rule::FamilyMissing),
            Some(Family::Bos) => {
                if i != 0 {
                    push(i, Rule::BosMisplaced);
                }
                if t.score[1..].iter().any(|&x| x != IGNORE) || perf_set {
                    push(i, Rule::IdsForbiddenOnSentinel);
                }
            }
            Some(Family::Eos) => {
                if seen_eos {
                    push(i, Rule::EosDuplicate);
                } else if i != last {
                    push(i, Rule::EosNotLast);
                }
                seen_eos = true;
                if t.score[1..].iter().any(|&x| x != IGNORE) || perf_set {
                    push(i, Rule::IdsForbiddenOnSentinel);
                }
            }
            Some(Family::Metric) => {
                match t.beat_position() {
                    None => push(i, Rule::PositionRequiredOnMetric),
                    Some(BeatPosition::Beat) => seen_beat = true,
                    Some(BeatPosition::Pos(_)) if !seen_beat => push(i, Rule::PositionBeforeBeat),
                    Some(BeatPosition::Pos(_)) => {}
                }
                if t.score[PITCH] != IGNORE || t.score[DURATION] != IGNORE {
                    push(i, Rule::ScoreIdsForbiddenOnMetric);
                }
                if perf_set {
                    push(i, Rule::PerfIdsForbiddenOffNote);
                }
            }
            Some(Family::Note) => {
                if t.score[PITCH] == IGNORE || t.score[DURATION] == IGNORE {
                    push(i, Rule::ScoreIdsRequiredOnNote);
                }
                if t.score[BEAT_POSITION] != IGNORE {
                    push(i, Rule::PositionForbiddenOnNote);
                }
                if require_performance && t.perf.contains(&IGNORE) {
                    push(i, Rule::PerfIdsRequiredOnNote);
                }
                if !seen_beat {
                    push(i, Rule::NoteWithoutMetric);
                }
            }
        }
        if i == 0 && t.score[FAMILY] != Family::Bos.id() {
            push(0, Rule::BosFirst);
        }
        if t.score[FAMILY] != Family::Note.id() {
            if let Some(row) = seq.pv.get(i) {
                if row.iter().any(|&x| x != 0.0) {
                    push(i, Rule::PerfIdsForbiddenOffNote);
                }
            }
        }
    }
    out
}

fn ids_in_range(t: &CompoundToken, vocab: &Vocabulary) -> bool {
    t.score.iter().zip(vocab.score).all(|(&x, n)| (x as usize) < n)
        && t.perf.iter().zip(vocab.perf).all(|(&x, n)| (x as usize) < n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::PerfBins;

    fn bins() -> PerfBins {
        PerfBins {
            beat_period: 80,
            velocity: 16,
            timing: 20,
            articulation: 40,
        }
    }

    fn well_formed() -> EcpSequence {
        EcpSequence::from_tokens(vec![
            CompoundToken::bos(),
            CompoundToken::metric(BeatPosition::Beat),
            CompoundToken::note(60, 23, Some(bins())),
            CompoundToken::eos(),
        ])
    }

    fn rules(seq: &EcpSequence) -> Vec<&'static str> {
        validate_grammar(seq).iter().map(|d| d.rule.as_str()).collect()
    }

    #[test]
    fn accepts_well_formed() {
        assert!(validate_grammar(&well_formed()).is_empty());
        let bare = EcpSequence::from_tokens(vec![CompoundToken::bos(), CompoundToken::eos()]);
        assert!(validate_grammar(&bare).is_empty());
    }

    #[test]
    fn note_needs_performance_ids() {
        let mut seq = well_formed();
        seq.tokens[2].perf[1] = IGNORE;
        let d = validate_grammar(&seq);
        assert_eq!(d, vec![Diagnostic { index: 2, rule: Rule::PerfIdsRequiredOnNote }]);
        assert_eq!(d[0].rule.as_str(), "perf-ids-required-on-note");
        assert!(validate_score_grammar(&seq).is_empty());
    }

    #[test]
    fn metric_rejects_score_ids() {
        let mut seq = well_formed();
        seq.tokens[1].score[PITCH] = 40;
        assert_eq!(rules(&seq), vec!["score-ids-forbidden-on-metric"]);
    }

    #[test]
    fn sentinel_and_order_rules() {
        let mut seq = well_formed();
        seq.tokens.insert(2, CompoundToken::eos());
        seq.pv.push([0.0; 4]);
        assert_eq!(rules(&seq), vec!["eos-not-last", "eos-duplicate"]);

        let seq = EcpSequence::from_tokens(vec![
            CompoundToken::metric(BeatPosition::Beat),
            CompoundToken::bos(),
        ]);
        assert_eq!(rules(&seq), vec!["bos-first", "bos-misplaced"]);
    }

    #[test]
    fn note_before_any_beat() {
        let seq = EcpSequence::from_tokens(vec![
            CompoundToken::bos(),
            CompoundToken::note(60, 3, Some(bins())),
        ]);
        assert_eq!(rules(&seq), vec!["note-without-metric"]);
        let seq = EcpSequence::from_tokens(vec![
            CompoundToken::bos(),
            CompoundToken::metric(BeatPosition::Pos(3)),
        ]);
        assert_eq!(rules(&seq), vec!["position-before-beat"]);
    }

    #[test]
    fn out_of_range_ids() {
        let mut seq = well_formed();
        seq.tokens[2].perf[0] = 162;
        assert_eq!(rules(&seq), vec!["id-out-of-range"]);
    }

    #[test]
    fn perf_ids_off_note() {
        let mut seq = well_formed();
        seq.tokens[1].perf = [1, 1, 1, 1];
        assert_eq!(rules(&seq), vec!["perf-ids-forbidden-off-note"]);
        let mut seq = well_formed();
        seq.pv[1] = [0.5, 0.0, 0.0, 0.0];
        assert_eq!(rules(&seq), vec!["perf-ids-forbidden-off-note"]);
    }

    #[test]
    fn empty_is_reported() {
        assert_eq!(rules(&EcpSequence::default()), vec!["empty-sequence"]);
    }
}
