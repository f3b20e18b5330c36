//! Scores, notes, and voice annotations.
//!
//! A [`Score`] is a flat list of pitched notes with exact rational onsets and
//! durations in beats, plus the time/key signature context needed by the
//! metrical and tonal features. An [`AnnotationSet`] is the ground-truth voice
//! structure: directed note-to-note links with optional salience orders at
//! convergence and divergence points.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{beat, beats, is_integer_beat, Beat};

/// Stable external identifier of a note, preserved through (de)serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoteId(pub u32);

impl fmt::Display for NoteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A single pitched event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Note {
    pub id: NoteId,
    /// Pitch in half-step space, C4 = 60.
    pub ps: i32,
    /// Onset in beats from the start of the score.
    pub on: Beat,
    /// Offset in beats; always greater than `on`.
    pub off: Beat,
    /// Duration in quarter lengths, derived from the active time signature.
    pub ql: Beat,
    /// Zero-based measure index.
    pub measure: usize,
}

impl Note {
    /// Duration in beats.
    pub fn bd(&self) -> Beat {
        self.off - self.on
    }
}

/// A time signature taking effect at the start of `measure`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSignature {
    pub measure: usize,
    pub num: u32,
    pub den: u32,
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("note {id}: onset {on} is negative")]
    NegativeOnset { id: NoteId, on: f64 },
    #[error("note {id}: duration must be positive")]
    NonPositiveDuration { id: NoteId },
    #[error("note {id}: pitch {ps} outside [0,127]")]
    PitchOutOfRange { id: NoteId, ps: i32 },
    #[error("duplicate note id {0}")]
    DuplicateId(NoteId),
    #[error("time signature list is empty or does not start at measure 0")]
    BadTimeSignatures,
    #[error("link references unknown note id {0}")]
    UnknownNote(NoteId),
    #[error("link {from}->{to} does not advance in time")]
    NonForwardLink { from: NoteId, to: NoteId },
    #[error("salience list for note {0} does not match its links")]
    BadSalience(NoteId),
}

/// A full symbolic score.
#[derive(Debug, Clone)]
pub struct Score {
    pub title: String,
    /// MusicXML divisions per quarter note; purely contextual.
    pub divisions: u32,
    /// Non-empty, ordered by measure; the first entry applies from measure 0.
    pub time_signatures: Vec<TimeSignature>,
    /// Sharps positive, flats negative.
    pub key_signature: i32,
    notes: Vec<Note>,
    id_index: BTreeMap<NoteId, usize>,
    /// Cumulative beat position of each measure start, one past the last
    /// measure referenced by any note.
    measure_starts: Vec<Beat>,
}

impl Score {
    /// Validates invariants, fills the derived quarter-length field of every
    /// note, and sorts notes by (onset, descending pitch, id).
    pub fn new(
        title: String,
        divisions: u32,
        time_signatures: Vec<TimeSignature>,
        key_signature: i32,
        mut notes: Vec<Note>,
    ) -> Result<Self, ScoreError> {
        if time_signatures.is_empty() || time_signatures[0].measure != 0 {
            return Err(ScoreError::BadTimeSignatures);
        }
        let mut seen = BTreeSet::new();
        for n in &notes {
            if n.on < Beat::zero() {
                return Err(ScoreError::NegativeOnset { id: n.id, on: crate::time::beat_to_f64(n.on) });
            }
            if n.off <= n.on {
                return Err(ScoreError::NonPositiveDuration { id: n.id });
            }
            if !(0..=127).contains(&n.ps) {
                return Err(ScoreError::PitchOutOfRange { id: n.id, ps: n.ps });
            }
            if !seen.insert(n.id) {
                return Err(ScoreError::DuplicateId(n.id));
            }
        }
        notes.sort_by(|a, b| a.on.cmp(&b.on).then(b.ps.cmp(&a.ps)).then(a.id.cmp(&b.id)));

        let max_measure = notes.iter().map(|n| n.measure).max().unwrap_or(0);
        let measure_starts = cumulative_measure_starts(&time_signatures, max_measure + 2);
        for n in &mut notes {
            let den = sig_at(&time_signatures, n.measure).den;
            n.ql = n.bd() * beat(4, den as i64);
        }
        let id_index = notes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        Ok(Score { title, divisions, time_signatures, key_signature, notes, id_index, measure_starts })
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn note(&self, idx: usize) -> &Note {
        &self.notes[idx]
    }

    pub fn index_of(&self, id: NoteId) -> Option<usize> {
        self.id_index.get(&id).copied()
    }

    /// The time signature in effect at `measure`.
    pub fn time_signature_at(&self, measure: usize) -> TimeSignature {
        sig_at(&self.time_signatures, measure)
    }

    /// Beat position of the start of `measure` from the start of the score.
    pub fn measure_start(&self, measure: usize) -> Beat {
        match self.measure_starts.get(measure) {
            Some(b) => *b,
            None => *self.measure_starts.last().expect("at least one measure"),
        }
    }

    /// Position of a note within its measure, in beats.
    pub fn beat_in_measure(&self, idx: usize) -> Beat {
        let n = &self.notes[idx];
        n.on - self.measure_start(n.measure)
    }

    /// Metrical strength of a note's onset. Downbeats are strongest, then the
    /// mid-bar beat of even meters, then remaining beats, then eighth-note
    /// offbeats; anything finer shares the weakest level.
    pub fn beat_strength(&self, idx: usize) -> Beat {
        let pos = self.beat_in_measure(idx);
        let sig = self.time_signature_at(self.notes[idx].measure);
        if pos.is_zero() {
            beats(1)
        } else if sig.num % 2 == 0 && pos == beats(sig.num as i64 / 2) {
            beat(1, 2)
        } else if is_integer_beat(pos) {
            beat(1, 4)
        } else if is_integer_beat(pos * 2) {
            beat(1, 8)
        } else {
            beat(1, 16)
        }
    }
}

fn sig_at(sigs: &[TimeSignature], measure: usize) -> TimeSignature {
    let mut cur = sigs[0];
    for s in sigs {
        if s.measure <= measure {
            cur = *s;
        }
    }
    cur
}

fn cumulative_measure_starts(sigs: &[TimeSignature], count: usize) -> Vec<Beat> {
    let mut starts = Vec::with_capacity(count);
    let mut acc = Beat::zero();
    for m in 0..count {
        starts.push(acc);
        acc += beats(sig_at(sigs, m).num as i64);
    }
    starts
}

/// Ground-truth (or predicted) voice structure over a score's notes.
///
/// `links` are directed from earlier to later notes. `salience` holds, for
/// each convergence or divergence point, the participating note ids ordered
/// most salient first; sources and targets share one list and are told apart
/// by link direction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationSet {
    pub links: BTreeSet<(NoteId, NoteId)>,
    pub salience: BTreeMap<NoteId, Vec<NoteId>>,
}

impl AnnotationSet {
    /// Checks referential integrity and forward motion against a score.
    pub fn validate(&self, score: &Score) -> Result<(), ScoreError> {
        for &(from, to) in &self.links {
            let fi = score.index_of(from).ok_or(ScoreError::UnknownNote(from))?;
            let ti = score.index_of(to).ok_or(ScoreError::UnknownNote(to))?;
            if score.note(fi).on >= score.note(ti).on {
                return Err(ScoreError::NonForwardLink { from, to });
            }
        }
        for (&center, ids) in &self.salience {
            if score.index_of(center).is_none() {
                return Err(ScoreError::UnknownNote(center));
            }
            let mut uniq = BTreeSet::new();
            for &id in ids {
                if !uniq.insert(id) {
                    return Err(ScoreError::BadSalience(center));
                }
                let in_link = self.links.contains(&(id, center));
                let out_link = self.links.contains(&(center, id));
                if !in_link && !out_link {
                    return Err(ScoreError::BadSalience(center));
                }
            }
        }
        Ok(())
    }

    /// In-link sources of `center`, most salient first. Falls back to pitch
    /// order (highest first) for links without an explicit salience entry.
    pub fn ordered_sources(&self, score: &Score, center: NoteId) -> Vec<NoteId> {
        let mut sources: Vec<NoteId> =
            self.links.iter().filter(|(_, t)| *t == center).map(|(s, _)| *s).collect();
        self.order_participants(score, center, &mut sources);
        sources
    }

    /// Out-link targets of `center`, most salient first.
    pub fn ordered_targets(&self, score: &Score, center: NoteId) -> Vec<NoteId> {
        let mut targets: Vec<NoteId> =
            self.links.iter().filter(|(s, _)| *s == center).map(|(_, t)| *t).collect();
        self.order_participants(score, center, &mut targets);
        targets
    }

    fn order_participants(&self, score: &Score, center: NoteId, ids: &mut Vec<NoteId>) {
        let order = self.salience.get(&center);
        ids.sort_by_key(|id| {
            let rank = order
                .and_then(|o| o.iter().position(|x| x == id))
                .unwrap_or(usize::MAX);
            let ps = score.index_of(*id).map(|i| score.note(i).ps).unwrap_or(0);
            (rank, -ps, *id)
        });
    }
}

/// Convenience constructor used widely in tests: quarter-note-beat notes from
/// `(id, ps, onset, duration)` tuples in beats, 4/4 time.
pub fn simple_score(notes: &[(u32, i32, Beat, Beat)]) -> Score {
    let notes = notes
        .iter()
        .map(|&(id, ps, on, dur)| Note {
            id: NoteId(id),
            ps,
            on,
            off: on + dur,
            ql: Beat::zero(),
            measure: (on.floor().to_integer() / 4).max(0) as usize,
        })
        .collect();
    Score::new(
        "test".into(),
        1,
        vec![TimeSignature { measure: 0, num: 4, den: 4 }],
        0,
        notes,
    )
    .expect("valid test score")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn notes_sorted_and_indexed() {
        let s = simple_score(&[
            (1, 60, beats(1), beats(1)),
            (2, 64, beats(0), beats(1)),
            (3, 60, beats(0), beats(1)),
        ]);
        let order: Vec<u32> = s.notes().iter().map(|n| n.id.0).collect();
        assert_eq!(order, vec![2, 3, 1]);
        assert_eq!(s.index_of(NoteId(1)), Some(2));
    }

    #[test]
    fn quarter_lengths_follow_denominator() {
        // In 6/8, one beat is an eighth note: bd 2 -> ql 1.
        let notes = vec![Note {
            id: NoteId(1),
            ps: 60,
            on: beats(0),
            off: beats(2),
            ql: Beat::zero(),
            measure: 0,
        }];
        let s = Score::new(
            "t".into(),
            1,
            vec![TimeSignature { measure: 0, num: 6, den: 8 }],
            0,
            notes,
        )
        .unwrap();
        assert_eq!(s.note(0).ql, beats(1));
    }

    #[test]
    fn beat_strength_hierarchy() {
        let s = simple_score(&[
            (1, 60, beats(0), beat(1, 4)),  // downbeat
            (2, 60, beats(2), beat(1, 4)),  // mid-bar in 4/4
            (3, 60, beats(1), beat(1, 4)),  // ordinary beat
            (4, 60, beat(3, 2), beat(1, 4)), // eighth offbeat
            (5, 60, beat(1, 4), beat(1, 4)), // sixteenth
        ]);
        let strength =
            |id: u32| s.beat_strength(s.index_of(NoteId(id)).unwrap());
        assert_eq!(strength(1), beats(1));
        assert_eq!(strength(2), beat(1, 2));
        assert_eq!(strength(3), beat(1, 4));
        assert_eq!(strength(4), beat(1, 8));
        assert_eq!(strength(5), beat(1, 16));
    }

    #[test]
    fn validation_rejects_backward_links() {
        let s = simple_score(&[(1, 60, beats(0), beats(1)), (2, 62, beats(1), beats(1))]);
        let mut ann = AnnotationSet::default();
        ann.links.insert((NoteId(2), NoteId(1)));
        assert!(ann.validate(&s).is_err());
        let mut ok = AnnotationSet::default();
        ok.links.insert((NoteId(1), NoteId(2)));
        assert!(ok.validate(&s).is_ok());
    }
}
