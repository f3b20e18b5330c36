//! Chord-sequence construction: maximal same-onset note groups.

use crate::score::Score;
use crate::time::Beat;

/// A maximal group of notes sharing one onset. `notes` holds indices into the
/// score's note list, sorted by descending pitch with ties broken by note id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chord {
    pub onset: Beat,
    pub notes: Vec<usize>,
    /// 1-based position in the chord sequence.
    pub sp: usize,
}

/// Per-note location within the chord sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotePlace {
    /// 0-based index of the containing chord.
    pub chord: usize,
    /// 1-based position within the chord, 1 = highest pitch.
    pub cp: usize,
}

/// Groups a score's notes into onset-ordered chords.
///
/// Chord boundaries are distinct onsets only; offsets never split chords.
pub fn build_chord_sequence(score: &Score) -> Vec<Chord> {
    let mut chords: Vec<Chord> = Vec::new();
    for (idx, note) in score.notes().iter().enumerate() {
        match chords.last_mut() {
            Some(c) if c.onset == note.on => c.notes.push(idx),
            _ => chords.push(Chord { onset: note.on, notes: vec![idx], sp: chords.len() + 1 }),
        }
    }
    // Score notes are already sorted (onset, descending ps, id), so each
    // chord's note list is in descending pitch order by construction.
    chords
}

/// Inverts a chord sequence into per-note places.
pub fn note_places(score: &Score, chords: &[Chord]) -> Vec<NotePlace> {
    let mut places = vec![NotePlace { chord: 0, cp: 0 }; score.len()];
    for (ci, chord) in chords.iter().enumerate() {
        for (pos, &n) in chord.notes.iter().enumerate() {
            places[n] = NotePlace { chord: ci, cp: pos + 1 };
        }
    }
    places
}

/// The chord neighbor directly above a note (smaller cp), if any.
pub fn above(chords: &[Chord], place: NotePlace) -> Option<usize> {
    let c = &chords[place.chord];
    if place.cp >= 2 {
        Some(c.notes[place.cp - 2])
    } else {
        None
    }
}

/// The chord neighbor directly below a note (larger cp), if any.
pub fn below(chords: &[Chord], place: NotePlace) -> Option<usize> {
    let c = &chords[place.chord];
    c.notes.get(place.cp).copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::simple_score;
    use crate::time::beats;

    #[test]
    fn groups_by_onset_descending_pitch() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)), // C4
            (2, 64, beats(0), beats(1)), // E4
            (3, 67, beats(1), beats(1)), // G4
        ]);
        let chords = build_chord_sequence(&s);
        assert_eq!(chords.len(), 2);
        let first: Vec<i32> = chords[0].notes.iter().map(|&i| s.note(i).ps).collect();
        assert_eq!(first, vec![64, 60]);
        assert_eq!(chords[0].sp, 1);
        assert_eq!(chords[1].sp, 2);
        assert_eq!(s.note(chords[1].notes[0]).ps, 67);
    }

    #[test]
    fn empty_score_gives_empty_sequence() {
        let s = simple_score(&[]);
        assert!(build_chord_sequence(&s).is_empty());
    }

    #[test]
    fn chord_lists_partition_the_notes() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(2)),
            (2, 62, beats(1), beats(1)),
            (3, 65, beats(1), beats(1)),
            (4, 59, beats(3), beats(1)),
        ]);
        let chords = build_chord_sequence(&s);
        let mut all: Vec<usize> = chords.iter().flat_map(|c| c.notes.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..s.len()).collect::<Vec<_>>());
    }

    #[test]
    fn neighbors_within_chord() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 64, beats(0), beats(1)),
            (3, 67, beats(0), beats(1)),
        ]);
        let chords = build_chord_sequence(&s);
        let places = note_places(&s, &chords);
        let idx_of = |ps: i32| s.notes().iter().position(|n| n.ps == ps).unwrap();
        let mid = idx_of(64);
        assert_eq!(above(&chords, places[mid]), Some(idx_of(67)));
        assert_eq!(below(&chords, places[mid]), Some(idx_of(60)));
        assert_eq!(above(&chords, places[idx_of(67)]), None);
        assert_eq!(below(&chords, places[idx_of(60)]), None);
    }
}
