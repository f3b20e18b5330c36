//! Tonal context: per-note scale degrees and chord steps.
//!
//! Both values are derived from notation alone: the scale degree comes from
//! the key signature read as a major key, and the chord step measures the
//! diatonic interval from the root of the note's own chord, taken to be its
//! lowest note.

use crate::chords::{build_chord_sequence, note_places};
use crate::score::Score;

/// Scale degree bucket: 1..=7 are diatonic degrees, 0 is the chromatic
/// catch-all for pitch classes outside the key.
pub const CHROMATIC: usize = 0;

/// Pitch-class offsets of the major scale relative to the tonic.
const MAJOR_STEPS: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];

/// Generic diatonic interval number (1..=7) for each chromatic interval in
/// half steps; 6 half steps reads as a diminished fifth.
const INTERVAL_NUMBER: [usize; 12] = [1, 2, 2, 3, 3, 4, 5, 5, 6, 6, 7, 7];

/// Precomputed per-note tonal values for one score.
#[derive(Debug, Clone)]
pub struct TonalContext {
    sd: Vec<usize>,
    cs: Vec<usize>,
}

impl TonalContext {
    pub fn new(score: &Score) -> Self {
        let tonic = tonic_pitch_class(score.key_signature);
        let sd = score
            .notes()
            .iter()
            .map(|n| scale_degree(n.ps, tonic))
            .collect();
        let chords = build_chord_sequence(score);
        let places = note_places(score, &chords);
        let cs = (0..score.len())
            .map(|i| {
                let chord = &chords[places[i].chord];
                let root = chord.notes.iter().map(|&m| score.note(m).ps).min().unwrap();
                chord_step(score.note(i).ps, root)
            })
            .collect();
        TonalContext { sd, cs }
    }

    /// Scale degree of the note at `idx`: 1..=7, or [`CHROMATIC`].
    pub fn sd(&self, idx: usize) -> usize {
        self.sd[idx]
    }

    /// Chord step of the note at `idx`: diatonic interval number 1..=7 above
    /// the lowest note of its chord.
    pub fn cs(&self, idx: usize) -> usize {
        self.cs[idx]
    }
}

/// Tonic pitch class of a major key with the given number of sharps
/// (positive) or flats (negative).
pub fn tonic_pitch_class(fifths: i32) -> i32 {
    (fifths * 7).rem_euclid(12)
}

fn scale_degree(ps: i32, tonic: i32) -> usize {
    let rel = (ps - tonic).rem_euclid(12);
    MAJOR_STEPS
        .iter()
        .position(|&s| s == rel)
        .map(|p| p + 1)
        .unwrap_or(CHROMATIC)
}

fn chord_step(ps: i32, root: i32) -> usize {
    INTERVAL_NUMBER[((ps - root).rem_euclid(12)) as usize]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::simple_score;
    use crate::time::beats;

    #[test]
    fn c_major_scale_degrees() {
        assert_eq!(tonic_pitch_class(0), 0);
        let tonic = 0;
        // C D E F G A B map to degrees 1..7.
        for (i, ps) in [60, 62, 64, 65, 67, 69, 71].iter().enumerate() {
            assert_eq!(scale_degree(*ps, tonic), i + 1);
        }
        // C# is chromatic in C major.
        assert_eq!(scale_degree(61, tonic), CHROMATIC);
    }

    #[test]
    fn key_signature_shifts_tonic() {
        // Two sharps: D major. F#4 = 66 is degree 3; F natural is chromatic.
        assert_eq!(tonic_pitch_class(2), 2);
        assert_eq!(scale_degree(66, 2), 3);
        assert_eq!(scale_degree(65, 2), CHROMATIC);
        // One flat: F major, B flat = 70 is degree 4.
        assert_eq!(tonic_pitch_class(-1), 5);
        assert_eq!(scale_degree(70, 5), 4);
    }

    #[test]
    fn chord_steps_from_lowest_note() {
        // C-E-G triad: root C, so steps are 1, 3, 5.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 64, beats(0), beats(1)),
            (3, 67, beats(0), beats(1)),
        ]);
        let ctx = TonalContext::new(&s);
        let by_ps = |ps: i32| s.notes().iter().position(|n| n.ps == ps).unwrap();
        assert_eq!(ctx.cs(by_ps(60)), 1);
        assert_eq!(ctx.cs(by_ps(64)), 3);
        assert_eq!(ctx.cs(by_ps(67)), 5);
    }

    #[test]
    fn tritone_reads_as_fifth() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 66, beats(0), beats(1)),
        ]);
        let ctx = TonalContext::new(&s);
        let hi = s.notes().iter().position(|n| n.ps == 66).unwrap();
        assert_eq!(ctx.cs(hi), 5);
    }

    #[test]
    fn octaves_share_degree_and_step() {
        let s = simple_score(&[
            (1, 48, beats(0), beats(1)),
            (2, 60, beats(0), beats(1)),
        ]);
        let ctx = TonalContext::new(&s);
        assert_eq!(ctx.sd(0), ctx.sd(1));
        assert_eq!(ctx.cs(0), 1);
        assert_eq!(ctx.cs(1), 1);
    }
}
