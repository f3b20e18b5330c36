//! Seeded random score generation for self-tests and gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::score::{Note, NoteId, Score, TimeSignature};
use crate::time::{beat, Beat};
use num_traits::Zero;

/// Generates a random but valid score: up to `max_chords` onsets with up to
/// `max_simultaneous` notes each, random rational spacings, and durations
/// that freely overlap later onsets. Deterministic in `seed`.
pub fn random_score(seed: u64, max_chords: usize, max_simultaneous: usize) -> Score {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut notes = Vec::new();
    let mut onset = Beat::zero();
    let n_chords = rng.gen_range(1..=max_chords.max(1));
    let mut id = 0u32;
    for _ in 0..n_chords {
        let width = rng.gen_range(1..=max_simultaneous.max(1));
        let mut pitches: Vec<i32> = Vec::new();
        for _ in 0..width {
            let ps = rng.gen_range(40..=90);
            // Occasional duplicated pitch stresses unison handling.
            if pitches.contains(&ps) && rng.gen_bool(0.7) {
                continue;
            }
            pitches.push(ps);
        }
        for ps in pitches {
            let dur = random_span(&mut rng);
            id += 1;
            notes.push(Note {
                id: NoteId(id),
                ps,
                on: onset,
                off: onset + dur,
                ql: Beat::zero(),
                measure: (onset.floor().to_integer() / 4).max(0) as usize,
            });
        }
        onset += random_span(&mut rng);
    }
    Score::new(
        "synthetic".into(),
        1,
        vec![TimeSignature { measure: 0, num: 4, den: 4 }],
        0,
        notes,
    )
    .expect("generator produces valid scores")
}

fn random_span(rng: &mut ChaCha8Rng) -> Beat {
    let den = *[1i64, 2, 2, 4].get(rng.gen_range(0..4)).unwrap();
    let num = rng.gen_range(1..=4 * den.min(2));
    beat(num, den)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = random_score(7, 16, 4);
        let b = random_score(7, 16, 4);
        assert_eq!(a.notes(), b.notes());
        assert!(!a.is_empty());
    }
}
