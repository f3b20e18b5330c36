//! Active-voice bookkeeping during left-to-right separation.
//!
//! An active voice is identified by its last note; everything else about it
//! (its note set, completeness, top/bot boundaries) is derived from the voice
//! graph built so far. The ordered active set runs from the highest voice at
//! index 0 downward, with the empty voice implicitly always available.

use crate::chords::{build_chord_sequence, note_places, Chord, NotePlace};
use crate::graph::VoiceGraph;
use crate::score::Score;
use crate::time::Beat;

/// Mutable state threaded through a left-to-right separation pass.
pub struct SeparationState<'a> {
    pub score: &'a Score,
    pub chords: Vec<Chord>,
    pub places: Vec<NotePlace>,
    pub graph: VoiceGraph,
    /// Ordered active voices, highest first, each named by its last note.
    pub active: Vec<usize>,
    /// Beat horizon: voices whose last offset trails the current onset by
    /// more than this are dropped, and voice note sets are truncated to it.
    pub horizon: Beat,
}

impl<'a> SeparationState<'a> {
    pub fn new(score: &'a Score, horizon: Beat) -> Self {
        let chords = build_chord_sequence(score);
        let places = note_places(score, &chords);
        SeparationState {
            score,
            chords,
            places,
            graph: VoiceGraph::new(score.len()),
            active: Vec::new(),
            horizon,
        }
    }

    /// Rebuilds a state whose graph is already (partially) populated, e.g.
    /// when replaying a gold annotation.
    pub fn with_graph(score: &'a Score, graph: VoiceGraph, horizon: Beat) -> Self {
        let mut s = SeparationState::new(score, horizon);
        s.graph = graph;
        s
    }

    /// Drops active voices whose last note's offset is more than the horizon
    /// before `onset`.
    pub fn apply_horizon(&mut self, onset: Beat) {
        let score = self.score;
        let horizon = self.horizon;
        self.active.retain(|&last| onset - score.note(last).off <= horizon);
    }

    /// A voice is complete while its last note has no out-links yet.
    pub fn is_complete(&self, last: usize) -> bool {
        self.graph.rt(last).is_empty()
    }

    /// Whether the voice ending at `last` overlaps a note starting at `onset`
    /// (strict: the last note is still sounding at that instant).
    pub fn overlaps_onset(&self, last: usize, onset: Beat) -> bool {
        self.score.note(last).off > onset
    }

    /// The notes comprising the voice ending at `last`: the backward closure
    /// through in-links, truncated to the beat horizon of the last note.
    /// Returned in canonical order (onset ascending, then descending pitch).
    pub fn voice_notes(&self, last: usize) -> Vec<usize> {
        let cutoff = self.score.note(last).on - self.horizon;
        let mut seen = vec![false; self.score.len()];
        let mut stack = vec![last];
        seen[last] = true;
        let mut out = Vec::new();
        while let Some(m) = stack.pop() {
            if m == last || self.score.note(m).off >= cutoff {
                out.push(m);
            }
            // Stop descending once onsets fall outside the horizon; anything
            // earlier can only be reached through ever-earlier onsets.
            if self.score.note(m).on < cutoff {
                continue;
            }
            for &p in self.graph.lt(m) {
                if !seen[p] {
                    seen[p] = true;
                    stack.push(p);
                }
            }
        }
        out.sort_by_key(|&m| (self.score.note(m).on, -self.score.note(m).ps, m));
        out
    }

    /// Number of notes in the voice ending at `last`.
    pub fn voice_len(&self, last: usize) -> usize {
        self.voice_notes(last).len()
    }

    /// Consecutive linked note pairs inside one voice's note set.
    fn voice_pairs(&self, notes: &[usize]) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for &a in notes {
            for &b in self.graph.rt(a) {
                if notes.contains(&b) {
                    pairs.push((a, b));
                }
            }
        }
        pairs
    }

    /// Does the note pair `(n1, n2)` cross the voice ending at `v_last`?
    ///
    /// The maximal window subsequence of the voice is bounded by its first
    /// note s1 (onset in [on(n1), on(n2))) and last note sk (onset in
    /// (on(n1), on(n2)]); the pair crosses when the window's endpoints sit on
    /// the same side of both pair notes.
    pub fn crosses(&self, n1: usize, n2: usize, v_last: usize) -> bool {
        let notes = self.voice_notes(v_last);
        self.crosses_in(n1, n2, &notes)
    }

    /// `crosses` over an explicit, canonically ordered voice note list.
    pub fn crosses_in(&self, n1: usize, n2: usize, notes: &[usize]) -> bool {
        let (on1, on2) = (self.score.note(n1).on, self.score.note(n2).on);
        let s1 = notes
            .iter()
            .copied()
            .find(|&m| self.score.note(m).on >= on1 && self.score.note(m).on < on2);
        let sk = notes
            .iter()
            .copied()
            .filter(|&m| self.score.note(m).on > on1 && self.score.note(m).on <= on2)
            .last();
        let (s1, sk) = match (s1, sk) {
            (Some(a), Some(b)) => (a, b),
            _ => return false,
        };
        let (p1, p2) = (self.score.note(n1).ps, self.score.note(n2).ps);
        let (q1, qk) = (self.score.note(s1).ps, self.score.note(sk).ps);
        (q1 >= p1 && qk <= p2) || (q1 <= p1 && qk >= p2)
    }

    /// Is note `n` blocked by the voice ending at `v_last`?
    ///
    /// Situation 1: n's pitch lies strictly between a consecutive pair of the
    /// voice and n starts no later than the pair's first note. Situation 2:
    /// n shares a pitch with either note of some consecutive pair.
    pub fn blocked(&self, n: usize, v_last: usize) -> bool {
        let notes = self.voice_notes(v_last);
        self.blocked_in(n, &notes)
    }

    /// `blocked` over an explicit voice note list.
    pub fn blocked_in(&self, n: usize, notes: &[usize]) -> bool {
        let ps = self.score.note(n).ps;
        for (a, b) in self.voice_pairs(notes) {
            let (pa, pb) = (self.score.note(a).ps, self.score.note(b).ps);
            let situation1 = ps > pa.min(pb)
                && ps < pa.max(pb)
                && self.score.note(n).on <= self.score.note(a).on;
            let situation2 = ps == pa || ps == pb;
            if situation1 || situation2 {
                return true;
            }
        }
        false
    }

    /// Is the last note of the active voice at `pos` blocked by any other
    /// active voice? Partial voices that are prefixes of this voice (their
    /// last note lies inside its note set) don't count: a voice cannot be
    /// blocked by its own past.
    pub fn voice_is_blocked(&self, pos: usize) -> bool {
        self.voice_is_blocked_among(pos, &[])
    }

    /// `voice_is_blocked` with additional blockers discounted: active voices
    /// whose last note lies in `ignore` are treated as absent.
    fn voice_is_blocked_among(&self, pos: usize, ignore: &[usize]) -> bool {
        let last = self.active[pos];
        let own = self.voice_notes(last);
        self.active.iter().enumerate().any(|(i, &u)| {
            i != pos && !own.contains(&u) && !ignore.contains(&u) && self.blocked(last, u)
        })
    }

    /// Would extending the voice ending at `from` with note `n` cross any
    /// active voice other than `from`'s own?
    pub fn extension_crosses(&self, from: usize, n: usize) -> bool {
        self.active.iter().any(|&u| u != from && self.crosses(from, n, u))
    }

    /// top(v) and bot(v): the notes of the voice that sound above (resp.
    /// below) every other voice note overlapping them, truncated to the `k`
    /// most recent. Both lists are ordered most recent first.
    pub fn top_bot(&self, v_last: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
        let notes = self.voice_notes(v_last);
        let mut top = Vec::new();
        let mut bot = Vec::new();
        for &m in notes.iter().rev() {
            let nm = self.score.note(m);
            let mut is_top = true;
            let mut is_bot = true;
            for &p in &notes {
                if p == m {
                    continue;
                }
                let np = self.score.note(p);
                if crate::time::spans_overlap(nm.on, nm.off, np.on, np.off) {
                    if np.ps >= nm.ps {
                        is_top = false;
                    }
                    if np.ps <= nm.ps {
                        is_bot = false;
                    }
                }
            }
            if is_top && top.len() < k {
                top.push(m);
            }
            if is_bot && bot.len() < k {
                bot.push(m);
            }
            if top.len() >= k && bot.len() >= k {
                break;
            }
        }
        (top, bot)
    }

    /// div(u, w): the last note of the most recent voice that diverged into
    /// voices evolving into `u_last` and `w_last`, within the beat horizon.
    pub fn shared_divergent_note(&self, u_last: usize, w_last: usize) -> Option<usize> {
        let au = self.ancestors(u_last);
        let aw = self.ancestors(w_last);
        au.into_iter()
            .filter(|d| aw.contains(d) && self.graph.rt(*d).len() >= 2)
            .max_by_key(|&d| (self.score.note(d).on, self.score.note(d).ps, d))
    }

    /// Strict ancestors of `last` through in-links, horizon-bounded.
    fn ancestors(&self, last: usize) -> Vec<usize> {
        let mut v = self.voice_notes(last);
        v.retain(|&m| m != last);
        v
    }

    /// cr(n, v): how many trailing notes of the voice, walking back from the
    /// last note along the most-salient in-link, share n's pitch.
    pub fn consecutive_repetition(&self, n: usize, v_last: usize) -> usize {
        let ps = self.score.note(n).ps;
        let mut count = 0;
        let mut cur = Some(v_last);
        while let Some(m) = cur {
            if self.score.note(m).ps != ps {
                break;
            }
            count += 1;
            cur = self.graph.lt(m).first().copied();
        }
        count
    }

    /// 1-based position of the active voice at `pos` (vp in feature terms).
    pub fn vp(&self, pos: usize) -> usize {
        pos + 1
    }

    /// 1-based position among complete active voices; partial voices report
    /// the position they would occupy (count of complete voices above, +1).
    pub fn cvp(&self, pos: usize) -> usize {
        1 + self.active[..pos].iter().filter(|&&u| self.is_complete(u)).count()
    }

    /// Nearest complete active voice strictly above `pos`.
    pub fn complete_above(&self, pos: usize) -> Option<usize> {
        (0..pos).rev().find(|&i| self.is_complete(self.active[i]))
    }

    /// Nearest complete active voice strictly below `pos`.
    pub fn complete_below(&self, pos: usize) -> Option<usize> {
        (pos + 1..self.active.len()).find(|&i| self.is_complete(self.active[i]))
    }

    /// Number of complete active voices.
    pub fn complete_count(&self) -> usize {
        self.active.iter().filter(|&&u| self.is_complete(u)).count()
    }

    /// Blocked-skip insertion of a new voice (the envelope insertion rule,
    /// also the fallback phase of the chord insertion procedure): skip over
    /// voices that are blocked or whose last pitch exceeds the new voice's,
    /// insert before the first remaining voice, else append.
    pub fn insert_voice_blocked_skip(&mut self, new_last: usize) {
        let ps = self.score.note(new_last).ps;
        // Voices this new voice extends are its own past, not separate
        // streams: they neither stop the scan nor block other voices while
        // their continuation is being placed.
        let own = self.voice_notes(new_last);
        let mut j = 0;
        while j < self.active.len() {
            let u = self.active[j];
            if !own.contains(&u)
                && !self.voice_is_blocked_among(j, &own)
                && self.score.note(u).ps <= ps
            {
                break;
            }
            j += 1;
        }
        self.active.insert(j, new_last);
    }
}

/// A note-to-voice assignment target: an active voice (by its last note) or
/// the empty voice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Voice(usize),
    Epsilon,
}

impl Target {
    pub fn voice(self) -> Option<usize> {
        match self {
            Target::Voice(v) => Some(v),
            Target::Epsilon => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::simple_score;
    use crate::time::{beat, beats};

    fn idx(s: &Score, id: u32) -> usize {
        s.index_of(crate::score::NoteId(id)).unwrap()
    }

    #[test]
    fn crossing_single_between_note() {
        // Pair (C4@0, E4@2); voice contains only D4@1.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 62, beats(1), beats(1)),
            (3, 64, beats(2), beats(1)),
        ]);
        let st = SeparationState::new(&s, beats(4));
        assert!(st.crosses(idx(&s, 1), idx(&s, 3), idx(&s, 2)));
    }

    #[test]
    fn crossing_needs_maximal_window() {
        // Pair (D4@0, D4@2); voice has F4@1/2 and G4@3/2, both above the
        // pair, so neither pitch condition holds: no cross.
        let s = simple_score(&[
            (1, 62, beats(0), beats(1)),
            (2, 65, beat(1, 2), beats(1)),
            (3, 67, beat(3, 2), beats(1)),
            (4, 62, beats(2), beats(1)),
        ]);
        let mut st = SeparationState::new(&s, beats(4));
        st.graph.add_link(idx(&s, 2), idx(&s, 3));
        assert!(!st.crosses(idx(&s, 1), idx(&s, 4), idx(&s, 3)));
    }

    #[test]
    fn empty_window_never_crosses() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 64, beats(2), beats(1)),
            (3, 72, beats(5), beats(1)),
        ]);
        let st = SeparationState::new(&s, beats(4));
        assert!(!st.crosses(idx(&s, 1), idx(&s, 2), idx(&s, 3)));
    }

    #[test]
    fn blocked_between_and_equal_pitch() {
        let s = simple_score(&[
            (1, 62, beats(0), beats(1)), // D4, the probe
            (2, 60, beats(0), beats(1)), // C4 voice start
            (3, 64, beats(1), beats(1)), // E4 voice continuation
        ]);
        let mut st = SeparationState::new(&s, beats(4));
        st.graph.add_link(idx(&s, 2), idx(&s, 3));
        // Situation 1: D4 strictly between C4 and E4, onset not later.
        assert!(st.blocked(idx(&s, 1), idx(&s, 3)));

        let s2 = simple_score(&[
            (1, 60, beats(0), beats(1)), // C4 probe
            (2, 60, beats(1), beats(1)), // C4 in voice
            (3, 67, beats(2), beats(1)), // G4
        ]);
        let mut st2 = SeparationState::new(&s2, beats(4));
        st2.graph.add_link(idx(&s2, 2), idx(&s2, 3));
        // Situation 2: equal pitch, regardless of onset order.
        assert!(st2.blocked(idx(&s2, 1), idx(&s2, 3)));

        let s3 = simple_score(&[
            (1, 81, beats(0), beats(1)), // A5 probe, far above
            (2, 60, beats(0), beats(1)),
            (3, 64, beats(1), beats(1)),
        ]);
        let mut st3 = SeparationState::new(&s3, beats(4));
        st3.graph.add_link(idx(&s3, 2), idx(&s3, 3));
        assert!(!st3.blocked(idx(&s3, 1), idx(&s3, 3)));
    }

    #[test]
    fn single_note_voice_blocks_nothing() {
        let s = simple_score(&[(1, 62, beats(0), beats(1)), (2, 62, beats(1), beats(1))]);
        let st = SeparationState::new(&s, beats(4));
        assert!(!st.blocked(idx(&s, 1), idx(&s, 2)));
    }

    #[test]
    fn horizon_filter_drops_stale_voices() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)), // ends at 1; chord at 5 -> too old at h=4? 5-1=4, kept
            (2, 64, beats(0), beat(1, 2)), // ends at 1/2; 5 - 1/2 > 4, dropped
        ]);
        let mut st = SeparationState::new(&s, beats(4));
        st.active = vec![idx(&s, 2), idx(&s, 1)];
        st.apply_horizon(beats(5));
        assert_eq!(st.active, vec![idx(&s, 1)]);
    }

    #[test]
    fn top_bot_monophonic_and_overlapping() {
        // Monophonic voice: every note is in both lists.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 62, beats(1), beats(1)),
            (3, 64, beats(2), beats(1)),
        ]);
        let mut st = SeparationState::new(&s, beats(8));
        st.graph.add_link(idx(&s, 1), idx(&s, 2));
        st.graph.add_link(idx(&s, 2), idx(&s, 3));
        let (top, bot) = st.top_bot(idx(&s, 3), 4);
        assert_eq!(top, vec![idx(&s, 3), idx(&s, 2), idx(&s, 1)]);
        assert_eq!(bot, top);

        // Converged voice with two overlapping lines: the upper line fills
        // top, the lower fills bot.
        let s2 = simple_score(&[
            (1, 72, beats(0), beats(2)), // C5, upper
            (2, 60, beats(0), beats(2)), // C4, lower
            (3, 67, beats(2), beats(1)), // G4, convergence point
        ]);
        let mut st2 = SeparationState::new(&s2, beats(8));
        st2.graph.add_link(idx(&s2, 1), idx(&s2, 3));
        st2.graph.add_link(idx(&s2, 2), idx(&s2, 3));
        let (top2, bot2) = st2.top_bot(idx(&s2, 3), 4);
        assert_eq!(top2, vec![idx(&s2, 3), idx(&s2, 1)]);
        assert_eq!(bot2, vec![idx(&s2, 3), idx(&s2, 2)]);
    }

    #[test]
    fn top_bot_truncates_to_k() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 62, beats(1), beats(1)),
        ]);
        let mut st = SeparationState::new(&s, beats(8));
        st.graph.add_link(idx(&s, 1), idx(&s, 2));
        let (top, bot) = st.top_bot(idx(&s, 2), 1);
        assert_eq!(top, vec![idx(&s, 2)]);
        assert_eq!(bot, vec![idx(&s, 2)]);
    }

    #[test]
    fn shared_divergence_direct_and_nested() {
        // d diverges into a and b; later e (reached from a) diverges again.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),  // d
            (2, 64, beats(1), beats(1)),  // a
            (3, 57, beats(1), beats(1)),  // b
            (4, 65, beats(2), beats(1)),  // e (diverges)
            (5, 67, beats(3), beats(1)),  // from e
            (6, 62, beats(3), beats(1)),  // from e
        ]);
        let mut st = SeparationState::new(&s, beats(8));
        st.graph.add_link(idx(&s, 1), idx(&s, 2));
        st.graph.add_link(idx(&s, 1), idx(&s, 3));
        st.graph.add_link(idx(&s, 2), idx(&s, 4));
        st.graph.add_link(idx(&s, 4), idx(&s, 5));
        st.graph.add_link(idx(&s, 4), idx(&s, 6));
        // Voices ending at 5 and 6 share the nested divergence at e.
        assert_eq!(st.shared_divergent_note(idx(&s, 5), idx(&s, 6)), Some(idx(&s, 4)));
        // Voices ending at 5 and 3 share only the older divergence at d.
        assert_eq!(st.shared_divergent_note(idx(&s, 5), idx(&s, 3)), Some(idx(&s, 1)));
        // A voice unrelated to the tree shares nothing.
        let s2 = simple_score(&[(1, 60, beats(0), beats(1)), (2, 62, beats(1), beats(1))]);
        let st2 = SeparationState::new(&s2, beats(8));
        assert_eq!(st2.shared_divergent_note(0, 1), None);
    }

    #[test]
    fn consecutive_repetition_counts_trailing_matches() {
        let s = simple_score(&[
            (1, 62, beats(0), beats(1)),
            (2, 60, beats(1), beats(1)),
            (3, 60, beats(2), beats(1)),
            (4, 60, beats(3), beats(1)),
            (5, 60, beats(4), beats(1)), // probe
        ]);
        let mut st = SeparationState::new(&s, beats(8));
        st.graph.add_link(idx(&s, 1), idx(&s, 2));
        st.graph.add_link(idx(&s, 2), idx(&s, 3));
        st.graph.add_link(idx(&s, 3), idx(&s, 4));
        assert_eq!(st.consecutive_repetition(idx(&s, 5), idx(&s, 4)), 3);
        // Probe of a different pitch: zero.
        assert_eq!(st.consecutive_repetition(idx(&s, 1), idx(&s, 4)), 0);
    }
}
