//! Envelope extraction: the rule-based one-to-one baseline.
//!
//! Two formulations of the same procedure: a multi-pass extractor that
//! repeatedly peels off the topmost monophonic sequence of non-overlapping
//! notes, and a single left-to-right pass that assigns each chord's notes to
//! the ordered non-overlapping active voices. Both produce the same link set.

use crate::graph::VoiceGraph;
use crate::pseudo::{detect_chains, ChainSet, CHAIN_MIN_LEN};
use crate::score::Score;
use crate::time::beats;
use crate::voices::{SeparationState, Target};

/// Horizon large enough to never expire a voice; the envelope model keeps
/// every active voice alive for the whole piece.
fn unbounded_horizon() -> crate::time::Beat {
    beats(i64::MAX / 4)
}

/// Single-pass assignment formulation. Returns the voice graph and the
/// note-to-voice pair set in assignment order; the pair records the voice by
/// its pre-extension last note.
pub fn envelope_assign(score: &Score) -> (VoiceGraph, Vec<(usize, Target)>) {
    envelope_assign_masked(score, &vec![true; score.len()])
}

/// `envelope_assign` that also snapshots the ordered active set after each
/// chord, for comparing orderings against other separation procedures.
pub fn envelope_assign_traced(
    score: &Score,
) -> (VoiceGraph, Vec<(usize, Target)>, Vec<Vec<usize>>) {
    let mut trace = Vec::new();
    let (graph, pairs) =
        envelope_assign_inner(score, &vec![true; score.len()], &mut |st: &SeparationState| {
            trace.push(st.active.clone())
        });
    (graph, pairs, trace)
}

fn envelope_assign_masked(score: &Score, include: &[bool]) -> (VoiceGraph, Vec<(usize, Target)>) {
    envelope_assign_inner(score, include, &mut |_| {})
}

fn envelope_assign_inner(
    score: &Score,
    include: &[bool],
    observe: &mut dyn FnMut(&SeparationState),
) -> (VoiceGraph, Vec<(usize, Target)>) {
    let mut st = SeparationState::new(score, unbounded_horizon());
    st.chords.retain_mut(|c| {
        c.notes.retain(|&n| include[n]);
        !c.notes.is_empty()
    });
    let mut pairs = Vec::new();
    for t in 0..st.chords.len() {
        let chord = st.chords[t].clone();
        // Snapshot of non-overlapping voices in order; these are the
        // assignment targets for this chord's notes.
        let nonov: Vec<usize> = st
            .active
            .iter()
            .copied()
            .filter(|&v| !st.overlaps_onset(v, chord.onset))
            .collect();
        let m = nonov.len().min(chord.notes.len());
        let mut deferred: Vec<(usize, usize)> = Vec::new();
        for j in 0..m {
            let parent = nonov[j];
            let n = chord.notes[j];
            st.graph.add_link(parent, n);
            pairs.push((n, Target::Voice(parent)));
            if st.extension_crosses(parent, n) {
                deferred.push((parent, n));
            } else {
                let pos = st.active.iter().position(|&v| v == parent).expect("active voice");
                st.active[pos] = n;
            }
        }
        for (parent, n) in deferred {
            let pos = st.active.iter().position(|&v| v == parent).expect("active voice");
            st.active.remove(pos);
            st.insert_voice_blocked_skip(n);
        }
        for j in m..chord.notes.len() {
            let n = chord.notes[j];
            pairs.push((n, Target::Epsilon));
            st.insert_voice_blocked_skip(n);
        }
        observe(&st);
    }
    (st.graph, pairs)
}

/// Multi-pass formulation: extract the top envelope, remove it, repeat.
///
/// Within a pass the envelope walks onsets left to right, carrying the most
/// recently selected note. The highest remaining note at each onset joins
/// the envelope when the carried note has ended; overlapped lower notes are
/// left for a later pass; notes that start a voice above (including equal
/// pitches stacking upward and crossings that climb back over) move the
/// envelope up. What counts as "topmost" among the leftovers of earlier
/// passes still depends on blocking pairs inside the already extracted
/// voices, so the walk keeps every lane in view and each pass claims the
/// highest lane not yet extracted.
///
/// This is an independent re-implementation of the voice ordering — it
/// shares no simulation code with `envelope_assign` — and the two are held
/// to exact link-set equality by tests.
pub fn envelope_multipass(score: &Score) -> VoiceGraph {
    envelope_multipass_masked(score, &vec![true; score.len()])
}

fn envelope_multipass_masked(score: &Score, include: &[bool]) -> VoiceGraph {
    let mut graph = VoiceGraph::new(score.len());
    for lane in walk_lanes(score, include) {
        for w in lane.windows(2) {
            graph.add_link(w[0], w[1]);
        }
    }
    graph
}

/// Walks the onsets left to right, growing an ordered stack of monophonic
/// lanes (highest first). Returns the lanes in final stack order: the first
/// is the top envelope, the second is the top envelope of what remains once
/// the first is removed (with extracted notes still visible for blocking and
/// ordering), and so on.
fn walk_lanes(score: &Score, include: &[bool]) -> Vec<Vec<usize>> {
    let mut lanes: Vec<Vec<usize>> = Vec::new();
    let mut stack: Vec<usize> = Vec::new(); // lane ids, top first

    let last = |lanes: &Vec<Vec<usize>>, lane: usize| *lanes[lane].last().unwrap();
    // Does the link (a, b) pass through lane `u`'s window between the two
    // onsets? The window runs from the first note of `u` sounding at or
    // after `a` (exclusive of `b`) to the last note at or before `b`
    // (exclusive of `a`); the link crosses when the window starts on one
    // side and ends on the other, boundaries included.
    let link_crosses = |lanes: &Vec<Vec<usize>>, u: usize, a: usize, b: usize| {
        let (on_a, on_b) = (score.note(a).on, score.note(b).on);
        let s1 = lanes[u]
            .iter()
            .find(|&&m| score.note(m).on >= on_a && score.note(m).on < on_b);
        let sk = lanes[u]
            .iter()
            .rev()
            .find(|&&m| score.note(m).on > on_a && score.note(m).on <= on_b);
        match (s1, sk) {
            (Some(&s1), Some(&sk)) => {
                let (p1, pk) = (score.note(s1).ps, score.note(sk).ps);
                let (pa, pb) = (score.note(a).ps, score.note(b).ps);
                (p1 >= pa && pk <= pb) || (p1 <= pa && pk >= pb)
            }
            _ => false,
        }
    };
    // Is note `n` blocked by some consecutive pair (a, b) of lane `u`?
    // Either n sits strictly between their pitches and starts no later than
    // `a`, or n repeats the pitch of one of them.
    let blocked_by = |lanes: &Vec<Vec<usize>>, u: usize, n: usize| {
        lanes[u].windows(2).any(|w| {
            let (pa, pb) = (score.note(w[0]).ps, score.note(w[1]).ps);
            let ps = score.note(n).ps;
            let between = ps > pa.min(pb) && ps < pa.max(pb);
            (between && score.note(n).on <= score.note(w[0]).on) || ps == pa || ps == pb
        })
    };

    let mut i = 0;
    let order: Vec<usize> = (0..score.len()).filter(|&n| include[n]).collect();
    while i < order.len() {
        let onset = score.note(order[i]).on;
        let mut chord: Vec<usize> = Vec::new();
        while i < order.len() && score.note(order[i]).on == onset {
            chord.push(order[i]);
            i += 1;
        }
        // Lanes whose last note has ended take this chord's notes, top lane
        // to highest note and so on down.
        let open: Vec<usize> = stack
            .iter()
            .copied()
            .filter(|&u| score.note(last(&lanes, u)).off <= onset)
            .collect();
        let m = open.len().min(chord.len());
        let insert = |lanes: &Vec<Vec<usize>>, stack: &mut Vec<usize>, lane: usize| {
            let ps = score.note(last(lanes, lane)).ps;
            let mut j = 0;
            while j < stack.len() {
                let o = stack[j];
                let shadowed = stack
                    .iter()
                    .any(|&w| w != o && blocked_by(lanes, w, last(lanes, o)));
                if !shadowed && score.note(last(lanes, o)).ps <= ps {
                    break;
                }
                j += 1;
            }
            stack.insert(j, lane);
        };
        let mut rerank: Vec<(usize, usize)> = Vec::new();
        for j in 0..m {
            let u = open[j];
            let n = chord[j];
            let from = last(&lanes, u);
            // A continuation that cuts through another lane loses its stack
            // position and is re-ranked below; until then the other lanes
            // still see it ending at its old note.
            if stack.iter().any(|&w| w != u && link_crosses(&lanes, w, from, n)) {
                rerank.push((u, n));
            } else {
                lanes[u].push(n);
            }
        }
        for (u, n) in rerank {
            lanes[u].push(n);
            stack.retain(|&w| w != u);
            insert(&lanes, &mut stack, u);
        }
        for &n in &chord[m..] {
            lanes.push(vec![n]);
            insert(&lanes, &mut stack, lanes.len() - 1);
        }
    }
    stack.into_iter().map(|u| std::mem::take(&mut lanes[u])).collect()
}

/// The envelope engine as used by the toolkit: pseudo-polyphonic repeat
/// chains are pre-linked into their own voices and excluded from the
/// envelope passes.
pub fn separate_envelope(score: &Score) -> VoiceGraph {
    let chains = detect_chains(score, CHAIN_MIN_LEN);
    separate_envelope_with(score, &chains)
}

pub fn separate_envelope_with(score: &Score, chains: &ChainSet) -> VoiceGraph {
    let include: Vec<bool> = (0..score.len()).map(|n| !chains.pp_note(n)).collect();
    let (mut graph, _) = envelope_assign_masked(score, &include);
    for chain in &chains.chains {
        for w in chain.windows(2) {
            graph.add_link(w[0], w[1]);
        }
    }
    graph
}
