//! Chord-level feature extraction for joint assignments.
//!
//! The chord-level model scores a whole chord's assignment at once. Its
//! input decomposes into three families: convergence vectors Φ(n, v⃗) for a
//! note paired with the ordered voices converging on it, divergence vectors
//! Φ(n⃗, v) for a voice diverging into an ordered note set, and a single
//! assignment vector Φ(c_t, j) summarizing the joint assignment. The raw /
//! dense split mirrors the note-level module: extraction yields optional
//! reals aligned with the slot lists below, and a fitted group configuration
//! encodes them.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use num_traits::Signed;

use crate::config::{dir_value, NullPolicy, SlotKind, SlotSpec};
use crate::features::FeatureContext;
use crate::time::{beat_to_f64, beats, Beat};

/// Feature-group names used in a feature configuration.
pub const CONV_GROUP: &str = "convergence";
pub const DIV_GROUP: &str = "divergence";
pub const ASSIGN_GROUP: &str = "assignment";

/// A joint assignment of one chord: for each chord note (descending-pitch
/// order) the sorted set of active-voice positions it connects to. An empty
/// set assigns the note to the empty voice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointAssignment {
    targets: Vec<Vec<usize>>,
}

impl JointAssignment {
    pub fn new(mut targets: Vec<Vec<usize>>) -> Self {
        for t in &mut targets {
            t.sort_unstable();
            t.dedup();
        }
        JointAssignment { targets }
    }

    /// Voice positions for the chord note at `slot` (ε when empty).
    pub fn voices_of(&self, slot: usize) -> &[usize] {
        &self.targets[slot]
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// flat(j): every (chord slot, voice) pair, with `None` standing for ε.
    pub fn flat(&self) -> Vec<(usize, Option<usize>)> {
        let mut out = Vec::new();
        for (slot, vs) in self.targets.iter().enumerate() {
            if vs.is_empty() {
                out.push((slot, None));
            } else {
                out.extend(vs.iter().map(|&p| (slot, Some(p))));
            }
        }
        out
    }

    /// rev(j): chord slots grouped per voice position, ascending slot order
    /// (which is descending pitch within the chord).
    pub fn rev(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (slot, vs) in self.targets.iter().enumerate() {
            for &p in vs {
                out.entry(p).or_default().push(slot);
            }
        }
        out
    }

    /// Does any note converge (connect to two or more voices)?
    pub fn has_convergence(&self) -> bool {
        self.targets.iter().any(|t| t.len() > 1)
    }

    /// Does any voice diverge (receive two or more notes)?
    pub fn has_divergence(&self) -> bool {
        self.rev().values().any(|ns| ns.len() > 1)
    }
}

fn raw(policy: NullPolicy) -> SlotKind {
    SlotKind::Raw(policy)
}

fn vocab() -> SlotKind {
    SlotKind::Vocab(NullPolicy::Zero)
}

/// Slot list for convergence vectors Φ(n, v⃗).
pub fn conv_slots() -> &'static [SlotSpec] {
    static SLOTS: OnceLock<Vec<SlotSpec>> = OnceLock::new();
    SLOTS.get_or_init(|| {
        use SlotKind::*;
        let max = raw(NullPolicy::MaxObserved);
        let hor = raw(NullPolicy::Horizon);
        let zero = raw(NullPolicy::Zero);
        vec![
            SlotSpec::new("conv.mean_dist", max),
            SlotSpec::new("conv.mean_dir", Dir),
            SlotSpec::new("conv.mean_ps", Slice),
            SlotSpec::new("conv.first_dist", max),
            SlotSpec::new("conv.first_dir", Dir),
            SlotSpec::new("conv.last_dist", max),
            SlotSpec::new("conv.last_dir", Dir),
            SlotSpec::new("conv.span", max),
            SlotSpec::new("conv.top_gap", max),
            SlotSpec::new("conv.bottom_gap", max),
            SlotSpec::new("conv.div_top_dist", max),
            SlotSpec::new("conv.div_bottom_dist", max),
            SlotSpec::new("conv.first_io", hor),
            SlotSpec::new("conv.first_gap", hor),
            SlotSpec::new("conv.first_onoff_dir", Dir),
            SlotSpec::new("conv.last_io", hor),
            SlotSpec::new("conv.last_gap", hor),
            SlotSpec::new("conv.last_onoff_dir", Dir),
            SlotSpec::new("conv.top_onset_dir", Dir),
            SlotSpec::new("conv.bottom_onset_dir", Dir),
            SlotSpec::new("conv.first_complete", Bool),
            SlotSpec::new("conv.last_complete", Bool),
            SlotSpec::new("conv.first_cp_dist", zero),
            SlotSpec::new("conv.first_cp_dir", Dir),
            SlotSpec::new("conv.last_cp_dist", zero),
            SlotSpec::new("conv.last_cp_dir", Dir),
            SlotSpec::new("conv.first_cvp_diff", zero),
            SlotSpec::new("conv.last_cvp_diff", zero),
            SlotSpec::new("conv.top_zip_cp", vocab()),
            SlotSpec::new("conv.bottom_zip_cp", vocab()),
            SlotSpec::new("conv.top_unq", vocab()),
            SlotSpec::new("conv.top_unq_zip_diff", vocab()),
            SlotSpec::new("conv.bottom_unq", vocab()),
            SlotSpec::new("conv.bottom_unq_zip_diff", vocab()),
            SlotSpec::new("conv.len", vocab()),
            SlotSpec::new("conv.complete_count", vocab()),
            SlotSpec::new("conv.partial_count", vocab()),
            SlotSpec::new("conv.exists", Bool),
        ]
    })
}

/// Slot list for divergence vectors Φ(n⃗, v).
pub fn div_slots() -> &'static [SlotSpec] {
    static SLOTS: OnceLock<Vec<SlotSpec>> = OnceLock::new();
    SLOTS.get_or_init(|| {
        use SlotKind::*;
        let max = raw(NullPolicy::MaxObserved);
        let hor = raw(NullPolicy::Horizon);
        let zero = raw(NullPolicy::Zero);
        vec![
            SlotSpec::new("div.mean_dist", max),
            SlotSpec::new("div.mean_dir", Dir),
            SlotSpec::new("div.mean_ps", Slice),
            SlotSpec::new("div.first_dist", max),
            SlotSpec::new("div.first_dir", Dir),
            SlotSpec::new("div.last_dist", max),
            SlotSpec::new("div.last_dir", Dir),
            SlotSpec::new("div.span", max),
            SlotSpec::new("div.top_gap", max),
            SlotSpec::new("div.bottom_gap", max),
            SlotSpec::new("div.conv_top_first", max),
            SlotSpec::new("div.conv_bottom_first", max),
            SlotSpec::new("div.conv_top_last", max),
            SlotSpec::new("div.conv_bottom_last", max),
            SlotSpec::new("div.first_io", hor),
            SlotSpec::new("div.first_gap", hor),
            SlotSpec::new("div.first_onoff_dir", Dir),
            SlotSpec::new("div.last_io", hor),
            SlotSpec::new("div.last_gap", hor),
            SlotSpec::new("div.last_onoff_dir", Dir),
            SlotSpec::new("div.top_onset_dir", Dir),
            SlotSpec::new("div.bottom_onset_dir", Dir),
            SlotSpec::new("div.first_cp_dist", zero),
            SlotSpec::new("div.first_cp_dir", Dir),
            SlotSpec::new("div.last_cp_dist", zero),
            SlotSpec::new("div.last_cp_dir", Dir),
            SlotSpec::new("div.len", vocab()),
            SlotSpec::new("div.linked_count", vocab()),
            SlotSpec::new("div.exists", Bool),
        ]
    })
}

/// Slot list for the assignment vector Φ(c_t, j).
pub fn assign_slots() -> &'static [SlotSpec] {
    static SLOTS: OnceLock<Vec<SlotSpec>> = OnceLock::new();
    SLOTS.get_or_init(|| {
        use SlotKind::*;
        vec![
            SlotSpec::new("assign.mean_pair_dist", raw(NullPolicy::Zero)),
            SlotSpec::new("assign.crossing_exists", Bool),
            SlotSpec::new("assign.size_minus_nonempty", vocab()),
            SlotSpec::new("assign.nonempty_count", vocab()),
            SlotSpec::new("assign.empty_count", vocab()),
            SlotSpec::new("assign.convergence_count", vocab()),
            SlotSpec::new("assign.divergence_count", vocab()),
        ]
    })
}

fn bool_val(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn clamp_gap(d: Beat) -> f64 {
    beat_to_f64(d.max(beats(0)))
}

/// Convergence raw values for chord note `n` (score index) against the
/// ordered voice positions `vvec`; `exists` is the joint-level "some
/// convergence pairing present" flag.
pub fn conv_values(
    ctx: &FeatureContext,
    n: usize,
    vvec: &[usize],
    exists: bool,
) -> Vec<Option<f64>> {
    assert!(!vvec.is_empty(), "convergence vector needs at least one voice");
    let st = ctx.state;
    let note = st.score.note(n);
    let last = |pos: usize| st.active[pos];
    let lps = |pos: usize| st.score.note(last(pos)) .ps as f64;
    let mean = vvec.iter().map(|&p| lps(p)).sum::<f64>() / vvec.len() as f64;
    let psn = note.ps as f64;
    let v0 = vvec[0];
    let vlast = *vvec.last().unwrap();
    let v1 = vvec.get(1).copied();
    let vlast2 = (vvec.len() >= 2).then(|| vvec[vvec.len() - 2]);
    let cmp_f = |a: f64, b: f64| dir_value(a.partial_cmp(&b).unwrap());
    let pair_dist = |a: usize, b: usize| (lps(a) - lps(b)).abs();
    let div_dist = |a: usize, b: Option<usize>| -> Option<f64> {
        let d = st.shared_divergent_note(last(a), last(b?))?;
        Some((psn - st.score.note(d).ps as f64).abs())
    };
    let nl = |pos: usize| st.score.note(last(pos));
    let io = |pos: usize| beat_to_f64((note.on - nl(pos).on).abs());
    let gap = |pos: usize| clamp_gap(note.on - nl(pos).off);
    let onoff = |pos: usize| dir_value(note.on.cmp(&nl(pos).off));
    let onset_dir =
        |a: usize, b: Option<usize>| b.map(|b| dir_value(nl(a).on.cmp(&nl(b).on)));
    let complete = |pos: usize| st.graph.dp(last(pos)) == 0;
    let cp = |pos: usize| st.places[last(pos)].cp as f64;
    let cp_dist = |a: usize, b: Option<usize>| b.map(|b| (cp(a) - cp(b)).abs());
    let cp_dir =
        |a: usize, b: Option<usize>| b.map(|b| dir_value(cp(a).partial_cmp(&cp(b)).unwrap()));
    let cvp_diff = |a: usize, b: Option<usize>| {
        b.map(|b| st.cvp(b) as f64 - st.cvp(a) as f64)
    };
    let sync = |a: usize, b: Option<usize>| -> Option<(usize, f64, usize)> {
        let b = b?;
        let (zip, unq) = zip_unq(ctx, last(a), last(b));
        let avg = if zip.is_empty() {
            None
        } else {
            Some(
                zip.iter()
                    .map(|&(m, p)| {
                        (st.places[m].cp as f64 - st.places[p].cp as f64).abs()
                    })
                    .sum::<f64>()
                    / zip.len() as f64,
            )
        };
        Some((zip.len(), avg.unwrap_or(0.0), unq))
    };
    let top_sync = sync(v0, v1);
    let bottom_sync = sync(vlast, vlast2);
    let complete_count = vvec.iter().filter(|&&p| complete(p)).count();

    vec![
        Some((psn - mean).abs()),
        Some(cmp_f(psn, mean)),
        Some(mean),
        Some((psn - lps(v0)).abs()),
        Some(cmp_f(psn, lps(v0))),
        Some((psn - lps(vlast)).abs()),
        Some(cmp_f(psn, lps(vlast))),
        Some(pair_dist(v0, vlast)),
        v1.map(|b| pair_dist(v0, b)),
        vlast2.map(|b| pair_dist(vlast, b)),
        div_dist(v0, v1),
        div_dist(vlast, vlast2),
        Some(io(v0)),
        Some(gap(v0)),
        Some(onoff(v0)),
        Some(io(vlast)),
        Some(gap(vlast)),
        Some(onoff(vlast)),
        onset_dir(v0, v1),
        onset_dir(vlast, vlast2),
        Some(bool_val(complete(v0))),
        Some(bool_val(complete(vlast))),
        cp_dist(v0, v1),
        cp_dir(v0, v1),
        cp_dist(vlast, vlast2),
        cp_dir(vlast, vlast2),
        cvp_diff(v0, v1),
        cvp_diff(vlast, vlast2),
        top_sync.map(|(_, avg, _)| avg),
        bottom_sync.map(|(_, avg, _)| avg),
        top_sync.map(|(_, _, unq)| unq as f64),
        top_sync.map(|(z, _, unq)| (unq as f64 - z as f64).abs()),
        bottom_sync.map(|(_, _, unq)| unq as f64),
        bottom_sync.map(|(z, _, unq)| (unq as f64 - z as f64).abs()),
        Some(vvec.len() as f64),
        Some(complete_count as f64),
        Some((vvec.len() - complete_count) as f64),
        Some(bool_val(exists)),
    ]
}

/// zip(u, w) and unq(u, w) over two voices' horizon-restricted note sets:
/// equal-onset note pairs, and the number of distinct onsets across both.
pub fn zip_unq(
    ctx: &FeatureContext,
    u_last: usize,
    w_last: usize,
) -> (Vec<(usize, usize)>, usize) {
    let st = ctx.state;
    let u = st.voice_notes(u_last);
    let w = st.voice_notes(w_last);
    let mut pairs = Vec::new();
    for &m in &u {
        for &p in &w {
            if st.score.note(m).on == st.score.note(p).on {
                pairs.push((m, p));
            }
        }
    }
    let mut onsets: Vec<Beat> =
        u.iter().chain(w.iter()).map(|&m| st.score.note(m).on).collect();
    onsets.sort_unstable();
    onsets.dedup();
    (pairs, onsets.len())
}

/// Divergence raw values for the ordered note vector `nvec` (score indices,
/// descending pitch) against the voice at position `pos`; `exists` is the
/// joint-level "some divergence pairing present" flag.
pub fn div_values(
    ctx: &FeatureContext,
    nvec: &[usize],
    pos: usize,
    exists: bool,
) -> Vec<Option<f64>> {
    assert!(!nvec.is_empty(), "divergence vector needs at least one note");
    let st = ctx.state;
    let last = st.active[pos];
    let lnote = st.score.note(last);
    let lps = lnote.ps as f64;
    let ps = |i: usize| st.score.note(i).ps as f64;
    let mean = nvec.iter().map(|&i| ps(i)).sum::<f64>() / nvec.len() as f64;
    let n0 = nvec[0];
    let nlast = *nvec.last().unwrap();
    let n1 = nvec.get(1).copied();
    let nlast2 = (nvec.len() >= 2).then(|| nvec[nvec.len() - 2]);
    let cmp_f = |a: f64, b: f64| dir_value(a.partial_cmp(&b).unwrap());

    // conv(v): the notes converging into l(v), ordered by descending pitch.
    let mut conv: Vec<usize> = st.graph.lt(last).to_vec();
    conv.sort_by_key(|&m| (-st.score.note(m).ps, m));
    let conv_top = conv.first().copied();
    let conv_bottom = conv.last().copied();
    let conv_dist =
        |a: usize, c: Option<usize>| c.map(|c| (ps(a) - ps(c)).abs());

    let io = |i: usize| beat_to_f64((st.score.note(i).on - lnote.on).abs());
    let gap = |i: usize| clamp_gap(st.score.note(i).on - lnote.off);
    let onoff = |i: usize| dir_value(st.score.note(i).on.cmp(&lnote.off));
    let onset_dir = |a: usize, b: Option<usize>| {
        b.map(|b| dir_value(st.score.note(a).on.cmp(&st.score.note(b).on)))
    };
    let cp = |i: usize| st.places[i].cp as f64;
    let cp_dist = |a: usize, b: Option<usize>| b.map(|b| (cp(a) - cp(b)).abs());
    let cp_dir =
        |a: usize, b: Option<usize>| b.map(|b| dir_value(cp(a).partial_cmp(&cp(b)).unwrap()));
    let linked = nvec.iter().filter(|&&i| st.graph.lt(i).contains(&last)).count();

    vec![
        Some((lps - mean).abs()),
        Some(cmp_f(lps, mean)),
        Some(mean),
        Some((lps - ps(n0)).abs()),
        Some(cmp_f(lps, ps(n0))),
        Some((lps - ps(nlast)).abs()),
        Some(cmp_f(lps, ps(nlast))),
        Some((ps(n0) - ps(nlast)).abs()),
        n1.map(|b| (ps(n0) - ps(b)).abs()),
        nlast2.map(|b| (ps(nlast) - ps(b)).abs()),
        conv_dist(n0, conv_top),
        conv_dist(n0, conv_bottom),
        conv_dist(nlast, conv_top),
        conv_dist(nlast, conv_bottom),
        Some(io(n0)),
        Some(gap(n0)),
        Some(onoff(n0)),
        Some(io(nlast)),
        Some(gap(nlast)),
        Some(onoff(nlast)),
        onset_dir(n0, n1),
        onset_dir(nlast, nlast2),
        cp_dist(n0, n1),
        cp_dir(n0, n1),
        cp_dist(nlast, nlast2),
        cp_dir(nlast, nlast2),
        Some(nvec.len() as f64),
        Some(linked as f64),
        Some(bool_val(exists)),
    ]
}

/// Assignment raw values for the chord at `chord_idx` under assignment `j`.
pub fn assign_values(
    ctx: &FeatureContext,
    chord_idx: usize,
    j: &JointAssignment,
) -> Vec<Option<f64>> {
    let st = ctx.state;
    let chord = &st.chords[chord_idx];
    assert_eq!(j.len(), chord.notes.len(), "assignment shape mismatch");
    let flat = j.flat();
    let mut dist_sum = 0.0;
    let mut nonempty = 0usize;
    let mut empty = 0usize;
    let mut crossing = false;
    for &(slot, v) in &flat {
        let n = chord.notes[slot];
        match v {
            Some(pos) => {
                let last = st.active[pos];
                dist_sum += (st.score.note(n).ps - st.score.note(last).ps).abs() as f64;
                crossing = crossing || st.extension_crosses(last, n);
                nonempty += 1;
            }
            None => empty += 1,
        }
    }
    let mean = if nonempty > 0 { dist_sum / nonempty as f64 } else { 0.0 };
    let conv_count = (0..j.len()).filter(|&s| j.voices_of(s).len() > 1).count();
    let div_count = j.rev().values().filter(|ns| ns.len() > 1).count();
    vec![
        Some(mean),
        Some(bool_val(crossing)),
        Some(chord.notes.len() as f64 - nonempty as f64),
        Some(nonempty as f64),
        Some(empty as f64),
        Some(conv_count as f64),
        Some(div_count as f64),
    ]
}
