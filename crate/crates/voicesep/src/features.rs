//! Note-level feature extraction: the compatibility vector Φ(n, v).
//!
//! The vector concatenates three families — properties of the unassigned
//! note, properties of the candidate active voice, and properties of the
//! pair — followed by a single empty-voice flag. Extraction produces raw
//! optional values aligned with the slot specs below; a fitted
//! [`GroupConfig`](crate::config::GroupConfig) turns them into the dense
//! input consumed by the assignment networks. For the empty voice the dense
//! vector is all zeros except the final flag.

use std::cmp::Ordering;
use std::sync::OnceLock;

use num_traits::Signed;

use crate::chords::{above, below};
use crate::config::{dir_value, GroupConfig, NullPolicy, SlotKind, SlotSpec};
use crate::pseudo::ChainSet;
use crate::score::Note;
use crate::time::beat_to_f64;
use crate::tonal::TonalContext;
use crate::voices::SeparationState;

/// Neighbor-list truncation: voice features look at the 4 most recent notes
/// of top(v) and bot(v).
pub const TOP_BOT_K: usize = 4;

/// Name of the feature group holding Φ(n, v) in a feature configuration.
pub const PHI_GROUP: &str = "phi";

/// Read-only bundle of everything note-level extraction consults.
pub struct FeatureContext<'a> {
    pub state: &'a SeparationState<'a>,
    pub tonal: &'a TonalContext,
    pub chains: &'a ChainSet,
}

impl<'a> FeatureContext<'a> {
    pub fn new(
        state: &'a SeparationState<'a>,
        tonal: &'a TonalContext,
        chains: &'a ChainSet,
    ) -> Self {
        FeatureContext { state, tonal, chains }
    }

    fn note(&self, i: usize) -> &Note {
        self.state.score.note(i)
    }

    fn ps(&self, i: usize) -> f64 {
        self.note(i).ps as f64
    }

    fn dist(&self, a: usize, b: usize) -> f64 {
        (self.note(a).ps - self.note(b).ps).abs() as f64
    }

    fn dir(&self, a: usize, b: usize) -> f64 {
        dir_value(self.note(a).ps.cmp(&self.note(b).ps))
    }

    /// Most salient predecessor of a note inside its voice, if any.
    fn prev(&self, m: usize) -> Option<usize> {
        self.state.graph.lt(m).first().copied()
    }

    fn bs(&self, i: usize) -> f64 {
        beat_to_f64(self.state.score.beat_strength(i))
    }
}

fn raw(policy: NullPolicy) -> SlotKind {
    SlotKind::Raw(policy)
}

fn vocab() -> SlotKind {
    SlotKind::Vocab(NullPolicy::Zero)
}

fn indexed(out: &mut Vec<SlotSpec>, base: &str, kind: SlotKind) {
    for i in 0..TOP_BOT_K {
        out.push(SlotSpec::new(format!("{base}.{i}"), kind));
    }
}

fn note_slot_list() -> Vec<SlotSpec> {
    use SlotKind::*;
    vec![
        SlotSpec::new("note.ps", Slice),
        SlotSpec::new("note.above_dist", raw(NullPolicy::MaxObserved)),
        SlotSpec::new("note.below_dist", raw(NullPolicy::MaxObserved)),
        SlotSpec::new("note.bd", vocab()),
        SlotSpec::new("note.cp", vocab()),
        SlotSpec::new("note.chord_size", vocab()),
        SlotSpec::new("note.sd", vocab()),
        SlotSpec::new("note.cs", vocab()),
        SlotSpec::new("note.ql", vocab()),
        SlotSpec::new("note.bs", vocab()),
    ]
}

fn voice_slot_list() -> Vec<SlotSpec> {
    use SlotKind::*;
    let max = raw(NullPolicy::MaxObserved);
    let hor = raw(NullPolicy::Horizon);
    let mut s = vec![
        SlotSpec::new("voice.last_ps", Slice),
        SlotSpec::new("voice.avg_ps", Slice),
        SlotSpec::new("voice.max_ps", Slice),
        SlotSpec::new("voice.min_ps", Slice),
        SlotSpec::new("voice.last_above_dist", max),
        SlotSpec::new("voice.last_below_dist", max),
        SlotSpec::new("voice.voice_above_dist", max),
        SlotSpec::new("voice.voice_below_dist", max),
        SlotSpec::new("voice.voice_above_dir", Dir),
        SlotSpec::new("voice.voice_below_dir", Dir),
    ];
    indexed(&mut s, "voice.top_above_dist", max);
    indexed(&mut s, "voice.bot_below_dist", max);
    indexed(&mut s, "voice.top_adj_dist", max);
    indexed(&mut s, "voice.bot_adj_dist", max);
    indexed(&mut s, "voice.top_adj_dir", Dir);
    indexed(&mut s, "voice.bot_adj_dir", Dir);
    s.push(SlotSpec::new("voice.blocked", Bool));
    s.push(SlotSpec::new("voice.last_bd", vocab()));
    s.push(SlotSpec::new("voice.voice_above_io", hor));
    s.push(SlotSpec::new("voice.voice_below_io", hor));
    s.push(SlotSpec::new("voice.voice_above_io_dir", Dir));
    s.push(SlotSpec::new("voice.voice_below_io_dir", Dir));
    indexed(&mut s, "voice.top_gap", hor);
    indexed(&mut s, "voice.bot_gap", hor);
    s.extend([
        SlotSpec::new("voice.top_rests", vocab()),
        SlotSpec::new("voice.bot_rests", vocab()),
        SlotSpec::new("voice.last_cp", vocab()),
        SlotSpec::new("voice.vp", vocab()),
        SlotSpec::new("voice.cvp", vocab()),
        SlotSpec::new("voice.last_chord_size", vocab()),
        SlotSpec::new("voice.active_count", vocab()),
        SlotSpec::new("voice.complete_count", vocab()),
        SlotSpec::new("voice.len", vocab()),
        SlotSpec::new("voice.top_len", vocab()),
        SlotSpec::new("voice.bot_len", vocab()),
        SlotSpec::new("voice.depth", vocab()),
        SlotSpec::new("voice.top_all_have_above", Bool),
        SlotSpec::new("voice.bot_all_have_below", Bool),
        SlotSpec::new("voice.top_have_above_count", vocab()),
        SlotSpec::new("voice.bot_have_below_count", vocab()),
        SlotSpec::new("voice.diverging_count", vocab()),
        SlotSpec::new("voice.last_sd", vocab()),
        SlotSpec::new("voice.last_cs", vocab()),
        SlotSpec::new("voice.last_ql", vocab()),
        SlotSpec::new("voice.last_bs", vocab()),
    ]);
    s
}

fn pair_slot_list() -> Vec<SlotSpec> {
    use SlotKind::*;
    let max = raw(NullPolicy::MaxObserved);
    let hor = raw(NullPolicy::Horizon);
    let zero = raw(NullPolicy::Zero);
    vec![
        SlotSpec::new("pair.last_dist", max),
        SlotSpec::new("pair.last_dir", Dir),
        SlotSpec::new("pair.avg_dist", max),
        SlotSpec::new("pair.avg_dir", Dir),
        SlotSpec::new("pair.max_dist", max),
        SlotSpec::new("pair.max_dir", Dir),
        SlotSpec::new("pair.min_dist", max),
        SlotSpec::new("pair.min_dir", Dir),
        SlotSpec::new("pair.std_dist", zero),
        SlotSpec::new("pair.below_std", Bool),
        SlotSpec::new("pair.repetition", vocab()),
        SlotSpec::new("pair.div_above_dist", max),
        SlotSpec::new("pair.div_above_dir", Dir),
        SlotSpec::new("pair.div_below_dist", max),
        SlotSpec::new("pair.div_below_dir", Dir),
        SlotSpec::new("pair.io", hor),
        SlotSpec::new("pair.gap", hor),
        SlotSpec::new("pair.onset_offset_dir", Dir),
        SlotSpec::new("pair.bd_dist", zero),
        SlotSpec::new("pair.bd_dir", Dir),
        SlotSpec::new("pair.cp_dist", zero),
        SlotSpec::new("pair.cp_dir", Dir),
        SlotSpec::new("pair.cp_vp_dist", zero),
        SlotSpec::new("pair.cp_vp_dir", Dir),
        SlotSpec::new("pair.cp_cvp_dist", zero),
        SlotSpec::new("pair.cp_cvp_dir", Dir),
        SlotSpec::new("pair.chord_size_dist", zero),
        SlotSpec::new("pair.chord_active_dist", zero),
        SlotSpec::new("pair.sp_dist", vocab()),
        SlotSpec::new("pair.cross", Bool),
        SlotSpec::new("pair.sd_dist", zero),
        SlotSpec::new("pair.sd_dir", Dir),
        SlotSpec::new("pair.cs_dist", zero),
        SlotSpec::new("pair.cs_dir", Dir),
        SlotSpec::new("pair.ql_dist", zero),
        SlotSpec::new("pair.ql_dir", Dir),
        SlotSpec::new("pair.bs_dist", zero),
        SlotSpec::new("pair.bs_dir", Dir),
        SlotSpec::new("pair.eq_pitch", Bool),
        SlotSpec::new("pair.eq_duration", Bool),
        SlotSpec::new("pair.double_gap", Bool),
        SlotSpec::new("pair.pp_note", Bool),
        SlotSpec::new("pair.pp_voice", Bool),
        SlotSpec::new("pair.pp_prev_onset", Bool),
        SlotSpec::new("pair.chain_adjacent", Bool),
        SlotSpec::new("pair.chain_support", Bool),
        SlotSpec::new("pair.note_chain_only", Bool),
        SlotSpec::new("pair.voice_chain_only", Bool),
    ]
}

/// Full slot list for Φ(n, v): note, voice, and pair families plus the
/// trailing empty-voice flag.
pub fn phi_slots() -> &'static [SlotSpec] {
    static SLOTS: OnceLock<Vec<SlotSpec>> = OnceLock::new();
    SLOTS.get_or_init(|| {
        let mut s = note_slot_list();
        s.extend(voice_slot_list());
        s.extend(pair_slot_list());
        s.push(SlotSpec::new("empty_voice", SlotKind::Bool));
        s
    })
}

/// Note-family raw values for the unassigned note `n`.
pub fn note_values(ctx: &FeatureContext, n: usize) -> Vec<Option<f64>> {
    let st = ctx.state;
    let pl = st.places[n];
    let chord = &st.chords[pl.chord];
    let note = ctx.note(n);
    vec![
        Some(ctx.ps(n)),
        above(&st.chords, pl).map(|m| ctx.dist(n, m)),
        below(&st.chords, pl).map(|m| ctx.dist(n, m)),
        Some(beat_to_f64(note.bd())),
        Some(pl.cp as f64),
        Some(chord.notes.len() as f64),
        Some(ctx.tonal.sd(n) as f64),
        Some(ctx.tonal.cs(n) as f64),
        Some(beat_to_f64(note.ql)),
        Some(ctx.bs(n)),
    ]
}

/// Voice-family raw values for the active voice at position `pos`.
pub fn voice_values(ctx: &FeatureContext, pos: usize) -> Vec<Option<f64>> {
    let st = ctx.state;
    let last = st.active[pos];
    let notes = st.voice_notes(last);
    let pitches: Vec<f64> = notes.iter().map(|&m| ctx.ps(m)).collect();
    let avg = pitches.iter().sum::<f64>() / pitches.len() as f64;
    let max = pitches.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = pitches.iter().cloned().fold(f64::INFINITY, f64::min);
    let pl = st.places[last];
    let va = st.complete_above(pos).map(|i| st.active[i]);
    let vb = st.complete_below(pos).map(|i| st.active[i]);
    let (top, bot) = st.top_bot(last, TOP_BOT_K);

    let mut out = vec![
        Some(ctx.ps(last)),
        Some(avg),
        Some(max),
        Some(min),
        above(&st.chords, pl).map(|m| ctx.dist(last, m)),
        below(&st.chords, pl).map(|m| ctx.dist(last, m)),
        va.map(|u| ctx.dist(last, u)),
        vb.map(|u| ctx.dist(last, u)),
        va.map(|u| ctx.dir(last, u)),
        vb.map(|u| ctx.dir(last, u)),
    ];
    let neighbor_dist = |m: usize, up: bool| -> Option<f64> {
        let p = st.places[m];
        let nb = if up { above(&st.chords, p) } else { below(&st.chords, p) };
        nb.map(|q| ctx.dist(m, q))
    };
    for i in 0..TOP_BOT_K {
        out.push(top.get(i).and_then(|&m| neighbor_dist(m, true)));
    }
    for i in 0..TOP_BOT_K {
        out.push(bot.get(i).and_then(|&m| neighbor_dist(m, false)));
    }
    for list in [&top, &bot] {
        for i in 0..TOP_BOT_K {
            out.push(list.get(i).and_then(|&m| ctx.prev(m).map(|p| ctx.dist(m, p))));
        }
    }
    for list in [&top, &bot] {
        for i in 0..TOP_BOT_K {
            out.push(list.get(i).and_then(|&m| ctx.prev(m).map(|p| ctx.dir(m, p))));
        }
    }
    out.push(Some(bool_val(st.voice_is_blocked(pos))));
    out.push(Some(beat_to_f64(ctx.note(last).bd())));
    let io = |u: Option<usize>| {
        u.map(|m| beat_to_f64((ctx.note(last).on - ctx.note(m).on).abs()))
    };
    out.push(io(va));
    out.push(io(vb));
    let io_dir =
        |u: Option<usize>| u.map(|m| dir_value(ctx.note(last).on.cmp(&ctx.note(m).on)));
    out.push(io_dir(va));
    out.push(io_dir(vb));
    let gap = |m: usize| -> Option<f64> {
        let p = ctx.prev(m)?;
        let d = ctx.note(m).on - ctx.note(p).off;
        Some(beat_to_f64(d.max(crate::time::beats(0))))
    };
    for list in [&top, &bot] {
        for i in 0..TOP_BOT_K {
            out.push(list.get(i).and_then(|&m| gap(m)));
        }
    }
    let rests = |list: &[usize]| {
        list.iter()
            .filter(|&&m| ctx.prev(m).is_some_and(|p| ctx.note(m).on > ctx.note(p).off))
            .count() as f64
    };
    out.push(Some(rests(&top)));
    out.push(Some(rests(&bot)));
    out.extend([
        Some(pl.cp as f64),
        Some(st.vp(pos) as f64),
        Some(st.cvp(pos) as f64),
        Some(st.chords[pl.chord].notes.len() as f64),
        Some(st.active.len() as f64),
        Some(st.complete_count() as f64),
        Some(notes.len() as f64),
        Some(top.len() as f64),
        Some(bot.len() as f64),
        Some(st.graph.dp(last) as f64),
    ]);
    let has_above = |m: usize| st.places[m].cp != 1;
    let has_below = |m: usize| {
        let p = st.places[m];
        p.cp != st.chords[p.chord].notes.len()
    };
    out.push(Some(bool_val(top.iter().all(|&m| has_above(m)))));
    out.push(Some(bool_val(bot.iter().all(|&m| has_below(m)))));
    out.push(Some(top.iter().filter(|&&m| has_above(m)).count() as f64));
    out.push(Some(bot.iter().filter(|&&m| has_below(m)).count() as f64));
    out.push(Some(st.graph.rt(last).len() as f64));
    out.extend([
        Some(ctx.tonal.sd(last) as f64),
        Some(ctx.tonal.cs(last) as f64),
        Some(beat_to_f64(ctx.note(last).ql)),
        Some(ctx.bs(last)),
    ]);
    out
}

/// Pair-family raw values for note `n` against the active voice at `pos`.
pub fn pair_values(ctx: &FeatureContext, n: usize, pos: usize) -> Vec<Option<f64>> {
    let st = ctx.state;
    let last = st.active[pos];
    let notes = st.voice_notes(last);
    let pitches: Vec<f64> = notes.iter().map(|&m| ctx.ps(m)).collect();
    let count = pitches.len() as f64;
    let avg = pitches.iter().sum::<f64>() / count;
    let max = pitches.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = pitches.iter().cloned().fold(f64::INFINITY, f64::min);
    let std = (pitches.iter().map(|p| (p - avg).powi(2)).sum::<f64>() / count).sqrt();
    let psn = ctx.ps(n);
    let avg_dist = (psn - avg).abs();
    let cmp_f = |a: f64, b: f64| dir_value(a.partial_cmp(&b).unwrap_or(Ordering::Equal));

    let div_with = |neighbor: Option<usize>| -> Option<usize> {
        let other = st.active[neighbor?];
        st.shared_divergent_note(last, other)
    };
    let div_above = div_with(st.complete_above(pos));
    let div_below = div_with(st.complete_below(pos));

    let nn = ctx.note(n);
    let nl = ctx.note(last);
    let pln = st.places[n];
    let pll = st.places[last];
    let sd = |i: usize| ctx.tonal.sd(i) as f64;
    let cs = |i: usize| ctx.tonal.cs(i) as f64;
    let qln = beat_to_f64(nn.ql);
    let qll = beat_to_f64(nl.ql);
    let bsn = ctx.bs(n);
    let bsl = ctx.bs(last);

    let eq_pitch = nn.ps == nl.ps;
    let eq_dur = nn.bd() == nl.bd();
    let double_gap = nn.on == nl.off + nl.bd();
    let pp_n = ctx.chains.pp_note(n);
    let pp_l = ctx.chains.pp_note(last);
    let pp_prev = ctx.chains.pp_onset(nn.on - nn.bd());

    vec![
        Some(ctx.dist(n, last)),
        Some(ctx.dir(n, last)),
        Some(avg_dist),
        Some(cmp_f(psn, avg)),
        Some((psn - max).abs()),
        Some(cmp_f(psn, max)),
        Some((psn - min).abs()),
        Some(cmp_f(psn, min)),
        Some((avg_dist - std).abs()),
        Some(bool_val(avg_dist < std)),
        Some(st.consecutive_repetition(n, last) as f64),
        div_above.map(|d| ctx.dist(n, d)),
        div_above.map(|d| ctx.dir(n, d)),
        div_below.map(|d| ctx.dist(n, d)),
        div_below.map(|d| ctx.dir(n, d)),
        Some(beat_to_f64((nn.on - nl.on).abs())),
        Some(beat_to_f64((nn.on - nl.off).max(crate::time::beats(0)))),
        Some(dir_value(nn.on.cmp(&nl.off))),
        Some(beat_to_f64((nn.bd() - nl.bd()).abs())),
        Some(dir_value(nn.bd().cmp(&nl.bd()))),
        Some((pln.cp as f64 - pll.cp as f64).abs()),
        Some(dir_value(pln.cp.cmp(&pll.cp))),
        Some((pln.cp as f64 - st.vp(pos) as f64).abs()),
        Some(dir_value(pln.cp.cmp(&st.vp(pos)))),
        Some((pln.cp as f64 - st.cvp(pos) as f64).abs()),
        Some(dir_value(pln.cp.cmp(&st.cvp(pos)))),
        Some(
            (st.chords[pln.chord].notes.len() as f64
                - st.chords[pll.chord].notes.len() as f64)
                .abs(),
        ),
        Some((st.chords[pln.chord].notes.len() as f64 - st.active.len() as f64).abs()),
        Some(st.chords[pln.chord].sp as f64 - st.chords[pll.chord].sp as f64),
        Some(bool_val(st.extension_crosses(last, n))),
        Some((sd(n) - sd(last)).abs()),
        Some(cmp_f(sd(n), sd(last))),
        Some((cs(n) - cs(last)).abs()),
        Some(cmp_f(cs(n), cs(last))),
        Some((qln - qll).abs()),
        Some(cmp_f(qln, qll)),
        Some((bsn - bsl).abs()),
        Some(cmp_f(bsn, bsl)),
        Some(bool_val(eq_pitch)),
        Some(bool_val(eq_dur)),
        Some(bool_val(double_gap)),
        Some(bool_val(pp_n)),
        Some(bool_val(pp_l)),
        Some(bool_val(pp_prev)),
        Some(bool_val(eq_pitch && eq_dur && double_gap && pp_n && !pp_prev)),
        Some(bool_val(!pp_n && !pp_l && pp_prev)),
        Some(bool_val(pp_n && !pp_l)),
        Some(bool_val(!pp_n && pp_l)),
    ]
}

fn bool_val(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Raw Φ(n, v) for a real active voice: note, voice, and pair families plus
/// a zero empty-voice flag.
pub fn phi_raw(ctx: &FeatureContext, n: usize, pos: usize) -> Vec<Option<f64>> {
    let mut out = note_values(ctx, n);
    out.extend(voice_values(ctx, pos));
    out.extend(pair_values(ctx, n, pos));
    out.push(Some(0.0));
    out
}

/// Dense Φ(n, v) under a fitted configuration.
pub fn phi_dense(ctx: &FeatureContext, cfg: &GroupConfig, n: usize, pos: usize) -> Vec<f64> {
    cfg.encode(&phi_raw(ctx, n, pos), beat_to_f64(ctx.state.horizon))
}

/// Dense Φ(n, ε): the unit vector on the empty-voice flag.
pub fn phi_epsilon(cfg: &GroupConfig) -> Vec<f64> {
    let mut out = cfg.zeros();
    let r = cfg.slot_range("empty_voice").expect("empty_voice slot present");
    out[r.start] = 1.0;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GroupConfig;
    use crate::pseudo::{detect_chains, CHAIN_MIN_LEN};
    use crate::score::{simple_score, Score};
    use crate::time::{beat, beats};

    fn idx(s: &Score, id: u32) -> usize {
        s.index_of(crate::score::NoteId(id)).unwrap()
    }

    fn slot_index(name: &str) -> usize {
        phi_slots().iter().position(|s| s.name == name).unwrap()
    }

    fn value(raw: &[Option<f64>], name: &str) -> Option<f64> {
        raw[slot_index(name)]
    }

    struct Fixture {
        score: Score,
    }

    impl Fixture {
        fn ctx<'a>(
            state: &'a SeparationState<'a>,
            tonal: &'a TonalContext,
            chains: &'a ChainSet,
        ) -> FeatureContext<'a> {
            FeatureContext::new(state, tonal, chains)
        }
    }

    #[test]
    fn note_values_basics() {
        // C4 whole chord with E4 and G4 above, quarter notes on the downbeat.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 64, beats(0), beats(1)),
            (3, 67, beats(0), beats(1)),
        ]);
        let st = SeparationState::new(&s, beats(4));
        let tonal = TonalContext::new(&s);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let ctx = Fixture::ctx(&st, &tonal, &chains);

        let mid = note_values(&ctx, idx(&s, 2));
        assert_eq!(mid[slot_index("note.ps")], Some(64.0));
        assert_eq!(mid[slot_index("note.cp")], Some(2.0));
        assert_eq!(mid[slot_index("note.chord_size")], Some(3.0));
        assert_eq!(mid[slot_index("note.above_dist")], Some(3.0));
        assert_eq!(mid[slot_index("note.below_dist")], Some(4.0));
        assert_eq!(mid[slot_index("note.ql")], Some(1.0));
        assert_eq!(mid[slot_index("note.bs")], Some(1.0));
        assert_eq!(mid[slot_index("note.sd")], Some(3.0));
        assert_eq!(mid[slot_index("note.cs")], Some(3.0));

        // Topmost note: no neighbor above.
        let top = note_values(&ctx, idx(&s, 3));
        assert_eq!(top[slot_index("note.above_dist")], None);
        assert_eq!(top[slot_index("note.below_dist")], Some(3.0));
    }

    #[test]
    fn fresh_voice_summary_stats() {
        let s = simple_score(&[(1, 60, beats(0), beats(1)), (2, 64, beats(1), beats(1))]);
        let mut st = SeparationState::new(&s, beats(4));
        st.active = vec![idx(&s, 1)];
        let tonal = TonalContext::new(&s);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let ctx = Fixture::ctx(&st, &tonal, &chains);
        let v = voice_values(&ctx, 0);
        let off = note_slot_list().len();
        let at = |name: &str| v[slot_index(name) - off];
        assert_eq!(at("voice.len"), Some(1.0));
        assert_eq!(at("voice.avg_ps"), Some(60.0));
        assert_eq!(at("voice.max_ps"), Some(60.0));
        assert_eq!(at("voice.top_rests"), Some(0.0));
        assert_eq!(at("voice.bot_rests"), Some(0.0));
        assert_eq!(at("voice.vp"), Some(1.0));
        assert_eq!(at("voice.blocked"), Some(0.0));
        // No neighboring voices: distances null.
        assert_eq!(at("voice.voice_above_dist"), None);
        assert_eq!(at("voice.voice_below_dist"), None);
    }

    #[test]
    fn rest_count_sees_one_gap() {
        // Three linked notes with a one-beat rest before the third.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 62, beats(1), beats(1)),
            (3, 64, beats(3), beats(1)),
        ]);
        let mut st = SeparationState::new(&s, beats(8));
        st.graph.add_link(idx(&s, 1), idx(&s, 2));
        st.graph.add_link(idx(&s, 2), idx(&s, 3));
        st.active = vec![idx(&s, 3)];
        let tonal = TonalContext::new(&s);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let ctx = Fixture::ctx(&st, &tonal, &chains);
        let v = voice_values(&ctx, 0);
        let off = note_slot_list().len();
        let at = |name: &str| v[slot_index(name) - off];
        assert_eq!(at("voice.top_rests"), Some(1.0));
        assert_eq!(at("voice.bot_rests"), Some(1.0));
        // The gap template sees the one-beat hole on the most recent link.
        assert_eq!(at("voice.top_gap.0"), Some(1.0));
        assert_eq!(at("voice.top_gap.1"), Some(0.0));
        // Voice start has no predecessor: its gap slot is null.
        assert_eq!(at("voice.top_gap.2"), None);
    }

    #[test]
    fn blocked_voice_flag_set() {
        // Low voice pauses while an upper voice walks across its pitch: the
        // held C4 equals one endpoint of the walker's (C4, E4) linked pair.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)), // paused voice's last note
            (2, 60, beats(1), beats(1)), // walker passes through the same pitch
            (3, 64, beats(2), beats(1)),
        ]);
        let mut st = SeparationState::new(&s, beats(8));
        st.graph.add_link(idx(&s, 2), idx(&s, 3));
        st.active = vec![idx(&s, 3), idx(&s, 1)];
        let tonal = TonalContext::new(&s);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let ctx = Fixture::ctx(&st, &tonal, &chains);
        let off = note_slot_list().len();
        let blocked = voice_values(&ctx, 1)[slot_index("voice.blocked") - off];
        assert_eq!(blocked, Some(1.0));
        let free = voice_values(&ctx, 0)[slot_index("voice.blocked") - off];
        assert_eq!(free, Some(0.0));
    }

    #[test]
    fn pair_octave_and_clamped_gap() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(4)), // long C4
            (2, 72, beats(1), beats(1)), // C5 entering while C4 sounds
        ]);
        let mut st = SeparationState::new(&s, beats(8));
        st.active = vec![idx(&s, 1)];
        let tonal = TonalContext::new(&s);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let ctx = Fixture::ctx(&st, &tonal, &chains);
        let raw = phi_raw(&ctx, idx(&s, 2), 0);
        assert_eq!(value(&raw, "pair.last_dist"), Some(12.0));
        assert_eq!(value(&raw, "pair.last_dir"), Some(1.0));
        // n starts before l(v) ends: onset-offset distance clamps to zero.
        assert_eq!(value(&raw, "pair.gap"), Some(0.0));
        assert_eq!(value(&raw, "pair.onset_offset_dir"), Some(-1.0));
        assert_eq!(value(&raw, "pair.io"), Some(1.0));
        assert_eq!(value(&raw, "pair.sp_dist"), Some(1.0));
        assert_eq!(value(&raw, "pair.eq_pitch"), Some(0.0));
    }

    /// Alternating chain/melody texture: D4 eighths on the beat form a
    /// repeat chain; higher melody notes fall on the off-beats.
    fn pseudo_poly_fixture() -> Fixture {
        let mut notes = Vec::new();
        let mut id = 1;
        for i in 0..4i64 {
            notes.push((id, 62, beats(i), beat(1, 2)));
            id += 1;
            notes.push((id, 69 + i as i32, beats(i) + beat(1, 2), beat(1, 2)));
            id += 1;
        }
        // The probe notes at beat 4 (chain continuation) and 4.5 (melody).
        notes.push((id, 62, beats(4), beat(1, 2)));
        notes.push((id + 1, 74, beats(4) + beat(1, 2), beat(1, 2)));
        Fixture { score: simple_score(&notes) }
    }

    #[test]
    fn chain_note_prefers_chain_voice() {
        let fx = pseudo_poly_fixture();
        let s = &fx.score;
        let mut st = SeparationState::new(s, beats(8));
        // Chain voice: ids 1,3,5,7; melody voice: ids 2,4,6,8.
        for (a, b) in [(1u32, 3u32), (3, 5), (5, 7)] {
            st.graph.add_link(idx(s, a), idx(s, b));
        }
        for (a, b) in [(2u32, 4u32), (4, 6), (6, 8)] {
            st.graph.add_link(idx(s, a), idx(s, b));
        }
        st.active = vec![idx(s, 8), idx(s, 7)];
        let tonal = TonalContext::new(s);
        let chains = detect_chains(s, CHAIN_MIN_LEN);
        assert!(chains.pp_note(idx(s, 7)));
        let ctx = Fixture::ctx(&st, &tonal, &chains);

        // Probe = the chain continuation at beat 4, against the chain voice:
        // adjacent in the chain, no competing chain at the previous onset.
        let n = idx(s, 9);
        let raw = phi_raw(&ctx, n, 1);
        assert_eq!(value(&raw, "pair.eq_pitch"), Some(1.0));
        assert_eq!(value(&raw, "pair.eq_duration"), Some(1.0));
        assert_eq!(value(&raw, "pair.double_gap"), Some(1.0));
        assert_eq!(value(&raw, "pair.pp_note"), Some(1.0));
        assert_eq!(value(&raw, "pair.pp_prev_onset"), Some(0.0));
        assert_eq!(value(&raw, "pair.chain_adjacent"), Some(1.0));
        assert_eq!(value(&raw, "pair.chain_support"), Some(0.0));

        // Same probe against the melody voice: only the note side is in a
        // chain.
        let raw2 = phi_raw(&ctx, n, 0);
        assert_eq!(value(&raw2, "pair.chain_adjacent"), Some(0.0));
        assert_eq!(value(&raw2, "pair.note_chain_only"), Some(1.0));
    }

    #[test]
    fn melody_note_prefers_chain_supported_melody() {
        let fx = pseudo_poly_fixture();
        let s = &fx.score;
        let mut st = SeparationState::new(s, beats(8));
        for (a, b) in [(1u32, 3u32), (3, 5), (5, 7), (7, 9)] {
            st.graph.add_link(idx(s, a), idx(s, b));
        }
        for (a, b) in [(2u32, 4u32), (4, 6), (6, 8)] {
            st.graph.add_link(idx(s, a), idx(s, b));
        }
        st.active = vec![idx(s, 8), idx(s, 9)];
        let tonal = TonalContext::new(s);
        let chains = detect_chains(s, CHAIN_MIN_LEN);
        let ctx = Fixture::ctx(&st, &tonal, &chains);

        // Probe = melody note at 4.5 against the melody voice: neither side
        // in a chain, but a chain sounds at the previous onset.
        let n = idx(s, 10);
        let raw = phi_raw(&ctx, n, 0);
        assert_eq!(value(&raw, "pair.pp_note"), Some(0.0));
        assert_eq!(value(&raw, "pair.pp_voice"), Some(0.0));
        assert_eq!(value(&raw, "pair.pp_prev_onset"), Some(1.0));
        assert_eq!(value(&raw, "pair.chain_support"), Some(1.0));

        // Against the chain voice: only the voice side is in a chain.
        let raw2 = phi_raw(&ctx, n, 1);
        assert_eq!(value(&raw2, "pair.voice_chain_only"), Some(1.0));
        assert_eq!(value(&raw2, "pair.chain_support"), Some(0.0));
    }

    #[test]
    fn dense_phi_shape_and_epsilon() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 64, beats(1), beats(1)),
            (3, 67, beats(2), beats(1)),
        ]);
        let mut st = SeparationState::new(&s, beats(4));
        st.graph.add_link(idx(&s, 1), idx(&s, 2));
        st.active = vec![idx(&s, 2)];
        let tonal = TonalContext::new(&s);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let ctx = Fixture::ctx(&st, &tonal, &chains);

        let raws = vec![phi_raw(&ctx, idx(&s, 3), 0)];
        let cfg = GroupConfig::fit(phi_slots(), raws.iter().map(|r| r.as_slice()));
        let dense = phi_dense(&ctx, &cfg, idx(&s, 3), 0);
        assert_eq!(dense.len(), cfg.width());
        // Repeated extraction is bit-for-bit identical.
        assert_eq!(dense, phi_dense(&ctx, &cfg, idx(&s, 3), 0));

        let eps = phi_epsilon(&cfg);
        assert_eq!(eps.len(), cfg.width());
        assert_eq!(eps.iter().sum::<f64>(), 1.0);
        let r = cfg.slot_range("empty_voice").unwrap();
        assert_eq!(eps[r.start], 1.0);
    }
}
