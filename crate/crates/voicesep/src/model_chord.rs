//! Chord-level joint assignment: all notes of a chord are assigned to voices
//! at once by scoring whole candidate assignments.
//!
//! A candidate is a `JointAssignment` mapping each chord note to a set of
//! active voices (or the empty voice). Candidates are enumerated exhaustively
//! when the constrained space is small, otherwise sampled. Each candidate is
//! scored by a network that reduces the variable-size pair, convergence, and
//! divergence feature-vector sets through convolution-with-max-pooling,
//! concatenates the pooled vectors with the global assignment features, and
//! maps them through a hidden layer to a real score. Training is max-margin:
//! the gold assignment must outscore the best sampled negative by 1.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chord_features::{
    assign_slots, assign_values, conv_slots, conv_values, div_slots, div_values,
    JointAssignment, ASSIGN_GROUP, CONV_GROUP, DIV_GROUP,
};
use crate::config::{FeatureConfig, GroupConfig};
use crate::features::{
    note_values, phi_dense, phi_epsilon, phi_raw, phi_slots, voice_values, FeatureContext,
    PHI_GROUP,
};
use crate::graph::VoiceGraph;
use crate::model_note::{insert_voices, ModelError};
use crate::neural::{
    add_l2, AdaDelta, Checkpoint, ConvCache, ConvMaxPool, Head, Mlp, MlpCache, NeuralError,
    CHECKPOINT_VERSION,
};
use crate::pseudo::{detect_chains, ChainSet, CHAIN_MIN_LEN};
use crate::score::Score;
use crate::time::{beat_to_f64, beats, Beat};
use crate::tonal::TonalContext;
use crate::voices::{SeparationState, Target};

/// Hyper-parameters of the chord-level model.
#[derive(Debug, Clone)]
pub struct ChordModelConfig {
    /// Convolution filter counts for the three variable-size inputs.
    pub pair_filters: usize,
    pub conv_filters: usize,
    pub div_filters: usize,
    /// Width of the fully connected hidden layer.
    pub hidden: usize,
    /// L2 regularization strength.
    pub lambda: f64,
    /// Negative assignments sampled per chord during training.
    pub negatives: usize,
    /// Maximum voices converging into one note.
    pub alpha: usize,
    /// Maximum notes diverging from one note.
    pub beta: usize,
    /// Active-voice beat horizon.
    pub horizon: Beat,
    /// A note may not join a partial voice across a gap when the pitch
    /// distance is at least this many half steps.
    pub min_gap_dist: f64,
    /// Reject assignments whose synchronous extensions cross each other.
    pub forbid_sync_cross: bool,
    /// Candidate cap: enumerate exhaustively up to here, then sample.
    pub budget: usize,
    pub epochs: usize,
    /// Reuse the first epoch's negative samples instead of resampling.
    pub freeze_negatives: bool,
}

impl Default for ChordModelConfig {
    fn default() -> Self {
        ChordModelConfig {
            pair_filters: 50,
            conv_filters: 20,
            div_filters: 20,
            hidden: 100,
            lambda: 1e-4,
            negatives: 500,
            alpha: 2,
            beta: 2,
            horizon: beats(4),
            min_gap_dist: 6.0,
            forbid_sync_cross: true,
            budget: 5000,
            epochs: 300,
            freeze_negatives: false,
        }
    }
}

/// Does assigning note `n` to the voice ending on `v_last` break the
/// partial-voice gap rule: the voice already diverged (it is partial), the
/// note starts after the voice's last offset, and the pitch distance is at
/// least `min_dist` half steps?
pub fn violates_gap_rule(st: &SeparationState, n: usize, v_last: usize, min_dist: f64) -> bool {
    if st.is_complete(v_last) {
        return false;
    }
    let last = st.score.note(v_last);
    let note = st.score.note(n);
    note.on > last.off && ((note.ps - last.ps).abs() as f64) >= min_dist
}

/// Do any two links of one chord cross each other? `links` holds
/// (voice-last-note, chord-note) pairs; because all chord notes share an
/// onset, two extended voices cross exactly when their pitch order inverts.
pub fn synchronous_crossing(st: &SeparationState, links: &[(usize, usize)]) -> bool {
    for (i, &(v1, n1)) in links.iter().enumerate() {
        for &(v2, n2) in &links[i + 1..] {
            if v1 == v2 {
                continue;
            }
            let dv = st.score.note(v1).ps - st.score.note(v2).ps;
            let dn = st.score.note(n1).ps - st.score.note(n2).ps;
            if (dv > 0 && dn < 0) || (dv < 0 && dn > 0) {
                return true;
            }
        }
    }
    false
}

fn flat_links(st: &SeparationState, chord_idx: usize, j: &JointAssignment) -> Vec<(usize, usize)> {
    let chord = &st.chords[chord_idx];
    let mut out = Vec::new();
    for slot in 0..j.len() {
        for &p in j.voices_of(slot) {
            out.push((st.active[p], chord.notes[slot]));
        }
    }
    out
}

/// Per-slot candidate voices and forced chain targets for one chord.
struct SlotOptions {
    /// Allowed active-voice positions per chord slot.
    allowed: Vec<Vec<usize>>,
    /// Slots whose target is fixed by a pseudo-polyphonic chain.
    forced: Vec<Option<usize>>,
}

fn slot_options(
    st: &SeparationState,
    chains: &ChainSet,
    cfg: &ChordModelConfig,
    chord_idx: usize,
) -> SlotOptions {
    let chord = &st.chords[chord_idx];
    let mut allowed = Vec::with_capacity(chord.notes.len());
    let mut forced = Vec::with_capacity(chord.notes.len());
    for &n in &chord.notes {
        let chain_target = chains
            .predecessor(n)
            .and_then(|m| st.active.iter().position(|&u| u == m));
        if let Some(p) = chain_target {
            allowed.push(vec![p]);
            forced.push(Some(p));
            continue;
        }
        let opts: Vec<usize> = (0..st.active.len())
            .filter(|&p| {
                let v = st.active[p];
                st.graph.rt(v).len() < cfg.beta && !violates_gap_rule(st, n, v, cfg.min_gap_dist)
            })
            .collect();
        allowed.push(opts);
        forced.push(None);
    }
    SlotOptions { allowed, forced }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let mut out: u128 = 1;
    for i in 0..k {
        out = out.saturating_mul((n - i) as u128) / (i + 1) as u128;
    }
    out
}

fn key_of(j: &JointAssignment) -> Vec<Vec<usize>> {
    (0..j.len()).map(|s| j.voices_of(s).to_vec()).collect()
}

/// All joint assignments for the chord at `chord_idx` that satisfy the
/// configured constraints: per-note convergence ≤ α, per-note divergence ≤ β
/// (counting links already in the graph), the partial-voice gap rule, the
/// synchronous-crossing prohibition, and fixed pseudo-polyphonic chain links.
/// The constrained space is enumerated exhaustively when its size bound is at
/// most `budget`; otherwise up to `budget` distinct assignments are sampled
/// by repeatedly picking a random note and assigning random voices to it
/// until the empty voice is drawn.
pub fn enumerate_or_sample_assignments(
    st: &SeparationState,
    chains: &ChainSet,
    cfg: &ChordModelConfig,
    chord_idx: usize,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<JointAssignment> {
    let opts = slot_options(st, chains, cfg, chord_idx);
    let mut bound: u128 = 1;
    for (i, a) in opts.allowed.iter().enumerate() {
        let per: u128 = if opts.forced[i].is_some() {
            1
        } else {
            (0..=cfg.alpha.min(a.len())).map(|k| binomial(a.len(), k)).sum()
        };
        bound = bound.saturating_mul(per);
    }
    if bound <= budget as u128 {
        return enumerate_all(st, cfg, chord_idx, &opts);
    }
    sample_many(st, cfg, chord_idx, &opts, budget, rng)
}

fn enumerate_all(
    st: &SeparationState,
    cfg: &ChordModelConfig,
    chord_idx: usize,
    opts: &SlotOptions,
) -> Vec<JointAssignment> {
    let slots = opts.allowed.len();
    let mut used = vec![0usize; st.active.len()];
    let mut targets: Vec<Vec<usize>> = vec![Vec::new(); slots];
    let mut out = Vec::new();

    fn subsets(pool: &[usize], max: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for &p in pool {
            let mut grown: Vec<Vec<usize>> = out
                .iter()
                .filter(|s| s.len() < max)
                .map(|s| {
                    let mut s = s.clone();
                    s.push(p);
                    s
                })
                .collect();
            out.append(&mut grown);
        }
        out.sort();
        out
    }

    fn dfs(
        slot: usize,
        st: &SeparationState,
        cfg: &ChordModelConfig,
        chord_idx: usize,
        opts: &SlotOptions,
        used: &mut Vec<usize>,
        targets: &mut Vec<Vec<usize>>,
        out: &mut Vec<JointAssignment>,
    ) {
        if slot == opts.allowed.len() {
            let j = JointAssignment::new(targets.clone());
            if !cfg.forbid_sync_cross
                || !synchronous_crossing(st, &flat_links(st, chord_idx, &j))
            {
                out.push(j);
            }
            return;
        }
        let choices: Vec<Vec<usize>> = if opts.forced[slot].is_some() {
            vec![opts.allowed[slot].clone()]
        } else {
            subsets(&opts.allowed[slot], cfg.alpha)
        };
        for choice in choices {
            let fits = opts.forced[slot].is_some()
                || choice.iter().all(|&p| {
                    st.graph.rt(st.active[p]).len() + used[p] < cfg.beta
                });
            if !fits {
                continue;
            }
            for &p in &choice {
                used[p] += 1;
            }
            targets[slot] = choice.clone();
            dfs(slot + 1, st, cfg, chord_idx, opts, used, targets, out);
            targets[slot].clear();
            for &p in &choice {
                used[p] -= 1;
            }
        }
    }

    dfs(0, st, cfg, chord_idx, opts, &mut used, &mut targets, &mut out);
    out
}

/// One random assignment: notes in random order; each note draws voices
/// uniformly (the empty voice included) until ε comes up or the caps bind.
fn sample_one(
    st: &SeparationState,
    cfg: &ChordModelConfig,
    opts: &SlotOptions,
    rng: &mut ChaCha8Rng,
) -> JointAssignment {
    let slots = opts.allowed.len();
    let mut targets: Vec<Vec<usize>> = vec![Vec::new(); slots];
    let mut used = vec![0usize; st.active.len()];
    let mut order: Vec<usize> = (0..slots).collect();
    order.shuffle(rng);
    for slot in order {
        if let Some(p) = opts.forced[slot] {
            targets[slot] = vec![p];
            used[p] += 1;
            continue;
        }
        while targets[slot].len() < cfg.alpha {
            let pool: Vec<usize> = opts.allowed[slot]
                .iter()
                .copied()
                .filter(|&p| {
                    !targets[slot].contains(&p)
                        && st.graph.rt(st.active[p]).len() + used[p] < cfg.beta
                })
                .collect();
            // Index pool.len() stands for the empty voice and ends the note.
            let pick = rng.gen_range(0..=pool.len());
            if pick == pool.len() {
                break;
            }
            targets[slot].push(pool[pick]);
            used[pool[pick]] += 1;
        }
    }
    JointAssignment::new(targets)
}

fn sample_many(
    st: &SeparationState,
    cfg: &ChordModelConfig,
    chord_idx: usize,
    opts: &SlotOptions,
    want: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<JointAssignment> {
    let mut seen: HashSet<Vec<Vec<usize>>> = HashSet::new();
    let mut out = Vec::new();
    let mut attempts = 0usize;
    let max_attempts = want.saturating_mul(50).max(1000);
    while out.len() < want && attempts < max_attempts {
        attempts += 1;
        let j = sample_one(st, cfg, opts, rng);
        if cfg.forbid_sync_cross && synchronous_crossing(st, &flat_links(st, chord_idx, &j)) {
            continue;
        }
        if seen.insert(key_of(&j)) {
            out.push(j);
        }
    }
    out
}

/// Candidate negatives for max-margin training: enumerated or sampled
/// assignments for the chord with the gold assignment removed.
pub fn sample_negatives(
    st: &SeparationState,
    chains: &ChainSet,
    cfg: &ChordModelConfig,
    chord_idx: usize,
    want: usize,
    gold: &JointAssignment,
    rng: &mut ChaCha8Rng,
) -> Vec<JointAssignment> {
    let gold_key = key_of(gold);
    enumerate_or_sample_assignments(st, chains, cfg, chord_idx, want, rng)
        .into_iter()
        .filter(|j| key_of(j) != gold_key)
        .collect()
}

/// The chord-level scoring network: three convolution-with-max-pooling
/// reductions plus a fully connected top over the concatenated pooled and
/// assignment features, ending in a linear score.
#[derive(Debug, Clone, PartialEq)]
pub struct ChordNet {
    pub pair: ConvMaxPool,
    pub conv: ConvMaxPool,
    pub div: ConvMaxPool,
    pub top: Mlp,
}

/// The variable-size encoded inputs of one candidate assignment.
#[derive(Debug, Clone)]
pub struct AssignmentInput {
    pub pairs: Vec<Vec<f64>>,
    pub convs: Vec<Vec<f64>>,
    pub divs: Vec<Vec<f64>>,
    pub assign: Vec<f64>,
}

pub struct ChordNetCache {
    pub pair: ConvCache,
    pub conv: ConvCache,
    pub div: ConvCache,
    pub top: MlpCache,
}

impl ChordNet {
    /// Input widths of the pair, convergence, divergence, and assignment
    /// feature vectors this network accepts.
    pub fn in_dims(&self) -> (usize, usize, usize, usize) {
        let pooled = self.pair.k() + self.conv.k() + self.div.k();
        (
            self.pair.filter.in_dim,
            self.conv.filter.in_dim,
            self.div.filter.in_dim,
            self.top.in_dim() - pooled,
        )
    }

    pub fn init(
        d_pair: usize,
        d_conv: usize,
        d_div: usize,
        d_assign: usize,
        cfg: &ChordModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let pair = ConvMaxPool::init(d_pair, cfg.pair_filters, rng);
        let conv = ConvMaxPool::init(d_conv, cfg.conv_filters, rng);
        let div = ConvMaxPool::init(d_div, cfg.div_filters, rng);
        let concat = cfg.pair_filters + cfg.conv_filters + cfg.div_filters + d_assign;
        let top = Mlp::init(&[concat, cfg.hidden, 1], Head::Linear, rng);
        ChordNet { pair, conv, div, top }
    }

    pub fn zeros_like(&self) -> Self {
        ChordNet {
            pair: self.pair.zeros_like(),
            conv: self.conv.zeros_like(),
            div: self.div.zeros_like(),
            top: self.top.zeros_like(),
        }
    }

    pub fn forward(&self, input: &AssignmentInput) -> Result<(f64, ChordNetCache), NeuralError> {
        let pair = self.pair.forward(&input.pairs)?;
        let conv = self.conv.forward(&input.convs)?;
        let div = self.div.forward(&input.divs)?;
        let mut x = Vec::with_capacity(
            pair.out.len() + conv.out.len() + div.out.len() + input.assign.len(),
        );
        x.extend_from_slice(&pair.out);
        x.extend_from_slice(&conv.out);
        x.extend_from_slice(&div.out);
        x.extend_from_slice(&input.assign);
        let top = self.top.forward(&x)?;
        let score = top.output()[0];
        Ok((score, ChordNetCache { pair, conv, div, top }))
    }

    /// Backpropagates dLoss/dScore, accumulating into `grad`.
    pub fn backward(&self, cache: &ChordNetCache, d_score: f64, grad: &mut ChordNet) {
        let d_x = self.top.backward(&cache.top, &[d_score], &mut grad.top);
        let (kp, kc, kd) = (self.pair.k(), self.conv.k(), self.div.k());
        self.pair.backward(&cache.pair, &d_x[..kp], &mut grad.pair);
        self.conv.backward(&cache.conv, &d_x[kp..kp + kc], &mut grad.conv);
        self.div.backward(&cache.div, &d_x[kp + kc..kp + kc + kd], &mut grad.div);
    }

    pub fn n_params(&self) -> usize {
        self.pair.n_params() + self.conv.n_params() + self.div.n_params() + self.top.n_params()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.pair.flatten_into(out);
        self.conv.flatten_into(out);
        self.div.flatten_into(out);
        self.top.flatten_into(out);
    }

    pub fn unflatten_from(&mut self, src: &[f64], cursor: &mut usize) {
        self.pair.unflatten_from(src, cursor);
        self.conv.unflatten_from(src, cursor);
        self.div.unflatten_from(src, cursor);
        self.top.unflatten_from(src, cursor);
    }

    pub fn mask_into(&self, out: &mut Vec<bool>) {
        self.pair.mask_into(out);
        self.conv.mask_into(out);
        self.div.mask_into(out);
        self.top.mask_into(out);
    }
}

const CHORD_ARCH_PREFIX: &str = "chord-conv";

/// A trained chord-level model plus the feature configuration its inputs are
/// encoded with.
pub struct ChordModel {
    pub net: ChordNet,
    pub features: FeatureConfig,
}

/// The dense index range a slot-name prefix family occupies inside the
/// encoded Φ vector, plus the matching raw slot index range.
fn family_ranges(group: &GroupConfig, prefix: &str) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let mut dense = usize::MAX..0;
    let mut raw = usize::MAX..0;
    for (i, spec) in phi_slots().iter().enumerate() {
        if spec.name.starts_with(prefix) {
            let r = group.slot_range(&spec.name).expect("phi slot fitted");
            dense.start = dense.start.min(r.start);
            dense.end = dense.end.max(r.end);
            raw.start = raw.start.min(i);
            raw.end = raw.end.max(i + 1);
        }
    }
    (dense, raw)
}

impl ChordModel {
    fn group(&self, name: &str) -> &GroupConfig {
        self.features.groups.get(name).expect("model carries chord feature groups")
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let phi = self.group(PHI_GROUP);
        let (note_dense, _) = family_ranges(phi, "note.");
        let (voice_dense, _) = family_ranges(phi, "voice.");
        (
            phi.width(),
            self.group(CONV_GROUP).width() + note_dense.len(),
            self.group(DIV_GROUP).width() + voice_dense.len(),
            self.group(ASSIGN_GROUP).width(),
        )
    }

    pub fn arch(&self) -> String {
        let (dp, dc, dd, da) = self.dims();
        format!(
            "{CHORD_ARCH_PREFIX}:{dp}x{},{dc}x{},{dd}x{},{da}:{}:linear",
            self.net.pair.k(),
            self.net.conv.k(),
            self.net.div.k(),
            self.net.top.layers[0].out_dim,
        )
    }

    pub fn to_checkpoint(&self, optimizer: Option<AdaDelta>) -> Checkpoint {
        let mut params = Vec::new();
        self.net.flatten_into(&mut params);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: self.arch(),
            params,
            optimizer,
            feature_hash: self.features.hash(),
        }
    }

    /// Rebuilds a model from a checkpoint; the supplied feature configuration
    /// must hash to the checkpoint's recorded value.
    pub fn from_checkpoint(ck: &Checkpoint, features: FeatureConfig) -> Result<Self, ModelError> {
        if ck.feature_hash != features.hash() {
            return Err(ModelError::FeatureMismatch {
                got: ck.feature_hash.clone(),
                want: features.hash(),
            });
        }
        let parsed = parse_chord_arch(&ck.arch).ok_or_else(|| {
            NeuralError::ArchMismatch {
                got: ck.arch.clone(),
                want: format!("{CHORD_ARCH_PREFIX}:<dims>:<hidden>:linear"),
            }
        })?;
        let ((dp, kp), (dc, kc), (dd, kd), da, hidden) = parsed;
        let net = ChordNet {
            pair: ConvMaxPool { filter: crate::neural::Dense::zeros(dp, kp) },
            conv: ConvMaxPool { filter: crate::neural::Dense::zeros(dc, kc) },
            div: ConvMaxPool { filter: crate::neural::Dense::zeros(dd, kd) },
            top: Mlp {
                layers: vec![
                    crate::neural::Dense::zeros(kp + kc + kd + da, hidden),
                    crate::neural::Dense::zeros(hidden, 1),
                ],
                head: Head::Linear,
            },
        };
        let model = ChordModel { net, features };
        ck.expect(&model.arch(), model.net.n_params())?;
        let mut net = model.net;
        let mut cursor = 0;
        net.unflatten_from(&ck.params, &mut cursor);
        Ok(ChordModel { net, features: model.features })
    }

    /// Encodes the network input for one candidate assignment against the
    /// pre-chord state in `ctx`.
    pub fn encode_input(
        &self,
        ctx: &FeatureContext,
        chord_idx: usize,
        j: &JointAssignment,
    ) -> AssignmentInput {
        let st = ctx.state;
        let chord = &st.chords[chord_idx];
        let horizon = self.features.horizon;
        let phi = self.group(PHI_GROUP);
        let (note_dense, note_raw) = family_ranges(phi, "note.");
        let (voice_dense, voice_raw) = family_ranges(phi, "voice.");
        let n_slots = phi_slots().len();

        let mut pairs = Vec::new();
        for (slot, v) in j.flat() {
            let n = chord.notes[slot];
            match v {
                Some(pos) => pairs.push(phi_dense(ctx, phi, n, pos)),
                None => pairs.push(phi_epsilon(phi)),
            }
        }

        // Note-family dense segment of Φ for a chord note (the rest of the
        // raw vector is padded; only the note range of the encoding is kept).
        let note_segment = |n: usize| -> Vec<f64> {
            let mut raw = vec![None; n_slots];
            raw[note_raw.clone()].clone_from_slice(&note_values(ctx, n));
            phi.encode(&raw, horizon)[note_dense.clone()].to_vec()
        };
        let voice_segment = |pos: usize| -> Vec<f64> {
            let mut raw = vec![None; n_slots];
            raw[voice_raw.clone()].clone_from_slice(&voice_values(ctx, pos));
            phi.encode(&raw, horizon)[voice_dense.clone()].to_vec()
        };

        let conv_group = self.group(CONV_GROUP);
        let mut convs = Vec::new();
        for slot in 0..j.len() {
            let vvec = j.voices_of(slot);
            if vvec.is_empty() {
                continue;
            }
            let n = chord.notes[slot];
            let mut x = conv_group.encode(
                &conv_values(ctx, n, vvec, j.has_convergence()),
                horizon,
            );
            x.extend(note_segment(n));
            convs.push(x);
        }

        let div_group = self.group(DIV_GROUP);
        let mut divs = Vec::new();
        for (pos, slots) in j.rev() {
            let nvec: Vec<usize> = slots.iter().map(|&s| chord.notes[s]).collect();
            let mut x = div_group.encode(
                &div_values(ctx, &nvec, pos, j.has_divergence()),
                horizon,
            );
            x.extend(voice_segment(pos));
            divs.push(x);
        }

        let assign = self
            .group(ASSIGN_GROUP)
            .encode(&assign_values(ctx, chord_idx, j), horizon);
        AssignmentInput { pairs, convs, divs, assign }
    }
}

fn parse_chord_arch(
    arch: &str,
) -> Option<((usize, usize), (usize, usize), (usize, usize), usize, usize)> {
    let rest = arch.strip_prefix(CHORD_ARCH_PREFIX)?.strip_prefix(':')?;
    let mut parts = rest.split(':');
    let dims = parts.next()?;
    let hidden: usize = parts.next()?.parse().ok()?;
    if parts.next()? != "linear" || parts.next().is_some() {
        return None;
    }
    let mut dims = dims.split(',');
    let pool = |s: &str| -> Option<(usize, usize)> {
        let (d, k) = s.split_once('x')?;
        Some((d.parse().ok()?, k.parse().ok()?))
    };
    let p = pool(dims.next()?)?;
    let c = pool(dims.next()?)?;
    let d = pool(dims.next()?)?;
    let a: usize = dims.next()?.parse().ok()?;
    if dims.next().is_some() {
        return None;
    }
    Some((p, c, d, a, hidden))
}

/// Anything that can score a joint assignment against the pre-chord state.
/// Implemented by the trained model and by test oracles.
pub trait JointScorer {
    fn score(&self, ctx: &FeatureContext, chord_idx: usize, j: &JointAssignment) -> f64;
}

impl JointScorer for ChordModel {
    fn score(&self, ctx: &FeatureContext, chord_idx: usize, j: &JointAssignment) -> f64 {
        let input = self.encode_input(ctx, chord_idx, j);
        self.net.forward(&input).expect("encoded widths match network").0
    }
}

/// Greedy chord-level decoding: at each chord the highest-scoring candidate
/// assignment is applied. Score ties prefer fewer new voices, then the
/// lexicographically smaller assignment. Returns the voice graph and the
/// note-to-voice pair set (voices named by their pre-extension last note).
pub fn assign_chord_level_with(
    score: &Score,
    scorer: &dyn JointScorer,
    cfg: &ChordModelConfig,
    seed: u64,
    mut observe: impl FnMut(&SeparationState),
) -> (VoiceGraph, Vec<(usize, Target)>) {
    let tonal = TonalContext::new(score);
    let chains = detect_chains(score, CHAIN_MIN_LEN);
    let mut st = SeparationState::new(score, cfg.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_pairs: Vec<(usize, Target)> = Vec::new();
    for t in 0..st.chords.len() {
        let chord = st.chords[t].clone();
        st.apply_horizon(chord.onset);
        let candidates = enumerate_or_sample_assignments(&st, &chains, cfg, t, cfg.budget, &mut rng);
        let best = {
            let ctx = FeatureContext::new(&st, &tonal, &chains);
            let mut best: Option<(f64, usize, Vec<Vec<usize>>, usize)> = None;
            for (i, j) in candidates.iter().enumerate() {
                let s = scorer.score(&ctx, t, j);
                let eps = (0..j.len()).filter(|&sl| j.voices_of(sl).is_empty()).count();
                let key = key_of(j);
                let replace = match &best {
                    None => true,
                    Some((bs, beps, bkey, _)) => {
                        s > *bs || (s == *bs && (eps, &key) < (*beps, bkey))
                    }
                };
                if replace {
                    best = Some((s, eps, key, i));
                }
            }
            best.expect("the all-empty assignment is always a candidate").3
        };
        let j = &candidates[best];
        let assignment: Vec<(usize, Vec<usize>)> = chord
            .notes
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, j.voices_of(i).iter().map(|&p| st.active[p]).collect()))
            .collect();
        for (n, ps) in &assignment {
            if ps.is_empty() {
                out_pairs.push((*n, Target::Epsilon));
            } else {
                for &p in ps {
                    st.graph.add_link(p, *n);
                    out_pairs.push((*n, Target::Voice(p)));
                }
            }
        }
        insert_voices(&mut st, &assignment);
        observe(&st);
    }
    (st.graph, out_pairs)
}

pub fn assign_chord_level(
    score: &Score,
    model: &ChordModel,
    cfg: &ChordModelConfig,
    seed: u64,
) -> (VoiceGraph, Vec<(usize, Target)>) {
    assign_chord_level_with(score, model, cfg, seed, |_| {})
}

/// The gold joint assignment for one chord under the current active set,
/// truncated to the caps. Returns the assignment plus how many gold links
/// were dropped by truncation.
fn gold_assignment(
    st: &SeparationState,
    gold: &VoiceGraph,
    cfg: &ChordModelConfig,
    chord_idx: usize,
) -> (JointAssignment, usize) {
    let chord = &st.chords[chord_idx];
    let mut dropped = 0usize;
    let mut targets: Vec<Vec<usize>> = chord
        .notes
        .iter()
        .map(|&n| {
            let mut ps: Vec<usize> = (0..st.active.len())
                .filter(|&p| gold.has_link(st.active[p], n))
                .collect();
            if ps.len() > cfg.alpha {
                // Salience order is the top-down voice order: keep the cap's
                // worth of most salient links.
                dropped += ps.len() - cfg.alpha;
                ps.truncate(cfg.alpha);
            }
            ps
        })
        .collect();
    let mut used = vec![0usize; st.active.len()];
    for t in &mut targets {
        t.retain(|&p| {
            let cap = cfg.beta.saturating_sub(st.graph.rt(st.active[p]).len());
            if used[p] < cap {
                used[p] += 1;
                true
            } else {
                dropped += 1;
                false
            }
        });
    }
    (JointAssignment::new(targets), dropped)
}

/// Replays a gold voice graph left to right with teacher forcing, visiting
/// each chord's (possibly cap-truncated) gold assignment against the
/// pre-chord state.
fn replay_gold_chords(
    score: &Score,
    gold: &VoiceGraph,
    cfg: &ChordModelConfig,
    mut visit: impl FnMut(&FeatureContext, usize, &JointAssignment, usize),
) {
    let tonal = TonalContext::new(score);
    let chains = detect_chains(score, CHAIN_MIN_LEN);
    let mut st = SeparationState::new(score, cfg.horizon);
    for t in 0..st.chords.len() {
        let chord = st.chords[t].clone();
        st.apply_horizon(chord.onset);
        let (j, dropped) = gold_assignment(&st, gold, cfg, t);
        {
            let ctx = FeatureContext::new(&st, &tonal, &chains);
            visit(&ctx, t, &j, dropped);
        }
        let assignment: Vec<(usize, Vec<usize>)> = chord
            .notes
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, j.voices_of(i).iter().map(|&p| st.active[p]).collect()))
            .collect();
        for (n, ps) in &assignment {
            for &p in ps {
                st.graph.add_link(p, *n);
            }
        }
        insert_voices(&mut st, &assignment);
    }
}

/// Does the (cap-truncated) gold assignment still break a hard constraint?
/// Chain-forced links are exempt from the gap rule.
fn gold_violates(
    st: &SeparationState,
    chains: &ChainSet,
    cfg: &ChordModelConfig,
    chord_idx: usize,
    j: &JointAssignment,
) -> bool {
    let links = flat_links(st, chord_idx, j);
    if cfg.forbid_sync_cross && synchronous_crossing(st, &links) {
        return true;
    }
    links.iter().any(|&(v, n)| {
        chains.predecessor(n) != Some(v) && violates_gap_rule(st, n, v, cfg.min_gap_dist)
    })
}

/// Result of chord-level training: the model, optimizer state, per-epoch mean
/// hinge loss, and counts of skipped chords and truncated gold links.
pub struct ChordTraining {
    pub model: ChordModel,
    pub optimizer: AdaDelta,
    pub loss_trace: Vec<f64>,
    pub skipped_chords: usize,
    pub truncated_links: usize,
}

/// Trains the chord-level scoring network with the max-margin ranking
/// objective: per chord, the gold assignment must outscore the best of a set
/// of sampled negative assignments by a margin of 1. Gold assignments
/// exceeding the caps are truncated to their most salient links; chords whose
/// gold assignment still violates a hard constraint are skipped.
pub fn train_chord_model(
    corpus: &[(Score, VoiceGraph)],
    cfg: &ChordModelConfig,
    seed: u64,
) -> Result<ChordTraining, ModelError> {
    // Pass 1: fit the feature groups on the gold replays.
    let mut phi_raws: Vec<Vec<Option<f64>>> = Vec::new();
    let mut conv_raws: Vec<Vec<Option<f64>>> = Vec::new();
    let mut div_raws: Vec<Vec<Option<f64>>> = Vec::new();
    let mut assign_raws: Vec<Vec<Option<f64>>> = Vec::new();
    let mut truncated_links = 0usize;
    for (score, gold) in corpus {
        replay_gold_chords(score, gold, cfg, |ctx, t, j, dropped| {
            truncated_links += dropped;
            let chord = &ctx.state.chords[t];
            for (slot, v) in j.flat() {
                if let Some(pos) = v {
                    phi_raws.push(phi_raw(ctx, chord.notes[slot], pos));
                }
            }
            for slot in 0..j.len() {
                let vvec = j.voices_of(slot);
                if !vvec.is_empty() {
                    conv_raws.push(conv_values(ctx, chord.notes[slot], vvec, j.has_convergence()));
                }
            }
            for (pos, slots) in j.rev() {
                let nvec: Vec<usize> = slots.iter().map(|&s| chord.notes[s]).collect();
                div_raws.push(div_values(ctx, &nvec, pos, j.has_divergence()));
            }
            assign_raws.push(assign_values(ctx, t, j));
        });
    }
    if assign_raws.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut features = FeatureConfig::new(beat_to_f64(cfg.horizon));
    features.groups.insert(
        PHI_GROUP.to_string(),
        GroupConfig::fit(phi_slots(), phi_raws.iter().map(|v| v.as_slice())),
    );
    features.groups.insert(
        CONV_GROUP.to_string(),
        GroupConfig::fit(conv_slots(), conv_raws.iter().map(|v| v.as_slice())),
    );
    features.groups.insert(
        DIV_GROUP.to_string(),
        GroupConfig::fit(div_slots(), div_raws.iter().map(|v| v.as_slice())),
    );
    features.groups.insert(
        ASSIGN_GROUP.to_string(),
        GroupConfig::fit(assign_slots(), assign_raws.iter().map(|v| v.as_slice())),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ChordModel {
        net: ChordNet::init(1, 1, 1, 1, cfg, &mut rng),
        features,
    };
    let (dp, dc, dd, da) = model.dims();
    model.net = ChordNet::init(dp, dc, dd, da, cfg, &mut rng);
    let n_params = model.net.n_params();
    let mut mask = Vec::with_capacity(n_params);
    model.net.mask_into(&mut mask);
    let mut opt = AdaDelta::new(n_params);
    let mut params = vec![0.0; n_params];
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut skipped_chords = 0usize;
    let mut frozen: std::collections::HashMap<(usize, usize), Vec<JointAssignment>> =
        std::collections::HashMap::new();

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut chords_seen = 0usize;
        for (piece, (score, gold)) in corpus.iter().enumerate() {
            let chains = detect_chains(score, CHAIN_MIN_LEN);
            // The replay visits chords under teacher forcing; updates happen
            // inside the visitor, one chord at a time.
            let net = &mut model.net;
            let features = &model.features;
            let shadow = ChordModel {
                net: net.clone(),
                features: features.clone(),
            };
            let mut updated = shadow;
            replay_gold_chords(score, gold, cfg, |ctx, t, j_gold, _| {
                if gold_violates(ctx.state, &chains, cfg, t, j_gold) {
                    if epoch == 0 {
                        skipped_chords += 1;
                    }
                    return;
                }
                let negatives: Vec<JointAssignment> = if cfg.freeze_negatives {
                    frozen
                        .entry((piece, t))
                        .or_insert_with(|| {
                            sample_negatives(
                                ctx.state, &chains, cfg, t, cfg.negatives, j_gold, &mut rng,
                            )
                        })
                        .clone()
                } else {
                    sample_negatives(
                        ctx.state, &chains, cfg, t, cfg.negatives, j_gold, &mut rng,
                    )
                };
                let plus_input = updated.encode_input(ctx, t, j_gold);
                let (s_plus, plus_cache) =
                    updated.net.forward(&plus_input).expect("gold input encodes");
                let mut best: Option<(f64, ChordNetCache)> = None;
                for j in &negatives {
                    let input = updated.encode_input(ctx, t, j);
                    let (s, cache) = updated.net.forward(&input).expect("negative encodes");
                    if best.as_ref().map_or(true, |(bs, _)| s > *bs) {
                        best = Some((s, cache));
                    }
                }
                let Some((s_minus, minus_cache)) = best else { return };
                chords_seen += 1;
                let hinge = (1.0 - s_plus + s_minus).max(0.0);
                epoch_loss += hinge;
                if hinge > 0.0 {
                    let mut grad = updated.net.zeros_like();
                    updated.net.backward(&plus_cache, -1.0, &mut grad);
                    updated.net.backward(&minus_cache, 1.0, &mut grad);
                    params.clear();
                    updated.net.flatten_into(&mut params);
                    let mut grads = Vec::with_capacity(n_params);
                    grad.flatten_into(&mut grads);
                    add_l2(&mut grads, &params, cfg.lambda, &mask);
                    opt.step(&mut params, &grads);
                    let mut cursor = 0;
                    updated.net.unflatten_from(&params, &mut cursor);
                }
            });
            model.net = updated.net;
        }
        loss_trace.push(if chords_seen > 0 { epoch_loss / chords_seen as f64 } else { 0.0 });
    }
    Ok(ChordTraining { model, optimizer: opt, loss_trace, skipped_chords, truncated_links })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::score::simple_score;
    use crate::time::beat;
    use crate::synth::random_score;

    fn idx(s: &Score, id: u32) -> usize {
        s.index_of(crate::score::NoteId(id)).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn link_set(g: &VoiceGraph) -> BTreeSet<(usize, usize)> {
        g.links().collect()
    }

    /// A state whose active voices are the given note ids, with optional
    /// pre-existing links.
    fn fixture<'a>(s: &'a Score, links: &[(u32, u32)], active: &[u32]) -> SeparationState<'a> {
        let mut st = SeparationState::new(s, beats(100));
        for &(a, b) in links {
            st.graph.add_link(idx(s, a), idx(s, b));
        }
        st.active = active.iter().map(|&id| idx(s, id)).collect();
        st
    }

    /// Independent brute-force enumeration over per-note voice subsets with
    /// post-hoc constraint filtering.
    fn brute_force_keys(
        st: &SeparationState,
        chains: &ChainSet,
        cfg: &ChordModelConfig,
        chord_idx: usize,
    ) -> BTreeSet<Vec<Vec<usize>>> {
        let chord = &st.chords[chord_idx];
        let n_voices = st.active.len();
        let mut per_slot: Vec<Vec<Vec<usize>>> = Vec::new();
        for &n in &chord.notes {
            let forced = chains
                .predecessor(n)
                .and_then(|m| st.active.iter().position(|&u| u == m));
            if let Some(p) = forced {
                per_slot.push(vec![vec![p]]);
                continue;
            }
            let mut subs = Vec::new();
            for mask in 0u32..(1 << n_voices) {
                let sub: Vec<usize> =
                    (0..n_voices).filter(|&p| mask & (1 << p) != 0).collect();
                if sub.len() > cfg.alpha {
                    continue;
                }
                if sub.iter().any(|&p| {
                    let v = st.active[p];
                    st.graph.rt(v).len() >= cfg.beta
                        || violates_gap_rule(st, n, v, cfg.min_gap_dist)
                }) {
                    continue;
                }
                subs.push(sub);
            }
            per_slot.push(subs);
        }
        let mut out = BTreeSet::new();
        let mut pick = vec![0usize; per_slot.len()];
        'outer: loop {
            let targets: Vec<Vec<usize>> =
                pick.iter().enumerate().map(|(i, &k)| per_slot[i][k].clone()).collect();
            let mut used = vec![0usize; n_voices];
            let mut ok = true;
            for t in &targets {
                for &p in t {
                    used[p] += 1;
                    if st.graph.rt(st.active[p]).len() + used[p] > cfg.beta {
                        ok = false;
                    }
                }
            }
            if ok && cfg.forbid_sync_cross {
                let j = JointAssignment::new(targets.clone());
                ok = !synchronous_crossing(st, &flat_links(st, chord_idx, &j));
            }
            if ok {
                out.insert(targets);
            }
            for i in 0..pick.len() {
                pick[i] += 1;
                if pick[i] < per_slot[i].len() {
                    continue 'outer;
                }
                pick[i] = 0;
            }
            break;
        }
        out
    }

    #[test]
    fn one_note_no_voices_yields_only_epsilon() {
        let s = simple_score(&[(1, 60, beats(0), beats(1))]);
        let st = fixture(&s, &[], &[]);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let cfg = ChordModelConfig::default();
        let out = enumerate_or_sample_assignments(&st, &chains, &cfg, 0, 5000, &mut rng(0));
        assert_eq!(out.len(), 1);
        assert!(out[0].voices_of(0).is_empty());
    }

    #[test]
    fn gap_rule_excludes_distant_lookback() {
        // Voice 1 already diverged (partial); the chord note starts after its
        // offset. Pitch distance 7 breaks the rule, distance 5 does not.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 62, beats(1), beats(1)),
            (3, 67, beats(3), beats(1)),
        ]);
        let st = fixture(&s, &[(1, 2)], &[1, 2]);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let cfg = ChordModelConfig::default();
        assert!(violates_gap_rule(&st, idx(&s, 3), idx(&s, 1), cfg.min_gap_dist));
        // The complete voice (note 2) is unaffected even at distance 5.
        assert!(!violates_gap_rule(&st, idx(&s, 3), idx(&s, 2), cfg.min_gap_dist));
        let out = enumerate_or_sample_assignments(&st, &chains, &cfg, 2, 5000, &mut rng(0));
        assert!(out
            .iter()
            .all(|j| !j.voices_of(0).contains(&0)), "no candidate may use the partial voice");
    }

    #[test]
    fn gap_rule_spares_contiguous_lookback() {
        // Same shape but the chord note starts exactly at the partial
        // voice's offset: no gap, so the rule does not bind.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 62, beats(1), beats(1)),
            (3, 67, beats(1), beats(1)),
        ]);
        let st = fixture(&s, &[(1, 2)], &[1]);
        assert!(!violates_gap_rule(&st, idx(&s, 3), idx(&s, 1), 6.0));
    }

    #[test]
    fn synchronous_crossing_detected_on_inverted_extensions() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 67, beats(0), beats(1)),
            (3, 64, beats(1), beats(1)),
            (4, 59, beats(1), beats(1)),
        ]);
        let st = fixture(&s, &[], &[2, 1]);
        // High voice takes the low note and vice versa: a crossing.
        let crossed = vec![(idx(&s, 2), idx(&s, 4)), (idx(&s, 1), idx(&s, 3))];
        assert!(synchronous_crossing(&st, &crossed));
        let straight = vec![(idx(&s, 2), idx(&s, 3)), (idx(&s, 1), idx(&s, 4))];
        assert!(!synchronous_crossing(&st, &straight));
        // Divergence from one voice is not a crossing.
        let diverge = vec![(idx(&s, 2), idx(&s, 3)), (idx(&s, 2), idx(&s, 4))];
        assert!(!synchronous_crossing(&st, &diverge));
    }

    #[test]
    fn enumeration_matches_brute_force() {
        // Sweep chord sizes 1..=3 and voice counts 0..=4, with a mix of
        // complete and partial voices.
        for n_chord in 1..=3u32 {
            for n_voices in 0..=4u32 {
                let mut notes = Vec::new();
                for v in 0..n_voices {
                    notes.push((v + 1, 55 + 3 * v as i32, beats(0), beats(2)));
                }
                // One divergence: voice 1 (if present) already has an
                // out-link, making it partial.
                let mut links = Vec::new();
                if n_voices >= 2 {
                    notes.push((100, 54, beats(1), beats(1)));
                    links.push((1u32, 100u32));
                }
                for c in 0..n_chord {
                    notes.push((200 + c, 56 + 4 * c as i32, beats(2), beats(1)));
                }
                let s = simple_score(&notes);
                let mut active: Vec<u32> = (1..=n_voices).rev().collect();
                if n_voices >= 2 {
                    active.push(100);
                }
                let st = fixture(&s, &links, &active);
                let chains = detect_chains(&s, CHAIN_MIN_LEN);
                let cfg = ChordModelConfig::default();
                let chord_idx = st.chords.len() - 1;
                let got: BTreeSet<Vec<Vec<usize>>> =
                    enumerate_or_sample_assignments(&st, &chains, &cfg, chord_idx, 100_000, &mut rng(1))
                        .iter()
                        .map(key_of)
                        .collect();
                let want = brute_force_keys(&st, &chains, &cfg, chord_idx);
                assert_eq!(got, want, "chord {n_chord}, voices {n_voices}");
            }
        }
    }

    #[test]
    fn enumeration_is_duplicate_free() {
        let s = simple_score(&[
            (1, 50, beats(0), beats(2)),
            (2, 55, beats(0), beats(2)),
            (3, 60, beats(0), beats(2)),
            (4, 57, beats(2), beats(1)),
            (5, 52, beats(2), beats(1)),
        ]);
        let st = fixture(&s, &[], &[3, 2, 1]);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let cfg = ChordModelConfig::default();
        let out = enumerate_or_sample_assignments(&st, &chains, &cfg, 1, 100_000, &mut rng(2));
        let keys: BTreeSet<Vec<Vec<usize>>> = out.iter().map(key_of).collect();
        assert_eq!(keys.len(), out.len());
    }

    fn tiny_net(seed: u64) -> (ChordNet, AssignmentInput) {
        let cfg = ChordModelConfig {
            pair_filters: 4,
            conv_filters: 3,
            div_filters: 3,
            hidden: 5,
            ..ChordModelConfig::default()
        };
        let mut r = rng(seed);
        let net = ChordNet::init(6, 5, 4, 3, &cfg, &mut r);
        let mut vec_of = |d: usize| -> Vec<f64> {
            (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()
        };
        let input = AssignmentInput {
            pairs: vec![vec_of(6), vec_of(6), vec_of(6)],
            convs: vec![vec_of(5), vec_of(5)],
            divs: vec![vec_of(4)],
            assign: vec_of(3),
        };
        (net, input)
    }

    #[test]
    fn zero_network_scores_zero() {
        let (net, input) = tiny_net(3);
        let zero = net.zeros_like();
        let (score, _) = zero.forward(&input).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn score_is_invariant_to_input_set_order() {
        let (net, input) = tiny_net(4);
        let (base, _) = net.forward(&input).unwrap();
        let mut shuffled = input.clone();
        shuffled.pairs.reverse();
        shuffled.convs.reverse();
        let (same, _) = net.forward(&shuffled).unwrap();
        assert_eq!(base, same);
    }

    #[test]
    fn empty_input_sets_pool_to_zero() {
        let (net, mut input) = tiny_net(5);
        input.convs.clear();
        input.divs.clear();
        let (_, cache) = net.forward(&input).unwrap();
        assert!(cache.conv.out.iter().all(|&v| v == 0.0));
        assert!(cache.div.out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (net, input) = tiny_net(seed);
            let mut grad = net.zeros_like();
            let (_, cache) = net.forward(&input).unwrap();
            net.backward(&cache, 1.0, &mut grad);
            let mut analytic = Vec::new();
            grad.flatten_into(&mut analytic);
            let mut params = Vec::new();
            net.flatten_into(&mut params);
            let probe = net.clone();
            let err = crate::neural::gradient_check(
                &mut params,
                &analytic,
                |p| {
                    let mut m = probe.clone();
                    let mut cursor = 0;
                    m.unflatten_from(p, &mut cursor);
                    m.forward(&input).unwrap().0
                },
                1e-5,
            );
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn hinge_dead_zone_has_zero_gradient() {
        // Scale the output layer until the gold margin clears 1; the hinge
        // is then locally constant and its true gradient vanishes.
        let (mut net, input) = tiny_net(6);
        let (mut other_input, _) = (tiny_net(7).1, ());
        other_input.assign = input.assign.iter().map(|v| -v).collect();
        let mut scale = 1.0;
        loop {
            let s_plus = net.forward(&input).unwrap().0;
            let s_minus = net.forward(&other_input).unwrap().0;
            if (s_plus - s_minus).abs() > 1.5 {
                break;
            }
            scale *= 2.0;
            let last = net.top.layers.last_mut().unwrap();
            for w in last.w.iter_mut().chain(last.b.iter_mut()) {
                *w *= 2.0;
            }
            assert!(scale < 1e9, "could not open a margin");
        }
        let s1 = net.forward(&input).unwrap().0;
        let s2 = net.forward(&other_input).unwrap().0;
        let (plus, minus) = if s1 >= s2 { (&input, &other_input) } else { (&other_input, &input) };
        let mut params = Vec::new();
        net.flatten_into(&mut params);
        let analytic = vec![0.0; params.len()];
        let probe = net.clone();
        let err = crate::neural::gradient_check(
            &mut params,
            &analytic,
            |p| {
                let mut m = probe.clone();
                let mut cursor = 0;
                m.unflatten_from(p, &mut cursor);
                let sp = m.forward(plus).unwrap().0;
                let sm = m.forward(minus).unwrap().0;
                (1.0 - sp + sm).max(0.0)
            },
            1e-5,
        );
        assert!(err < 1e-8, "dead-zone gradient should vanish, err {err}");
    }

    fn toy_corpus() -> Vec<(Score, VoiceGraph)> {
        // Two short two-part pieces; gold voices are the parallel lines.
        let mut corpus = Vec::new();
        for (base, shift) in [(60u32, 0i32), (55, 2)] {
            let mut notes = Vec::new();
            let upper = [4, 5, 7, 9, 7, 5, 4, 2];
            let lower = [0, 2, 4, 5, 4, 2, 0, -1];
            for t in 0..8 {
                notes.push((
                    t as u32 * 2 + 1,
                    base as i32 + 12 + upper[t] + shift,
                    beats(t as i64),
                    beats(1),
                ));
                notes.push((t as u32 * 2 + 2, base as i32 + lower[t] + shift, beats(t as i64), beats(1)));
            }
            let s = simple_score(&notes);
            let mut g = VoiceGraph::new(s.len());
            for t in 0..7u32 {
                g.add_link(idx(&s, t * 2 + 1), idx(&s, t * 2 + 3));
                g.add_link(idx(&s, t * 2 + 2), idx(&s, t * 2 + 4));
            }
            corpus.push((s, g));
        }
        corpus
    }

    fn small_cfg() -> ChordModelConfig {
        ChordModelConfig {
            pair_filters: 8,
            conv_filters: 4,
            div_filters: 4,
            hidden: 16,
            epochs: 120,
            negatives: 100,
            ..ChordModelConfig::default()
        }
    }

    /// The toy-corpus training run is the slowest fixture; share it between
    /// the tests that only read its result.
    fn trained_toy() -> &'static ChordTraining {
        static CELL: std::sync::OnceLock<ChordTraining> = std::sync::OnceLock::new();
        CELL.get_or_init(|| train_chord_model(&toy_corpus(), &small_cfg(), 7).unwrap())
    }

    /// Scores an assignment by agreement with a gold link set: +1 for each
    /// gold link, −1 for each spurious link. The gold assignment is the
    /// unique maximizer whenever it is a candidate.
    struct OracleJointScorer {
        gold: BTreeSet<(usize, usize)>,
    }

    impl JointScorer for OracleJointScorer {
        fn score(&self, ctx: &FeatureContext, chord_idx: usize, j: &JointAssignment) -> f64 {
            flat_links(ctx.state, chord_idx, j)
                .iter()
                .map(|l| if self.gold.contains(l) { 1.0 } else { -1.0 })
                .sum()
        }
    }

    #[test]
    fn oracle_scorer_reproduces_the_annotation() {
        for (s, gold) in &toy_corpus() {
            let oracle = OracleJointScorer { gold: link_set(gold) };
            let cfg = ChordModelConfig::default();
            let (g, _) = assign_chord_level_with(s, &oracle, &cfg, 0, |_| {});
            assert_eq!(link_set(&g), link_set(gold));
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let corpus = toy_corpus();
        let cfg = ChordModelConfig { epochs: 2, ..small_cfg() };
        let out = train_chord_model(&corpus, &cfg, 11).unwrap();
        let s = random_score(5, 12, 3);
        let (g1, p1) = assign_chord_level(&s, &out.model, &cfg, 42);
        let (g2, p2) = assign_chord_level(&s, &out.model, &cfg, 42);
        assert_eq!(link_set(&g1), link_set(&g2));
        assert_eq!(p1, p2);
    }

    #[test]
    fn decoded_output_honors_the_caps() {
        let corpus = toy_corpus();
        let cfg = ChordModelConfig { epochs: 2, ..small_cfg() };
        let out = train_chord_model(&corpus, &cfg, 13).unwrap();
        for seed in 0..10 {
            let s = random_score(seed, 14, 4);
            let (g, _) = assign_chord_level(&s, &out.model, &cfg, seed);
            for n in 0..s.len() {
                assert!(g.lt(n).len() <= cfg.alpha, "note {n} in-links");
                assert!(g.rt(n).len() <= cfg.beta, "note {n} out-links");
            }
        }
    }

    #[test]
    fn training_loss_drops_on_the_toy_corpus() {
        let out = trained_toy();
        let first = out.loss_trace[0];
        let last = *out.loss_trace.last().unwrap();
        assert!(first > 0.0);
        assert!(last < first / 10.0, "first {first}, last {last}");
    }

    #[test]
    fn trained_model_keeps_a_monophonic_line_in_one_voice() {
        let out = trained_toy();
        let cfg = small_cfg();
        let notes: Vec<(u32, i32, Beat, Beat)> =
            (0..8).map(|t| (t as u32 + 1, 72 + [0, 2, 4, 5, 4, 2, 0, -1][t], beats(t as i64), beats(1))).collect();
        let s = simple_score(&notes);
        let (g, _) = assign_chord_level(&s, &out.model, &cfg, 0);
        assert_eq!(g.link_count(), s.len() - 1, "one unbroken voice");
    }

    #[test]
    fn negatives_never_contain_the_gold_assignment() {
        // Space large enough to force sampling: 3 notes, 4 voices.
        let s = simple_score(&[
            (1, 50, beats(0), beats(2)),
            (2, 55, beats(0), beats(2)),
            (3, 60, beats(0), beats(2)),
            (4, 65, beats(0), beats(2)),
            (5, 62, beats(2), beats(1)),
            (6, 56, beats(2), beats(1)),
            (7, 51, beats(2), beats(1)),
        ]);
        let st = fixture(&s, &[], &[4, 3, 2, 1]);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        let cfg = ChordModelConfig::default();
        let gold = JointAssignment::new(vec![vec![1], vec![2], vec![3]]);
        let mut r = rng(9);
        let mut total = 0usize;
        while total < 20_000 {
            let negs = sample_negatives(&st, &chains, &cfg, 1, 50, &gold, &mut r);
            total += negs.len();
            assert!(negs.iter().all(|j| key_of(j) != key_of(&gold)));
        }
    }

    #[test]
    fn chain_links_are_forced() {
        // Eight equal eighth-note D4s spaced at twice their duration form a
        // repeat chain; the chain successor must stay in its voice.
        let mut notes: Vec<(u32, i32, Beat, Beat)> = Vec::new();
        for t in 0..8u32 {
            notes.push((t + 1, 62, beat(t as i64, 1), beat(1, 2)));
        }
        // A competing voice nearby.
        notes.push((100, 64, beats(0), beat(7, 1)));
        let s = simple_score(&notes);
        let chains = detect_chains(&s, CHAIN_MIN_LEN);
        assert!(chains.pp_note(idx(&s, 2)), "fixture must contain a chain");
        let mut st = fixture(&s, &[], &[]);
        st.active = vec![idx(&s, 100), idx(&s, 1)];
        let cfg = ChordModelConfig::default();
        let chord_idx = st.places[idx(&s, 2)].chord;
        let out = enumerate_or_sample_assignments(&st, &chains, &cfg, chord_idx, 5000, &mut rng(0));
        assert!(!out.is_empty());
        let chain_pos = 1; // note 1's voice
        assert!(out.iter().all(|j| j.voices_of(0) == [chain_pos]));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            train_chord_model(&[], &small_cfg(), 0),
            Err(ModelError::EmptyCorpus)
        ));
    }

    #[test]
    fn gold_above_caps_is_truncated() {
        // Three voices converge on one note: one gold link must be dropped.
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 64, beats(0), beats(1)),
            (3, 67, beats(0), beats(1)),
            (4, 62, beats(1), beats(1)),
        ]);
        let mut g = VoiceGraph::new(s.len());
        for id in 1..=3u32 {
            g.add_link(idx(&s, id), idx(&s, 4));
        }
        let cfg = ChordModelConfig { epochs: 1, ..small_cfg() };
        let out = train_chord_model(&[(s, g)], &cfg, 0).unwrap();
        assert_eq!(out.truncated_links, 1);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let corpus = toy_corpus();
        let cfg = ChordModelConfig { epochs: 2, ..small_cfg() };
        let out = train_chord_model(&corpus, &cfg, 1).unwrap();
        let ck = out.model.to_checkpoint(Some(out.optimizer.clone()));
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        let model = ChordModel::from_checkpoint(&back, out.model.features.clone()).unwrap();
        assert_eq!(model.net, out.model.net);
        let other = FeatureConfig::new(99.0);
        assert!(matches!(
            ChordModel::from_checkpoint(&back, other),
            Err(ModelError::FeatureMismatch { .. })
        ));
    }
}
