//! Note-level neural assignment: greedy per-note decoding against the active
//! voices, insertion ordering for many-to-many voice graphs, and likelihood
//! training.
//!
//! Decoding walks the chords left to right. For each chord, every note is
//! scored against every active voice (and the empty voice) and the
//! highest-probability pairs are committed greedily, subject to a probability
//! threshold τ, a per-note convergence cap α, and a per-voice divergence cap
//! β. The resulting complete voices are then woven into the ordered active
//! set so that positional features stay meaningful even when voices converge,
//! diverge, or cross.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, FeatureConfig, GroupConfig};
use crate::features::{phi_dense, phi_epsilon, phi_raw, phi_slots, FeatureContext, PHI_GROUP};
use crate::graph::VoiceGraph;
use crate::neural::{add_l2, AdaDelta, Checkpoint, Head, Mlp, NeuralError, CHECKPOINT_VERSION};
use crate::pseudo::{detect_chains, CHAIN_MIN_LEN};
use crate::score::Score;
use crate::time::{beat_to_f64, beats, Beat};
use crate::tonal::TonalContext;
use crate::voices::{SeparationState, Target};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("checkpoint was trained against feature configuration {got}, expected {want}")]
    FeatureMismatch { got: String, want: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Hyper-parameters of the note-level model.
#[derive(Debug, Clone)]
pub struct NoteModelConfig {
    /// Minimum assignment probability; below it a note stops taking voices.
    pub tau: f64,
    /// Maximum voices converging into one note.
    pub alpha: usize,
    /// Maximum notes a voice may diverge into.
    pub beta: usize,
    /// Hidden layer widths of the scoring network.
    pub hidden: Vec<usize>,
    /// L2 regularization strength.
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Active voices whose last offset trails the current onset by more than
    /// this many beats stop being assignment candidates.
    pub horizon: Beat,
    /// A note may not join a partial voice across a gap when the pitch
    /// distance is at least this many half steps.
    pub min_gap_dist: f64,
}

impl Default for NoteModelConfig {
    fn default() -> Self {
        NoteModelConfig {
            tau: 0.3,
            alpha: 2,
            beta: 2,
            hidden: vec![200, 200],
            lambda: 1e-4,
            epochs: 300,
            minibatch: 20,
            horizon: beats(4),
            min_gap_dist: 6.0,
        }
    }
}

/// Anything that can produce an assignment probability p(n, v) for a note and
/// an active voice position (`None` is the empty voice). Implemented by the
/// trained model and by test oracles.
pub trait PairScorer {
    fn prob(&self, ctx: &FeatureContext, n: usize, voice_pos: Option<usize>) -> f64;
}

/// A trained note-level scoring network plus the feature configuration its
/// inputs were encoded with.
pub struct NoteModel {
    pub net: Mlp,
    pub features: FeatureConfig,
}

fn arch_string(prefix: &str, net: &Mlp) -> String {
    let mut sizes = vec![net.in_dim().to_string()];
    sizes.extend(net.layers.iter().map(|l| l.out_dim.to_string()));
    let head = match net.head {
        Head::Sigmoid => "sigmoid",
        Head::Linear => "linear",
    };
    format!("{prefix}:{}:{head}", sizes.join("-"))
}

fn parse_arch(arch: &str, prefix: &str) -> Option<(Vec<usize>, Head)> {
    let rest = arch.strip_prefix(prefix)?.strip_prefix(':')?;
    let (sizes, head) = rest.rsplit_once(':')?;
    let head = match head {
        "sigmoid" => Head::Sigmoid,
        "linear" => Head::Linear,
        _ => return None,
    };
    let sizes: Option<Vec<usize>> = sizes.split('-').map(|s| s.parse().ok()).collect();
    Some((sizes?, head))
}

const NOTE_ARCH_PREFIX: &str = "note-mlp";

impl NoteModel {
    pub fn arch(&self) -> String {
        arch_string(NOTE_ARCH_PREFIX, &self.net)
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

    /// Rebuilds a model from a checkpoint; the caller supplies the feature
    /// configuration, which must hash to the checkpoint's recorded value.
    pub fn from_checkpoint(ck: &Checkpoint, features: FeatureConfig) -> Result<Self, ModelError> {
        let hash = features.hash();
        if ck.feature_hash != hash {
            return Err(ModelError::FeatureMismatch { got: ck.feature_hash.clone(), want: hash });
        }
        let (sizes, head) = parse_arch(&ck.arch, NOTE_ARCH_PREFIX).ok_or_else(|| {
            ModelError::Neural(NeuralError::ArchMismatch {
                got: ck.arch.clone(),
                want: format!("{NOTE_ARCH_PREFIX}:…"),
            })
        })?;
        let mut net = Mlp {
            layers: sizes
                .windows(2)
                .map(|p| crate::neural::Dense::zeros(p[0], p[1]))
                .collect(),
            head,
        };
        ck.expect(&ck.arch, net.n_params())?;
        let mut cursor = 0;
        net.unflatten_from(&ck.params, &mut cursor);
        Ok(NoteModel { net, features })
    }

    fn phi_group(&self) -> &GroupConfig {
        self.features.group(PHI_GROUP).expect("model carries phi group")
    }
}

impl PairScorer for NoteModel {
    fn prob(&self, ctx: &FeatureContext, n: usize, voice_pos: Option<usize>) -> f64 {
        let x = match voice_pos {
            Some(pos) => phi_dense(ctx, self.phi_group(), n, pos),
            None => phi_epsilon(self.phi_group()),
        };
        self.net.forward(&x).expect("feature width matches network").output()[0]
    }
}

/// Inserts the voices completed by one chord's assignment into the ordered
/// active set. `assignment` pairs each chord note (descending pitch order)
/// with the last notes of the voices assigned to it (empty for the empty
/// voice); the corresponding links must already be in the graph.
///
/// Voices connected to active voices are placed adjacent to them: above the
/// connecting voice when the new last pitch is equal or higher, otherwise
/// after the lowest voice already diverging below it. Empty-voice starts and
/// crossing extensions are deferred and placed by the blocked-skip rule.
pub fn insert_voices(st: &mut SeparationState, assignment: &[(usize, Vec<usize>)]) {
    let chord: Vec<usize> = assignment.iter().map(|(n, _)| *n).collect();
    let mut deferred: Vec<usize> = Vec::new();
    for (n, parents) in assignment {
        let n = *n;
        if parents.is_empty() {
            deferred.push(n);
            continue;
        }
        let mut parents = parents.clone();
        parents.sort_by_key(|p| {
            st.active.iter().position(|&v| v == *p).expect("parent voice active")
        });
        // A connecting extension defers to the blocked-skip phase when it
        // cuts through an unrelated active voice. Only complete voices are
        // candidates: a partial voice's stream continues in its completions,
        // which are also active and carry the authoritative window. The
        // chord's links are already in the graph, so a voice whose only
        // pending extensions are chord notes not yet placed still counts as
        // complete here. Voices that themselves contain the connecting note
        // (divergent siblings) are not "crossed" either: their window merely
        // touches the shared divergence point.
        let complete_for_crossing = |u: usize| {
            st.graph.rt(u).iter().all(|&r| chord.contains(&r) && !st.active.contains(&r))
        };
        let crossing = st.active.iter().any(|&u| {
            complete_for_crossing(u)
                && !parents.contains(&u)
                && parents.iter().any(|&v| {
                    st.crosses(v, n, u) && !st.voice_notes(u).contains(&v)
                })
        });
        if crossing {
            deferred.push(n);
            continue;
        }
        let ps = st.score.note(n).ps;
        let mut inserted = false;
        for &v in &parents {
            if ps < st.score.note(v).ps {
                // Below the connecting voice: after the lowest voice already
                // diverging from it, or right after it if none.
                let vpos = st.active.iter().position(|&u| u == v).expect("parent voice active");
                let mut at = vpos;
                for (j, &u) in st.active.iter().enumerate() {
                    if j > at && st.graph.lt(u).contains(&v) {
                        at = j;
                    }
                }
                st.active.insert(at + 1, n);
                inserted = true;
                break;
            }
        }
        if !inserted {
            let top =
                st.active.iter().position(|&u| u == parents[0]).expect("parent voice active");
            st.active.insert(top, n);
        }
    }
    for n in deferred {
        st.insert_voice_blocked_skip(n);
    }
}

/// Greedy note-level decoding over a whole score. Returns the voice graph and
/// the note-to-voice pair set in assignment order (voices named by their
/// pre-extension last note). `observe` runs after each chord with the updated
/// state.
pub fn assign_note_level_with(
    score: &Score,
    scorer: &dyn PairScorer,
    cfg: &NoteModelConfig,
    mut observe: impl FnMut(&SeparationState),
) -> (VoiceGraph, Vec<(usize, Target)>) {
    let tonal = TonalContext::new(score);
    let chains = detect_chains(score, CHAIN_MIN_LEN);
    let mut st = SeparationState::new(score, cfg.horizon);
    let mut out_pairs: Vec<(usize, Target)> = Vec::new();
    for t in 0..st.chords.len() {
        let chord = st.chords[t].clone();
        st.apply_horizon(chord.onset);
        let n_voices = st.active.len();
        // Score every candidate pair against the pre-chord state; the empty
        // voice sits at position n_voices.
        let probs: Vec<Vec<f64>> = {
            let ctx = FeatureContext::new(&st, &tonal, &chains);
            chord
                .notes
                .iter()
                .map(|&n| {
                    (0..n_voices)
                        .map(|j| scorer.prob(&ctx, n, Some(j)))
                        .chain(std::iter::once(scorer.prob(&ctx, n, None)))
                        .collect()
                })
                .collect()
        };
        let mut alive = vec![vec![true; n_voices + 1]; chord.notes.len()];
        // Voices that already diverged up to the cap take no further links.
        for (j, &v) in st.active.iter().enumerate() {
            if st.graph.rt(v).len() >= cfg.beta {
                for row in &mut alive {
                    row[j] = false;
                }
            }
        }
        // Partial-voice gap rule: a note may not join a voice that already
        // diverged when a rest separates them and the pitch leap is wide.
        for (i, &n) in chord.notes.iter().enumerate() {
            for (j, &v) in st.active.iter().enumerate() {
                if crate::model_chord::violates_gap_rule(&st, n, v, cfg.min_gap_dist) {
                    alive[i][j] = false;
                }
            }
        }
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); chord.notes.len()];
        let mut taken = vec![0usize; n_voices];
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..chord.notes.len() {
                for j in 0..=n_voices {
                    if alive[i][j] && best.map_or(true, |(bi, bj)| probs[i][j] > probs[bi][bj]) {
                        best = Some((i, j));
                    }
                }
            }
            let Some((i, j)) = best else { break };
            if j == n_voices || probs[i][j] < cfg.tau {
                // The note is done taking voices; ε only if it got none.
                for slot in &mut alive[i] {
                    *slot = false;
                }
            } else {
                parents[i].push(j);
                alive[i][j] = false;
                if parents[i].len() >= cfg.alpha {
                    for slot in &mut alive[i] {
                        *slot = false;
                    }
                }
                taken[j] += 1;
                if st.graph.rt(st.active[j]).len() + taken[j] >= cfg.beta {
                    for row in &mut alive {
                        row[j] = false;
                    }
                }
            }
        }
        let assignment: Vec<(usize, Vec<usize>)> = chord
            .notes
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, parents[i].iter().map(|&j| st.active[j]).collect()))
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

pub fn assign_note_level(
    score: &Score,
    scorer: &dyn PairScorer,
    cfg: &NoteModelConfig,
) -> (VoiceGraph, Vec<(usize, Target)>) {
    assign_note_level_with(score, scorer, cfg, |_| {})
}

/// One training example: the raw Φ vector (or the empty voice) plus its
/// binary link label.
enum RawSample {
    Phi(Vec<Option<f64>>),
    Epsilon,
}

/// Replays a gold voice graph left to right, visiting every (note, voice)
/// candidate pair with its label under the pre-chord active state.
fn replay_gold(
    score: &Score,
    gold: &VoiceGraph,
    horizon: Beat,
    mut visit: impl FnMut(&FeatureContext, usize, Option<usize>, bool),
) {
    let tonal = TonalContext::new(score);
    let chains = detect_chains(score, CHAIN_MIN_LEN);
    let mut st = SeparationState::new(score, horizon);
    for t in 0..st.chords.len() {
        let chord = st.chords[t].clone();
        st.apply_horizon(chord.onset);
        let assignment: Vec<(usize, Vec<usize>)> = chord
            .notes
            .iter()
            .map(|&n| {
                let parents: Vec<usize> = st
                    .active
                    .iter()
                    .copied()
                    .filter(|&v| gold.has_link(v, n))
                    .collect();
                (n, parents)
            })
            .collect();
        {
            let ctx = FeatureContext::new(&st, &tonal, &chains);
            for (i, &n) in chord.notes.iter().enumerate() {
                for j in 0..st.active.len() {
                    let linked = assignment[i].1.contains(&st.active[j]);
                    visit(&ctx, n, Some(j), linked);
                }
                visit(&ctx, n, None, assignment[i].1.is_empty());
            }
        }
        for (n, ps) in &assignment {
            for &p in ps {
                st.graph.add_link(p, *n);
            }
        }
        insert_voices(&mut st, &assignment);
    }
}

/// Result of training: the model and the mean per-pair loss of each epoch.
pub struct NoteTraining {
    pub model: NoteModel,
    pub optimizer: AdaDelta,
    pub loss_trace: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Trains the scoring network to maximize the likelihood of the annotated
/// links (binary cross-entropy over all candidate pairs under teacher-forced
/// active states), with L2 on the weights.
pub fn train_note_model(
    corpus: &[(Score, VoiceGraph)],
    cfg: &NoteModelConfig,
    seed: u64,
) -> Result<NoteTraining, ModelError> {
    // Pass 1: collect raw feature vectors and labels from gold replays.
    let mut raws: Vec<(RawSample, f64)> = Vec::new();
    for (score, gold) in corpus {
        replay_gold(score, gold, cfg.horizon, |ctx, n, pos, linked| {
            let label = if linked { 1.0 } else { 0.0 };
            let sample = match pos {
                Some(j) => RawSample::Phi(phi_raw(ctx, n, j)),
                None => RawSample::Epsilon,
            };
            raws.push((sample, label));
        });
    }
    if raws.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    // Fit the feature configuration on the observed raw vectors.
    let phis = raws.iter().filter_map(|(s, _)| match s {
        RawSample::Phi(v) => Some(v.as_slice()),
        RawSample::Epsilon => None,
    });
    let group = GroupConfig::fit(phi_slots(), phis);
    let mut features = FeatureConfig::new(beat_to_f64(cfg.horizon));
    features.groups.insert(PHI_GROUP.to_string(), group);
    let group = features.group(PHI_GROUP)?;
    let horizon = beat_to_f64(cfg.horizon);
    let data: Vec<(Vec<f64>, f64)> = raws
        .into_iter()
        .map(|(s, label)| {
            let x = match s {
                RawSample::Phi(v) => group.encode(&v, horizon),
                RawSample::Epsilon => phi_epsilon(group),
            };
            (x, label)
        })
        .collect();
    // Train with a linear-score head (numerically stable loss); the returned
    // model applies the sigmoid in its head instead.
    let mut sizes = vec![group.width()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::init(&sizes, Head::Linear, &mut rng);
    let n_params = net.n_params();
    let mut mask = Vec::with_capacity(n_params);
    net.mask_into(&mut mask);
    let mut opt = AdaDelta::new(n_params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut params = vec![0.0; n_params];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.minibatch.max(1)) {
            let mut grad = net.zeros_like();
            for &idx in batch {
                let (x, label) = &data[idx];
                let cache = net.forward(x).expect("training vector width matches");
                let z = cache.output()[0];
                epoch_loss += label * softplus(-z) + (1.0 - label) * softplus(z);
                let p = crate::neural::sigmoid(z);
                net.backward(&cache, &[(p - label) / batch.len() as f64], &mut grad);
            }
            params.clear();
            net.flatten_into(&mut params);
            let mut grads = Vec::with_capacity(n_params);
            grad.flatten_into(&mut grads);
            add_l2(&mut grads, &params, cfg.lambda, &mask);
            opt.step(&mut params, &grads);
            let mut cursor = 0;
            net.unflatten_from(&params, &mut cursor);
        }
        loss_trace.push(epoch_loss / data.len() as f64);
    }
    net.head = Head::Sigmoid;
    Ok(NoteTraining { model: NoteModel { net, features }, optimizer: opt, loss_trace })
}
