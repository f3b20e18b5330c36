//! Pair-based evaluation: metrics, chord scenario partitions, k-fold
//! cross-validation, and corpus statistics.
//!
//! A separation is compared to its annotation through the sets of directed
//! within-voice note pairs (one pair per link, so convergence and divergence
//! contribute one pair per participating voice). Metrics are micro-averaged:
//! intersection/predicted/actual counts are pooled over songs before the
//! ratios are taken.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chords::build_chord_sequence;
use crate::envelope::envelope_assign;
use crate::graph::VoiceGraph;
use crate::io::color_voices;
use crate::model_chord::{assign_chord_level, train_chord_model, ChordModelConfig};
use crate::model_note::{assign_note_level, train_note_model, ModelError, NoteModelConfig};
use crate::score::Score;
use crate::time::beat_to_f64;

/// A directed within-voice pair, as (from-note, to-note) indices.
pub type PairSet = BTreeSet<(usize, usize)>;

/// The set of directed within-voice pairs encoded by a voice graph.
pub fn extract_pairs(graph: &VoiceGraph) -> PairSet {
    graph.links().collect()
}

/// Evaluation measures in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Raw pair counts backing a metrics row; rows pool by adding counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub intersection: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl PairCounts {
    pub fn from_sets(pred: &PairSet, truth: &PairSet) -> Self {
        PairCounts {
            intersection: pred.intersection(truth).count(),
            predicted: pred.len(),
            actual: truth.len(),
        }
    }

    pub fn add(&mut self, other: &PairCounts) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.actual += other.actual;
    }

    /// Percentages with the 0/0 = 0 convention.
    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let union = self.predicted + self.actual - self.intersection;
        let precision = ratio(self.intersection, self.predicted);
        let recall = ratio(self.intersection, self.actual);
        let f_measure = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics { jaccard: ratio(self.intersection, union), precision, recall, f_measure }
    }
}

/// Jaccard, precision, recall, and F-measure of one predicted pair set
/// against the annotated one.
pub fn compute_metrics(pred: &PairSet, truth: &PairSet) -> Metrics {
    PairCounts::from_sets(pred, truth).metrics()
}

/// Splits the notes of a score into the two chord scenarios, using the
/// annotated links. A chord belongs to the first scenario when it contains a
/// note with two or more in-links (convergence) or a note linked back to a
/// note with two or more out-links (divergence); otherwise it belongs to the
/// second. Every note inherits its chord's scenario, so the split is
/// exhaustive and disjoint.
pub fn partition_chords_many_one(
    score: &Score,
    truth: &VoiceGraph,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut many = BTreeSet::new();
    let mut one = BTreeSet::new();
    for chord in build_chord_sequence(score) {
        let is_many = chord.notes.iter().any(|&n| {
            truth.lt(n).len() >= 2 || truth.lt(n).iter().any(|&m| truth.rt(m).len() >= 2)
        });
        let bucket = if is_many { &mut many } else { &mut one };
        bucket.extend(chord.notes.iter().copied());
    }
    (many, one)
}

/// Keeps only the pairs whose second note is in `notes`; scenario metrics
/// consider only links to the scenario's notes.
pub fn restrict_to_notes(pairs: &PairSet, notes: &BTreeSet<usize>) -> PairSet {
    pairs.iter().copied().filter(|&(_, to)| notes.contains(&to)).collect()
}

/// Drops pairs whose notes are separated by a rest: the second note starts
/// strictly after the first one ends.
pub fn exclude_rest_separated(pairs: &PairSet, score: &Score) -> PairSet {
    pairs
        .iter()
        .copied()
        .filter(|&(from, to)| score.note(to).on <= score.note(from).off)
        .collect()
}

/// The four evaluation scenarios reported for every song.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    All,
    ExcludeRests,
    ChordsMany,
    ChordsOne,
}

pub const SCENARIOS: [Scenario; 4] =
    [Scenario::All, Scenario::ExcludeRests, Scenario::ChordsMany, Scenario::ChordsOne];

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Scenario::All => "all",
            Scenario::ExcludeRests => "exclude_rests",
            Scenario::ChordsMany => "chords_many",
            Scenario::ChordsOne => "chords_one",
        }
    }
}

/// Pair counts of one song under every scenario.
pub fn song_scenario_counts(
    score: &Score,
    pred: &VoiceGraph,
    truth: &VoiceGraph,
) -> BTreeMap<Scenario, PairCounts> {
    let pred_pairs = extract_pairs(pred);
    let true_pairs = extract_pairs(truth);
    let (many, one) = partition_chords_many_one(score, truth);
    let mut out = BTreeMap::new();
    out.insert(Scenario::All, PairCounts::from_sets(&pred_pairs, &true_pairs));
    out.insert(
        Scenario::ExcludeRests,
        PairCounts::from_sets(
            &exclude_rest_separated(&pred_pairs, score),
            &exclude_rest_separated(&true_pairs, score),
        ),
    );
    out.insert(
        Scenario::ChordsMany,
        PairCounts::from_sets(
            &restrict_to_notes(&pred_pairs, &many),
            &restrict_to_notes(&true_pairs, &many),
        ),
    );
    out.insert(
        Scenario::ChordsOne,
        PairCounts::from_sets(
            &restrict_to_notes(&pred_pairs, &one),
            &restrict_to_notes(&true_pairs, &one),
        ),
    );
    out
}

/// One per-song, per-scenario report row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub song: String,
    pub scenario: Scenario,
    pub counts: PairCounts,
    pub metrics: Metrics,
}

/// Per-song rows plus pooled totals for every scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub pooled: BTreeMap<Scenario, PairCounts>,
    pub pooled_metrics: BTreeMap<Scenario, Metrics>,
}

impl MetricsReport {
    /// Builds a report from per-song scenario counts, pooling pairs globally.
    pub fn from_songs(songs: &[(String, BTreeMap<Scenario, PairCounts>)]) -> Self {
        let mut rows = Vec::new();
        let mut pooled: BTreeMap<Scenario, PairCounts> =
            SCENARIOS.iter().map(|&s| (s, PairCounts::default())).collect();
        for (song, counts) in songs {
            for &scenario in &SCENARIOS {
                let c = counts[&scenario];
                pooled.get_mut(&scenario).unwrap().add(&c);
                rows.push(ReportRow {
                    song: song.clone(),
                    scenario,
                    counts: c,
                    metrics: c.metrics(),
                });
            }
        }
        let pooled_metrics = pooled.iter().map(|(&s, c)| (s, c.metrics())).collect();
        MetricsReport { rows, pooled, pooled_metrics }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CSV with one row per (song, scenario) plus pooled rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("song,scenario,jaccard,precision,recall,f\n");
        let mut push = |song: &str, scenario: Scenario, m: &Metrics| {
            out.push_str(&format!(
                "{song},{},{:.4},{:.4},{:.4},{:.4}\n",
                scenario.label(),
                m.jaccard,
                m.precision,
                m.recall,
                m.f_measure
            ));
        };
        for row in &self.rows {
            push(&row.song, row.scenario, &row.metrics);
        }
        for (&scenario, metrics) in &self.pooled_metrics {
            push("POOLED", scenario, metrics);
        }
        out
    }
}

/// Evaluates already-decoded separations against their annotations.
pub fn evaluate_separations(
    songs: &[(String, &Score, &VoiceGraph, &VoiceGraph)],
) -> MetricsReport {
    let per_song: Vec<(String, BTreeMap<Scenario, PairCounts>)> = songs
        .iter()
        .map(|(name, score, pred, truth)| {
            (name.clone(), song_scenario_counts(score, pred, truth))
        })
        .collect();
    MetricsReport::from_songs(&per_song)
}

/// The separation engine evaluated by cross-validation.
#[derive(Debug, Clone)]
pub enum Engine {
    Envelope,
    Note(NoteModelConfig),
    Chord(ChordModelConfig),
}

#[derive(Debug)]
pub enum EvalError {
    /// Fewer songs than requested folds.
    TooFewSongs { songs: usize, folds: usize },
    Model(ModelError),
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalError::TooFewSongs { songs, folds } => {
                write!(f, "{songs} songs cannot fill {folds} folds")
            }
            EvalError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

/// Cross-validation output: the global report pooled over every test decode,
/// per-fold pooled counts, and the fold each song was tested in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub report: MetricsReport,
    pub per_fold: Vec<BTreeMap<Scenario, PairCounts>>,
    pub fold_of: BTreeMap<String, usize>,
}

/// The worker count for fold-parallel evaluation: the `VW_THREADS`
/// environment variable when set, otherwise the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("VW_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
}

/// k-fold cross-validation. Songs are shuffled with the seed and dealt
/// round-robin into folds; each fold is tested with an engine trained on the
/// other folds (the envelope engine needs no training, so its folds are plain
/// pooled evaluations). Feature configurations are fit per training fold.
/// Folds run in parallel, capped by [`worker_count`].
pub fn crossval(
    corpus: &[(String, Score, VoiceGraph)],
    engine: &Engine,
    k: usize,
    seed: u64,
) -> Result<CrossvalReport, EvalError> {
    if corpus.len() < k || k == 0 {
        return Err(EvalError::TooFewSongs { songs: corpus.len(), folds: k });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of_idx: BTreeMap<usize, usize> =
        order.iter().enumerate().map(|(pos, &i)| (i, pos % k)).collect();

    // Per-song results, gathered from the fold workers.
    let results: Mutex<Vec<(usize, BTreeMap<Scenario, PairCounts>)>> = Mutex::new(Vec::new());
    let error: Mutex<Option<EvalError>> = Mutex::new(None);
    let next_fold = AtomicUsize::new(0);
    let workers = worker_count().min(k).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let fold = next_fold.fetch_add(1, Ordering::SeqCst);
                if fold >= k || error.lock().unwrap().is_some() {
                    return;
                }
                match run_fold(corpus, engine, &fold_of_idx, fold, seed) {
                    Ok(mut rows) => results.lock().unwrap().append(&mut rows),
                    Err(e) => *error.lock().unwrap() = Some(e),
                }
            });
        }
    });
    if let Some(e) = error.into_inner().unwrap() {
        return Err(e);
    }
    let mut rows = results.into_inner().unwrap();
    rows.sort_by_key(|(i, _)| *i);

    let per_song: Vec<(String, BTreeMap<Scenario, PairCounts>)> =
        rows.iter().map(|(i, c)| (corpus[*i].0.clone(), c.clone())).collect();
    let report = MetricsReport::from_songs(&per_song);
    let mut per_fold: Vec<BTreeMap<Scenario, PairCounts>> = vec![
            SCENARIOS.iter().map(|&s| (s, PairCounts::default())).collect();
            k
        ];
    for (i, counts) in &rows {
        let fold = fold_of_idx[i];
        for (&scenario, c) in counts {
            per_fold[fold].get_mut(&scenario).unwrap().add(c);
        }
    }
    let fold_of = fold_of_idx
        .iter()
        .map(|(&i, &f)| (corpus[i].0.clone(), f))
        .collect();
    Ok(CrossvalReport { report, per_fold, fold_of })
}

/// Trains on every song outside `fold` and decodes every song inside it.
fn run_fold(
    corpus: &[(String, Score, VoiceGraph)],
    engine: &Engine,
    fold_of_idx: &BTreeMap<usize, usize>,
    fold: usize,
    seed: u64,
) -> Result<Vec<(usize, BTreeMap<Scenario, PairCounts>)>, EvalError> {
    let test: Vec<usize> =
        (0..corpus.len()).filter(|i| fold_of_idx[i] == fold).collect();
    let train: Vec<(Score, VoiceGraph)> = (0..corpus.len())
        .filter(|i| fold_of_idx[i] != fold)
        .map(|i| (corpus[i].1.clone(), corpus[i].2.clone()))
        .collect();
    let decode: Box<dyn Fn(&Score) -> VoiceGraph> = match engine {
        Engine::Envelope => Box::new(|score| envelope_assign(score).0),
        Engine::Note(cfg) => {
            let trained = train_note_model(&train, cfg, seed)?;
            let cfg = cfg.clone();
            Box::new(move |score| assign_note_level(score, &trained.model, &cfg).0)
        }
        Engine::Chord(cfg) => {
            let trained = train_chord_model(&train, cfg, seed)?;
            let cfg = cfg.clone();
            Box::new(move |score| assign_chord_level(score, &trained.model, &cfg, seed).0)
        }
    };
    let mut out = Vec::with_capacity(test.len());
    for i in test {
        let (_, score, truth) = &corpus[i];
        let pred = decode(score);
        out.push((i, song_scenario_counts(score, &pred, truth)));
    }
    Ok(out)
}

/// One row of the corpus statistics table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SongStats {
    pub song: String,
    pub notes: usize,
    pub onsets: usize,
    pub voices: usize,
    pub pairs: usize,
    pub one_to_one: usize,
    pub many_to_many: usize,
}

/// Upper bin edges of the onset-offset beat-distance histogram; the last bin
/// is open-ended.
pub const BEAT_DISTANCE_EDGES: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
/// Upper bin edges of the divergence pitch-distance histogram.
pub const PITCH_DISTANCE_EDGES: [f64; 5] = [3.0, 6.0, 9.0, 12.0, 15.0];

fn bin_index(edges: &[f64], value: f64) -> usize {
    edges.iter().position(|&e| value < e).unwrap_or(edges.len())
}

/// Corpus-wide statistics and link-distance histograms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub rows: Vec<SongStats>,
    pub totals: SongStats,
    /// Pair counts by onset-offset beat distance; bins per
    /// [`BEAT_DISTANCE_EDGES`] plus the open final bin.
    pub onset_offset_hist: Vec<usize>,
    /// Note counts by number of in-links, indexed by link count.
    pub convergence_hist: Vec<usize>,
    /// Note counts by number of out-links, indexed by link count.
    pub divergence_hist: Vec<usize>,
    /// For pairs whose first note diverges into two or more: pitch-distance
    /// bins per [`PITCH_DISTANCE_EDGES`], split by zero vs. positive
    /// onset-offset beat distance.
    pub divergence_pitch_hist_gap_zero: Vec<usize>,
    pub divergence_pitch_hist_gap_positive: Vec<usize>,
}

/// Per-song counts, totals, and histograms over an annotated corpus.
pub fn corpus_stats(corpus: &[(String, Score, VoiceGraph)]) -> CorpusStats {
    let mut rows = Vec::with_capacity(corpus.len());
    let mut totals = SongStats { song: "TOTAL".to_string(), ..SongStats::default() };
    let mut onset_offset_hist = vec![0; BEAT_DISTANCE_EDGES.len() + 1];
    let mut convergence_hist = Vec::new();
    let mut divergence_hist = Vec::new();
    let mut pitch_zero = vec![0; PITCH_DISTANCE_EDGES.len() + 1];
    let mut pitch_positive = vec![0; PITCH_DISTANCE_EDGES.len() + 1];
    for (song, score, graph) in corpus {
        let mut row = SongStats { song: song.clone(), ..SongStats::default() };
        row.notes = score.len();
        row.onsets = build_chord_sequence(score).len();
        let coloring = color_voices(score, graph);
        row.voices = coloring.color.iter().collect::<BTreeSet<_>>().len();
        for (from, to) in graph.links() {
            row.pairs += 1;
            let many = graph.rt(from).len() >= 2 || graph.lt(to).len() >= 2;
            if many {
                row.many_to_many += 1;
            } else {
                row.one_to_one += 1;
            }
            let gap = beat_to_f64(score.note(to).on - score.note(from).off).max(0.0);
            onset_offset_hist[bin_index(&BEAT_DISTANCE_EDGES, gap)] += 1;
            if graph.rt(from).len() >= 2 {
                let dist = (score.note(to).ps - score.note(from).ps).abs() as f64;
                let hist = if gap > 0.0 { &mut pitch_positive } else { &mut pitch_zero };
                hist[bin_index(&PITCH_DISTANCE_EDGES, dist)] += 1;
            }
        }
        for n in 0..score.len() {
            let lt = graph.lt(n).len();
            let rt = graph.rt(n).len();
            if convergence_hist.len() <= lt.max(rt) {
                convergence_hist.resize(lt.max(rt) + 1, 0);
                divergence_hist.resize(lt.max(rt) + 1, 0);
            }
            convergence_hist[lt] += 1;
            divergence_hist[rt] += 1;
        }
        totals.notes += row.notes;
        totals.onsets += row.onsets;
        totals.voices += row.voices;
        totals.pairs += row.pairs;
        totals.one_to_one += row.one_to_one;
        totals.many_to_many += row.many_to_many;
        rows.push(row);
    }
    CorpusStats {
        rows,
        totals,
        onset_offset_hist,
        convergence_hist,
        divergence_hist,
        divergence_pitch_hist_gap_zero: pitch_zero,
        divergence_pitch_hist_gap_positive: pitch_positive,
    }
}

impl CorpusStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    /// One CSV row per song plus a TOTAL row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("song,notes,onsets,voices,pairs,one_to_one,many_to_many\n");
        for row in self.rows.iter().chain(std::iter::once(&self.totals)) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.song, row.notes, row.onsets, row.voices, row.pairs, row.one_to_one,
                row.many_to_many
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::score::{simple_score, NoteId};
    use crate::synth::random_score;
    use crate::time::beats;

    fn idx(s: &Score, id: u32) -> usize {
        s.index_of(NoteId(id)).unwrap()
    }

    fn pairs(v: &[(usize, usize)]) -> PairSet {
        v.iter().copied().collect()
    }

    #[test]
    fn monophonic_voice_yields_consecutive_pairs() {
        let mut g = VoiceGraph::new(3);
        g.add_link(0, 1);
        g.add_link(1, 2);
        assert_eq!(extract_pairs(&g), pairs(&[(0, 1), (1, 2)]));
    }

    #[test]
    fn convergence_contributes_one_pair_per_link() {
        let mut g = VoiceGraph::new(3);
        g.add_link(0, 2);
        g.add_link(1, 2);
        assert_eq!(extract_pairs(&g), pairs(&[(0, 2), (1, 2)]));
    }

    #[test]
    fn identical_sets_score_one_hundred() {
        let p = pairs(&[(0, 1), (1, 2)]);
        let m = compute_metrics(&p, &p);
        assert_eq!(
            m,
            Metrics { jaccard: 100.0, precision: 100.0, recall: 100.0, f_measure: 100.0 }
        );
    }

    #[test]
    fn half_overlap_scores_follow_the_formulas() {
        let pred = pairs(&[(0, 1), (1, 2)]);
        let truth = pairs(&[(0, 1), (2, 3)]);
        let m = compute_metrics(&pred, &truth);
        assert!((m.jaccard - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(m.precision, 50.0);
        assert_eq!(m.recall, 50.0);
        assert_eq!(m.f_measure, 50.0);
    }

    #[test]
    fn degenerate_sets_score_zero() {
        let truth = pairs(&[(0, 1)]);
        let m = compute_metrics(&PairSet::new(), &truth);
        assert_eq!(
            m,
            Metrics { jaccard: 0.0, precision: 0.0, recall: 0.0, f_measure: 0.0 }
        );
        let m = compute_metrics(&PairSet::new(), &PairSet::new());
        assert_eq!(m.f_measure, 0.0);
    }

    proptest::proptest! {
        /// Set-algebra bounds hold for arbitrary pair sets.
        #[test]
        fn metric_bounds_hold_for_arbitrary_sets(
            pred in proptest::collection::btree_set((0usize..10, 0usize..10), 0..30),
            truth in proptest::collection::btree_set((0usize..10, 0usize..10), 0..30),
        ) {
            let m = compute_metrics(&pred, &truth);
            for v in [m.jaccard, m.precision, m.recall, m.f_measure] {
                proptest::prop_assert!((0.0..=100.0).contains(&v));
            }
            proptest::prop_assert!(m.jaccard <= m.precision + 1e-9);
            proptest::prop_assert!(m.jaccard <= m.recall + 1e-9);
        }
    }

    #[test]
    fn metrics_match_a_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let draw = |rng: &mut ChaCha8Rng| -> PairSet {
                (0..rng.gen_range(0..20))
                    .map(|_| (rng.gen_range(0..8usize), rng.gen_range(0..8usize)))
                    .collect()
            };
            let pred = draw(&mut rng);
            let truth = draw(&mut rng);
            let inter = pred.iter().filter(|p| truth.contains(p)).count() as f64;
            let union = pred.union(&truth).count() as f64;
            let m = compute_metrics(&pred, &truth);
            let expect = |num: f64, den: f64| if den == 0.0 { 0.0 } else { 100.0 * num / den };
            assert!((m.jaccard - expect(inter, union)).abs() < 1e-9);
            assert!((m.precision - expect(inter, pred.len() as f64)).abs() < 1e-9);
            assert!((m.recall - expect(inter, truth.len() as f64)).abs() < 1e-9);
            let p = m.precision;
            let r = m.recall;
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            assert!((m.f_measure - f).abs() < 1e-9);
            assert!(inter as usize <= pred.len().min(truth.len()));
            assert!(m.jaccard <= m.precision + 1e-9);
            assert!(m.jaccard <= m.recall + 1e-9);
        }
    }

    /// Two two-note chords; voices 1→3 and 2→4, plus a convergence 2→3.
    fn convergent_score() -> (Score, VoiceGraph) {
        let s = simple_score(&[
            (1, 67, beats(0), beats(1)),
            (2, 60, beats(0), beats(1)),
            (3, 64, beats(1), beats(1)),
            (4, 57, beats(1), beats(1)),
        ]);
        let mut g = VoiceGraph::new(s.len());
        g.add_link(idx(&s, 1), idx(&s, 3));
        g.add_link(idx(&s, 2), idx(&s, 3));
        g.add_link(idx(&s, 2), idx(&s, 4));
        (s, g)
    }

    #[test]
    fn chord_with_convergent_note_is_entirely_many() {
        let (s, g) = convergent_score();
        let (many, one) = partition_chords_many_one(&s, &g);
        // The second chord holds the convergent note, so both of its notes
        // are in the first scenario; the first chord has no in-links at all.
        assert_eq!(many, [idx(&s, 3), idx(&s, 4)].into_iter().collect());
        assert_eq!(one, [idx(&s, 1), idx(&s, 2)].into_iter().collect());
    }

    #[test]
    fn divergent_target_marks_its_chord_many() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 64, beats(1), beats(1)),
            (3, 57, beats(1), beats(1)),
        ]);
        let mut g = VoiceGraph::new(s.len());
        g.add_link(idx(&s, 1), idx(&s, 2));
        g.add_link(idx(&s, 1), idx(&s, 3));
        let (many, one) = partition_chords_many_one(&s, &g);
        assert_eq!(many, [idx(&s, 2), idx(&s, 3)].into_iter().collect());
        assert_eq!(one, [idx(&s, 1)].into_iter().collect());
    }

    #[test]
    fn no_convergence_makes_every_note_one() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 62, beats(1), beats(1)),
        ]);
        let mut g = VoiceGraph::new(s.len());
        g.add_link(0, 1);
        let (many, one) = partition_chords_many_one(&s, &g);
        assert!(many.is_empty());
        assert_eq!(one.len(), 2);
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        for seed in 0..50 {
            let s = random_score(seed, 16, 4);
            let g = envelope_assign(&s).0;
            let (many, one) = partition_chords_many_one(&s, &g);
            assert!(many.is_disjoint(&one));
            assert_eq!(many.len() + one.len(), s.len());
        }
    }

    #[test]
    fn pooled_scenarios_recover_all_pairs_metrics() {
        for seed in 0..50 {
            let s = random_score(seed, 16, 4);
            let truth = envelope_assign(&s).0;
            // A perturbed prediction: the envelope of a shifted seed's graph
            // would not share the note universe, so drop some links instead.
            let mut pred = VoiceGraph::new(s.len());
            for (i, (from, to)) in truth.links().enumerate() {
                if i % 3 != 0 {
                    pred.add_link(from, to);
                }
            }
            let counts = song_scenario_counts(&s, &pred, &truth);
            let mut pooled = counts[&Scenario::ChordsMany];
            pooled.add(&counts[&Scenario::ChordsOne]);
            assert_eq!(pooled, counts[&Scenario::All]);
        }
    }

    #[test]
    fn rest_separated_pairs_are_dropped() {
        let s = simple_score(&[
            (1, 60, beats(0), beats(1)),
            (2, 62, beats(1), beats(1)),
            (3, 64, beats(3), beats(1)),
        ]);
        let p = pairs(&[(idx(&s, 1), idx(&s, 2)), (idx(&s, 2), idx(&s, 3))]);
        let kept = exclude_rest_separated(&p, &s);
        // Legato pair kept, gapped pair dropped.
        assert_eq!(kept, pairs(&[(idx(&s, 1), idx(&s, 2))]));
        // An overlapping pair has no rest either.
        let s2 = simple_score(&[
            (1, 60, beats(0), beats(2)),
            (2, 62, beats(1), beats(1)),
        ]);
        let p2 = pairs(&[(0, 1)]);
        assert_eq!(exclude_rest_separated(&p2, &s2), p2);
    }

    fn toy_eval_corpus(n: usize) -> Vec<(String, Score, VoiceGraph)> {
        (0..n)
            .map(|i| {
                let s = random_score(i as u64, 12, 3);
                let g = envelope_assign(&s).0;
                (format!("song{i}"), s, g)
            })
            .collect()
    }

    #[test]
    fn envelope_crossval_is_perfect_on_its_own_output() {
        let corpus = toy_eval_corpus(4);
        let out = crossval(&corpus, &Engine::Envelope, 2, 3).unwrap();
        for (&scenario, m) in &out.report.pooled_metrics {
            if out.report.pooled[&scenario].actual > 0 {
                assert_eq!(m.f_measure, 100.0);
            }
        }
        assert!(out.report.pooled[&Scenario::All].actual > 0);
        // Each song tested exactly once, folds of equal size.
        assert_eq!(out.fold_of.len(), 4);
        let fold0 = out.fold_of.values().filter(|&&f| f == 0).count();
        assert_eq!(fold0, 2);
    }

    #[test]
    fn crossval_is_deterministic() {
        let corpus = toy_eval_corpus(5);
        let a = crossval(&corpus, &Engine::Envelope, 2, 9).unwrap();
        let b = crossval(&corpus, &Engine::Envelope, 2, 9).unwrap();
        assert_eq!(a.fold_of, b.fold_of);
        assert_eq!(a.report.to_csv(), b.report.to_csv());
    }

    #[test]
    fn too_few_songs_is_an_error() {
        let corpus = toy_eval_corpus(2);
        assert!(matches!(
            crossval(&corpus, &Engine::Envelope, 3, 0),
            Err(EvalError::TooFewSongs { songs: 2, folds: 3 })
        ));
    }

    #[test]
    fn note_model_crossval_runs_end_to_end() {
        let corpus = toy_eval_corpus(2);
        let cfg = NoteModelConfig { hidden: vec![8], epochs: 3, ..NoteModelConfig::default() };
        let out = crossval(&corpus, &Engine::Note(cfg), 2, 1).unwrap();
        assert_eq!(out.report.rows.len(), 2 * SCENARIOS.len());
        assert!(out.report.pooled[&Scenario::All].actual > 0);
    }

    #[test]
    fn stats_count_the_basics() {
        let (s, g) = convergent_score();
        let stats = corpus_stats(&[("x".to_string(), s, g)]);
        let row = &stats.rows[0];
        assert_eq!(row.notes, 4);
        assert_eq!(row.onsets, 2);
        assert_eq!(row.pairs, 3);
        // Every link touches the convergence or the divergence.
        assert_eq!(row.many_to_many, 3);
        assert_eq!(row.one_to_one, 0);
        // Voices: 3 continues 1's color; 2's salient target (3) is taken, so
        // 2's voice ends and 4 starts a fresh color.
        assert_eq!(row.voices, 3);
        assert_eq!(stats.totals.pairs, 3);
    }

    #[test]
    fn empty_corpus_has_zero_rows() {
        let stats = corpus_stats(&[]);
        assert!(stats.rows.is_empty());
        assert_eq!(stats.totals.pairs, 0);
        assert!(stats.onset_offset_hist.iter().all(|&c| c == 0));
    }

    #[test]
    fn histogram_bins_conserve_pair_totals() {
        let corpus = toy_eval_corpus(6);
        let stats = corpus_stats(&corpus);
        let binned: usize = stats.onset_offset_hist.iter().sum();
        assert_eq!(binned, stats.totals.pairs);
        let conv_notes: usize = stats.convergence_hist.iter().sum();
        let div_notes: usize = stats.divergence_hist.iter().sum();
        let notes = stats.totals.notes;
        assert_eq!(conv_notes, notes);
        assert_eq!(div_notes, notes);
        // Links counted by in-degree must equal links counted by out-degree.
        let by_in: usize =
            stats.convergence_hist.iter().enumerate().map(|(k, &c)| k * c).sum();
        let by_out: usize =
            stats.divergence_hist.iter().enumerate().map(|(k, &c)| k * c).sum();
        assert_eq!(by_in, stats.totals.pairs);
        assert_eq!(by_out, stats.totals.pairs);
    }

    #[test]
    fn reports_serialize_to_json_and_csv() {
        let (s, g) = convergent_score();
        let report = evaluate_separations(&[("x".to_string(), &s, &g, &g)]);
        let json = report.to_json();
        assert!(json.contains("\"pooled\""));
        let parsed: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.pooled, report.pooled);
        let csv = report.to_csv();
        assert!(csv.starts_with("song,scenario,jaccard,precision,recall,f\n"));
        assert!(csv.lines().any(|l| l.starts_with("POOLED,all,")));
    }
}
