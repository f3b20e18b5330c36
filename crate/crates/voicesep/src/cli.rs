//! Command-line interface: separation, training, evaluation, statistics, and
//! gradient checks.
//!
//! Logs go to stderr; machine-readable data goes to stdout or files. Exit
//! codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or parse
//! error. Every command is deterministic given its inputs, flags, and seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chord_features::JointAssignment;
use crate::config::FeatureConfig;
use crate::envelope::envelope_assign;
use crate::eval::{corpus_stats, crossval, Engine, Scenario};
use crate::features::FeatureContext;
use crate::graph::VoiceGraph;
use crate::io::{parse_score_json, rewrite_unisons, serialize_separation};
use crate::model_chord::{
    assign_chord_level, train_chord_model, AssignmentInput, ChordModel, ChordModelConfig,
    ChordNet, JointScorer,
};
use crate::model_note::{
    assign_note_level, insert_voices, train_note_model, ModelError, NoteModel, NoteModelConfig,
    PairScorer,
};
use crate::musicxml::parse_musicxml;
use crate::neural::{gradient_check, Checkpoint, Head, Mlp};
use crate::pseudo::{detect_chains, CHAIN_MIN_LEN};
use crate::score::{AnnotationSet, Score};
use crate::time::beats;
use crate::tonal::TonalContext;
use crate::voices::SeparationState;

/// Voice separation toolkit for symbolic music.
#[derive(Debug, Parser)]
#[command(name = "voicesep", version)]
struct Cli {
    /// Print progress information to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineKind {
    Envelope,
    Note,
    Chord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NetKind {
    Note,
    Chord,
}

/// Hyperparameters shared by the separation, training, and evaluation
/// commands. Defaults match the production configuration.
#[derive(Debug, Clone, Args)]
struct HyperOpts {
    /// Note-level assignment probability threshold.
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    /// Maximum voices converging into one note.
    #[arg(long, default_value_t = 2)]
    alpha: usize,
    /// Maximum notes diverging from one note.
    #[arg(long, default_value_t = 2)]
    beta: usize,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// Note-level minibatch size.
    #[arg(long, default_value_t = 20)]
    minibatch: usize,
    /// L2 regularization strength.
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    /// Active-voice beat horizon.
    #[arg(long, default_value_t = 4)]
    horizon: i64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Chord-level negative samples per chord.
    #[arg(long, default_value_t = 500)]
    negatives: usize,
    /// Chord-level candidate enumeration budget.
    #[arg(long, default_value_t = 5000)]
    budget: usize,
}

impl HyperOpts {
    fn validate(&self) -> Result<(), CliError> {
        if self.alpha < 1 || self.beta < 1 {
            return Err(CliError::Usage("--alpha and --beta must be at least 1".into()));
        }
        if self.horizon < 1 {
            return Err(CliError::Usage("--horizon must be at least 1 beat".into()));
        }
        Ok(())
    }

    fn note_cfg(&self) -> NoteModelConfig {
        NoteModelConfig {
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.l2,
            epochs: self.epochs,
            minibatch: self.minibatch,
            horizon: beats(self.horizon),
            ..NoteModelConfig::default()
        }
    }

    fn chord_cfg(&self) -> ChordModelConfig {
        ChordModelConfig {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.l2,
            epochs: self.epochs,
            negatives: self.negatives,
            budget: self.budget,
            horizon: beats(self.horizon),
            ..ChordModelConfig::default()
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Separate one score into voices.
    Separate {
        /// Score file (.xml/.musicxml or internal .json).
        score: PathBuf,
        #[arg(long, value_enum, default_value_t = EngineKind::Envelope)]
        model: EngineKind,
        /// Trained model file; required for the neural engines.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Separation JSON destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-link score JSON destination (neural engines only).
        #[arg(long)]
        scores: Option<PathBuf>,
        #[command(flatten)]
        hyper: HyperOpts,
    },
    /// Train a neural model on an annotated corpus directory.
    Train {
        corpus: PathBuf,
        #[arg(long, value_enum)]
        model: NetKind,
        /// Where to write the trained model.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Loss trace CSV destination; defaults to the checkpoint path with
        /// a `.loss.csv` suffix.
        #[arg(long)]
        loss_trace: Option<PathBuf>,
        /// Merge unison notes into convergence/divergence before use.
        #[arg(long)]
        rewrite_unisons: bool,
        #[command(flatten)]
        hyper: HyperOpts,
    },
    /// Cross-validate an engine on an annotated corpus directory.
    Evaluate {
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = EngineKind::Envelope)]
        model: EngineKind,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Report directory; CSV goes to stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        rewrite_unisons: bool,
        #[command(flatten)]
        hyper: HyperOpts,
    },
    /// Corpus statistics and link-distance histograms.
    Stats {
        corpus: PathBuf,
        /// Output directory for stats.json and stats.csv; CSV goes to stdout
        /// when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        rewrite_unisons: bool,
    },
    /// Finite-difference gradient verification of the scoring networks.
    Gradcheck {
        #[arg(long, value_enum)]
        arch: NetKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check a trained model's network instead of fresh random weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    /// Invalid flags or inputs that violate a precondition (exit 2).
    Usage(String),
    /// A check or model validation failed (exit 1).
    Verify(String),
    /// File system or parse trouble (exit 3).
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Verify(m) | CliError::Io(m) => m,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Verify(e.to_string())
    }
}

/// Parses the process arguments and runs the selected command, returning the
/// process exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Like [`run`] but over explicit arguments, for tests.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Separate { score, model, checkpoint, output, scores, hyper } => {
            hyper.validate()?;
            cmd_separate(&score, model, checkpoint.as_deref(), output.as_deref(),
                scores.as_deref(), &hyper, cli.verbose)
        }
        Command::Train { corpus, model, checkpoint, loss_trace, rewrite_unisons, hyper } => {
            hyper.validate()?;
            cmd_train(&corpus, model, &checkpoint, loss_trace.as_deref(), rewrite_unisons,
                &hyper, cli.verbose)
        }
        Command::Evaluate { corpus, model, folds, output, rewrite_unisons, hyper } => {
            hyper.validate()?;
            cmd_evaluate(&corpus, model, folds, output.as_deref(), rewrite_unisons, &hyper,
                cli.verbose)
        }
        Command::Stats { corpus, output, rewrite_unisons } => {
            cmd_stats(&corpus, output.as_deref(), rewrite_unisons)
        }
        Command::Gradcheck { arch, seed, checkpoint } => {
            cmd_gradcheck(arch, seed, checkpoint.as_deref())
        }
    }
}

/// A trained model bundled with the feature configuration its inputs were
/// encoded with; the on-disk format of `--checkpoint` files.
#[derive(Debug, Serialize, Deserialize)]
pub struct SavedModel {
    pub features: FeatureConfig,
    pub checkpoint: Checkpoint,
}

impl SavedModel {
    pub fn load(path: &Path) -> Result<Self, CliErrorPublic> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliErrorPublic(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliErrorPublic(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliErrorPublic> {
        let text = serde_json::to_string(self).expect("model serializes");
        std::fs::write(path, text)
            .map_err(|e| CliErrorPublic(format!("{}: {e}", path.display())))
    }
}

/// A plain-text I/O error surfaced to library users of [`SavedModel`].
#[derive(Debug)]
pub struct CliErrorPublic(pub String);

impl std::fmt::Display for CliErrorPublic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliErrorPublic {}

impl From<CliErrorPublic> for CliError {
    fn from(e: CliErrorPublic) -> Self {
        CliError::Io(e.0)
    }
}

fn is_musicxml(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("xml") | Some("musicxml") | Some("mxl")
    )
}

/// Reads one score file, by extension.
fn read_score(path: &Path, verbose: bool) -> Result<(Score, AnnotationSet), CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if is_musicxml(path) {
        let parsed = parse_musicxml(&bytes)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if verbose {
            for w in &parsed.warnings {
                eprintln!("{}: {w}", path.display());
            }
        }
        Ok((parsed.score, parsed.annotation))
    } else {
        parse_score_json(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// Reads every score in a directory (sorted by file name). Files that fail to
/// parse are reported and skipped; an empty result is an error.
fn load_corpus(
    dir: &Path,
    unisons: bool,
    verbose: bool,
) -> Result<Vec<(String, Score, VoiceGraph)>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            is_musicxml(p) || p.extension().and_then(|e| e.to_str()) == Some("json")
        })
        .collect();
    paths.sort();
    let mut corpus = Vec::new();
    for path in paths {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match read_score(&path, verbose) {
            Ok((score, ann)) => {
                let (score, ann) = if unisons { rewrite_unisons(&score, &ann) } else { (score, ann) };
                match VoiceGraph::from_annotation(&score, &ann) {
                    Ok(graph) => corpus.push((name, score, graph)),
                    Err(e) => eprintln!("skipping {}: {e}", path.display()),
                }
            }
            Err(e) => eprintln!("skipping {}", e.message()),
        }
    }
    if corpus.is_empty() {
        return Err(CliError::Io(format!("{}: no usable scores", dir.display())));
    }
    Ok(corpus)
}

fn write_or_print(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, bytes)
            .map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(bytes)
                .map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

/// One scored within-voice link of a separation.
#[derive(Debug, Serialize)]
struct LinkScore {
    from: u32,
    to: u32,
    score: f64,
}

/// Replays a decoded graph and re-scores each committed link with the
/// note-level model. Replay reconstructs the decoder's active states, so the
/// probabilities equal the decode-time ones.
fn note_link_scores(
    score: &Score,
    model: &NoteModel,
    cfg: &NoteModelConfig,
    graph: &VoiceGraph,
) -> Vec<LinkScore> {
    let mut rows = Vec::new();
    replay_graph(score, graph, beats_of(cfg), |ctx, t, assignment| {
        let _ = t;
        for (n, parents) in assignment {
            for &v in parents {
                let pos = ctx.state.active.iter().position(|&u| u == v).expect("active parent");
                rows.push(LinkScore {
                    from: score.note(v).id.0,
                    to: score.note(*n).id.0,
                    score: model.prob(ctx, *n, Some(pos)),
                });
            }
        }
    });
    rows
}

fn beats_of(cfg: &NoteModelConfig) -> crate::time::Beat {
    cfg.horizon
}

/// Replays a decoded graph and scores each chord's realized joint assignment
/// with the chord-level model; every link of a chord carries its chord score.
fn chord_link_scores(
    score: &Score,
    model: &ChordModel,
    cfg: &ChordModelConfig,
    graph: &VoiceGraph,
) -> Vec<LinkScore> {
    let mut rows = Vec::new();
    replay_graph(score, graph, cfg.horizon, |ctx, t, assignment| {
        let st = ctx.state;
        let targets: Vec<Vec<usize>> = assignment
            .iter()
            .map(|(_, parents)| {
                parents
                    .iter()
                    .map(|&v| st.active.iter().position(|&u| u == v).expect("active parent"))
                    .collect()
            })
            .collect();
        let j = JointAssignment::new(targets);
        let s = model.score(ctx, t, &j);
        for (n, parents) in assignment {
            for &v in parents {
                rows.push(LinkScore {
                    from: score.note(v).id.0,
                    to: score.note(*n).id.0,
                    score: s,
                });
            }
        }
    });
    rows
}

/// Chord-by-chord replay of a fixed voice graph, visiting each chord's
/// realized (note, parents) assignment under the pre-chord feature context.
fn replay_graph(
    score: &Score,
    graph: &VoiceGraph,
    horizon: crate::time::Beat,
    mut visit: impl FnMut(&FeatureContext, usize, &[(usize, Vec<usize>)]),
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
                    .filter(|&v| graph.has_link(v, n))
                    .collect();
                (n, parents)
            })
            .collect();
        {
            let ctx = FeatureContext::new(&st, &tonal, &chains);
            visit(&ctx, t, &assignment);
        }
        for (n, parents) in &assignment {
            for &p in parents {
                st.graph.add_link(p, *n);
            }
        }
        insert_voices(&mut st, &assignment);
    }
}

fn load_note_model(path: &Path) -> Result<(NoteModel, SavedModel), CliError> {
    let saved = SavedModel::load(path)?;
    let model = NoteModel::from_checkpoint(&saved.checkpoint, saved.features.clone())?;
    Ok((model, saved))
}

fn load_chord_model(path: &Path) -> Result<(ChordModel, SavedModel), CliError> {
    let saved = SavedModel::load(path)?;
    let model = ChordModel::from_checkpoint(&saved.checkpoint, saved.features.clone())?;
    Ok((model, saved))
}

fn cmd_separate(
    score_path: &Path,
    model: EngineKind,
    checkpoint: Option<&Path>,
    output: Option<&Path>,
    scores_path: Option<&Path>,
    hyper: &HyperOpts,
    verbose: bool,
) -> Result<(), CliError> {
    let (score, _) = read_score(score_path, verbose)?;
    let need_checkpoint = || {
        checkpoint.ok_or_else(|| {
            CliError::Usage("--checkpoint is required for the neural engines".into())
        })
    };
    let (graph, scores) = match model {
        EngineKind::Envelope => (envelope_assign(&score).0, None),
        EngineKind::Note => {
            let (model, _) = load_note_model(need_checkpoint()?)?;
            let cfg = hyper.note_cfg();
            let graph = assign_note_level(&score, &model, &cfg).0;
            let rows = note_link_scores(&score, &model, &cfg, &graph);
            (graph, Some(rows))
        }
        EngineKind::Chord => {
            let (model, _) = load_chord_model(need_checkpoint()?)?;
            let cfg = hyper.chord_cfg();
            let graph = assign_chord_level(&score, &model, &cfg, hyper.seed).0;
            let rows = chord_link_scores(&score, &model, &cfg, &graph);
            (graph, Some(rows))
        }
    };
    write_or_print(output, &serialize_separation(&score, &graph))?;
    if let Some(rows) = scores {
        let sidecar = scores_path.map(Path::to_path_buf).or_else(|| {
            output.map(|o| {
                let mut name = o.as_os_str().to_os_string();
                name.push(".scores.json");
                PathBuf::from(name)
            })
        });
        match sidecar {
            Some(p) => {
                let mut bytes =
                    serde_json::to_vec_pretty(&rows).expect("scores serialize");
                bytes.push(b'\n');
                std::fs::write(&p, bytes)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            }
            None => eprintln!(
                "note: pass --scores or --output to persist the per-link scores"
            ),
        }
    }
    Ok(())
}

fn cmd_train(
    corpus_dir: &Path,
    model: NetKind,
    checkpoint: &Path,
    loss_trace: Option<&Path>,
    unisons: bool,
    hyper: &HyperOpts,
    verbose: bool,
) -> Result<(), CliError> {
    let corpus = load_corpus(corpus_dir, unisons, verbose)?;
    let songs: Vec<(Score, VoiceGraph)> =
        corpus.into_iter().map(|(_, s, g)| (s, g)).collect();
    if verbose {
        eprintln!("training {model:?} model on {} songs", songs.len());
    }
    let (saved, trace) = match model {
        NetKind::Note => {
            let out = train_note_model(&songs, &hyper.note_cfg(), hyper.seed)?;
            let checkpoint = out.model.to_checkpoint(Some(out.optimizer));
            (SavedModel { features: out.model.features, checkpoint }, out.loss_trace)
        }
        NetKind::Chord => {
            let out = train_chord_model(&songs, &hyper.chord_cfg(), hyper.seed)?;
            if verbose && out.skipped_chords > 0 {
                eprintln!(
                    "{} chords skipped (annotation violates decoding constraints), \
                     {} gold links dropped by the caps",
                    out.skipped_chords, out.truncated_links
                );
            }
            let checkpoint = out.model.to_checkpoint(Some(out.optimizer));
            (SavedModel { features: out.model.features, checkpoint }, out.loss_trace)
        }
    };
    saved.save(checkpoint)?;
    let trace_path = loss_trace.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut name = checkpoint.as_os_str().to_os_string();
        name.push(".loss.csv");
        PathBuf::from(name)
    });
    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{loss}\n", epoch + 1));
    }
    std::fs::write(&trace_path, csv)
        .map_err(|e| CliError::Io(format!("{}: {e}", trace_path.display())))?;
    if verbose {
        eprintln!("wrote {} and {}", checkpoint.display(), trace_path.display());
    }
    Ok(())
}

fn cmd_evaluate(
    corpus_dir: &Path,
    model: EngineKind,
    folds: usize,
    output: Option<&Path>,
    unisons: bool,
    hyper: &HyperOpts,
    verbose: bool,
) -> Result<(), CliError> {
    let corpus = load_corpus(corpus_dir, unisons, verbose)?;
    let engine = match model {
        EngineKind::Envelope => Engine::Envelope,
        EngineKind::Note => Engine::Note(hyper.note_cfg()),
        EngineKind::Chord => Engine::Chord(hyper.chord_cfg()),
    };
    let result = crossval(&corpus, &engine, folds, hyper.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    // Partition identity self-test: the two chord scenarios must pool back
    // to the all-pairs counts.
    let pooled = &result.report.pooled;
    let mut many_one = pooled[&Scenario::ChordsMany];
    many_one.add(&pooled[&Scenario::ChordsOne]);
    let identity_ok = many_one == pooled[&Scenario::All];
    eprintln!(
        "self-test: chords_many + chords_one == all pairs: {}",
        if identity_ok { "ok" } else { "FAILED" }
    );
    if !identity_ok {
        return Err(CliError::Verify("scenario partition identity failed".into()));
    }
    // Per-fold pooled rows are appended to the CSV under FOLD<k> pseudo-songs.
    let mut csv = result.report.to_csv();
    for (fold, counts) in result.per_fold.iter().enumerate() {
        for (scenario, c) in counts {
            let m = c.metrics();
            csv.push_str(&format!(
                "FOLD{fold},{},{:.4},{:.4},{:.4},{:.4}\n",
                scenario.label(),
                m.jaccard,
                m.precision,
                m.recall,
                m.f_measure
            ));
        }
    }
    match output {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            let json = serde_json::to_string_pretty(&result).expect("report serializes");
            std::fs::write(dir.join("report.json"), json + "\n")
                .map_err(|e| CliError::Io(e.to_string()))?;
            std::fs::write(dir.join("report.csv"), csv)
                .map_err(|e| CliError::Io(e.to_string()))?;
            if verbose {
                eprintln!("wrote {}", dir.join("report.csv").display());
            }
        }
        None => write_or_print(None, csv.as_bytes())?,
    }
    Ok(())
}

fn cmd_stats(
    corpus_dir: &Path,
    output: Option<&Path>,
    unisons: bool,
) -> Result<(), CliError> {
    let corpus = load_corpus(corpus_dir, unisons, false)?;
    let stats = corpus_stats(&corpus);
    match output {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            std::fs::write(dir.join("stats.json"), stats.to_json() + "\n")
                .map_err(|e| CliError::Io(e.to_string()))?;
            std::fs::write(dir.join("stats.csv"), stats.to_csv())
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
        None => write_or_print(None, stats.to_csv().as_bytes())?,
    }
    Ok(())
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_SEEDS: u64 = 5;

fn cmd_gradcheck(arch: NetKind, seed: u64, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let mut worst: f64 = 0.0;
    for s in seed..seed + GRADCHECK_SEEDS {
        let err = match arch {
            NetKind::Note => gradcheck_note(s, checkpoint)?,
            NetKind::Chord => gradcheck_chord(s, checkpoint)?,
        };
        worst = worst.max(err);
    }
    println!("gradcheck {arch:?}: max relative error {worst:.3e}");
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Verify(format!(
            "gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
        )))
    }
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Checks the note-level network (or a trained one from `checkpoint`) on one
/// random input.
fn gradcheck_note(seed: u64, checkpoint: Option<&Path>) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match checkpoint {
        Some(path) => {
            let (model, _) = load_note_model(path)?;
            model.net
        }
        None => {
            let cfg = NoteModelConfig::default();
            let mut sizes = vec![40];
            sizes.extend_from_slice(&cfg.hidden);
            sizes.push(1);
            Mlp::init(&sizes, Head::Sigmoid, &mut rng)
        }
    };
    let x = random_vec(&mut rng, net.in_dim());
    let cache = net.forward(&x).map_err(|e| CliError::Verify(e.to_string()))?;
    let mut grad = net.zeros_like();
    net.backward(&cache, &[1.0], &mut grad);
    let mut analytic = Vec::new();
    grad.flatten_into(&mut analytic);
    let mut params = Vec::new();
    net.flatten_into(&mut params);
    let err = gradient_check(
        &mut params,
        &analytic,
        |p| {
            let mut m = net.clone();
            let mut cursor = 0;
            m.unflatten_from(p, &mut cursor);
            m.forward(&x).expect("forward").output()[0]
        },
        1e-5,
    );
    Ok(err)
}

/// Checks the chord-level network (or a trained one from `checkpoint`) on one
/// random assignment input.
fn gradcheck_chord(seed: u64, checkpoint: Option<&Path>) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ChordModelConfig::default();
    let net = match checkpoint {
        Some(path) => {
            let (model, _) = load_chord_model(path)?;
            model.net
        }
        None => ChordNet::init(24, 30, 16, 8, &cfg, &mut rng),
    };
    let (dp, dc, dd, da) = net.in_dims();
    let input = AssignmentInput {
        pairs: (0..3).map(|_| random_vec(&mut rng, dp)).collect(),
        convs: (0..2).map(|_| random_vec(&mut rng, dc)).collect(),
        divs: (0..2).map(|_| random_vec(&mut rng, dd)).collect(),
        assign: random_vec(&mut rng, da),
    };
    let (_, cache) = net.forward(&input).map_err(|e| CliError::Verify(e.to_string()))?;
    let mut grad = net.zeros_like();
    net.backward(&cache, 1.0, &mut grad);
    let mut analytic = Vec::new();
    grad.flatten_into(&mut analytic);
    let mut params = Vec::new();
    net.flatten_into(&mut params);
    let err = gradient_check(
        &mut params,
        &analytic,
        |p| {
            let mut m = net.clone();
            let mut cursor = 0;
            m.unflatten_from(p, &mut cursor);
            m.forward(&input).expect("forward").0
        },
        1e-5,
    );
    Ok(err)
}
