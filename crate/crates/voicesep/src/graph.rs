//! The voice graph: directed note-to-note links with convergence and
//! divergence, plus the derived quantities defined over it.

use crate::score::{AnnotationSet, NoteId, Score, ScoreError};

/// A DAG over a score's notes. Links always advance in onset. The order of
/// each adjacency list is the salience order, most salient first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoiceGraph {
    /// In-link sources per note ("left" neighbors).
    lt: Vec<Vec<usize>>,
    /// Out-link targets per note ("right" neighbors).
    rt: Vec<Vec<usize>>,
}

impl VoiceGraph {
    pub fn new(note_count: usize) -> Self {
        VoiceGraph { lt: vec![Vec::new(); note_count], rt: vec![Vec::new(); note_count] }
    }

    /// Builds a graph from an annotation, adopting its salience orders.
    pub fn from_annotation(score: &Score, ann: &AnnotationSet) -> Result<Self, ScoreError> {
        ann.validate(score)?;
        let mut g = VoiceGraph::new(score.len());
        for (idx, note) in score.notes().iter().enumerate() {
            for src in ann.ordered_sources(score, note.id) {
                let si = score.index_of(src).ok_or(ScoreError::UnknownNote(src))?;
                g.lt[idx].push(si);
            }
            for tgt in ann.ordered_targets(score, note.id) {
                let ti = score.index_of(tgt).ok_or(ScoreError::UnknownNote(tgt))?;
                g.rt[idx].push(ti);
            }
        }
        Ok(g)
    }

    /// Exports links and salience orders back to id space. Salience entries
    /// are emitted only where they carry information (2 or more in-links or
    /// out-links at a note).
    pub fn to_annotation(&self, score: &Score) -> AnnotationSet {
        let mut ann = AnnotationSet::default();
        for (idx, targets) in self.rt.iter().enumerate() {
            let from = score.note(idx).id;
            for &t in targets {
                ann.links.insert((from, score.note(t).id));
            }
        }
        for idx in 0..score.len() {
            let mut order: Vec<NoteId> = Vec::new();
            if self.lt[idx].len() >= 2 {
                order.extend(self.lt[idx].iter().map(|&s| score.note(s).id));
            }
            if self.rt[idx].len() >= 2 {
                order.extend(self.rt[idx].iter().map(|&t| score.note(t).id));
            }
            if !order.is_empty() {
                ann.salience.insert(score.note(idx).id, order);
            }
        }
        ann
    }

    pub fn note_count(&self) -> usize {
        self.lt.len()
    }

    /// Adds a link; appending fixes its salience rank below existing links.
    pub fn add_link(&mut self, from: usize, to: usize) {
        if !self.rt[from].contains(&to) {
            self.rt[from].push(to);
            self.lt[to].push(from);
        }
    }

    pub fn has_link(&self, from: usize, to: usize) -> bool {
        self.rt[from].contains(&to)
    }

    /// Sources converging into `n`, most salient first.
    pub fn lt(&self, n: usize) -> &[usize] {
        &self.lt[n]
    }

    /// Targets diverging out of `n`, most salient first.
    pub fn rt(&self, n: usize) -> &[usize] {
        &self.rt[n]
    }

    /// All links as (from, to) index pairs.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rt
            .iter()
            .enumerate()
            .flat_map(|(from, ts)| ts.iter().map(move |&to| (from, to)))
    }

    pub fn link_count(&self) -> usize {
        self.rt.iter().map(Vec::len).sum()
    }

    /// Depth of the divergence tree rooted at `m`: 0 when `m` has no
    /// out-links, otherwise one more than the deepest subtree.
    pub fn dp(&self, m: usize) -> usize {
        self.rt[m].iter().map(|&t| 1 + self.dp(t)).max().unwrap_or(0)
    }
}
