//! The internal JSON score format and separation output.
//!
//! A score document carries the note list with exact `[num, den]` beat
//! values, the directed voice links, and salience orders for convergence and
//! divergence points. Separation results additionally carry a per-note voice
//! color and the color lists that encode convergence and divergence, from
//! which the link set can be reconstructed without the explicit `links`
//! array.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::VoiceGraph;
use crate::score::{AnnotationSet, Note, NoteId, Score, ScoreError, TimeSignature};
use crate::time::{deserialize_beat, serialize_beat, Beat};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Schema { path: String, msg: String },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("note {0}: color list entry {1} matches no note")]
    UnknownColor(NoteId, usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreDoc {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    title: String,
    divisions: u32,
    key: i32,
    time: Vec<(usize, u32, u32)>,
    notes: Vec<NoteDoc>,
    #[serde(default)]
    links: Vec<(u32, u32)>,
    #[serde(default)]
    salience: BTreeMap<String, Vec<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NoteDoc {
    id: u32,
    pitch: i32,
    #[serde(serialize_with = "serialize_beat", deserialize_with = "deserialize_beat")]
    onset: Beat,
    #[serde(serialize_with = "serialize_beat", deserialize_with = "deserialize_beat")]
    duration: Beat,
    measure: usize,
    /// Voice color id; present only in separation output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    color: Option<usize>,
    /// Colors of the voices converging into this note, most salient first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    converge: Option<Vec<usize>>,
    /// Colors of the voices diverging out of this note, most salient first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diverge: Option<Vec<usize>>,
}

/// Parses the internal JSON score format.
pub fn parse_score_json(bytes: &[u8]) -> Result<(Score, AnnotationSet), IoError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let doc: ScoreDoc = serde_path_to_error::deserialize(&mut de).map_err(|e| IoError::Json {
        path: e.path().to_string(),
        source: e.into_inner(),
    })?;
    score_from_doc(doc)
}

fn score_from_doc(doc: ScoreDoc) -> Result<(Score, AnnotationSet), IoError> {
    let notes = doc
        .notes
        .iter()
        .map(|n| Note {
            id: NoteId(n.id),
            ps: n.pitch,
            on: n.onset,
            off: n.onset + n.duration,
            ql: Beat::default(),
            measure: n.measure,
        })
        .collect();
    let time = doc
        .time
        .iter()
        .map(|&(measure, num, den)| TimeSignature { measure, num, den })
        .collect();
    let score = Score::new(doc.title, doc.divisions, time, doc.key, notes)?;
    let mut ann = AnnotationSet::default();
    for (from, to) in doc.links {
        ann.links.insert((NoteId(from), NoteId(to)));
    }
    for (key, ids) in doc.salience {
        let center: u32 = key.parse().map_err(|_| IoError::Schema {
            path: format!("salience.{key}"),
            msg: "key is not a note id".into(),
        })?;
        ann.salience.insert(NoteId(center), ids.into_iter().map(NoteId).collect());
    }
    ann.validate(&score)?;
    Ok((score, ann))
}

/// Serializes a score and its annotation to the internal JSON format.
/// Output is byte-for-byte deterministic for equal inputs.
pub fn serialize_score_json(score: &Score, ann: &AnnotationSet) -> Vec<u8> {
    let doc = doc_from_score(score, ann, None);
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("score serialization");
    bytes.push(b'\n');
    bytes
}

/// Serializes a separation result: the score document plus per-note voice
/// colors and the convergence/divergence color lists derived from the graph.
pub fn serialize_separation(score: &Score, graph: &VoiceGraph) -> Vec<u8> {
    let ann = graph.to_annotation(score);
    let coloring = color_voices(score, graph);
    let doc = doc_from_score(score, &ann, Some(&coloring));
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("separation serialization");
    bytes.push(b'\n');
    bytes
}

fn doc_from_score(score: &Score, ann: &AnnotationSet, coloring: Option<&VoiceColoring>) -> ScoreDoc {
    let notes = score
        .notes()
        .iter()
        .enumerate()
        .map(|(idx, n)| NoteDoc {
            id: n.id.0,
            pitch: n.ps,
            onset: n.on,
            duration: n.bd(),
            measure: n.measure,
            color: coloring.map(|c| c.color[idx]),
            converge: coloring.and_then(|c| {
                (!c.converge[idx].is_empty()).then(|| c.converge[idx].clone())
            }),
            diverge: coloring.and_then(|c| {
                (!c.diverge[idx].is_empty()).then(|| c.diverge[idx].clone())
            }),
        })
        .collect();
    ScoreDoc {
        title: score.title.clone(),
        divisions: score.divisions,
        key: score.key_signature,
        time: score.time_signatures.iter().map(|t| (t.measure, t.num, t.den)).collect(),
        notes,
        links: ann.links.iter().map(|&(f, t)| (f.0, t.0)).collect(),
        salience: ann
            .salience
            .iter()
            .map(|(&c, ids)| (c.0.to_string(), ids.iter().map(|id| id.0).collect()))
            .collect(),
    }
}

/// Per-note voice colors with convergence/divergence color lists; together
/// these encode a voice graph without explicit links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoiceColoring {
    /// Color id per note index, assigned in first-appearance order.
    pub color: Vec<usize>,
    /// For notes with 2+ in-links: colors of the converging voices, most
    /// salient first. Empty otherwise.
    pub converge: Vec<Vec<usize>>,
    /// For notes with 2+ out-links: colors of the diverging voices, most
    /// salient first. Empty otherwise.
    pub diverge: Vec<Vec<usize>>,
}

/// Computes the voice coloring of a graph. A note continues the color of its
/// most salient in-link source when it is also that source's most salient
/// target; every other note starts a fresh color.
pub fn color_voices(score: &Score, graph: &VoiceGraph) -> VoiceColoring {
    let n = score.len();
    let mut color = vec![usize::MAX; n];
    let mut next = 0;
    for idx in 0..n {
        let inherited = graph
            .lt(idx)
            .first()
            .filter(|&&src| graph.rt(src).first() == Some(&idx))
            .map(|&src| color[src]);
        color[idx] = match inherited {
            Some(c) => c,
            None => {
                next += 1;
                next - 1
            }
        };
    }
    let converge = (0..n)
        .map(|idx| {
            if graph.lt(idx).len() >= 2 {
                graph.lt(idx).iter().map(|&s| color[s]).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    let diverge = (0..n)
        .map(|idx| {
            if graph.rt(idx).len() >= 2 {
                graph.rt(idx).iter().map(|&t| color[t]).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    VoiceColoring { color, converge, diverge }
}

/// Reconstructs the annotation encoded by a voice coloring: consecutive
/// same-color notes are linked, and the convergence/divergence color lists
/// supply the cross-color links and salience orders.
pub fn coloring_to_annotation(
    score: &Score,
    coloring: &VoiceColoring,
) -> Result<AnnotationSet, IoError> {
    let mut chains: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for idx in 0..score.len() {
        chains.entry(coloring.color[idx]).or_default().push(idx);
    }
    let mut ann = AnnotationSet::default();
    for chain in chains.values() {
        for w in chain.windows(2) {
            ann.links.insert((score.note(w[0]).id, score.note(w[1]).id));
        }
    }
    // The source of a converging color at note `n` is the latest note of that
    // chain before `n` that either ends its chain or names n's color in its
    // divergence list; symmetrically for divergence targets.
    let source_of = |ci: usize, n: usize| -> Result<usize, IoError> {
        let chain = chains.get(&ci).ok_or(IoError::UnknownColor(score.note(n).id, ci))?;
        if coloring.color[n] == ci {
            let pos = chain.iter().position(|&m| m == n).expect("note is in its chain");
            return chain
                .get(pos.wrapping_sub(1))
                .copied()
                .ok_or(IoError::UnknownColor(score.note(n).id, ci));
        }
        chain
            .iter()
            .rev()
            .filter(|&&m| score.note(m).on < score.note(n).on)
            .find(|&&m| {
                m == *chain.last().unwrap() || coloring.diverge[m].contains(&coloring.color[n])
            })
            .copied()
            .ok_or(IoError::UnknownColor(score.note(n).id, ci))
    };
    let target_of = |ci: usize, m: usize| -> Result<usize, IoError> {
        let chain = chains.get(&ci).ok_or(IoError::UnknownColor(score.note(m).id, ci))?;
        if coloring.color[m] == ci {
            let pos = chain.iter().position(|&x| x == m).expect("note is in its chain");
            return chain
                .get(pos + 1)
                .copied()
                .ok_or(IoError::UnknownColor(score.note(m).id, ci));
        }
        chain
            .iter()
            .filter(|&&t| score.note(t).on > score.note(m).on)
            .find(|&&t| {
                t == chain[0] || coloring.converge[t].contains(&coloring.color[m])
            })
            .copied()
            .ok_or(IoError::UnknownColor(score.note(m).id, ci))
    };
    for idx in 0..score.len() {
        let mut order: Vec<NoteId> = Vec::new();
        for &ci in &coloring.converge[idx] {
            let src = source_of(ci, idx)?;
            ann.links.insert((score.note(src).id, score.note(idx).id));
            order.push(score.note(src).id);
        }
        for &ci in &coloring.diverge[idx] {
            let tgt = target_of(ci, idx)?;
            ann.links.insert((score.note(idx).id, score.note(tgt).id));
            order.push(score.note(tgt).id);
        }
        if !order.is_empty() {
            ann.salience.insert(score.note(idx).id, order);
        }
    }
    Ok(ann)
}

/// Reads a separation document back, reconstructing the link set from the
/// voice colors and color lists alone (the `links` array is ignored).
pub fn parse_separation(bytes: &[u8]) -> Result<(Score, AnnotationSet), IoError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let doc: ScoreDoc = serde_path_to_error::deserialize(&mut de).map_err(|e| IoError::Json {
        path: e.path().to_string(),
        source: e.into_inner(),
    })?;
    let colors: Vec<Option<usize>> = doc.notes.iter().map(|n| n.color).collect();
    let converge: Vec<Vec<usize>> =
        doc.notes.iter().map(|n| n.converge.clone().unwrap_or_default()).collect();
    let diverge: Vec<Vec<usize>> =
        doc.notes.iter().map(|n| n.diverge.clone().unwrap_or_default()).collect();
    let ids: Vec<NoteId> = doc.notes.iter().map(|n| NoteId(n.id)).collect();
    let (score, _) = score_from_doc(doc)?;
    // Documents list notes in score order, but re-sorting is allowed; map
    // the per-document arrays through note ids.
    let mut coloring = VoiceColoring {
        color: vec![usize::MAX; score.len()],
        converge: vec![Vec::new(); score.len()],
        diverge: vec![Vec::new(); score.len()],
    };
    for (pos, id) in ids.iter().enumerate() {
        let idx = score.index_of(*id).expect("note id survived parsing");
        coloring.color[idx] = colors[pos].ok_or(IoError::Schema {
            path: format!("notes[{pos}].color"),
            msg: "separation documents require a color per note".into(),
        })?;
        coloring.converge[idx] = converge[pos].clone();
        coloring.diverge[idx] = diverge[pos].clone();
    }
    let ann = coloring_to_annotation(&score, &coloring)?;
    ann.validate(&score)?;
    Ok((score, ann))
}

/// Merges unison duplicates — notes sounding the same pitch over the same
/// span — into a single note, turning their in-links into a convergence and
/// their out-links into a divergence on the surviving note.
pub fn rewrite_unisons(score: &Score, ann: &AnnotationSet) -> (Score, AnnotationSet) {
    // Group by (pitch, onset, offset); the smallest id survives.
    let mut survivor: BTreeMap<NoteId, NoteId> = BTreeMap::new();
    let mut groups: BTreeMap<(i32, Beat, Beat), NoteId> = BTreeMap::new();
    for n in score.notes() {
        let keep = *groups.entry((n.ps, n.on, n.off)).or_insert(n.id);
        survivor.insert(n.id, keep);
    }
    let notes: Vec<Note> = score
        .notes()
        .iter()
        .filter(|n| survivor[&n.id] == n.id)
        .cloned()
        .collect();
    let merged = Score::new(
        score.title.clone(),
        score.divisions,
        score.time_signatures.clone(),
        score.key_signature,
        notes,
    )
    .expect("merging notes preserves score validity");
    let mut out = AnnotationSet::default();
    for &(from, to) in &ann.links {
        let (f, t) = (survivor[&from], survivor[&to]);
        if f != t {
            out.links.insert((f, t));
        }
    }
    for (&center, ids) in &ann.salience {
        let mut mapped: Vec<NoteId> = Vec::new();
        for id in ids {
            let m = survivor[id];
            if m != survivor[&center] && !mapped.contains(&m) {
                mapped.push(m);
            }
        }
        if !mapped.is_empty() {
            out.salience.entry(survivor[&center]).or_insert(mapped);
        }
    }
    (merged, out)
}
