//! MusicXML (partwise) ingestion.
//!
//! Reads the subset needed for voice separation work: parts, measures,
//! pitched notes and rests, chords, ties, time and key signatures, per-note
//! colors, and lyric annotations. Colored notes form voice streams by color;
//! otherwise each (part, voice-number) pair is a stream. Consecutive notes of
//! a stream are linked, and a lyric holding a comma-separated id list marks a
//! convergence or divergence point with the listed streams, most salient
//! first. Tied note groups are merged into one note spanning the tie.

use thiserror::Error;

use crate::score::{AnnotationSet, Note, NoteId, Score, ScoreError, TimeSignature};
use crate::time::{beat, beats, Beat};

#[derive(Debug, Error)]
pub enum XmlError {
    #[error("not well-formed XML: {0}")]
    Xml(#[from] roxmltree::Error),
    #[error("document is not a partwise MusicXML score")]
    NotPartwise,
    #[error("measure {measure}, note {note}: malformed lyric id list {text:?}")]
    BadLyric { measure: usize, note: u32, text: String },
    #[error("measure {measure}, note {note}: lyric references unknown voice {id}")]
    UnknownLyricVoice { measure: usize, note: u32, id: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// A parsed score with its annotation and any skip warnings.
#[derive(Debug)]
pub struct ParsedScore {
    pub score: Score,
    pub annotation: AnnotationSet,
    /// Human-readable notices for skipped or unsupported content.
    pub warnings: Vec<String>,
}

struct RawNote {
    id: NoteId,
    ps: i32,
    on: Beat,
    off: Beat,
    measure: usize,
    stream: StreamKey,
    lyric: Option<Vec<usize>>,
    tie_start: bool,
    tie_stop: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum StreamKey {
    Color(String),
    PartVoice(usize, String),
}

/// Parses a partwise MusicXML document.
pub fn parse_musicxml(bytes: &[u8]) -> Result<ParsedScore, XmlError> {
    let text = String::from_utf8_lossy(bytes);
    let doc = roxmltree::Document::parse(&text)?;
    let root = doc.root_element();
    if root.tag_name().name() != "score-partwise" {
        return Err(XmlError::NotPartwise);
    }
    let title = root
        .descendants()
        .find(|n| n.tag_name().name() == "work-title" || n.tag_name().name() == "movement-title")
        .and_then(|n| n.text())
        .unwrap_or("")
        .trim()
        .to_string();

    let mut warnings = Vec::new();
    let mut divisions: u32 = 1;
    let mut key = 0i32;
    let mut sigs: Vec<TimeSignature> = Vec::new();
    let mut raw: Vec<RawNote> = Vec::new();
    let mut next_id = 1u32;

    // First pass over the first part fixes the time signature map so measure
    // start positions are known for every part.
    for (pi, part) in root.children().filter(|n| n.has_tag_name("part")).enumerate() {
        for (mi, measure) in part.children().filter(|n| n.has_tag_name("measure")).enumerate() {
            for attrs in measure.children().filter(|n| n.has_tag_name("attributes")) {
                if let Some(d) = child_text(attrs, "divisions").and_then(|t| t.parse().ok()) {
                    divisions = d;
                }
                if let Some(k) = attrs
                    .children()
                    .find(|n| n.has_tag_name("key"))
                    .and_then(|k| child_text(k, "fifths"))
                    .and_then(|t| t.parse().ok())
                {
                    key = k;
                }
                if pi == 0 {
                    if let Some(t) = attrs.children().find(|n| n.has_tag_name("time")) {
                        let num = child_text(t, "beats").and_then(|x| x.parse().ok());
                        let den = child_text(t, "beat-type").and_then(|x| x.parse().ok());
                        if let (Some(num), Some(den)) = (num, den) {
                            sigs.push(TimeSignature { measure: mi, num, den });
                        }
                    }
                }
            }
        }
    }
    if sigs.is_empty() || sigs[0].measure != 0 {
        sigs.insert(0, TimeSignature { measure: 0, num: 4, den: 4 });
    }
    let sig_at = |measure: usize| {
        sigs.iter().rev().find(|s| s.measure <= measure).copied().unwrap_or(sigs[0])
    };
    let measure_start = |measure: usize| -> Beat {
        (0..measure).map(|m| beats(sig_at(m).num as i64)).sum()
    };

    for (pi, part) in root.children().filter(|n| n.has_tag_name("part")).enumerate() {
        for (mi, measure) in part.children().filter(|n| n.has_tag_name("measure")).enumerate() {
            // Cursor within the measure, in quarter lengths.
            let mut cursor = Beat::default();
            let mut prev_onset = Beat::default();
            let den = sig_at(mi).den as i64;
            for el in measure.children().filter(|n| n.is_element()) {
                match el.tag_name().name() {
                    "note" => {
                        let dur_div: i64 = child_text(el, "duration")
                            .and_then(|t| t.parse().ok())
                            .unwrap_or(0);
                        let dur_ql = beat(dur_div, divisions as i64);
                        let is_chord = el.children().any(|c| c.has_tag_name("chord"));
                        let onset_ql = if is_chord { prev_onset } else { cursor };
                        if el.children().any(|c| c.has_tag_name("grace")) {
                            warnings.push(format!("measure {}: skipped grace note", mi + 1));
                            continue;
                        }
                        if el.children().any(|c| c.has_tag_name("unpitched")) {
                            warnings
                                .push(format!("measure {}: skipped unpitched note", mi + 1));
                            if !is_chord {
                                prev_onset = cursor;
                                cursor += dur_ql;
                            }
                            continue;
                        }
                        if el.children().any(|c| c.has_tag_name("rest")) {
                            if !is_chord {
                                prev_onset = cursor;
                                cursor += dur_ql;
                            }
                            continue;
                        }
                        let pitch = el.children().find(|c| c.has_tag_name("pitch"));
                        let ps = match pitch.and_then(parse_pitch) {
                            Some(ps) => ps,
                            None => {
                                warnings.push(format!(
                                    "measure {}: skipped note without readable pitch",
                                    mi + 1
                                ));
                                if !is_chord {
                                    prev_onset = cursor;
                                    cursor += dur_ql;
                                }
                                continue;
                            }
                        };
                        let stream = match el.attribute("color") {
                            Some(c) => StreamKey::Color(c.to_string()),
                            None => StreamKey::PartVoice(
                                pi,
                                child_text(el, "voice").unwrap_or("1").to_string(),
                            ),
                        };
                        let id = NoteId(next_id);
                        next_id += 1;
                        let lyric = match parse_lyric(el) {
                            Ok(l) => l,
                            Err(text) => {
                                return Err(XmlError::BadLyric {
                                    measure: mi + 1,
                                    note: id.0,
                                    text,
                                })
                            }
                        };
                        let on = measure_start(mi) + onset_ql * beat(den, 4);
                        let bd = dur_ql * beat(den, 4);
                        raw.push(RawNote {
                            id,
                            ps,
                            on,
                            off: on + bd,
                            measure: mi,
                            stream,
                            lyric,
                            tie_start: has_tie(el, "start"),
                            tie_stop: has_tie(el, "stop"),
                        });
                        if !is_chord {
                            prev_onset = cursor;
                            cursor += dur_ql;
                        }
                    }
                    "backup" => {
                        let d: i64 =
                            child_text(el, "duration").and_then(|t| t.parse().ok()).unwrap_or(0);
                        cursor -= beat(d, divisions as i64);
                    }
                    "forward" => {
                        let d: i64 =
                            child_text(el, "duration").and_then(|t| t.parse().ok()).unwrap_or(0);
                        cursor += beat(d, divisions as i64);
                    }
                    "attributes" | "barline" | "direction" | "print" | "sound" | "harmony" => {}
                    other => warnings
                        .push(format!("measure {}: ignored element <{other}>", mi + 1)),
                }
            }
        }
    }

    merge_ties(&mut raw, &mut warnings);
    build_model(title, divisions, sigs, key, raw, warnings)
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children().find(|c| c.has_tag_name(name)).and_then(|c| c.text()).map(str::trim)
}

fn parse_pitch(pitch: roxmltree::Node) -> Option<i32> {
    let step = match child_text(pitch, "step")? {
        "C" => 0,
        "D" => 2,
        "E" => 4,
        "F" => 5,
        "G" => 7,
        "A" => 9,
        "B" => 11,
        _ => return None,
    };
    let alter: i32 = child_text(pitch, "alter").and_then(|t| t.parse().ok()).unwrap_or(0);
    let octave: i32 = child_text(pitch, "octave")?.parse().ok()?;
    Some(12 * (octave + 1) + step + alter)
}

fn has_tie(note: roxmltree::Node, kind: &str) -> bool {
    note.children()
        .any(|c| c.has_tag_name("tie") && c.attribute("type") == Some(kind))
}

/// Reads the first lyric line as a comma-separated list of voice ids.
/// Returns Err with the offending text when the list is malformed.
fn parse_lyric(note: roxmltree::Node) -> Result<Option<Vec<usize>>, String> {
    let Some(lyric) = note.children().find(|c| c.has_tag_name("lyric")) else {
        return Ok(None);
    };
    let Some(text) = child_text(lyric, "text").filter(|t| !t.is_empty()) else {
        return Ok(None);
    };
    let mut ids = Vec::new();
    for piece in text.split(',') {
        match piece.trim().parse::<usize>() {
            Ok(v) if v >= 1 => ids.push(v),
            _ => return Err(text.to_string()),
        }
    }
    Ok(Some(ids))
}

/// Collapses tied note groups into single notes spanning the tie. A stop tie
/// merges into the closest earlier note of the same stream and pitch whose
/// span touches the stopped note's onset.
fn merge_ties(raw: &mut Vec<RawNote>, warnings: &mut Vec<String>) {
    let mut i = 0;
    while i < raw.len() {
        if raw[i].tie_stop {
            let (on, ps) = (raw[i].on, raw[i].ps);
            let stream = raw[i].stream.clone();
            let prev = raw[..i]
                .iter()
                .rposition(|p| p.stream == stream && p.ps == ps && p.off == on && p.tie_start);
            match prev {
                Some(p) => {
                    raw[p].off = raw[i].off;
                    raw[p].tie_start = raw[i].tie_start;
                    if raw[i].lyric.is_some() && raw[p].lyric.is_none() {
                        raw[p].lyric = raw[i].lyric.take();
                    }
                    raw.remove(i);
                    continue;
                }
                None => warnings.push(format!(
                    "note {}: dangling tie stop left as a separate note",
                    raw[i].id
                )),
            }
        }
        i += 1;
    }
}

fn build_model(
    title: String,
    divisions: u32,
    sigs: Vec<TimeSignature>,
    key: i32,
    raw: Vec<RawNote>,
    warnings: Vec<String>,
) -> Result<ParsedScore, XmlError> {
    // Streams in first-appearance order; lyric id k refers to the k-th.
    let mut streams: Vec<StreamKey> = Vec::new();
    for n in &raw {
        if !streams.contains(&n.stream) {
            streams.push(n.stream.clone());
        }
    }
    let members = |v: usize| -> Vec<&RawNote> {
        let mut m: Vec<&RawNote> = raw.iter().filter(|n| n.stream == streams[v]).collect();
        m.sort_by(|a, b| a.on.cmp(&b.on).then(b.ps.cmp(&a.ps)));
        m
    };

    let mut ann = AnnotationSet::default();
    for v in 0..streams.len() {
        let m = members(v);
        for w in m.windows(2) {
            // Chords inside a stream make "the next note" ambiguous; link
            // only across strictly increasing onsets between lone notes.
            let lone = |x: &RawNote| m.iter().filter(|y| y.on == x.on).count() == 1;
            if w[0].on < w[1].on && lone(w[0]) && lone(w[1]) {
                ann.links.insert((w[0].id, w[1].id));
            }
        }
    }
    for n in raw.iter().filter(|n| n.lyric.is_some()) {
        let mut sources: Vec<NoteId> = Vec::new();
        let mut targets: Vec<NoteId> = Vec::new();
        // Position of the note's own stream in the list, resolved last: its
        // reading (previous note = convergence, next note = divergence)
        // follows from what the other listed streams turned out to be.
        let mut own_rank: Option<usize> = None;
        for &v in n.lyric.as_ref().unwrap() {
            if v > streams.len() {
                return Err(XmlError::UnknownLyricVoice {
                    measure: n.measure + 1,
                    note: n.id.0,
                    id: v,
                });
            }
            let m = members(v - 1);
            if m.iter().any(|x| x.id == n.id) {
                own_rank = Some(sources.len() + targets.len());
                continue;
            }
            if m.first().is_some_and(|f| f.on > n.on) {
                // Stream starts after this note: it diverges from here.
                let first = m.first().unwrap();
                ann.links.insert((n.id, first.id));
                targets.push(first.id);
            } else if let Some(prev) = m.iter().rev().find(|x| x.on < n.on) {
                ann.links.insert((prev.id, n.id));
                sources.push(prev.id);
            } else {
                return Err(XmlError::UnknownLyricVoice {
                    measure: n.measure + 1,
                    note: n.id.0,
                    id: v,
                });
            }
        }
        if let Some(rank) = own_rank {
            let m = members(
                streams.iter().position(|s| *s == n.stream).expect("own stream exists"),
            );
            if targets.is_empty() {
                if let Some(prev) = m.iter().rev().find(|x| x.on < n.on) {
                    sources.insert(rank.min(sources.len()), prev.id);
                }
            } else if let Some(next) = m.iter().find(|x| x.on > n.on) {
                targets.insert(rank.saturating_sub(sources.len()).min(targets.len()), next.id);
            }
        }
        let mut order = sources;
        order.append(&mut targets);
        if order.len() >= 2 {
            ann.salience.insert(n.id, order);
        }
    }

    let notes: Vec<Note> = raw
        .into_iter()
        .map(|n| Note {
            id: n.id,
            ps: n.ps,
            on: n.on,
            off: n.off,
            ql: Beat::default(),
            measure: n.measure,
        })
        .collect();
    let score = Score::new(title, divisions, sigs, key, notes)?;
    ann.validate(&score)?;
    Ok(ParsedScore { score, annotation: ann, warnings })
}
