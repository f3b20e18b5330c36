//! Voice separation for symbolic music.
//!
//! Splits polyphonic scores into monophonic voices, allowing voices to
//! converge (many-to-one) and diverge (one-to-many). Three engines share the
//! same chord-by-chord machinery: a rule-based envelope extractor, a
//! note-level neural assignment model, and a chord-level joint neural model.

pub mod chord_features;
pub mod chords;
pub mod cli;
pub mod config;
pub mod features;
pub mod graph;
pub mod envelope;
pub mod eval;
pub mod io;
pub mod model_chord;
pub mod model_note;
pub mod musicxml;
pub mod neural;
pub mod pseudo;
pub mod score;
pub mod synth;
pub mod time;
pub mod tonal;
pub mod voices;
