//! Feature discretization and the corpus-fitted feature configuration.
//!
//! Raw feature values come out of extraction as optional reals (a missing
//! value means the underlying function was null, e.g. no chord neighbor
//! above). A [`GroupConfig`] fitted on training data turns each raw vector
//! into a fixed-width dense vector: continuous slots stay as single reals,
//! direction slots become 3-way one-hots, wide-range pitch slots become ten
//! equal range slices, and small-vocabulary slots become one-hots over the
//! values observed in training. The configuration is immutable after fitting,
//! serializes to JSON, and carries a content hash so checkpoints can detect a
//! mismatched feature space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Substitute used when a raw value is null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullPolicy {
    /// Maximum value this slot took anywhere in training data; the "very far
    /// away" reading used for missing pitch neighbors.
    MaxObserved,
    /// The beat horizon; used for missing temporal distances.
    Horizon,
    /// Plain zero.
    Zero,
}

/// How a slot's raw value is encoded in the dense vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    /// Single real component, passed through.
    Raw(NullPolicy),
    /// Single 0/1 component; null reads as false.
    Bool,
    /// Three-way one-hot over (greater, equal, less); null reads as equal.
    Dir,
    /// Ten equal slices of the observed range, endpoints rounded outward to
    /// multiples of ten; out-of-range values clamp to the boundary slices.
    Slice,
    /// One-hot over the sorted set of values observed in training; unseen
    /// values snap to the nearest vocabulary entry.
    Vocab(NullPolicy),
}

/// Static description of one feature slot.
#[derive(Debug, Clone)]
pub struct SlotSpec {
    pub name: String,
    pub kind: SlotKind,
}

impl SlotSpec {
    pub fn new(name: impl Into<String>, kind: SlotKind) -> Self {
        SlotSpec { name: name.into(), kind }
    }
}

/// Direction encoding of a comparison as a raw value.
pub fn dir_value(ord: std::cmp::Ordering) -> f64 {
    match ord {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Equal => 0.0,
        std::cmp::Ordering::Less => -1.0,
    }
}

/// Fitted per-slot statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotConfig {
    pub name: String,
    pub kind: SlotKind,
    /// Observed minimum (slice lower bound after rounding).
    pub min: f64,
    /// Observed maximum (slice upper bound after rounding).
    pub max: f64,
    /// Sorted observed values; only populated for vocabulary slots.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocab: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("feature configuration is missing slot `{0}`")]
    MissingSlot(String),
    #[error("feature configuration slot `{name}` has kind {got:?}, expected {want:?}")]
    KindMismatch { name: String, got: SlotKind, want: SlotKind },
}

/// A fitted configuration for one slot list (one feature group).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupConfig {
    pub slots: Vec<SlotConfig>,
}

impl GroupConfig {
    /// Fits slot statistics over an iterator of raw vectors, each aligned
    /// with `specs`. Missing values are skipped; slots never observed fall
    /// back to the degenerate range [0, 1] and vocabulary {0}.
    pub fn fit<'a>(
        specs: &[SlotSpec],
        samples: impl IntoIterator<Item = &'a [Option<f64>]>,
    ) -> Self {
        let mut min = vec![f64::INFINITY; specs.len()];
        let mut max = vec![f64::NEG_INFINITY; specs.len()];
        let mut vocab: Vec<Vec<f64>> = vec![Vec::new(); specs.len()];
        for raw in samples {
            assert_eq!(raw.len(), specs.len(), "raw vector shape mismatch");
            for (i, value) in raw.iter().enumerate() {
                let Some(x) = *value else { continue };
                min[i] = min[i].min(x);
                max[i] = max[i].max(x);
                if matches!(specs[i].kind, SlotKind::Vocab(_)) {
                    if let Err(pos) = vocab[i].binary_search_by(|p| p.total_cmp(&x)) {
                        vocab[i].insert(pos, x);
                    }
                }
            }
        }
        let slots = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (mut lo, mut hi) = if min[i].is_finite() {
                    (min[i], max[i])
                } else {
                    (0.0, 1.0)
                };
                if matches!(spec.kind, SlotKind::Slice) {
                    lo = (lo / 10.0).floor() * 10.0;
                    hi = (hi / 10.0).ceil() * 10.0;
                    if hi <= lo {
                        hi = lo + 10.0;
                    }
                }
                let mut voc = std::mem::take(&mut vocab[i]);
                if matches!(spec.kind, SlotKind::Vocab(_)) && voc.is_empty() {
                    voc.push(0.0);
                }
                SlotConfig { name: spec.name.to_string(), kind: spec.kind, min: lo, max: hi, vocab: voc }
            })
            .collect();
        GroupConfig { slots }
    }

    /// Verifies the fitted slots line up with a spec list, e.g. after loading
    /// a configuration from disk.
    pub fn check(&self, specs: &[SlotSpec]) -> Result<(), ConfigError> {
        for spec in specs {
            let slot = self
                .slots
                .iter()
                .find(|s| s.name == spec.name)
                .ok_or_else(|| ConfigError::MissingSlot(spec.name.to_string()))?;
            if slot.kind != spec.kind {
                return Err(ConfigError::KindMismatch {
                    name: spec.name.to_string(),
                    got: slot.kind,
                    want: spec.kind,
                });
            }
        }
        Ok(())
    }

    /// Total dense width of the encoded vector.
    pub fn width(&self) -> usize {
        self.slots.iter().map(|s| slot_width(s)).sum()
    }

    /// Dense component range of the named slot.
    pub fn slot_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut offset = 0;
        for slot in &self.slots {
            let w = slot_width(slot);
            if slot.name == name {
                return Some(offset..offset + w);
            }
            offset += w;
        }
        None
    }

    /// Encodes a raw vector into the dense representation. `horizon` supplies
    /// the default for temporal nulls.
    pub fn encode(&self, raw: &[Option<f64>], horizon: f64) -> Vec<f64> {
        assert_eq!(raw.len(), self.slots.len(), "raw vector shape mismatch");
        let mut out = Vec::with_capacity(self.width());
        for (slot, value) in self.slots.iter().zip(raw) {
            encode_slot(slot, *value, horizon, &mut out);
        }
        out
    }

    /// An all-zero dense vector (the base for the empty-voice unit vector).
    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.width()]
    }
}

fn slot_width(slot: &SlotConfig) -> usize {
    match slot.kind {
        SlotKind::Raw(_) | SlotKind::Bool => 1,
        SlotKind::Dir => 3,
        SlotKind::Slice => 10,
        SlotKind::Vocab(_) => slot.vocab.len(),
    }
}

fn null_default(policy: NullPolicy, slot: &SlotConfig, horizon: f64) -> f64 {
    match policy {
        NullPolicy::MaxObserved => slot.max,
        NullPolicy::Horizon => horizon,
        NullPolicy::Zero => 0.0,
    }
}

fn encode_slot(slot: &SlotConfig, value: Option<f64>, horizon: f64, out: &mut Vec<f64>) {
    match slot.kind {
        SlotKind::Raw(policy) => {
            out.push(value.unwrap_or_else(|| null_default(policy, slot, horizon)));
        }
        SlotKind::Bool => out.push(if value.unwrap_or(0.0) != 0.0 { 1.0 } else { 0.0 }),
        SlotKind::Dir => {
            let v = value.unwrap_or(0.0);
            out.push(if v > 0.0 { 1.0 } else { 0.0 });
            out.push(if v == 0.0 { 1.0 } else { 0.0 });
            out.push(if v < 0.0 { 1.0 } else { 0.0 });
        }
        SlotKind::Slice => {
            let v = value.unwrap_or(slot.min);
            let width = (slot.max - slot.min) / 10.0;
            let idx = (((v - slot.min) / width).floor() as i64).clamp(0, 9) as usize;
            for i in 0..10 {
                out.push(if i == idx { 1.0 } else { 0.0 });
            }
        }
        SlotKind::Vocab(policy) => {
            let v = value.unwrap_or_else(|| null_default(policy, slot, horizon));
            let idx = nearest(&slot.vocab, v);
            for i in 0..slot.vocab.len() {
                out.push(if i == idx { 1.0 } else { 0.0 });
            }
        }
    }
}

fn nearest(vocab: &[f64], v: f64) -> usize {
    match vocab.binary_search_by(|p| p.total_cmp(&v)) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i == vocab.len() => vocab.len() - 1,
        Err(i) => {
            if (v - vocab[i - 1]).abs() <= (vocab[i] - v).abs() {
                i - 1
            } else {
                i
            }
        }
    }
}

/// The full fitted feature space: one group per feature family, plus the
/// horizon the temporal defaults refer to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub version: u32,
    /// Beat horizon in beats, as a real.
    pub horizon: f64,
    pub groups: BTreeMap<String, GroupConfig>,
}

pub const FEATURE_CONFIG_VERSION: u32 = 1;

impl FeatureConfig {
    pub fn new(horizon: f64) -> Self {
        FeatureConfig { version: FEATURE_CONFIG_VERSION, horizon, groups: BTreeMap::new() }
    }

    pub fn group(&self, name: &str) -> Result<&GroupConfig, ConfigError> {
        self.groups.get(name).ok_or_else(|| ConfigError::MissingSlot(name.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("feature config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Content hash over the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("feature config serializes");
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}
