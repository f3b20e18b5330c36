//! Exact rational time in beats.
//!
//! Onset equality drives chord grouping and overlap tests, so time is kept as
//! `num_rational::Rational64` throughout — never floating point. On the wire a
//! beat value is a two-element `[numerator, denominator]` array.

use num_rational::Rational64;
use num_traits::{Signed, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A point or span on the beat axis.
pub type Beat = Rational64;

/// Builds a beat value from a numerator/denominator pair.
pub fn beat(num: i64, den: i64) -> Beat {
    Rational64::new(num, den)
}

/// Builds a whole-number beat value.
pub fn beats(n: i64) -> Beat {
    Rational64::from_integer(n)
}

/// Absolute difference of two beat values.
pub fn beat_abs(b: Beat) -> Beat {
    b.abs()
}

/// Lossy conversion for feature values and reports.
pub fn beat_to_f64(b: Beat) -> f64 {
    *b.numer() as f64 / *b.denom() as f64
}

/// Serializes a beat value as `[num, den]` in lowest terms.
pub fn serialize_beat<S: Serializer>(b: &Beat, ser: S) -> Result<S::Ok, S::Error> {
    [*b.numer(), *b.denom()].serialize(ser)
}

/// Deserializes a `[num, den]` pair, rejecting zero denominators.
pub fn deserialize_beat<'de, D: Deserializer<'de>>(de: D) -> Result<Beat, D::Error> {
    let [num, den] = <[i64; 2]>::deserialize(de)?;
    if den == 0 {
        return Err(D::Error::custom("beat denominator must be nonzero"));
    }
    Ok(Rational64::new(num, den))
}

/// True when the half-open spans `[on_a, off_a)` and `[on_b, off_b)` intersect.
pub fn spans_overlap(on_a: Beat, off_a: Beat, on_b: Beat, off_b: Beat) -> bool {
    on_a < off_b && on_b < off_a
}

/// True when `b` is a whole number of beats.
pub fn is_integer_beat(b: Beat) -> bool {
    b.fract().is_zero()
}
