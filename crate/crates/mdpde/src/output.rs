//! Number formatting and file writing shared by the commands.
//!
//! Every floating-point value leaves the program with 17 significant digits,
//! in CSV and JSON alike, so that identical runs give identical bytes.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// 17 significant digits in scientific notation; `NaN` and infinities by name.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".to_owned()
    } else if v > 0.0 {
        "inf".to_owned()
    } else {
        "-inf".to_owned()
    }
}

/// A float that serializes to JSON with 17 significant digits. Non-finite
/// values become `null`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct F17(pub f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serde_json::Number::from_str(&num(self.0))
                .map_err(serde::ser::Error::custom)?
                .serialize(s)
        } else {
            s.serialize_none()
        }
    }
}

impl<'de> Deserialize<'de> for F17 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(F17(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN)))
    }
}

impl fmt::Display for F17 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&num(self.0))
    }
}

pub fn f17s(v: impl IntoIterator<Item = f64>) -> Vec<F17> {
    v.into_iter().map(F17).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()
}
