//! JSON persistence helpers shared by every file format.
//!
//! Doubles are written in scientific notation with 17 significant digits so
//! that a save/load/save cycle is byte-identical and no precision is lost.

use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

use crate::error::{Error, Result};

fn write_precise_f64<W: ?Sized + Write>(writer: &mut W, value: f64) -> io::Result<()> {
    write!(writer, "{value:.16e}")
}

// Non-finite doubles never reach the formatter: serde_json writes them as `null`.

/// Single-line formatter, used for JSON Lines records and wire messages.
#[derive(Default)]
pub struct CompactPrecise(CompactFormatter);

impl Formatter for CompactPrecise {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write_precise_f64(writer, value)
    }
}

/// Indented formatter for standalone JSON documents.
pub struct PrettyPrecise<'a>(PrettyFormatter<'a>);

impl Default for PrettyPrecise<'_> {
    fn default() -> Self {
        Self(PrettyFormatter::with_indent(b"  "))
    }
}

impl Formatter for PrettyPrecise<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write_precise_f64(writer, value)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serialize to one line of JSON (no trailing newline).
pub fn to_line<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, CompactPrecise::default());
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Serialize to an indented JSON document with a trailing newline.
pub fn to_document<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PrettyPrecise::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_document<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_document(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize + ?Sized> {
    schema: &'a str,
    #[serde(flatten)]
    inner: &'a T,
}

/// Renders a document with a leading `"schema"` tag.
pub fn to_tagged_document<T: Serialize + ?Sized>(value: &T, schema: &str) -> Result<String> {
    to_document(&Tagged {
        schema,
        inner: value,
    })
}

/// Renders a single JSON line with a leading `"schema"` tag.
pub fn to_tagged_line<T: Serialize + ?Sized>(value: &T, schema: &str) -> Result<String> {
    to_line(&Tagged {
        schema,
        inner: value,
    })
}

/// Parses a document whose `"schema"` tag, if present, must equal `schema`.
/// The remaining fields are handed to `T`, which decides about unknown keys.
pub fn from_tagged_str<T: DeserializeOwned>(text: &str, schema: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    from_tagged_value(value, schema)
}

pub fn from_tagged_value<T: DeserializeOwned>(
    mut value: serde_json::Value,
    schema: &str,
) -> Result<T> {
    if let Some(obj) = value.as_object_mut() {
        match obj.remove("schema") {
            None => {}
            Some(serde_json::Value::String(s)) => check_schema(Some(&s), schema)?,
            Some(other) => {
                return Err(Error::Format(format!(
                    "schema tag must be a string, got {other}"
                )))
            }
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("{schema}: {e}")))
}

/// Checks an optional `schema` tag against the expected identifier.
pub(crate) fn check_schema(found: Option<&str>, expected: &str) -> Result<()> {
    match found {
        None => Ok(()),
        Some(s) if s == expected => Ok(()),
        Some(s) => Err(Error::Format(format!(
            "schema mismatch: expected \"{expected}\", found \"{s}\""
        ))),
    }
}

/// Hex SHA-256 of a byte string; used for dataset provenance digests.
pub fn digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_keep_seventeen_digits() {
        let line = to_line(&[0.1_f64, 1.0 / 3.0, -2.5e-7]).unwrap();
        assert_eq!(
            line,
            "[1.0000000000000001e-1,3.3333333333333331e-1,-2.4999999999999999e-7]"
        );
        let back: Vec<f64> = serde_json::from_str(&line).unwrap();
        assert_eq!(back, vec![0.1, 1.0 / 3.0, -2.5e-7]);
    }

    #[test]
    fn non_finite_becomes_null() {
        // serde_json routes NaN/inf to `null` before the formatter sees it;
        // such documents then fail to load as numbers.
        assert_eq!(to_line(&[f64::NAN]).unwrap(), "[null]");
        assert!(serde_json::from_str::<Vec<f64>>("[null]").is_err());
    }

    #[test]
    fn schema_tag_is_optional_but_checked() {
        assert!(check_schema(None, "x/1").is_ok());
        assert!(check_schema(Some("x/1"), "x/1").is_ok());
        assert!(check_schema(Some("y/1"), "x/1").is_err());
    }
}
