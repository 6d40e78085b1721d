//! JSON helpers for prompts and responses.

use std::io;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

/// Serializes like Python's `json.dumps(value, indent=2)`: two-space indent,
/// `,` and `": "` separators, and every non-ASCII character escaped as `\uXXXX`.
pub fn python_dumps<T: Serialize + ?Sized>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, AsciiPretty::default());
    value
        .serialize(&mut ser)
        .expect("prompt payloads serialize infallibly");
    String::from_utf8(out).expect("ascii output")
}

struct AsciiPretty {
    inner: PrettyFormatter<'static>,
}

impl Default for AsciiPretty {
    fn default() -> Self {
        Self {
            inner: PrettyFormatter::with_indent(b"  "),
        }
    }
}

impl Formatter for AsciiPretty {
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }

    fn write_string_fragment<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        fragment: &str,
    ) -> io::Result<()> {
        for c in fragment.chars() {
            if c.is_ascii() {
                w.write_all(&[c as u8])?;
            } else {
                let mut units = [0u16; 2];
                for unit in c.encode_utf16(&mut units) {
                    write!(w, "\\u{unit:04x}")?;
                }
            }
        }
        Ok(())
    }
}

/// Candidate JSON object texts in `raw`, fenced blocks first.
fn object_candidates(raw: &str) -> Vec<&str> {
    let mut regions = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map_or(0, |i| i + 1);
        match after[body_start..].find("```") {
            Some(end) => {
                regions.push(&after[body_start..body_start + end]);
                rest = &after[body_start + end + 3..];
            }
            None => break,
        }
    }
    regions.push(raw);

    let mut out = Vec::new();
    for region in regions {
        for (start, _) in region.match_indices('{') {
            if let Some(len) = balanced_len(&region[start..]) {
                out.push(&region[start..start + len]);
            }
        }
    }
    out
}

/// Byte length of the balanced `{...}` prefix of `s`, honoring string literals.
fn balanced_len(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Pulls the first parseable JSON object out of free-form model output.
pub fn extract_json_object(raw: &str) -> Result<serde_json::Value, String> {
    for candidate in object_candidates(raw) {
        if let Ok(value @ serde_json::Value::Object(_)) = serde_json::from_str(candidate) {
            return Ok(value);
        }
    }
    Err("no JSON object found in response".into())
}

/// A response shape with semantic checks beyond what deserialization enforces.
pub trait AgentResponse: DeserializeOwned {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Extracts, deserializes, and validates an agent response. Errors name the
/// offending field where deserialization can tell which one it was.
pub fn parse_agent_response<T: AgentResponse>(raw: &str) -> Result<T, String> {
    let value = extract_json_object(raw)?;
    let parsed: T = serde_json::from_value(value).map_err(|e| e.to_string())?;
    parsed.validate()?;
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, PartialEq)]
    struct Pair {
        behavior_explanation: String,
        pattern_description: String,
    }

    impl AgentResponse for Pair {}

    #[test]
    fn dumps_matches_python_layout() {
        #[derive(Serialize)]
        struct Item {
            title: &'static str,
            category: &'static str,
        }
        let items = vec![Item {
            title: "Café Racer",
            category: "Games",
        }];
        assert_eq!(
            python_dumps(&items),
            "[\n  {\n    \"title\": \"Caf\\u00e9 Racer\",\n    \"category\": \"Games\"\n  }\n]"
        );
        let empty: Vec<Item> = Vec::new();
        assert_eq!(python_dumps(&empty), "[]");
        assert_eq!(python_dumps(&"🎮"), "\"\\ud83c\\udfae\"");
    }

    #[test]
    fn fenced_block_is_parsed() {
        let raw = "```json\n{\"behavior_explanation\": \"a\", \"pattern_description\": \"b\"}\n```";
        let p: Pair = parse_agent_response(raw).unwrap();
        assert_eq!(p.pattern_description, "b");
    }

    #[test]
    fn prose_prefix_and_decoy_braces_are_skipped() {
        let raw = "Sure! Using {your rules} here it is: {\"behavior_explanation\": \"x }\", \"pattern_description\": \"y\"} hope that helps";
        let p: Pair = parse_agent_response(raw).unwrap();
        assert_eq!(p.behavior_explanation, "x }");
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_agent_response::<Pair>("{\"behavior_explanation\": \"a\"}").unwrap_err();
        assert!(err.contains("pattern_description"), "{err}");
    }

    #[test]
    fn no_object_is_an_error() {
        assert!(parse_agent_response::<Pair>("I cannot help with that").is_err());
        assert!(parse_agent_response::<Pair>("{\"unterminated\": ").is_err());
    }
}
