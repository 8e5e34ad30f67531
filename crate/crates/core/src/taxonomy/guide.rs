use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::prompts;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub code: char,
    pub title: String,
    pub description: String,
    pub signals: String,
    pub common_fixes: String,
}

/// Ordered bug categories in the plain-text entry format:
///
/// ```text
/// A: <title>
///   - Description: <text>
///   - Signals: <text>
///   - Common fixes: <text>
/// ```
///
/// Entries are separated by one blank line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryGuide {
    pub entries: Vec<CategoryEntry>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GuideError {
    #[error("guide has no entries")]
    Empty,
    #[error("line {line}: expected an entry header like `A: Title`, got {text:?}")]
    ExpectedHeader { line: usize, text: String },
    #[error("line {line}: expected `- {field}:`, got {text:?}")]
    ExpectedField { line: usize, field: &'static str, text: String },
    #[error("entry {code}: missing `{field}`")]
    MissingField { code: char, field: &'static str },
    #[error("category code {0} appears twice")]
    DuplicateCode(char),
}

const FIELDS: [&str; 3] = ["Description", "Signals", "Common fixes"];

fn header(line: &str) -> Option<(char, &str)> {
    let mut chars = line.chars();
    let code = chars.next().filter(char::is_ascii_uppercase)?;
    let title = chars.as_str().strip_prefix(": ")?.trim();
    (!title.is_empty()).then_some((code, title))
}

impl CategoryGuide {
    /// The ten built-in categories A to J.
    pub fn builtin() -> Self {
        prompts::DEFAULT_GUIDE.parse().expect("bundled guide parses")
    }

    pub fn codes(&self) -> impl Iterator<Item = char> + '_ {
        self.entries.iter().map(|e| e.code)
    }

    pub fn contains(&self, code: char) -> bool {
        self.codes().any(|c| c == code)
    }

    pub fn get(&self, code: char) -> Option<&CategoryEntry> {
        self.entries.iter().find(|e| e.code == code)
    }

    /// Parses a guide, skipping any text before the first entry header
    /// (model replies often open with a sentence of preamble).
    pub fn parse_lenient(text: &str) -> Result<Self, GuideError> {
        let start = text
            .lines()
            .scan(0usize, |off, l| {
                let at = *off;
                *off += l.len() + 1;
                Some((at, l))
            })
            .find(|(_, l)| header(l.trim_end()).is_some())
            .map(|(at, _)| at)
            .ok_or(GuideError::Empty)?;
        text[start..].parse()
    }
}

impl FromStr for CategoryGuide {
    type Err = GuideError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut entries: Vec<CategoryEntry> = Vec::new();
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end())).peekable();
        loop {
            while lines.next_if(|(_, l)| l.is_empty()).is_some() {}
            let Some((n, line)) = lines.next() else { break };
            let (code, title) = header(line).ok_or_else(|| GuideError::ExpectedHeader {
                line: n,
                text: line.to_string(),
            })?;
            if entries.iter().any(|e| e.code == code) {
                return Err(GuideError::DuplicateCode(code));
            }
            let mut values = Vec::with_capacity(3);
            for field in FIELDS {
                let Some((n, line)) = lines.next_if(|(_, l)| !l.is_empty()) else {
                    return Err(GuideError::MissingField { code, field });
                };
                let value = line
                    .trim_start()
                    .strip_prefix("- ")
                    .and_then(|r| r.strip_prefix(field))
                    .and_then(|r| r.strip_prefix(':'))
                    .ok_or_else(|| GuideError::ExpectedField {
                        line: n,
                        field,
                        text: line.to_string(),
                    })?;
                values.push(value.trim().to_string());
            }
            let [description, signals, common_fixes] = <[String; 3]>::try_from(values).expect("three fields");
            entries.push(CategoryEntry {
                code,
                title: title.to_string(),
                description,
                signals,
                common_fixes,
            });
        }
        if entries.is_empty() {
            return Err(GuideError::Empty);
        }
        Ok(Self { entries })
    }
}

impl fmt::Display for CategoryGuide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            writeln!(f, "{}: {}", e.code, e.title)?;
            writeln!(f, "  - Description: {}", e.description)?;
            writeln!(f, "  - Signals: {}", e.signals)?;
            writeln!(f, "  - Common fixes: {}", e.common_fixes)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_round_trips_byte_for_byte() {
        let g = CategoryGuide::builtin();
        assert_eq!(g.codes().collect::<String>(), "ABCDEFGHIJ");
        assert_eq!(g.to_string(), prompts::DEFAULT_GUIDE);
        assert_eq!(g.get('B').unwrap().title, "Logic/conditional bug");
    }

    #[test]
    fn rejects_duplicates_and_missing_fields() {
        let one = "A: T\n  - Description: d\n  - Signals: s\n  - Common fixes: c\n";
        assert_eq!(format!("{one}\n{one}").parse::<CategoryGuide>(), Err(GuideError::DuplicateCode('A')));
        assert_eq!(
            "A: T\n  - Description: d\n\nB: U\n".parse::<CategoryGuide>(),
            Err(GuideError::MissingField { code: 'A', field: "Signals" })
        );
        assert!(matches!(
            "A: T\n  - Signals: s\n".parse::<CategoryGuide>(),
            Err(GuideError::ExpectedField { line: 2, field: "Description", .. })
        ));
        assert_eq!("\n\n".parse::<CategoryGuide>(), Err(GuideError::Empty));
        assert!(matches!("intro\nA: T".parse::<CategoryGuide>(), Err(GuideError::ExpectedHeader { line: 1, .. })));
    }

    #[test]
    fn lenient_parse_skips_preamble() {
        let text = "Here is the guide.\n\nA: T\n- Description: d\n- Signals: s\n- Common fixes: c";
        let g = CategoryGuide::parse_lenient(text).unwrap();
        assert_eq!(g.to_string(), "A: T\n  - Description: d\n  - Signals: s\n  - Common fixes: c\n");
    }
}
