use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenizer::{in_charset, Example};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocType {
    Creative,
    Biography,
    Web,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Completion,
    Qa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    Holdout,
    Utility,
}

impl DocType {
    pub const ALL: [DocType; 3] = [DocType::Creative, DocType::Biography, DocType::Web];

    pub fn name(self) -> &'static str {
        match self {
            DocType::Creative => "creative",
            DocType::Biography => "biography",
            DocType::Web => "web",
        }
    }
}

impl TaskType {
    pub const ALL: [TaskType; 2] = [TaskType::Completion, TaskType::Qa];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::Completion => "completion",
            TaskType::Qa => "qa",
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Holdout => "holdout",
            Split::Utility => "utility",
        }
    }
}

impl fmt::Display for DocType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One corpus record; field names are the on-disk format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub doc_type: DocType,
    pub task_type: TaskType,
    pub input: String,
    pub output: String,
    pub split: Split,
}

impl Sample {
    pub fn example(&self) -> Example {
        Example::new(&self.input, &self.output)
    }
}

/// Validated, immutable list of samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    samples: Vec<Sample>,
}

impl Corpus {
    /// Checks id uniqueness, nonempty outputs, charset and (optionally) context fit.
    pub fn new(samples: Vec<Sample>, context_len: Option<usize>) -> Result<Self> {
        let mut ids = HashSet::new();
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {:?}", s.id)));
            }
            if s.output.is_empty() {
                return Err(Error::Validation(format!("{}: empty output", s.id)));
            }
            if !in_charset(&s.input) || !in_charset(&s.output) {
                return Err(Error::Validation(format!("{}: text outside charset", s.id)));
            }
            if let Some(max) = context_len {
                let len = s.example().seq_len();
                if len > max {
                    return Err(Error::Validation(format!(
                        "{}: {len} tokens exceed context length {max}",
                        s.id
                    )));
                }
            }
        }
        Ok(Corpus { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn forget(&self) -> Vec<&Sample> {
        self.split(Split::Forget)
    }

    pub fn retain(&self) -> Vec<&Sample> {
        self.split(Split::Retain)
    }

    pub fn holdout(&self) -> Vec<&Sample> {
        self.split(Split::Holdout)
    }

    pub fn utility(&self) -> Vec<&Sample> {
        self.split(Split::Utility)
    }

    /// One JSON object per line, in corpus order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn parse(text: &str, context_len: Option<usize>) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            samples.push(s);
        }
        Corpus::new(samples, context_len)
    }

    pub fn load(path: &Path, context_len: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Corpus::parse(&text, context_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, split: Split) -> Sample {
        Sample {
            id: id.into(),
            doc_type: DocType::Web,
            task_type: TaskType::Qa,
            input: "q".into(),
            output: "a".into(),
            split,
        }
    }

    #[test]
    fn field_names_are_fixed() {
        let line = serde_json::to_string(&sample("x", Split::Holdout)).unwrap();
        assert_eq!(
            line,
            r#"{"id":"x","doc_type":"web","task_type":"qa","input":"q","output":"a","split":"holdout"}"#
        );
    }

    #[test]
    fn duplicate_ids_fail_validation() {
        let r = Corpus::new(vec![sample("a", Split::Forget), sample("a", Split::Retain)], None);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn truncated_last_line_reports_its_number() {
        let c = Corpus::new(vec![sample("a", Split::Forget), sample("b", Split::Retain)], None).unwrap();
        let text = c.to_jsonl();
        let cut = &text[..text.len() - 10];
        match Corpus::parse(cut, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected() {
        let bad = r#"{"id":"x","doc_type":"web","task_type":"qa","input":"q","output":"a","split":"forget","extra":1}"#;
        assert!(matches!(Corpus::parse(bad, None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_output_is_rejected() {
        let mut s = sample("a", Split::Forget);
        s.output.clear();
        assert!(Corpus::new(vec![s], None).is_err());
    }
}
