//! Mention dataset consumed by trace collectors: one JSON object per line,
//! `{prompt_id, table_markdown, mention, candidates, gold_entity_id}`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::line_error;
use super::{CandidateEntity, MentionColumn, TraceSet, UNMATCHED_PREFIX};
use crate::error::{Error, Result};

/// A mention either as bare text or with its table cell coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mention {
    Text(String),
    Cell {
        text: String,
        row: u64,
        col: MentionColumn,
    },
}

impl Mention {
    pub fn text(&self) -> &str {
        match self {
            Mention::Text(t) | Mention::Cell { text: t, .. } => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub prompt_id: String,
    #[serde(default)]
    pub table_markdown: Option<String>,
    pub mention: Mention,
    pub candidates: Vec<CandidateEntity>,
    pub gold_entity_id: String,
}

impl DatasetRecord {
    /// Problems that make the record unusable for prompting.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.prompt_id.is_empty() {
            out.push("empty prompt_id".to_owned());
        }
        if self.candidates.is_empty() {
            out.push("empty candidate list".to_owned());
        }
        let mut ids = BTreeSet::new();
        for c in &self.candidates {
            if c.entity_id.is_empty() || c.entity_id.starts_with(UNMATCHED_PREFIX) {
                out.push(format!("invalid entity_id {:?}", c.entity_id));
            }
            if c.label.trim().is_empty() {
                out.push(format!("candidate {} has an empty label", c.entity_id));
            }
            if !ids.insert(c.entity_id.as_str()) {
                out.push(format!("duplicate entity_id {}", c.entity_id));
            }
        }
        if !ids.contains(self.gold_entity_id.as_str()) {
            out.push(format!("gold entity {} is not among the candidates", self.gold_entity_id));
        }
        out
    }
}

pub fn read_dataset<R: BufRead>(reader: R, path: &Path) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| line_error(path, lineno, e))?;
        let mut problems = record.problems();
        if !ids.insert(record.prompt_id.clone()) {
            problems.push(format!("duplicate prompt_id {}", record.prompt_id));
        }
        if !problems.is_empty() {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: lineno,
                message: problems.join("; "),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    read_dataset(BufReader::new(File::open(path)?), path)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// The dataset view of a trace set's prompts.
pub fn dataset_from_traces(set: &TraceSet) -> Vec<DatasetRecord> {
    set.traces
        .iter()
        .map(|t| DatasetRecord {
            prompt_id: t.prompt.prompt_id.clone(),
            table_markdown: t.prompt.table_markdown.clone(),
            mention: Mention::Cell {
                text: t.prompt.mention_text.clone(),
                row: t.prompt.mention_row,
                col: t.prompt.mention_col.clone(),
            },
            candidates: t.prompt.candidates.clone(),
            gold_entity_id: t.prompt.gold_entity_id.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"prompt_id":"m1","table_markdown":"| County |\n|---|\n| Hyde |","mention":"Hyde","candidates":[{"entity_id":"Q484432","label":"Hyde County","description":"county in South Dakota, United States","type_labels":["county of South Dakota"]},{"entity_id":"Q9","label":"Hyde Park","description":null,"type_labels":["park"]}],"gold_entity_id":"Q484432"}"#;

    #[test]
    fn reads_plain_mention() {
        let recs = read_dataset(LINE.as_bytes(), Path::new("d.jsonl")).unwrap();
        assert_eq!(recs[0].mention.text(), "Hyde");
        assert_eq!(recs[0].candidates[1].description, None);
    }

    #[test]
    fn reads_cell_mention() {
        let line = LINE.replace(r#""mention":"Hyde""#, r#""mention":{"text":"Hyde","row":3,"col":"County"}"#);
        let recs = read_dataset(line.as_bytes(), Path::new("d.jsonl")).unwrap();
        assert!(matches!(&recs[0].mention, Mention::Cell { row: 3, .. }));
    }

    #[test]
    fn missing_gold_is_a_schema_error() {
        let line = LINE.replace(r#""gold_entity_id":"Q484432""#, r#""gold_entity_id":"Q1""#);
        let err = read_dataset(line.as_bytes(), Path::new("d.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }));
    }

    #[test]
    fn empty_candidates_rejected() {
        let rec = DatasetRecord {
            prompt_id: "a".into(),
            table_markdown: None,
            mention: Mention::Text("x".into()),
            candidates: vec![],
            gold_entity_id: "Q1".into(),
        };
        assert!(!rec.problems().is_empty());
    }

    #[test]
    fn duplicate_prompt_ids_rejected() {
        let two = format!("{LINE}\n{LINE}\n");
        assert!(matches!(
            read_dataset(two.as_bytes(), Path::new("d.jsonl")),
            Err(Error::Schema { line: 2, .. })
        ));
    }
}
