//! JSON Lines corpus of traceback cases.
//!
//! One record per line: `{"id", "instruction", "context", "output"?,
//! "ground_truth_injections"?, "target_answer"?}`. UTF-8, LF line endings.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One traceback case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub instruction: String,
    pub context: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth_injections: Option<Vec<String>>,
    /// Attacker-chosen incorrect answer used when the harness renders
    /// injection templates for this case.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_answer: Option<String>,
}

/// Read every record of a JSONL corpus. Blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|source| {
            Error::MalformedRecord {
                line: lineno + 1,
                source,
            }
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(records)
}

/// Write records as JSONL with LF line endings.
pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut file = File::create(path)?;
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let records = vec![
            CorpusRecord {
                id: "a".into(),
                instruction: "q1".into(),
                context: "ctx one".into(),
                output: Some("o1".into()),
                ground_truth_injections: None,
                target_answer: None,
            },
            CorpusRecord {
                id: "b".into(),
                instruction: "q2".into(),
                context: "ctx two".into(),
                output: None,
                ground_truth_injections: Some(vec!["inj".into()]),
                target_answer: Some("wrong".into()),
            },
        ];
        write_corpus(&path, &records).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), records);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "\n\n").unwrap();
        assert!(matches!(read_corpus(&path), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"instruction\":\"q\",\"context\":\"c\"}\n{nope}\n",
        )
        .unwrap();
        match read_corpus(&path) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unknown.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"instruction\":\"q\",\"context\":\"c\",\"bogus\":1}\n",
        )
        .unwrap();
        assert!(read_corpus(&path).is_err());
    }
}
