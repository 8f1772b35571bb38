//! Line-delimited JSON persistence for protocol corpora, and the parallel
//! generate/label stage helpers the CLI pipeline is built from. Records
//! store messages in the canonical parenthesized text form so files stay
//! greppable; parallel stages always return results in input order.

use crate::gen::{generate_protocol, GenConfig, GenError};
use crate::oracle::{label, OracleConfig, SecurityLabel};
use crate::protocol::{Message, MessageError, Protocol, ProtocolKind};
use crate::term::{parse_term, ParseError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub verdict: crate::oracle::Verdict,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub messages: Vec<String>,
    pub kind: ProtocolKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelRecord>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Term {
        line: usize,
        #[source]
        source: ParseError,
    },
    #[error("line {line}: {source}")]
    Message {
        line: usize,
        #[source]
        source: MessageError,
    },
}

impl Record {
    pub fn from_protocol(p: &Protocol, label: Option<&SecurityLabel>) -> Record {
        Record {
            messages: p.messages.iter().map(|m| m.to_string()).collect(),
            kind: p.kind,
            seed: p.seed,
            label: label.map(|l| LabelRecord {
                verdict: l.verdict,
                provenance: l.provenance.as_string(),
            }),
        }
    }

    pub fn to_protocol(&self) -> Result<Protocol, DatasetError> {
        let mut messages = Vec::with_capacity(self.messages.len());
        for (i, text) in self.messages.iter().enumerate() {
            let term = parse_term(text).map_err(|source| DatasetError::Term {
                line: i,
                source,
            })?;
            messages.push(Message::new(term).map_err(|source| DatasetError::Message {
                line: i,
                source,
            })?);
        }
        Ok(Protocol::new(messages, self.kind, self.seed))
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|source| DatasetError::Json {
            line: 0,
            source,
        })?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, DatasetError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| DatasetError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(records)
}

/// Generates `count` protocols from consecutive seeds starting at
/// `cfg.seed`, in parallel but emitted in seed order. Seeds whose
/// generation fails outright are skipped (the generator already retries
/// internally), so the result can be slightly shorter than `count`.
pub fn generate_corpus(cfg: &GenConfig, count: usize) -> Vec<Protocol> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            generate_protocol(&GenConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            })
        })
        .filter_map(|r: Result<Protocol, GenError>| r.ok())
        .collect()
}

/// Labels a corpus in parallel, preserving input order.
pub fn label_corpus(
    protocols: &[Protocol],
    cfg: &OracleConfig,
) -> Vec<Result<SecurityLabel, crate::oracle::LabelError>> {
    protocols.par_iter().map(|p| label(p, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Verdict;

    #[test]
    fn records_round_trip_through_file() {
        let cfg = GenConfig::default();
        let protocols = generate_corpus(&cfg, 20);
        assert!(!protocols.is_empty());
        let labels = label_corpus(&protocols, &OracleConfig::default());
        let records: Vec<Record> = protocols
            .iter()
            .zip(&labels)
            .map(|(p, l)| Record::from_protocol(p, l.as_ref().ok()))
            .collect();
        let dir = std::env::temp_dir().join("protolearn_dataset_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corpus.jsonl");
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(records, back);
        for (r, p) in back.iter().zip(&protocols) {
            assert_eq!(&r.to_protocol().unwrap(), p);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        assert_eq!(generate_corpus(&cfg, 50), generate_corpus(&cfg, 50));
    }

    #[test]
    fn labels_preserve_order_and_are_deterministic() {
        let protocols = generate_corpus(&GenConfig::default(), 30);
        let a = label_corpus(&protocols, &OracleConfig::default());
        let b = label_corpus(&protocols, &OracleConfig::default());
        let verdicts = |ls: &[Result<SecurityLabel, crate::oracle::LabelError>]| -> Vec<Option<Verdict>> {
            ls.iter().map(|l| l.as_ref().ok().map(|s| s.verdict)).collect()
        };
        assert_eq!(verdicts(&a), verdicts(&b));
    }
}
