//! Question datasets: the JSONL record format, loading/saving, and
//! resolution of records against a KG + subgraph cache into the form the
//! model consumes.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::TokenVocab;
use crate::kg::KnowledgeGraph;
use crate::subgraph::Subgraph;
use crate::synth::LogicalForm;
use crate::{Error, Result};

/// One dataset line. Seeds and answers are entity names; `lf` is the
/// generator's logical form when the question is synthetic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub qid: String,
    pub text: String,
    pub seeds: Vec<String>,
    pub answers: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lf: Option<LogicalForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<QuestionRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parse JSONL; a record with no gold answers is rejected outright
    /// (recall would be undefined).
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let file = BufReader::new(std::fs::File::open(path.as_ref())?);
        let mut records = Vec::new();
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: QuestionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                detail: e.to_string(),
            })?;
            if rec.answers.is_empty() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    detail: format!("question {} has no gold answers", rec.qid),
                });
            }
            records.push(rec);
        }
        Ok(Dataset { records })
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A question resolved against vocabularies and joined with its subgraph:
/// exactly what one forward pass needs.
#[derive(Clone, Debug)]
pub struct QuestionInstance {
    pub qid: String,
    pub tokens: Vec<u32>,
    /// Global entity ids.
    pub seeds: Vec<u32>,
    /// Global entity ids; may or may not fall inside the subgraph.
    pub answers: Vec<u32>,
    pub subgraph: Subgraph,
}

impl QuestionInstance {
    /// Gold answers as local node indices, ascending; empty when no answer
    /// landed in the subgraph.
    pub fn answer_locals(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .answers
            .iter()
            .filter_map(|a| self.subgraph.local_of(*a))
            .map(|l| l as usize)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Join records with their cached subgraphs and resolve names to ids.
/// Every record must have a subgraph entry and known seed/answer entities.
pub fn resolve_instances(
    dataset: &Dataset,
    kg: &KnowledgeGraph,
    vocab: &TokenVocab,
    subgraphs: Vec<(String, Subgraph)>,
) -> Result<Vec<QuestionInstance>> {
    let mut by_qid: HashMap<String, Subgraph> = subgraphs.into_iter().collect();
    dataset
        .records
        .iter()
        .map(|rec| {
            let subgraph = by_qid
                .remove(&rec.qid)
                .ok_or_else(|| Error::UnknownQid(rec.qid.clone()))?;
            // An incomplete KG may have lost entities the question text still
            // names; keep whatever resolves. A question with nothing left
            // gets skipped by training and scored 0 by evaluation.
            let seeds: Vec<u32> =
                rec.seeds.iter().filter_map(|s| kg.entities.get(s)).collect();
            let answers: Vec<u32> =
                rec.answers.iter().filter_map(|a| kg.entities.get(a)).collect();
            Ok(QuestionInstance {
                qid: rec.qid.clone(),
                tokens: vocab.encode(&rec.text)?,
                seeds,
                answers,
                subgraph,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subgraph::extract_subgraph_ppr;

    fn record(qid: &str, answers: &[&str]) -> QuestionRecord {
        QuestionRecord {
            qid: qid.into(),
            text: "who directed movie_0".into(),
            seeds: vec!["movie_0".into()],
            answers: answers.iter().map(|s| s.to_string()).collect(),
            lf: None,
            qtype: None,
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let ds = Dataset { records: vec![record("q0", &["p0"]), record("q1", &["p1", "p2"])] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        ds.save_jsonl(&path).unwrap();
        let back = Dataset::load_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.records[1].answers, vec!["p1", "p2"]);
    }

    #[test]
    fn empty_answer_record_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"qid":"q0","text":"x","seeds":["a"],"answers":[]}"#,
        )
        .unwrap();
        assert!(matches!(Dataset::load_jsonl(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"qid\":\"q0\",\"text\":\"x\",\"seeds\":[\"a\"],\"answers\":[\"b\"]}\nnot json\n").unwrap();
        assert!(matches!(Dataset::load_jsonl(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn resolve_joins_subgraphs_and_ids() {
        let (kg, _) = KnowledgeGraph::from_triples([("movie_0", "directed_by", "p0")]);
        let ds = Dataset { records: vec![record("q0", &["p0"])] };
        let vocab = TokenVocab::from_texts(["who directed movie_0"]).unwrap();
        let movie = kg.entities.get("movie_0").unwrap();
        let sub = extract_subgraph_ppr(&kg, &[movie], 2, 0.15, 10).unwrap();
        let instances = resolve_instances(&ds, &kg, &vocab, vec![("q0".into(), sub)]).unwrap();
        assert_eq!(instances.len(), 1);
        let inst = &instances[0];
        assert_eq!(inst.seeds, vec![movie]);
        assert_eq!(inst.answers, vec![kg.entities.get("p0").unwrap()]);
        assert_eq!(inst.answer_locals().len(), 1);
    }

    #[test]
    fn missing_subgraph_is_unknown_qid() {
        let (kg, _) = KnowledgeGraph::from_triples([("movie_0", "directed_by", "p0")]);
        let ds = Dataset { records: vec![record("q0", &["p0"])] };
        let vocab = TokenVocab::from_texts(["who directed movie_0"]).unwrap();
        assert!(matches!(
            resolve_instances(&ds, &kg, &vocab, vec![]),
            Err(Error::UnknownQid(_))
        ));
    }
}
