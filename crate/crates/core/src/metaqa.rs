//! Converter for the MetaQA benchmark layout — a `kb.txt` of pipe-separated
//! triples plus per-split question files whose topic entities are wrapped in
//! square brackets — into the dataset directory format the rest of the
//! pipeline consumes (facts.tsv, vocab.txt, split JSONL, subgraph cache).

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{Dataset, QuestionRecord};
use crate::encoder::TokenVocab;
use crate::kg::KnowledgeGraph;
use crate::rng::DetRng;
use crate::subgraph::{coverage, extract_subgraph_ppr, write_cache, Subgraph};
use crate::{Error, Result};

/// One question as it appears in a raw QA file: tab-separated question and
/// answer list, topic entities bracketed inside the question text.
#[derive(Clone, Debug, PartialEq)]
pub struct RawQuestion {
    /// Question text with the brackets stripped (entity names stay inline).
    pub text: String,
    pub seeds: Vec<String>,
    pub answers: Vec<String>,
}

/// Parse one `subject|relation|object` line.
pub fn parse_kb_line(lineno: usize, line: &str) -> Result<(String, String, String)> {
    let mut parts = line.splitn(3, '|');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(s), Some(r), Some(o)) if !s.is_empty() && !r.is_empty() && !o.is_empty() => {
            Ok((s.to_string(), r.to_string(), o.to_string()))
        }
        _ => Err(Error::Parse {
            line: lineno,
            detail: format!("expected subject|relation|object, got '{line}'"),
        }),
    }
}

/// Read a pipe-separated triple file into a graph. Returns the graph and
/// the number of duplicate facts dropped.
pub fn read_kb(path: impl AsRef<Path>) -> Result<(KnowledgeGraph, usize)> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut kg = KnowledgeGraph::new();
    let mut dups = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (s, r, o) = parse_kb_line(i + 1, line)?;
        if !kg.add_fact(&s, &r, &o) {
            dups += 1;
        }
    }
    if kg.facts.is_empty() {
        return Err(Error::Data("triple file holds no facts".into()));
    }
    Ok((kg, dups))
}

/// Parse one `question with [topic] text<TAB>ans1|ans2` line.
pub fn parse_qa_line(lineno: usize, line: &str) -> Result<RawQuestion> {
    let (q, a) = line.split_once('\t').ok_or_else(|| Error::Parse {
        line: lineno,
        detail: "expected question<TAB>answers".into(),
    })?;
    let answers: Vec<String> = a
        .split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if answers.is_empty() {
        return Err(Error::Parse { line: lineno, detail: "no answers listed".into() });
    }

    let mut text = String::with_capacity(q.len());
    let mut seeds = Vec::new();
    let mut rest = q;
    while let Some(open) = rest.find('[') {
        let (before, after_open) = rest.split_at(open);
        if before.contains(']') {
            return Err(Error::Parse { line: lineno, detail: "stray ] in question".into() });
        }
        let close = after_open[1..].find(']').ok_or_else(|| Error::Parse {
            line: lineno,
            detail: "unclosed [ in question".into(),
        })?;
        let entity = &after_open[1..1 + close];
        if entity.is_empty() || entity.contains('[') {
            return Err(Error::Parse {
                line: lineno,
                detail: "malformed [topic] brackets in question".into(),
            });
        }
        text.push_str(before);
        text.push_str(entity);
        seeds.push(entity.to_string());
        rest = &after_open[2 + close..];
    }
    if rest.contains(']') {
        return Err(Error::Parse { line: lineno, detail: "stray ] in question".into() });
    }
    text.push_str(rest);
    if seeds.is_empty() {
        return Err(Error::Parse {
            line: lineno,
            detail: "question names no [topic] entity".into(),
        });
    }
    Ok(RawQuestion { text, seeds, answers })
}

pub fn read_qa(path: impl AsRef<Path>) -> Result<Vec<RawQuestion>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_qa_line(i + 1, line)?);
    }
    if out.is_empty() {
        return Err(Error::Data("question file holds no questions".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvertConfig {
    /// Subgraph node budget per question.
    pub m: usize,
    pub ppr_alpha: f64,
    pub ppr_iters: usize,
    /// Fraction of the train split to keep (deterministic subsample).
    pub train_frac: f64,
    pub seed: u64,
    /// Tag written into every record's qtype field.
    pub qtype: String,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        ConvertConfig {
            m: 500,
            ppr_alpha: 0.15,
            ppr_iters: 30,
            train_frac: 1.0,
            seed: 0,
            qtype: "metaqa".into(),
        }
    }
}

impl ConvertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("subgraph budget m must be positive".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac <= 1.0) {
            return Err(Error::Config(format!(
                "train_frac must be in (0, 1], got {}",
                self.train_frac
            )));
        }
        if !(self.ppr_alpha > 0.0 && self.ppr_alpha < 1.0) {
            return Err(Error::Config(format!(
                "ppr_alpha must be in (0, 1), got {}",
                self.ppr_alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvertReport {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub facts: usize,
    pub entities: usize,
    pub relations: usize,
    pub duplicate_facts: usize,
    /// Questions whose seed entities all fall outside the graph.
    pub unseeded: usize,
    /// Fraction of questions with at least one answer inside their subgraph.
    pub coverage: f64,
}

fn to_records(split: &str, qtype: &str, raws: &[RawQuestion]) -> Vec<QuestionRecord> {
    raws.iter()
        .enumerate()
        .map(|(i, raw)| QuestionRecord {
            qid: format!("{split}-{i:06}"),
            text: raw.text.clone(),
            seeds: raw.seeds.clone(),
            answers: raw.answers.clone(),
            lf: None,
            qtype: Some(qtype.to_string()),
        })
        .collect()
}

/// Convert a raw benchmark directory into the pipeline's dataset layout.
/// `qa_paths` are the train, dev, and test question files in that order.
pub fn convert(
    kb_path: &Path,
    qa_paths: [&Path; 3],
    out_dir: &Path,
    cfg: &ConvertConfig,
) -> Result<ConvertReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let (kg, duplicate_facts) = read_kb(kb_path)?;
    kg.save_facts(&out_dir.join("facts.tsv"))?;
    // Work in the id space a consumer reconstructs from the emitted file.
    let (canon, _) = KnowledgeGraph::load_facts(&out_dir.join("facts.tsv"))?;

    let mut train_raw = read_qa(qa_paths[0])?;
    let dev_raw = read_qa(qa_paths[1])?;
    let test_raw = read_qa(qa_paths[2])?;

    if cfg.train_frac < 1.0 {
        let mut order: Vec<usize> = (0..train_raw.len()).collect();
        let mut rng = DetRng::seed_from_u64(DetRng::derive_seed(cfg.seed, &[1]));
        rng.shuffle(&mut order);
        let keep = ((cfg.train_frac * train_raw.len() as f64).ceil() as usize)
            .clamp(1, train_raw.len());
        let mut picked: Vec<usize> = order[..keep].to_vec();
        picked.sort_unstable(); // keep the file's question order
        train_raw = picked.into_iter().map(|i| train_raw[i].clone()).collect();
    }

    let train = Dataset { records: to_records("train", &cfg.qtype, &train_raw) };
    let dev = Dataset { records: to_records("dev", &cfg.qtype, &dev_raw) };
    let test = Dataset { records: to_records("test", &cfg.qtype, &test_raw) };
    train.save_jsonl(&out_dir.join("train.jsonl"))?;
    dev.save_jsonl(&out_dir.join("dev.jsonl"))?;
    test.save_jsonl(&out_dir.join("test.jsonl"))?;

    let vocab = TokenVocab::from_texts(train.records.iter().map(|r| r.text.as_str()))?;
    vocab.save(&out_dir.join("vocab.txt"))?;

    let all: Vec<&QuestionRecord> = train
        .records
        .iter()
        .chain(dev.records.iter())
        .chain(test.records.iter())
        .collect();
    let seed_ids: Vec<Vec<u32>> = all
        .iter()
        .map(|r| r.seeds.iter().filter_map(|s| canon.entities.get(s)).collect())
        .collect();
    let unseeded = seed_ids.iter().filter(|s| s.is_empty()).count();
    let subgraphs: Vec<Subgraph> = seed_ids
        .par_iter()
        .map(|seeds| {
            if seeds.is_empty() {
                Ok(Subgraph::empty())
            } else {
                extract_subgraph_ppr(&canon, seeds, cfg.m, cfg.ppr_alpha, cfg.ppr_iters)
            }
        })
        .collect::<Result<_>>()?;
    write_cache(
        &out_dir.join("subgraphs.jsonl"),
        all.iter().map(|r| r.qid.as_str()).zip(subgraphs.iter()),
    )?;

    let answer_ids: Vec<Vec<u32>> = all
        .iter()
        .map(|r| r.answers.iter().filter_map(|a| canon.entities.get(a)).collect())
        .collect();
    let cov = coverage(&answer_ids, &subgraphs)?;

    Ok(ConvertReport {
        n_train: train.len(),
        n_dev: dev.len(),
        n_test: test.len(),
        facts: canon.facts.len(),
        entities: canon.num_entities(),
        relations: canon.num_relations(),
        duplicate_facts,
        unseeded,
        coverage: cov,
    })
}
