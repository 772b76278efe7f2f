//! Global knowledge-graph storage: entity/relation vocabularies and the fact
//! list, plus TSV loading and the fact-dropping used by incomplete-KG runs.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::rng::DetRng;
use crate::{Error, Result};

/// Interned string table with dense ids.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Vocab::default()
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Order-sensitive content hash, used for checkpoint compatibility checks.
    pub fn sha256_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fact {
    pub s: u32,
    pub r: u32,
    pub o: u32,
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    pub entities: Vocab,
    pub relations: Vocab,
    pub facts: Vec<Fact>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadReport {
    pub facts: usize,
    pub duplicates: usize,
    pub entities: usize,
    pub relations: usize,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        KnowledgeGraph::default()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_facts(&self) -> usize {
        self.facts.len()
    }

    /// Intern names and append the fact unless it already exists.
    /// Returns false for duplicates.
    pub fn add_fact(&mut self, s: &str, r: &str, o: &str) -> bool {
        let f = Fact {
            s: self.entities.intern(s),
            r: self.relations.intern(r),
            o: self.entities.intern(o),
        };
        if self.facts.contains(&f) {
            return false;
        }
        self.facts.push(f);
        true
    }

    /// Build from (subject, relation, object) name triples, deduplicating.
    pub fn from_triples<'a>(
        triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    ) -> (Self, usize) {
        let mut kg = KnowledgeGraph::new();
        let mut seen = HashSet::new();
        let mut dups = 0;
        for (s, r, o) in triples {
            let f = Fact {
                s: kg.entities.intern(s),
                r: kg.relations.intern(r),
                o: kg.entities.intern(o),
            };
            if seen.insert(f) {
                kg.facts.push(f);
            } else {
                dups += 1;
            }
        }
        (kg, dups)
    }

    /// Parse a UTF-8 TSV fact file, one `subject<TAB>relation<TAB>object`
    /// per line. Blank lines are ignored; duplicates are counted and dropped.
    pub fn load_facts(path: impl AsRef<Path>) -> Result<(Self, LoadReport)> {
        let text = std::fs::read_to_string(path)?;
        let mut kg = KnowledgeGraph::new();
        let mut seen = HashSet::new();
        let mut report = LoadReport::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (s, r, o) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(r), Some(o), None) if !s.is_empty() && !r.is_empty() && !o.is_empty() => {
                    (s, r, o)
                }
                _ => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        detail: format!("expected `subject\\trelation\\tobject`, got {line:?}"),
                    })
                }
            };
            let f = Fact {
                s: kg.entities.intern(s),
                r: kg.relations.intern(r),
                o: kg.entities.intern(o),
            };
            if seen.insert(f) {
                kg.facts.push(f);
            } else {
                report.duplicates += 1;
            }
        }
        report.facts = kg.facts.len();
        report.entities = kg.entities.len();
        report.relations = kg.relations.len();
        Ok((kg, report))
    }

    pub fn save_facts(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for f in &self.facts {
            out.push_str(self.entities.name(f.s));
            out.push('\t');
            out.push_str(self.relations.name(f.r));
            out.push('\t');
            out.push_str(self.entities.name(f.o));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Keep a uniformly random ⌈keep_ratio·|F|⌉ subset of facts, preserving
    /// original fact order. Vocabularies are unchanged.
    pub fn drop_facts(&self, keep_ratio: f64, rng_seed: u64) -> Result<KnowledgeGraph> {
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep ratio must be in (0,1], got {keep_ratio}"
            )));
        }
        let n = self.facts.len();
        let keep_n = ((keep_ratio * n as f64).ceil() as usize).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = DetRng::seed_from_u64(rng_seed);
        rng.shuffle(&mut idx);
        let mut kept: Vec<usize> = idx.into_iter().take(keep_n).collect();
        kept.sort_unstable();
        Ok(KnowledgeGraph {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            facts: kept.iter().map(|&i| self.facts[i]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn two_line_file_builds_vocabularies() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "a\tr\tb\nb\ts\tc\n").unwrap();
        let (kg, report) = KnowledgeGraph::load_facts(f.path()).unwrap();
        assert_eq!(kg.num_entities(), 3);
        assert_eq!(kg.num_relations(), 2);
        assert_eq!(kg.num_facts(), 2);
        assert_eq!(report.duplicates, 0);
    }

    #[test]
    fn duplicate_line_counted_once() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "a\tr\tb\na\tr\tb\n").unwrap();
        let (kg, report) = KnowledgeGraph::load_facts(f.path()).unwrap();
        assert_eq!(kg.num_facts(), 1);
        assert_eq!(report.duplicates, 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "a\tr\tb\nbroken line\n").unwrap();
        let err = KnowledgeGraph::load_facts(f.path()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let (kg, _) = KnowledgeGraph::from_triples([("a", "r", "b"), ("b", "s", "c")]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("facts.tsv");
        kg.save_facts(&path).unwrap();
        let (kg2, _) = KnowledgeGraph::load_facts(&path).unwrap();
        assert_eq!(kg2.facts, kg.facts);
        assert_eq!(kg2.entities.names(), kg.entities.names());
    }

    #[test]
    fn drop_facts_keep_all_is_identity() {
        let (kg, _) = KnowledgeGraph::from_triples([("a", "r", "b"), ("b", "s", "c")]);
        let kept = kg.drop_facts(1.0, 7).unwrap();
        assert_eq!(kept.facts, kg.facts);
    }

    #[test]
    fn drop_facts_half_of_ten_keeps_five() {
        let names: Vec<String> = (0..10).map(|i| format!("e{i}")).collect();
        let triples: Vec<(&str, &str, &str)> =
            names.windows(2).map(|w| (w[0].as_str(), "r", w[1].as_str())).collect();
        let (kg, _) = KnowledgeGraph::from_triples(triples.iter().copied());
        assert_eq!(kg.num_facts(), 9);
        let (kg10, _) = KnowledgeGraph::from_triples(
            triples.iter().copied().chain([("e9", "r", "e0")]),
        );
        assert_eq!(kg10.num_facts(), 10);
        let kept = kg10.drop_facts(0.5, 3).unwrap();
        assert_eq!(kept.num_facts(), 5);
        assert_eq!(kept.num_entities(), kg10.num_entities());
    }

    #[test]
    fn drop_facts_same_seed_same_result() {
        let triples: Vec<(String, String)> = (0..40).map(|i| (format!("a{i}"), format!("b{i}"))).collect();
        let (kg, _) = KnowledgeGraph::from_triples(
            triples.iter().map(|(a, b)| (a.as_str(), "r", b.as_str())),
        );
        let k1 = kg.drop_facts(0.4, 99).unwrap();
        let k2 = kg.drop_facts(0.4, 99).unwrap();
        assert_eq!(k1.facts, k2.facts);
        let k3 = kg.drop_facts(0.4, 100).unwrap();
        assert_ne!(k1.facts, k3.facts);
    }

    #[test]
    fn bad_keep_ratio_is_config_error() {
        let (kg, _) = KnowledgeGraph::from_triples([("a", "r", "b")]);
        assert!(matches!(kg.drop_facts(0.0, 1), Err(Error::Config(_))));
        assert!(matches!(kg.drop_facts(1.5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn vocab_hash_is_order_sensitive() {
        let mut v1 = Vocab::new();
        v1.intern("a");
        v1.intern("b");
        let mut v2 = Vocab::new();
        v2.intern("b");
        v2.intern("a");
        assert_ne!(v1.sha256_hex(), v2.sha256_hex());
        let mut v3 = Vocab::new();
        v3.intern("a");
        v3.intern("b");
        assert_eq!(v1.sha256_hex(), v3.sha256_hex());
    }
}
