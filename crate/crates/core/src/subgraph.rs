//! Question-specific subgraphs: personalized-PageRank extraction over the
//! global KG, local edge indexing with inverse relations and self-links, and
//! a JSONL cache format.
//!
//! Relation ids inside a subgraph live in an extended space: a global
//! relation r keeps id r in the forward direction, its inverse is |R|+r, and
//! a reserved self-link relation sits at 2|R|. All relation-embedding tables
//! are sized accordingly.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::kg::KnowledgeGraph;
use crate::rng::DetRng;
use crate::tensor::stable_sum;
use crate::{Error, Result};

/// Parallel edge arrays over local node ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeIndex {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub rel: Vec<u32>,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn push(&mut self, src: u32, rel: u32, dst: u32) {
        self.src.push(src);
        self.rel.push(rel);
        self.dst.push(dst);
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        (0..self.len()).map(|i| (self.src[i], self.rel[i], self.dst[i]))
    }
}

/// Extracted neighborhood of a question's seed entities.
#[derive(Clone, Debug)]
pub struct Subgraph {
    /// Local id -> global entity id, ascending.
    pub entities: Vec<u32>,
    /// Edges over local ids: induced facts, their inverses, and one
    /// self-link per node.
    pub edges: EdgeIndex,
    /// Seed positions as local ids.
    pub seeds: Vec<u32>,
    /// Max incoming-edge count over local nodes (self/inverse included).
    pub max_in_degree: usize,
    global_to_local: HashMap<u32, u32>,
}

impl Subgraph {
    pub fn n_nodes(&self) -> usize {
        self.entities.len()
    }

    pub fn local_of(&self, global: u32) -> Option<u32> {
        self.global_to_local.get(&global).copied()
    }

    pub fn global_of(&self, local: u32) -> u32 {
        self.entities[local as usize]
    }

    /// Zero-node subgraph, used for questions whose seed entities are
    /// absent from the KG (evaluation scores them 0; training skips them).
    pub fn empty() -> Self {
        Subgraph {
            entities: Vec::new(),
            edges: EdgeIndex::default(),
            seeds: Vec::new(),
            max_in_degree: 0,
            global_to_local: HashMap::new(),
        }
    }

    /// Assemble from parts, computing the derived fields.
    pub fn from_parts(entities: Vec<u32>, edges: EdgeIndex, seeds: Vec<u32>) -> Result<Self> {
        let global_to_local: HashMap<u32, u32> =
            entities.iter().enumerate().map(|(l, &g)| (g, l as u32)).collect();
        if global_to_local.len() != entities.len() {
            return Err(Error::Data("duplicate entity in subgraph".into()));
        }
        let n = entities.len() as u32;
        for s in &seeds {
            if *s >= n {
                return Err(Error::Bounds { op: "subgraph_seeds", index: *s as usize, bound: n as usize });
            }
        }
        for (s, _, d) in edges.iter() {
            if s >= n || d >= n {
                return Err(Error::Bounds { op: "subgraph_edges", index: s.max(d) as usize, bound: n as usize });
            }
        }
        let mut in_deg = vec![0usize; entities.len()];
        for &d in &edges.dst {
            in_deg[d as usize] += 1;
        }
        let max_in_degree = in_deg.iter().copied().max().unwrap_or(0);
        Ok(Subgraph { entities, edges, seeds, max_in_degree, global_to_local })
    }
}

/// Number of relation ids in the extended (forward + inverse + self) space.
pub fn extended_relation_count(num_relations: usize) -> usize {
    2 * num_relations + 1
}

pub fn inverse_relation_id(rel: u32, num_relations: usize) -> u32 {
    rel + num_relations as u32
}

pub fn self_relation_id(num_relations: usize) -> u32 {
    2 * num_relations as u32
}

/// Personalized PageRank scores by power iteration: uniform teleport over the
/// seeds, undirected transitions over facts, dangling mass redirected to the
/// teleport distribution. Per-node sums run in value-sorted order so entity
/// relabelings reproduce scores bit-for-bit.
pub fn ppr_scores(kg: &KnowledgeGraph, seeds: &[u32], alpha: f64, iters: usize) -> Result<Vec<f64>> {
    if seeds.is_empty() {
        return Err(Error::NoSeeds);
    }
    let n = kg.num_entities();
    for &s in seeds {
        if s as usize >= n {
            return Err(Error::UnknownEntity(format!("entity id {s}")));
        }
    }

    // undirected adjacency; parallel edges keep their multiplicity
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    for f in &kg.facts {
        neighbors[f.s as usize].push(f.o);
        neighbors[f.o as usize].push(f.s);
    }
    let deg: Vec<usize> = neighbors.iter().map(Vec::len).collect();

    let teleport = 1.0 / seeds.len() as f64;
    let mut p0 = vec![0.0; n];
    for &s in seeds {
        p0[s as usize] += teleport;
    }

    let mut incoming: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (v, ns) in neighbors.iter().enumerate() {
        for &u in ns {
            incoming[u as usize].push(v as u32);
        }
    }

    let mut p = p0.clone();
    let mut contribs: Vec<f64> = Vec::new();
    for _ in 0..iters {
        let dangling: f64 = {
            contribs.clear();
            contribs.extend(
                (0..n).filter(|&v| deg[v] == 0).map(|v| p[v]),
            );
            stable_sum(&contribs)
        };
        let mut next = vec![0.0; n];
        for u in 0..n {
            contribs.clear();
            contribs.extend(incoming[u].iter().map(|&v| p[v as usize] / deg[v as usize] as f64));
            let walked = stable_sum(&contribs);
            next[u] = alpha * p0[u] + (1.0 - alpha) * (walked + dangling * p0[u]);
        }
        p = next;
        debug_assert!((stable_sum(&p) - 1.0).abs() < 1e-8);
    }
    Ok(p)
}

/// Extract the top-m entity neighborhood of the seeds and induce its edges.
/// Seeds are always kept; remaining slots go to the highest PPR scores with
/// ties broken by ascending entity id.
pub fn extract_subgraph_ppr(
    kg: &KnowledgeGraph,
    seeds: &[u32],
    m: usize,
    alpha: f64,
    iters: usize,
) -> Result<Subgraph> {
    if m < seeds.len() {
        return Err(Error::Config(format!(
            "subgraph budget m={m} below seed count {}",
            seeds.len()
        )));
    }
    let scores = ppr_scores(kg, seeds, alpha, iters)?;
    let n = kg.num_entities();

    let mut is_seed = vec![false; n];
    for &s in seeds {
        is_seed[s as usize] = true;
    }
    let mut order: Vec<u32> = (0..n as u32).filter(|&v| !is_seed[v as usize]).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });

    let mut kept: Vec<u32> = seeds.to_vec();
    kept.sort_unstable();
    kept.dedup();
    let budget = m.min(n);
    for &v in &order {
        if kept.len() >= budget {
            break;
        }
        kept.push(v);
    }
    kept.sort_unstable();

    build_induced(kg, &kept, seeds)
}

/// Induce the subgraph over a fixed kept-entity set: all facts with both
/// endpoints kept (forward + inverse edge each), then one self-link per node.
pub fn build_induced(kg: &KnowledgeGraph, kept: &[u32], seeds: &[u32]) -> Result<Subgraph> {
    let local: HashMap<u32, u32> = kept.iter().enumerate().map(|(l, &g)| (g, l as u32)).collect();
    let num_rel = kg.num_relations();
    let mut edges = EdgeIndex::default();
    for f in &kg.facts {
        if let (Some(&ls), Some(&lo)) = (local.get(&f.s), local.get(&f.o)) {
            edges.push(ls, f.r, lo);
            edges.push(lo, inverse_relation_id(f.r, num_rel), ls);
        }
    }
    let self_rel = self_relation_id(num_rel);
    for v in 0..kept.len() as u32 {
        edges.push(v, self_rel, v);
    }
    let seeds_local: Vec<u32> = seeds
        .iter()
        .map(|s| {
            local
                .get(s)
                .copied()
                .ok_or_else(|| Error::UnknownEntity(format!("seed {s} not kept in subgraph")))
        })
        .collect::<Result<_>>()?;
    Subgraph::from_parts(kept.to_vec(), edges, seeds_local)
}

/// Fraction of questions with at least one gold answer inside their subgraph.
pub fn coverage(answer_sets: &[Vec<u32>], subgraphs: &[Subgraph]) -> Result<f64> {
    if answer_sets.len() != subgraphs.len() {
        return Err(Error::Data(format!(
            "coverage: {} answer sets vs {} subgraphs",
            answer_sets.len(),
            subgraphs.len()
        )));
    }
    if answer_sets.is_empty() {
        return Ok(0.0);
    }
    let covered = answer_sets
        .iter()
        .zip(subgraphs)
        .filter(|(answers, sub)| answers.iter().any(|a| sub.local_of(*a).is_some()))
        .count();
    Ok(covered as f64 / answer_sets.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    qid: String,
    entities: Vec<u32>,
    edges: Vec<[u32; 3]>,
    seeds: Vec<u32>,
}

/// Write subgraphs as JSON-lines: one record per question holding global
/// entity ids and local edge/seed ids.
pub fn write_cache<'a>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = (&'a str, &'a Subgraph)>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (qid, sub) in items {
        let rec = CacheRecord {
            qid: qid.to_string(),
            entities: sub.entities.clone(),
            edges: sub.edges.iter().map(|(s, r, d)| [s, r, d]).collect(),
            seeds: sub.seeds.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Vec<(String, Subgraph)>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            detail: e.to_string(),
        })?;
        let mut edges = EdgeIndex::default();
        for [s, r, d] in rec.edges {
            edges.push(s, r, d);
        }
        out.push((rec.qid, Subgraph::from_parts(rec.entities, edges, rec.seeds)?));
    }
    Ok(out)
}

/// A deterministic random multigraph for tests and benchmarks: `n` entities,
/// `facts` random (s, r, o) triples over `rels` relation names.
pub fn random_kg(n: usize, facts: usize, rels: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = DetRng::seed_from_u64(seed);
    let names: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
    let rel_names: Vec<String> = (0..rels).map(|i| format!("r{i}")).collect();
    let mut triples = Vec::with_capacity(facts);
    let mut attempts = 0;
    while triples.len() < facts && attempts < facts * 20 {
        attempts += 1;
        let s = rng.below(n);
        let mut o = rng.below(n);
        if o == s {
            o = (o + 1) % n;
        }
        let r = rng.below(rels);
        triples.push((s, r, o));
    }
    let (kg, _) = KnowledgeGraph::from_triples(
        triples
            .iter()
            .map(|&(s, r, o)| (names[s].as_str(), rel_names[r].as_str(), names[o].as_str())),
    );
    kg
}
