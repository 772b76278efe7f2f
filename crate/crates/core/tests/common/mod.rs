// Shared test infrastructure: an independently coded dense forward pass that
// reads parameters from the store by name and recomputes everything with
// plain nested loops, a central finite-difference harness over the flattened
// parameter vector, and small founders for graphs, tokens, and corpora.
//
// The oracle deliberately shares no code with the tape implementation: no
// Tensor, no Tape, dense per-relation message tables, naive summation.

#![allow(dead_code)] // each test binary compiles this module separately

pub mod gradcases;
pub mod invariantchecks;

use std::collections::BTreeSet;

use rearev_core::dataset::{resolve_instances, Dataset, QuestionInstance};
use rearev_core::encoder::TokenVocab;
use rearev_core::kg::KnowledgeGraph;
use rearev_core::model::{forward_question, ModelConfig, ModelParams};
use rearev_core::reasoner::ExecMode;
use rearev_core::rng::DetRng;
use rearev_core::subgraph::{
    extended_relation_count, extract_subgraph_ppr, random_kg, read_cache, Subgraph,
};
use rearev_core::synth::{emit_dataset, generate_kg, generate_questions, GenConfig};
use rearev_core::tensor::{Gradients, ParamStore, Tape};

pub type Vecf = Vec<f64>;
pub type Mat = Vec<Vecf>;

// ── plain-loop linear algebra ────────────────────────────────────────────

fn mat_of(store: &ParamStore, name: &str) -> Mat {
    let t = store.by_name(name).unwrap_or_else(|| panic!("no parameter named {name}"));
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn vec_of(store: &ParamStore, name: &str) -> Vecf {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter named {name}"))
        .data()
        .to_vec()
}

fn mv(m: &Mat, v: &[f64]) -> Vecf {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vecf {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub2(a: &[f64], b: &[f64]) -> Vecf {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn had(a: &[f64], b: &[f64]) -> Vecf {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn sigmoid(v: &[f64]) -> Vecf {
    v.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()
}

fn softmax(v: &[f64]) -> Vecf {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vecf = v.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&x| x / z).collect()
}

// ── the dense straight-line forward pass ────────────────────────────────

pub struct OracleForward {
    pub attention: Vec<Vecf>,
    /// p after every layer, indexed [stage][layer].
    pub layer_ps: Vec<Vec<Vecf>>,
    pub p_out: Vecf,
    pub scores: Vecf,
    pub h_out: Mat,
}

/// Recompute the full forward pass (inference mode: no dropout) from the
/// named parameters, with dense per-edge loops.
pub fn oracle_forward(
    store: &ParamStore,
    cfg: &ModelConfig,
    tokens: &[u32],
    sub: &Subgraph,
) -> OracleForward {
    let d = cfg.d;
    let embed = mat_of(store, "embed");
    let (w_z, u_z, b_z) = (mat_of(store, "gru.w_z"), mat_of(store, "gru.u_z"), vec_of(store, "gru.b_z"));
    let (w_r, u_r, b_r) = (mat_of(store, "gru.w_r"), mat_of(store, "gru.u_r"), vec_of(store, "gru.b_r"));
    let (w_n, u_n, b_n) = (mat_of(store, "gru.w_n"), mat_of(store, "gru.u_n"), vec_of(store, "gru.b_n"));

    // GRU over the token embeddings
    let mut h = vec![0.0; d];
    let mut b_rows: Mat = Vec::with_capacity(tokens.len());
    for &tid in tokens {
        let x = &embed[tid as usize];
        let z = sigmoid(&add(&add(&mv(&w_z, x), &mv(&u_z, &h)), &b_z));
        let r = sigmoid(&add(&add(&mv(&w_r, x), &mv(&u_r, &h)), &b_r));
        let n: Vecf = add(&add(&mv(&w_n, x), &had(&r, &mv(&u_n, &h))), &b_n)
            .iter()
            .map(|&v| v.tanh())
            .collect();
        h = (0..d).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect();
        b_rows.push(h.clone());
    }
    let q = h;

    // K instructions by iterated token attention
    let w_u = vec_of(store, "inst.w_u");
    let mut prev = q.clone();
    let mut instructions: Mat = Vec::with_capacity(cfg.k_instructions);
    let mut attention = Vec::with_capacity(cfg.k_instructions);
    for k in 0..cfg.k_instructions {
        let w_k = mat_of(store, &format!("inst.w_{k}"));
        let mut cat = prev.clone();
        cat.extend_from_slice(&q);
        cat.extend(had(&q, &prev));
        cat.extend(sub2(&q, &prev));
        let query = mv(&w_k, &cat);
        let scores: Vecf = b_rows
            .iter()
            .map(|b| (0..d).map(|i| w_u[i] * query[i] * b[i]).sum())
            .collect();
        let u = softmax(&scores);
        let inst: Vecf = (0..d)
            .map(|i| b_rows.iter().zip(&u).map(|(b, &w)| w * b[i]).sum())
            .collect();
        attention.push(u);
        prev = inst.clone();
        instructions.push(inst);
    }

    // node initialization from distinct incoming (node, relation) pairs
    let rel_embed = mat_of(store, "reason.rel_embed");
    let w0 = mat_of(store, "reason.w0");
    let n_nodes = sub.n_nodes();
    let mut h_nodes: Mat = vec![vec![0.0; d]; n_nodes];
    let pairs: BTreeSet<(u32, u32)> = sub.edges.iter().map(|(_, r, dst)| (dst, r)).collect();
    for &(v, r) in &pairs {
        let proj = mv(&w0, &rel_embed[r as usize]);
        for i in 0..d {
            h_nodes[v as usize][i] += proj[i];
        }
    }
    for row in &mut h_nodes {
        for v in row {
            *v = v.max(0.0);
        }
    }

    // seed indicator
    let seed_val =
        if cfg.normalize_seed_prob { 1.0 / sub.seeds.len() as f64 } else { 1.0 };
    let mut p0 = vec![0.0; n_nodes];
    for &s in &sub.seeds {
        p0[s as usize] = seed_val;
    }

    let w_prob = vec_of(store, "reason.w_prob");
    let w_q = mat_of(store, "reason.w_q");
    let gate_w = mat_of(store, "reason.gate_w");
    let gate_u = mat_of(store, "reason.gate_u");
    let gate_b = vec_of(store, "reason.gate_b");

    let mut layer_ps = Vec::with_capacity(cfg.t_stages);
    let mut p = p0.clone();
    for t in 0..cfg.t_stages {
        p = p0.clone();
        let mut stage_ps = Vec::with_capacity(cfg.l_layers);
        for l in 0..cfg.l_layers {
            let w_r_l = mat_of(store, &format!("reason.w_r.{l}"));
            let w_h_l = mat_of(store, &format!("reason.w_h.{l}"));
            let proj: Mat = rel_embed.iter().map(|r| mv(&w_r_l, r)).collect();

            let used: Vec<&Vecf> = match cfg.mode {
                ExecMode::Bfs => instructions.iter().collect(),
                ExecMode::Sequential => vec![&instructions[l]],
            };
            let mut aggs: Vec<Mat> = vec![vec![vec![0.0; d]; n_nodes]; used.len()];
            for (src, rel, dst) in sub.edges.iter() {
                for (a, inst) in aggs.iter_mut().zip(&used) {
                    for i in 0..d {
                        let m = (proj[rel as usize][i] * inst[i]).max(0.0);
                        a[dst as usize][i] += m * p[src as usize];
                    }
                }
            }

            let mut new_h: Mat = Vec::with_capacity(n_nodes);
            for v in 0..n_nodes {
                let mut fused_row = h_nodes[v].clone();
                for a in &aggs {
                    fused_row.extend_from_slice(&a[v]);
                }
                new_h.push(mv(&w_h_l, &fused_row).iter().map(|&x| x.max(0.0)).collect());
            }
            h_nodes = new_h;
            let scores: Vecf = h_nodes.iter().map(|row| had(row, &w_prob).iter().sum()).collect();
            p = softmax(&scores);
            stage_ps.push(p.clone());
        }
        layer_ps.push(stage_ps);

        if t + 1 < cfg.t_stages {
            let mut h_e = vec![0.0; d];
            for &s in &sub.seeds {
                for i in 0..d {
                    h_e[i] += h_nodes[s as usize][i];
                }
            }
            instructions = instructions
                .iter()
                .map(|inst| {
                    let mut cat = inst.clone();
                    cat.extend_from_slice(&h_e);
                    cat.extend(sub2(inst, &h_e));
                    cat.extend(had(inst, &h_e));
                    let cand = mv(&w_q, &cat);
                    let g = sigmoid(&add(&add(&mv(&gate_w, &h_e), &mv(&gate_u, inst)), &gate_b));
                    (0..d).map(|i| (1.0 - g[i]) * inst[i] + g[i] * cand[i]).collect()
                })
                .collect();
        }
    }

    let scores: Vecf = h_nodes.iter().map(|row| had(row, &w_prob).iter().sum()).collect();
    OracleForward { attention, layer_ps, p_out: p, scores, h_out: h_nodes }
}

/// Run the tape model in inference mode and the dense oracle on the same
/// store, and return the worst absolute disagreement across every surfaced
/// quantity: scores, final p, per-layer ps, token attention, and h_out.
pub fn oracle_agreement(
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    sub: &Subgraph,
) -> f64 {
    let mut tape = Tape::new(0, false);
    let fwd = forward_question(&mut tape, store, params, cfg, tokens, sub).unwrap();
    let oracle = oracle_forward(store, cfg, tokens, sub);

    let mut worst = 0.0f64;
    let mut cmp = |a: &[f64], b: &[f64]| {
        assert_eq!(a.len(), b.len(), "oracle and model disagree on shape");
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    };
    cmp(tape.value(fwd.scores).data(), &oracle.scores);
    cmp(tape.value(fwd.p_out).data(), &oracle.p_out);
    cmp(tape.value(fwd.h_out).data(), &oracle.h_out.concat());
    assert_eq!(fwd.attention.len(), oracle.attention.len());
    for (a, b) in fwd.attention.iter().zip(&oracle.attention) {
        cmp(a, b);
    }
    assert_eq!(fwd.stages.len(), oracle.layer_ps.len());
    for (stage, olayers) in fwd.stages.iter().zip(&oracle.layer_ps) {
        assert_eq!(stage.layer_ps.len(), olayers.len());
        for (a, b) in stage.layer_ps.iter().zip(olayers) {
            cmp(a, b);
        }
        cmp(&stage.final_p, olayers.last().unwrap());
    }
    worst
}

// ── finite differences over the flattened parameter vector ──────────────

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

pub struct FdReport {
    /// Worst |analytic − numeric| / (rel_tol·max(|a|,|f|) + abs_floor);
    /// the check passes iff this is ≤ 1.
    pub worst_ratio: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Central finite differences of `loss` against `analytic`, coordinate by
/// coordinate over every registered parameter. The store is restored.
pub fn finite_difference_check(
    store: &mut ParamStore,
    analytic: &Gradients,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> FdReport {
    let names: Vec<(String, usize)> = store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.numel()))
        .collect();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let flat_analytic: Vecf = ids
        .iter()
        .flat_map(|&id| store.get(id).data().iter().enumerate().map(move |(j, _)| (id, j)))
        .map(|(id, j)| analytic.get(id).map(|t| t.data()[j]).unwrap_or(0.0))
        .collect();

    let base = store.to_flat();
    let mut worst_ratio = 0.0f64;
    let mut worst_param = String::new();
    let mut flat_idx = 0usize;
    for (name, numel) in &names {
        for _ in 0..*numel {
            let mut bumped = base.clone();
            bumped[flat_idx] += FD_STEP;
            store.load_flat(&bumped).unwrap();
            let up = loss(store);
            bumped[flat_idx] = base[flat_idx] - FD_STEP;
            store.load_flat(&bumped).unwrap();
            let down = loss(store);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = flat_analytic[flat_idx];
            let allowed = FD_REL_TOL * a.abs().max(numeric.abs()) + FD_ABS_FLOOR;
            let ratio = (a - numeric).abs() / allowed;
            if ratio > worst_ratio {
                worst_ratio = ratio;
                worst_param = format!("{name}[{}]", flat_idx);
            }
            flat_idx += 1;
        }
    }
    store.load_flat(&base).unwrap();
    FdReport { worst_ratio, worst_param, checked: flat_idx }
}

// ── builders ─────────────────────────────────────────────────────────────

/// Random connected-ish KG and a PPR subgraph of at most `m` nodes around
/// node 0; returns the subgraph with the extended relation count.
pub fn random_subgraph(seed: u64, rels: usize, m: usize) -> (Subgraph, usize) {
    let kg = random_kg(10, 22, rels, seed);
    let sub = extract_subgraph_ppr(&kg, &[0], m, 0.15, 30).unwrap();
    (sub, extended_relation_count(kg.num_relations()))
}

pub fn random_tokens(seed: u64, vocab_size: usize, len: usize) -> Vec<u32> {
    let mut rng = DetRng::seed_from_u64(seed);
    // ids 2.. skip the PAD/UNK convention slots
    (0..len).map(|_| 2 + rng.below(vocab_size.saturating_sub(2)) as u32).collect()
}

pub fn model_setup(cfg: &ModelConfig) -> (ParamStore, ModelParams) {
    let mut store = ParamStore::new();
    let params = ModelParams::register(&mut store, cfg).unwrap();
    (store, params)
}

// ── emitted-corpus round trip ────────────────────────────────────────────

pub struct Corpus {
    pub kg: KnowledgeGraph,
    pub vocab: TokenVocab,
    pub train: Vec<QuestionInstance>,
    pub dev: Vec<QuestionInstance>,
    pub test: Vec<QuestionInstance>,
    pub coverage: f64,
    pub rels_ext: usize,
    _dir: tempfile::TempDir,
}

/// Generate, emit to a temp dir, and load everything back through the same
/// readers a consumer uses.
pub fn emitted_corpus(gen: &GenConfig) -> Corpus {
    let world = generate_kg(gen).unwrap();
    let records = generate_questions(&world, gen).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = emit_dataset(&world, &records, gen, dir.path()).unwrap();

    let (kg, _) = KnowledgeGraph::load_facts(dir.path().join("facts.tsv")).unwrap();
    let vocab = TokenVocab::load(dir.path().join("vocab.txt")).unwrap();
    let subs = read_cache(dir.path().join("subgraphs.jsonl")).unwrap();
    let mut parts = Vec::with_capacity(3);
    for split in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        let ds = Dataset::load_jsonl(dir.path().join(split)).unwrap();
        parts.push(resolve_instances(&ds, &kg, &vocab, subs.clone()).unwrap());
    }
    let test = parts.pop().unwrap();
    let dev = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    let rels_ext = extended_relation_count(kg.num_relations());
    Corpus { kg, vocab, train, dev, test, coverage: report.coverage, rels_ext, _dir: dir }
}
