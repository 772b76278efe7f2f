//! Instruction-conditioned graph reasoning: node/probability initialization,
//! per-layer message passing in breadth-first or sequential mode, adaptive
//! instruction revision between stages, and the full stage×layer loop.

use serde::{Deserialize, Serialize};

use crate::encoder::{glorot, glorot_vec};
use crate::rng::DetRng;
use crate::subgraph::Subgraph;
use crate::tensor::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    /// All K instructions probed at every layer; fusion selects.
    Bfs,
    /// One instruction per layer in order (requires K = L).
    Sequential,
}

impl std::str::FromStr for ExecMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bfs" => Ok(ExecMode::Bfs),
            "sequential" => Ok(ExecMode::Sequential),
            other => Err(Error::Config(format!("unknown mode {other:?} (bfs|sequential)"))),
        }
    }
}

impl ExecMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExecMode::Bfs => "bfs",
            ExecMode::Sequential => "sequential",
        }
    }
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub t_stages: usize,
    pub k_instructions: usize,
    pub l_layers: usize,
    pub mode: ExecMode,
    pub dropout: f64,
    /// When true, seed entries of p⁰ start at 1/|seeds| instead of 1.
    pub normalize_seed_prob: bool,
}

impl ReasonerConfig {
    pub fn new(t: usize, k: usize, l: usize) -> Self {
        ReasonerConfig {
            t_stages: t,
            k_instructions: k,
            l_layers: l,
            mode: ExecMode::Bfs,
            dropout: 0.0,
            normalize_seed_prob: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_stages == 0 || self.k_instructions == 0 || self.l_layers == 0 {
            return Err(Error::Config(format!(
                "T, K, L must all be at least 1 (got {}, {}, {})",
                self.t_stages, self.k_instructions, self.l_layers
            )));
        }
        if self.mode == ExecMode::Sequential && self.k_instructions != self.l_layers {
            return Err(Error::Config(format!(
                "sequential mode needs K = L, got K={} L={}",
                self.k_instructions, self.l_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Width of the per-layer fusion input: previous node state plus one
    /// aggregate block per simultaneously-executed instruction.
    pub fn fusion_blocks(&self) -> usize {
        match self.mode {
            ExecMode::Bfs => self.k_instructions + 1,
            ExecMode::Sequential => 2,
        }
    }
}

/// Reasoner parameter ids in a `ParamStore`.
#[derive(Clone, Debug)]
pub struct ReasonerParams {
    /// Per-layer relation projections, d×d.
    pub w_r: Vec<ParamId>,
    /// Per-layer fusion matrices, d×(blocks·d).
    pub w_h: Vec<ParamId>,
    /// Probability scores, d.
    pub w_prob: ParamId,
    /// Instruction-candidate projection, d×4d.
    pub w_q: ParamId,
    pub gate_w: ParamId,
    pub gate_u: ParamId,
    pub gate_b: ParamId,
    /// Relation embeddings over the extended id space, |R_ext|×d.
    pub rel_embed: ParamId,
    /// Node-init projection, d×d.
    pub w0: ParamId,
    pub d: usize,
}

impl ReasonerParams {
    pub fn register(
        store: &mut ParamStore,
        cfg: &ReasonerConfig,
        d: usize,
        num_relations_ext: usize,
        rng: &mut DetRng,
    ) -> Self {
        let blocks = cfg.fusion_blocks();
        let w_r = (0..cfg.l_layers)
            .map(|l| store.register(&format!("reason.w_r.{l}"), glorot(rng, d, d)))
            .collect();
        let w_h = (0..cfg.l_layers)
            .map(|l| store.register(&format!("reason.w_h.{l}"), glorot(rng, d, blocks * d)))
            .collect();
        let w_prob = store.register("reason.w_prob", glorot_vec(rng, d));
        let w_q = store.register("reason.w_q", glorot(rng, d, 4 * d));
        let gate_w = store.register("reason.gate_w", glorot(rng, d, d));
        let gate_u = store.register("reason.gate_u", glorot(rng, d, d));
        let gate_b = store.register("reason.gate_b", Tensor::zeros(vec![d]));
        let rel_embed = store.register("reason.rel_embed", glorot(rng, num_relations_ext, d));
        let w0 = store.register("reason.w0", glorot(rng, d, d));
        ReasonerParams { w_r, w_h, w_prob, w_q, gate_w, gate_u, gate_b, rel_embed, w0, d }
    }
}

#[derive(Clone, Copy)]
pub struct ReasonerState {
    /// Node representations, |V_q|×d.
    pub h: NodeId,
    /// Probability vector over local nodes.
    pub p: NodeId,
}

/// Initial node representations: each node pools the distinct relation ids
/// on its incoming edges (self-link included), projected and rectified.
/// Pairs are sorted so the per-node accumulation order is relabel-proof.
pub fn init_node_reps(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ReasonerParams,
    sub: &Subgraph,
) -> Result<NodeId> {
    let mut pairs: Vec<(u32, u32)> = sub
        .edges
        .iter()
        .map(|(_, rel, dst)| (dst, rel))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();

    let rel_rows: Vec<usize> = pairs.iter().map(|&(_, r)| r as usize).collect();
    let dst: Vec<usize> = pairs.iter().map(|&(v, _)| v as usize).collect();

    let table = tape.param(store, params.rel_embed)?;
    let w0 = tape.param(store, params.w0)?;
    let gathered = tape.gather_rows(table, &rel_rows)?;
    let projected = tape.matmul_nt(gathered, w0)?;
    let pooled = tape.scatter_sum(projected, &dst, sub.n_nodes())?;
    tape.relu(pooled)
}

/// Seed indicator: 1 at seed nodes (or 1/|seeds| when normalizing), 0
/// elsewhere. The first softmax renormalizes either way.
pub fn init_probability(tape: &mut Tape, sub: &Subgraph, normalize: bool) -> Result<NodeId> {
    if sub.seeds.is_empty() {
        return Err(Error::NoSeeds);
    }
    let value = if normalize { 1.0 / sub.seeds.len() as f64 } else { 1.0 };
    let mut p = vec![0.0; sub.n_nodes()];
    for &s in &sub.seeds {
        p[s as usize] = value;
    }
    tape.constant(Tensor::vector(p))
}

/// Shared layer body: probe with the given instructions, aggregate into
/// nodes, fuse with the previous representation, and renormalize p.
fn layer_with_instructions(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ReasonerParams,
    sub: &Subgraph,
    instructions: &[NodeId],
    state: ReasonerState,
    layer: usize,
    dropout: f64,
) -> Result<ReasonerState> {
    let n = sub.n_nodes();
    let src: Vec<usize> = sub.edges.src.iter().map(|&v| v as usize).collect();
    let dst: Vec<usize> = sub.edges.dst.iter().map(|&v| v as usize).collect();
    let rels: Vec<usize> = sub.edges.rel.iter().map(|&r| r as usize).collect();

    let rel_table = tape.param(store, params.rel_embed)?;
    let w_r = tape.param(store, params.w_r[layer])?;
    let projected = tape.matmul_nt(rel_table, w_r)?;
    let messages = tape.gather_rows(projected, &rels)?;
    let p_src = tape.gather_elems(state.p, &src)?;

    let mut blocks = Vec::with_capacity(instructions.len() + 1);
    blocks.push(state.h);
    for &inst in instructions {
        let conditioned = tape.scale_cols(messages, inst)?;
        let activated = tape.relu(conditioned)?;
        let weighted = tape.scale_rows(activated, p_src)?;
        blocks.push(tape.scatter_sum(weighted, &dst, n)?);
    }

    let fused_in = tape.concat_cols(&blocks)?;
    let w_h = tape.param(store, params.w_h[layer])?;
    let fused = tape.matmul_nt(fused_in, w_h)?;
    let h = tape.relu(fused)?;
    let h = tape.dropout(h, dropout)?;

    let w_prob = tape.param(store, params.w_prob)?;
    let scores = tape.matvec(h, w_prob)?;
    let p = tape.masked_softmax(scores, &vec![true; n])?;
    Ok(ReasonerState { h, p })
}

/// One breadth-first layer: every instruction probes the graph and the
/// fusion matrix arbitrates.
pub fn bfs_layer(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ReasonerParams,
    cfg: &ReasonerConfig,
    sub: &Subgraph,
    instructions: &[NodeId],
    state: ReasonerState,
    layer: usize,
) -> Result<ReasonerState> {
    if cfg.mode != ExecMode::Bfs {
        return Err(Error::Mode { op: "bfs_layer", mode: cfg.mode.as_str() });
    }
    layer_with_instructions(tape, store, params, sub, instructions, state, layer, cfg.dropout)
}

/// One sequential-ablation layer: only instruction `layer` is executed.
pub fn sequential_layer(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ReasonerParams,
    cfg: &ReasonerConfig,
    sub: &Subgraph,
    instructions: &[NodeId],
    state: ReasonerState,
    layer: usize,
) -> Result<ReasonerState> {
    if cfg.mode != ExecMode::Sequential {
        return Err(Error::Mode { op: "sequential_layer", mode: cfg.mode.as_str() });
    }
    let inst = [instructions[layer]];
    layer_with_instructions(tape, store, params, sub, &inst, state, layer, cfg.dropout)
}

/// Revise instructions from the pooled seed representations: a GRU update
/// gate arbitrates between the old vector and a projected candidate.
pub fn adapt_instructions(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ReasonerParams,
    sub: &Subgraph,
    instructions: &[NodeId],
    h_final: NodeId,
) -> Result<Vec<NodeId>> {
    let seed_rows: Vec<usize> = sub.seeds.iter().map(|&s| s as usize).collect();
    let gathered = tape.gather_rows(h_final, &seed_rows)?;
    let h_e = tape.sum_rows(gathered)?;

    let w_q = tape.param(store, params.w_q)?;
    let gate_w = tape.param(store, params.gate_w)?;
    let gate_u = tape.param(store, params.gate_u)?;
    let gate_b = tape.param(store, params.gate_b)?;
    let ones = tape.constant(Tensor::vector(vec![1.0; params.d]))?;

    let mut out = Vec::with_capacity(instructions.len());
    for &inst in instructions {
        let diff = tape.sub(inst, h_e)?;
        let prod = tape.hadamard(inst, h_e)?;
        let cat = tape.concat_vec(&[inst, h_e, diff, prod])?;
        let cand = tape.matvec(w_q, cat)?;

        let gw = tape.matvec(gate_w, h_e)?;
        let gu = tape.matvec(gate_u, inst)?;
        let pre = tape.add(gw, gu)?;
        let pre = tape.add(pre, gate_b)?;
        let g = tape.sigmoid(pre)?;

        let keep = tape.sub(ones, g)?;
        let kept = tape.hadamard(keep, inst)?;
        let taken = tape.hadamard(g, cand)?;
        out.push(tape.add(kept, taken)?);
    }
    Ok(out)
}

/// Per-stage observability: p after every layer plus the stage's final p.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub layer_ps: Vec<Vec<f64>>,
    pub final_p: Vec<f64>,
}

pub struct ReasonOutcome {
    pub p_out: NodeId,
    pub h_out: NodeId,
    pub stages: Vec<StageTrace>,
}

/// The full loop: T stages of L layers. Node representations carry across
/// stages; p resets to the seed indicator at each stage start; instructions
/// are revised between stages.
pub fn reason(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ReasonerParams,
    cfg: &ReasonerConfig,
    sub: &Subgraph,
    instructions: Vec<NodeId>,
) -> Result<ReasonOutcome> {
    cfg.validate()?;
    if sub.n_nodes() == 0 {
        return Err(Error::Data("empty subgraph".into()));
    }
    if instructions.len() != cfg.k_instructions {
        return Err(Error::Config(format!(
            "{} instructions supplied, config says K={}",
            instructions.len(),
            cfg.k_instructions
        )));
    }

    let p0 = init_probability(tape, sub, cfg.normalize_seed_prob)?;
    let mut h = init_node_reps(tape, store, params, sub)?;
    let mut insts = instructions;
    let mut stages = Vec::with_capacity(cfg.t_stages);
    let mut last_p = p0;

    for t in 0..cfg.t_stages {
        let mut state = ReasonerState { h, p: p0 };
        let mut layer_ps = Vec::with_capacity(cfg.l_layers);
        for l in 0..cfg.l_layers {
            state = match cfg.mode {
                ExecMode::Bfs => bfs_layer(tape, store, params, cfg, sub, &insts, state, l)?,
                ExecMode::Sequential => {
                    sequential_layer(tape, store, params, cfg, sub, &insts, state, l)?
                }
            };
            layer_ps.push(tape.value(state.p).data().to_vec());
        }
        h = state.h;
        last_p = state.p;
        stages.push(StageTrace { final_p: tape.value(state.p).data().to_vec(), layer_ps });
        if t + 1 < cfg.t_stages {
            insts = adapt_instructions(tape, store, params, sub, &insts, state.h)?;
        }
    }

    Ok(ReasonOutcome { p_out: last_p, h_out: h, stages })
}
