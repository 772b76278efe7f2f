//! The end-to-end question answerer: token encoding, instruction
//! initialization, staged graph reasoning, and the training loss on the
//! final node scores.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_question, glorot, init_instructions, EncodedQuestion, GruCell, InstructionParams,
};
use crate::reasoner::{reason, ExecMode, ReasonerConfig, ReasonerParams, StageTrace};
use crate::rng::DetRng;
use crate::subgraph::Subgraph;
use crate::tensor::{NodeId, ParamId, ParamStore, Tape};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub t_stages: usize,
    pub k_instructions: usize,
    pub l_layers: usize,
    pub mode: ExecMode,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Extended relation count: forward + inverse + self-link.
    pub num_relations_ext: usize,
    pub normalize_seed_prob: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(d: usize, t: usize, k: usize, l: usize, vocab_size: usize, rels_ext: usize) -> Self {
        ModelConfig {
            d,
            t_stages: t,
            k_instructions: k,
            l_layers: l,
            mode: ExecMode::Bfs,
            dropout: 0.0,
            vocab_size,
            num_relations_ext: rels_ext,
            normalize_seed_prob: false,
            seed: 0,
        }
    }

    pub fn reasoner_config(&self) -> ReasonerConfig {
        ReasonerConfig {
            t_stages: self.t_stages,
            k_instructions: self.k_instructions,
            l_layers: self.l_layers,
            mode: self.mode,
            dropout: self.dropout,
            normalize_seed_prob: self.normalize_seed_prob,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("hidden dimension must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "token vocabulary must include <pad> and <unk>".into(),
            ));
        }
        if self.num_relations_ext == 0 {
            return Err(Error::Config("relation embedding table must be non-empty".into()));
        }
        self.reasoner_config().validate()
    }
}

/// All trainable parameters, registered in a fixed, name-stable order so
/// checkpoints and gradient indexing line up across runs.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed: ParamId,
    pub gru: GruCell,
    pub inst: InstructionParams,
    pub reasoner: ReasonerParams,
}

impl ModelParams {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = DetRng::seed_from_u64(cfg.seed);
        let embed = store.register("embed", glorot(&mut rng, cfg.vocab_size, cfg.d));
        let gru = GruCell::register(store, "gru", cfg.d, cfg.d, &mut rng);
        let inst = InstructionParams::register(store, cfg.k_instructions, cfg.d, &mut rng);
        let reasoner = ReasonerParams::register(
            store,
            &cfg.reasoner_config(),
            cfg.d,
            cfg.num_relations_ext,
            &mut rng,
        );
        Ok(ModelParams { embed, gru, inst, reasoner })
    }
}

pub struct QuestionForward {
    /// Final-layer node scores (pre-softmax); the loss attaches here.
    pub scores: NodeId,
    /// Final answer distribution over local nodes.
    pub p_out: NodeId,
    /// Final node representations.
    pub h_out: NodeId,
    /// Per-instruction token attention from initialization.
    pub attention: Vec<Vec<f64>>,
    /// Per-stage probability snapshots.
    pub stages: Vec<StageTrace>,
}

pub fn forward_question(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    sub: &Subgraph,
) -> Result<QuestionForward> {
    let enc: EncodedQuestion = encode_question(tape, store, params.embed, &params.gru, tokens)?;
    let instructions = init_instructions(tape, store, &params.inst, &enc, cfg.k_instructions)?;
    let rcfg = cfg.reasoner_config();
    let mut vectors = instructions.vectors;
    for v in &mut vectors {
        *v = tape.dropout(*v, cfg.dropout)?;
    }
    let out = reason(tape, store, &params.reasoner, &rcfg, sub, vectors)?;

    // Recompute the final scores from h_out so the loss sees the logits that
    // produced p_out (identical inputs, identical value).
    let w_prob = tape.param(store, params.reasoner.w_prob)?;
    let scores = tape.matvec(out.h_out, w_prob)?;

    Ok(QuestionForward {
        scores,
        p_out: out.p_out,
        h_out: out.h_out,
        attention: instructions.attention,
        stages: out.stages,
    })
}

/// KL(target ‖ softmax(scores)) over the whole local node set.
pub fn question_loss(tape: &mut Tape, scores: NodeId, target: &[f64]) -> Result<NodeId> {
    let mask = vec![true; target.len()];
    tape.kl_div_to_target(scores, &mask, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::KnowledgeGraph;
    use crate::subgraph::{extended_relation_count, extract_subgraph_ppr};
    use crate::tensor::{adam_step, AdamConfig, AdamState};

    fn tiny_world() -> (KnowledgeGraph, Subgraph, ModelConfig) {
        let (kg, _) = KnowledgeGraph::from_triples([
            ("m1", "directed_by", "p1"),
            ("m1", "release_year", "y1"),
            ("m2", "directed_by", "p1"),
        ]);
        let sub = extract_subgraph_ppr(&kg, &[0], 4, 0.15, 20).unwrap();
        let rels_ext = extended_relation_count(kg.num_relations());
        let cfg = ModelConfig::new(6, 2, 2, 2, 8, rels_ext);
        (kg, sub, cfg)
    }

    #[test]
    fn registration_order_is_stable() {
        let (_, _, cfg) = tiny_world();
        let mut store = ParamStore::new();
        ModelParams::register(&mut store, &cfg).unwrap();
        let names: Vec<&str> = store.iter().map(|(_, name, _)| name).collect();
        assert_eq!(
            names,
            vec![
                "embed", "gru.w_z", "gru.u_z", "gru.w_r", "gru.u_r", "gru.w_n", "gru.u_n",
                "gru.b_z", "gru.b_r", "gru.b_n", "inst.w_0", "inst.w_1", "inst.w_u",
                "reason.w_r.0", "reason.w_r.1", "reason.w_h.0", "reason.w_h.1", "reason.w_prob",
                "reason.w_q", "reason.gate_w", "reason.gate_u", "reason.gate_b",
                "reason.rel_embed", "reason.w0",
            ]
        );
    }

    #[test]
    fn forward_yields_distribution_and_matching_scores() {
        let (_, sub, cfg) = tiny_world();
        let mut store = ParamStore::new();
        let params = ModelParams::register(&mut store, &cfg).unwrap();
        let mut tape = Tape::inference();
        let fwd = forward_question(&mut tape, &store, &params, &cfg, &[2, 3, 4], &sub).unwrap();

        let p = tape.value(fwd.p_out).data().to_vec();
        assert_eq!(p.len(), sub.n_nodes());
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v > 0.0));

        // recomputed scores reproduce p through a softmax
        let scores = tape.value(fwd.scores).data();
        let sm = crate::tensor::masked_softmax_values(scores, &vec![true; scores.len()]).unwrap();
        for (a, b) in sm.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }

        for row in &fwd.attention {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(fwd.stages.len(), cfg.t_stages);
    }

    #[test]
    fn forward_is_deterministic() {
        let (_, sub, cfg) = tiny_world();
        let mut store = ParamStore::new();
        let params = ModelParams::register(&mut store, &cfg).unwrap();
        let run = || {
            let mut tape = Tape::inference();
            let fwd =
                forward_question(&mut tape, &store, &params, &cfg, &[2, 3], &sub).unwrap();
            tape.value(fwd.p_out).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_is_zero_against_own_distribution() {
        let (_, sub, cfg) = tiny_world();
        let mut store = ParamStore::new();
        let params = ModelParams::register(&mut store, &cfg).unwrap();
        let mut tape = Tape::inference();
        let fwd = forward_question(&mut tape, &store, &params, &cfg, &[2], &sub).unwrap();
        let target = tape.value(fwd.p_out).data().to_vec();
        let loss = question_loss(&mut tape, fwd.scores, &target).unwrap();
        assert!(tape.value(loss).scalar_value().abs() < 1e-12);
    }

    #[test]
    fn one_adam_step_reduces_loss() {
        let (_, sub, cfg) = tiny_world();
        let mut store = ParamStore::new();
        let params = ModelParams::register(&mut store, &cfg).unwrap();
        let target = {
            let mut t = vec![0.0; sub.n_nodes()];
            t[1] = 1.0;
            t
        };
        let eval = |store: &ParamStore| {
            let mut tape = Tape::new(0, true);
            let fwd = forward_question(&mut tape, store, &params, &cfg, &[2, 3], &sub).unwrap();
            let loss = question_loss(&mut tape, fwd.scores, &target).unwrap();
            (tape, loss)
        };
        let (mut tape, loss) = eval(&store);
        let before = tape.value(loss).scalar_value();
        let grads = tape.backward(loss, &store).unwrap();
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &grads, &mut state, &AdamConfig::with_lr(0.05)).unwrap();
        let (tape2, loss2) = eval(&store);
        let after = tape2.value(loss2).scalar_value();
        assert!(after < before, "loss went {before} -> {after}");
    }

    #[test]
    fn bad_config_rejected_at_registration() {
        let mut cfg = ModelConfig::new(4, 1, 2, 3, 8, 5);
        cfg.mode = ExecMode::Sequential;
        let mut store = ParamStore::new();
        assert!(matches!(
            ModelParams::register(&mut store, &cfg),
            Err(Error::Config(_))
        ));
    }
}
