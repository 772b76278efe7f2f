// Gradient-check case registry shared between the per-op test file and the
// acceptance suite: each case registers random parameters, builds a scalar
// loss on a fresh tape, and is finite-difference-checked coordinate by
// coordinate.

use rearev_core::kg::KnowledgeGraph;
use rearev_core::model::{forward_question, question_loss, ModelConfig};
use rearev_core::reasoner::ExecMode;
use rearev_core::rng::DetRng;
use rearev_core::subgraph::{extended_relation_count, extract_subgraph_ppr};
use rearev_core::tensor::{NodeId, ParamStore, Tape, Tensor};
use rearev_core::Result;

use super::{finite_difference_check, model_setup, random_tokens, FdReport};

/// Values with magnitude in [0.2, 1.2] so kinked ops (relu, the dropout mask
/// boundary) sit far from their non-differentiable points at step 1e-5.
fn rand_tensor(rng: &mut DetRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = 0.2 + rng.unit_f64();
            if rng.chance(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce a node to a scalar with fixed positive weights so every output
/// coordinate reaches the loss with a distinct coefficient.
fn weighted_sum(tape: &mut Tape, node: NodeId, salt: u64) -> Result<NodeId> {
    let shape = tape.value(node).shape().to_vec();
    let mut rng = DetRng::seed_from_u64(salt ^ 0xabcd);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| 0.5 + rng.unit_f64()).collect()).unwrap();
    let w = tape.constant(w)?;
    let mixed = tape.hadamard(node, w)?;
    tape.sum_all(mixed)
}

fn pid(store: &ParamStore, name: &str) -> rearev_core::tensor::ParamId {
    store.id_by_name(name).unwrap()
}

pub struct OpCase {
    pub name: &'static str,
    pub register: Box<dyn Fn(&mut ParamStore, &mut DetRng)>,
    pub build: Box<dyn Fn(&mut Tape, &ParamStore) -> Result<NodeId>>,
}

fn case(
    name: &'static str,
    register: impl Fn(&mut ParamStore, &mut DetRng) + 'static,
    build: impl Fn(&mut Tape, &ParamStore) -> Result<NodeId> + 'static,
) -> OpCase {
    OpCase { name, register: Box::new(register), build: Box::new(build) }
}

/// One case per differentiable tape op (a few compound so the list stays
/// readable); indices inside exercise duplicates and gaps deliberately.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case(
            "matmul",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[3, 4]));
                s.register("b", rand_tensor(rng, &[4, 2]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                let b = t.param(s, pid(s, "b"))?;
                let out = t.matmul(a, b)?;
                weighted_sum(t, out, 1)
            },
        ),
        case(
            "matmul_nt",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[3, 4]));
                s.register("b", rand_tensor(rng, &[2, 4]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                let b = t.param(s, pid(s, "b"))?;
                let out = t.matmul_nt(a, b)?;
                weighted_sum(t, out, 2)
            },
        ),
        case(
            "matvec",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[3, 4]));
                s.register("x", rand_tensor(rng, &[4]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                let x = t.param(s, pid(s, "x"))?;
                let out = t.matvec(a, x)?;
                weighted_sum(t, out, 3)
            },
        ),
        case(
            "vecmat",
            |s, rng| {
                s.register("x", rand_tensor(rng, &[3]));
                s.register("a", rand_tensor(rng, &[3, 4]));
            },
            |t, s| {
                let x = t.param(s, pid(s, "x"))?;
                let a = t.param(s, pid(s, "a"))?;
                let out = t.vecmat(x, a)?;
                weighted_sum(t, out, 4)
            },
        ),
        case(
            "add_sub_hadamard_scale",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[2, 5]));
                s.register("b", rand_tensor(rng, &[2, 5]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                let b = t.param(s, pid(s, "b"))?;
                let sum = t.add(a, b)?;
                let diff = t.sub(sum, b)?;
                let prod = t.hadamard(diff, b)?;
                let scaled = t.scale(prod, 1.7)?;
                weighted_sum(t, scaled, 5)
            },
        ),
        case(
            "relu",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[2, 6]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                let out = t.relu(a)?;
                weighted_sum(t, out, 6)
            },
        ),
        case(
            "sigmoid_tanh",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[7]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                let sg = t.sigmoid(a)?;
                let th = t.tanh(sg)?;
                weighted_sum(t, th, 7)
            },
        ),
        case(
            "affine",
            |s, rng| {
                s.register("w", rand_tensor(rng, &[3, 4]));
                s.register("x", rand_tensor(rng, &[4]));
                s.register("b", rand_tensor(rng, &[3]));
            },
            |t, s| {
                let w = t.param(s, pid(s, "w"))?;
                let x = t.param(s, pid(s, "x"))?;
                let b = t.param(s, pid(s, "b"))?;
                let out = t.affine(w, x, b)?;
                weighted_sum(t, out, 8)
            },
        ),
        case(
            "concat_cols",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[3, 2]));
                s.register("b", rand_tensor(rng, &[3, 3]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                let b = t.param(s, pid(s, "b"))?;
                let out = t.concat_cols(&[a, b])?;
                weighted_sum(t, out, 9)
            },
        ),
        case(
            "concat_vec",
            |s, rng| {
                s.register("x", rand_tensor(rng, &[3]));
                s.register("y", rand_tensor(rng, &[4]));
            },
            |t, s| {
                let x = t.param(s, pid(s, "x"))?;
                let y = t.param(s, pid(s, "y"))?;
                // x twice: gradients from both slices must accumulate
                let out = t.concat_vec(&[x, y, x])?;
                weighted_sum(t, out, 10)
            },
        ),
        case(
            "stack_rows_and_row",
            |s, rng| {
                s.register("x", rand_tensor(rng, &[4]));
                s.register("y", rand_tensor(rng, &[4]));
                s.register("m", rand_tensor(rng, &[3, 4]));
            },
            |t, s| {
                let x = t.param(s, pid(s, "x"))?;
                let y = t.param(s, pid(s, "y"))?;
                let m = t.param(s, pid(s, "m"))?;
                let r = t.row(m, 1)?;
                let stacked = t.stack_rows(&[x, r, y])?;
                weighted_sum(t, stacked, 11)
            },
        ),
        case(
            "gather_rows",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[5, 3]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                // duplicated and skipped rows
                let out = t.gather_rows(a, &[0, 2, 2, 4, 0])?;
                weighted_sum(t, out, 12)
            },
        ),
        case(
            "gather_elems",
            |s, rng| {
                s.register("x", rand_tensor(rng, &[6]));
            },
            |t, s| {
                let x = t.param(s, pid(s, "x"))?;
                let out = t.gather_elems(x, &[1, 1, 5, 0])?;
                weighted_sum(t, out, 13)
            },
        ),
        case(
            "scatter_sum",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[4, 3]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                // collisions on slot 2, nothing lands in no slot
                let out = t.scatter_sum(a, &[2, 0, 2, 1], 3)?;
                weighted_sum(t, out, 14)
            },
        ),
        case(
            "scale_rows_cols",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[4, 3]));
                s.register("r", rand_tensor(rng, &[4]));
                s.register("c", rand_tensor(rng, &[3]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                let r = t.param(s, pid(s, "r"))?;
                let c = t.param(s, pid(s, "c"))?;
                let rows = t.scale_rows(a, r)?;
                let cols = t.scale_cols(rows, c)?;
                weighted_sum(t, cols, 15)
            },
        ),
        case(
            "sum_all_sum_rows",
            |s, rng| {
                s.register("a", rand_tensor(rng, &[4, 3]));
            },
            |t, s| {
                let a = t.param(s, pid(s, "a"))?;
                let rows = t.sum_rows(a)?;
                let mixed = weighted_sum(t, rows, 16)?;
                let direct = t.sum_all(a)?;
                t.add(mixed, direct)
            },
        ),
        case(
            "masked_softmax",
            |s, rng| {
                s.register("x", rand_tensor(rng, &[6]));
            },
            |t, s| {
                let x = t.param(s, pid(s, "x"))?;
                let p = t.masked_softmax(x, &[true, true, false, true, false, true])?;
                weighted_sum(t, p, 17)
            },
        ),
        case(
            "kl_div_to_target",
            |s, rng| {
                s.register("x", rand_tensor(rng, &[5]));
            },
            |t, s| {
                let x = t.param(s, pid(s, "x"))?;
                t.kl_div_to_target(x, &[true; 5], &[0.1, 0.2, 0.3, 0.15, 0.25])
            },
        ),
        case(
            "kl_div_masked",
            |s, rng| {
                s.register("x", rand_tensor(rng, &[5]));
            },
            |t, s| {
                let x = t.param(s, pid(s, "x"))?;
                // masked-out slots carry no target mass
                t.kl_div_to_target(
                    x,
                    &[true, false, true, true, false],
                    &[0.3, 0.0, 0.5, 0.2, 0.0],
                )
            },
        ),
        case(
            "dropout",
            |s, rng| {
                s.register("x", rand_tensor(rng, &[8]));
            },
            |t, s| {
                let x = t.param(s, pid(s, "x"))?;
                // the mask is a function of the tape seed, so every loss
                // evaluation in the check sees the same one
                let d = t.dropout(x, 0.35)?;
                weighted_sum(t, d, 18)
            },
        ),
    ]
}

/// FD-check one case at one seed.
pub fn op_fd_report(c: &OpCase, seed: u64) -> FdReport {
    let mut rng = DetRng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    (c.register)(&mut store, &mut rng);

    let mut tape = Tape::new(seed, true);
    let loss = (c.build)(&mut tape, &store).unwrap();
    let analytic = tape.backward(loss, &store).unwrap();

    finite_difference_check(&mut store, &analytic, |s| {
        let mut t = Tape::new(seed, true);
        let n = (c.build)(&mut t, s).unwrap();
        t.value(n).scalar_value()
    })
}

// ── end-to-end model FD ──────────────────────────────────────────────────

/// Three-node chain a→b→c with two distinct relations; the subgraph carries
/// the induced facts plus inverses and self-links.
pub fn chain_subgraph() -> (rearev_core::subgraph::Subgraph, usize) {
    let (kg, _) = KnowledgeGraph::from_triples([("a", "r", "b"), ("b", "s", "c")]);
    let sub = extract_subgraph_ppr(&kg, &[0], 3, 0.15, 30).unwrap();
    (sub, extended_relation_count(kg.num_relations()))
}

/// FD over every model parameter on the chain graph at d=8, T=2, K=2, L=2,
/// loss = divergence from a one-hot target on the far node.
pub fn model_fd_report(mode: ExecMode, dropout: f64, seed: u64) -> FdReport {
    let (sub, rels_ext) = chain_subgraph();
    let mut cfg = ModelConfig::new(8, 2, 2, 2, 12, rels_ext);
    cfg.mode = mode;
    cfg.dropout = dropout;
    cfg.seed = seed;
    let (mut store, params) = model_setup(&cfg);
    let tokens = random_tokens(seed.wrapping_add(100), cfg.vocab_size, 4);

    let n = sub.n_nodes();
    let mut target = vec![0.0; n];
    target[n - 1] = 1.0;

    let mut tape = Tape::new(seed, true);
    let fwd = forward_question(&mut tape, &store, &params, &cfg, &tokens, &sub).unwrap();
    let loss = question_loss(&mut tape, fwd.scores, &target).unwrap();
    let analytic = tape.backward(loss, &store).unwrap();

    finite_difference_check(&mut store, &analytic, |s| {
        let mut t = Tape::new(seed, true);
        let fwd = forward_question(&mut t, s, &params, &cfg, &tokens, &sub).unwrap();
        let l = question_loss(&mut t, fwd.scores, &target).unwrap();
        t.value(l).scalar_value()
    })
}
