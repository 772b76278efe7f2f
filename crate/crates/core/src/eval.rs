//! Answer-set metrics (Hits@1, thresholded F1) and whole-split evaluation.

use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataset::QuestionInstance;
use crate::model::{forward_question, ModelConfig, ModelParams};
use crate::tensor::{ParamStore, Tape};
use crate::{Error, Result};

/// How the predicted answer set is cut from the probability vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1Rule {
    /// Smallest prefix of nodes (by descending probability, ties toward the
    /// lower index) whose cumulative mass reaches the threshold.
    Cumulative,
    /// Every node whose own probability reaches the threshold.
    PerNode,
}

impl std::str::FromStr for F1Rule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative" => Ok(F1Rule::Cumulative),
            "pernode" => Ok(F1Rule::PerNode),
            other => Err(Error::Config(format!(
                "unknown f1 rule {other:?} (cumulative|pernode)"
            ))),
        }
    }
}

/// 1.0 when the argmax node (ties resolved to the lowest index) is a gold
/// answer, else 0.0.
pub fn hits_at_1(probs: &[f64], gold: &[usize]) -> f64 {
    if probs.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    if gold.contains(&best) {
        1.0
    } else {
        0.0
    }
}

/// Indices ordered by descending probability, ties toward the lower index.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

fn predicted_set(probs: &[f64], tau: f64, rule: F1Rule) -> Vec<usize> {
    match rule {
        F1Rule::Cumulative => {
            let order = ranked(probs);
            let mut cum = 0.0;
            let mut out = Vec::new();
            for &i in &order {
                out.push(i);
                cum += probs[i];
                if cum >= tau - 1e-9 {
                    return out;
                }
            }
            out
        }
        F1Rule::PerNode => (0..probs.len()).filter(|&i| probs[i] >= tau).collect(),
    }
}

/// Set F1 between the thresholded prediction and the gold answers.
pub fn f1_at_threshold(probs: &[f64], gold: &[usize], tau: f64, rule: F1Rule) -> f64 {
    if probs.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let pred = predicted_set(probs, tau, rule);
    let tp = pred.iter().filter(|i| gold.contains(i)).count();
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / pred.len() as f64;
    let recall = tp as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Clone, Debug)]
pub struct QuestionScore {
    pub qid: String,
    pub hits1: f64,
    pub f1: f64,
    /// True when no gold answer landed in the subgraph; both metrics are 0.
    pub unanswerable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub hits1: f64,
    pub f1: f64,
    /// Total questions, unanswerable ones included (they score 0).
    pub total: usize,
    pub unanswerable: usize,
    pub rows: Vec<QuestionScore>,
}

/// Score every instance with dropout disabled. Questions whose subgraph
/// misses all gold answers count as zeros rather than being dropped.
pub fn evaluate(
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    instances: &[QuestionInstance],
    tau: f64,
    rule: F1Rule,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(instances.len());
    let mut unanswerable = 0usize;
    for inst in instances {
        let gold = inst.answer_locals();
        if gold.is_empty() {
            unanswerable += 1;
            rows.push(QuestionScore {
                qid: inst.qid.clone(),
                hits1: 0.0,
                f1: 0.0,
                unanswerable: true,
            });
            continue;
        }
        let mut tape = Tape::inference();
        let fwd = forward_question(&mut tape, store, params, cfg, &inst.tokens, &inst.subgraph)
            .map_err(|e| Error::NumericFailure { qid: inst.qid.clone(), detail: e.to_string() })?;
        let probs = tape.value(fwd.p_out).data();
        rows.push(QuestionScore {
            qid: inst.qid.clone(),
            hits1: hits_at_1(probs, &gold),
            f1: f1_at_threshold(probs, &gold, tau, rule),
            unanswerable: false,
        });
    }
    let total = rows.len();
    let denom = total.max(1) as f64;
    let hits1 = rows.iter().map(|r| r.hits1).sum::<f64>() / denom;
    let f1 = rows.iter().map(|r| r.f1).sum::<f64>() / denom;
    Ok(MetricsReport { hits1, f1, total, unanswerable, rows })
}

/// Order- and value-sensitive digest of every parameter tensor; lets tests
/// prove evaluation never mutates the model.
pub fn param_hash(store: &ParamStore) -> String {
    let mut hasher = Sha256::new();
    for (_, name, tensor) in store.iter() {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for &v in tensor.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One sweep cell for the robustness matrix.
#[derive(Clone, Debug)]
pub struct MatrixRow {
    pub keep_ratio: f64,
    pub train_frac: f64,
    pub t_stages: usize,
    pub k_instructions: usize,
    pub l_layers: usize,
    pub hits1: f64,
    pub f1: f64,
    pub seed: u64,
}

pub fn write_matrix_csv(path: &Path, rows: &[MatrixRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "keep_ratio,train_frac,T,K,L,hits1,f1,seed")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{:.6},{:.6},{}",
            r.keep_ratio, r.train_frac, r.t_stages, r.k_instructions, r.l_layers, r.hits1, r.f1,
            r.seed
        )?;
    }
    Ok(())
}
