//! KL-divergence training over resolved question instances, with per-epoch
//! validation, best-model tracking, CSV logging, and checkpoint files
//! (JSON manifest plus a little-endian f64 blob).

use std::io::{BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::QuestionInstance;
use crate::eval::{evaluate, F1Rule};
use crate::model::{forward_question, question_loss, ModelConfig, ModelParams};
use crate::rng::DetRng;
use crate::tensor::{adam_step, stable_sum, AdamConfig, AdamState, Gradients, ParamStore, Tape};
use crate::{Error, Result};

/// Uniform distribution over the gold answers inside the subgraph; `None`
/// when no gold answer survived extraction (the question is skipped).
pub fn make_target(gold_locals: &[usize], n_nodes: usize) -> Option<Vec<f64>> {
    if gold_locals.is_empty() {
        return None;
    }
    let mass = 1.0 / gold_locals.len() as f64;
    let mut t = vec![0.0; n_nodes];
    for &g in gold_locals {
        t[g] = mass;
    }
    Some(t)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Threshold for the validation F1.
    pub tau: f64,
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Load the best-validation parameters back into the store at the end.
    pub restore_best: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
            tau: 0.95,
            log_path: None,
            checkpoint_path: None,
            restore_best: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0,1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hits1: f64,
    pub val_f1: f64,
    pub skipped: usize,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_hits1: f64,
}

/// One question's loss on its own tape; gradients land in `acc`.
fn question_step(
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    inst: &QuestionInstance,
    target: &[f64],
    tape_seed: u64,
    acc: &mut Gradients,
) -> Result<f64> {
    let wrap = |e: Error| Error::NumericFailure { qid: inst.qid.clone(), detail: e.to_string() };
    let mut tape = Tape::new(tape_seed, true);
    let fwd =
        forward_question(&mut tape, store, params, cfg, &inst.tokens, &inst.subgraph)
            .map_err(wrap)?;
    let loss = question_loss(&mut tape, fwd.scores, target).map_err(wrap)?;
    let value = tape.value(loss).scalar_value();
    let grads = tape.backward(loss, store).map_err(wrap)?;
    acc.accumulate(&grads);
    Ok(value)
}

/// Minibatch training loop. Questions with no in-subgraph answer are skipped
/// (and counted); each surviving question runs on its own tape; batch
/// gradients are averaged before one Adam step.
pub fn train(
    store: &mut ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    train_set: &[QuestionInstance],
    val_set: &[QuestionInstance],
    tcfg: &TrainConfig,
) -> Result<TrainReport> {
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }

    let mut log = match &tcfg.log_path {
        Some(p) => {
            let mut w = BufWriter::new(std::fs::File::create(p)?);
            writeln!(w, "epoch,train_loss,val_hits1,val_f1,skipped")?;
            Some(w)
        }
        None => None,
    };

    let adam_cfg = AdamConfig::with_lr(tcfg.lr);
    let mut adam = AdamState::new(store);
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    let mut best_epoch = 0usize;
    // Selection key: validation hits@1, ties broken by training loss. Coarse
    // validation splits plateau early, and among epochs the validation set
    // cannot distinguish, the one fitting the training data best is the one
    // worth keeping — it is also what makes overfit sanity checks meaningful.
    let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_flat: Option<Vec<f64>> = None;

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffler =
            DetRng::seed_from_u64(DetRng::derive_seed(tcfg.seed, &[epoch as u64, 0x5eed]));
        shuffler.shuffle(&mut order);

        let mut losses = Vec::with_capacity(train_set.len());
        let mut skipped = 0usize;

        for batch in order.chunks(tcfg.batch_size) {
            let mut acc = Gradients::zeros(store);
            let mut used = 0usize;
            for &qidx in batch {
                let inst = &train_set[qidx];
                let gold = inst.answer_locals();
                let Some(target) = make_target(&gold, inst.subgraph.n_nodes()) else {
                    skipped += 1;
                    continue;
                };
                let tape_seed = DetRng::derive_seed(tcfg.seed, &[epoch as u64, qidx as u64]);
                losses.push(question_step(store, params, cfg, inst, &target, tape_seed, &mut acc)?);
                used += 1;
            }
            if used > 0 {
                acc.scale(1.0 / used as f64);
                adam_step(store, &acc, &mut adam, &adam_cfg)?;
            }
        }

        let train_loss = if losses.is_empty() {
            return Err(Error::Data("every training question lacked in-subgraph answers".into()));
        } else {
            stable_sum(&losses) / losses.len() as f64
        };

        let (val_hits1, val_f1) = if val_set.is_empty() {
            (0.0, 0.0)
        } else {
            let report = evaluate(store, params, cfg, val_set, tcfg.tau, F1Rule::Cumulative)?;
            (report.hits1, report.f1)
        };

        let key = (val_hits1, -train_loss);
        if key > best_key {
            best_key = key;
            best_epoch = epoch;
            best_flat = Some(store.to_flat());
        }

        if let Some(w) = log.as_mut() {
            writeln!(w, "{epoch},{train_loss:.6},{val_hits1:.6},{val_f1:.6},{skipped}")?;
            w.flush()?;
        }
        epochs.push(EpochStats { epoch, train_loss, val_hits1, val_f1, skipped });
    }

    if tcfg.restore_best {
        if let Some(flat) = &best_flat {
            store.load_flat(flat)?;
        }
    }
    if let Some(path) = &tcfg.checkpoint_path {
        // hashes are the caller's concern; record training provenance only
        save_checkpoint(
            path,
            store,
            cfg,
            &VocabHashes::default(),
            Some(BestInfo { epoch: best_epoch, val_hits1: best_key.0.max(0.0) }),
        )?;
    }

    Ok(TrainReport { epochs, best_epoch, best_val_hits1: best_key.0.max(0.0) })
}

/// Digests of the vocabularies a checkpoint was trained against.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabHashes {
    pub entity: String,
    pub relation: String,
    pub token: String,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BestInfo {
    pub epoch: usize,
    pub val_hits1: f64,
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    blob: String,
    config: ModelConfig,
    vocab_hashes: VocabHashes,
    best: Option<BestInfo>,
    /// Caller-supplied provenance (resolved run configuration, build id, …).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
    params: Vec<ManifestParam>,
}

const MANIFEST_FORMAT: &str = "rearev-checkpoint-v1";

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Write `<path>` (JSON manifest) and a sibling `.bin` blob of all parameter
/// values, little-endian f64, in registration order.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    cfg: &ModelConfig,
    hashes: &VocabHashes,
    best: Option<BestInfo>,
) -> Result<()> {
    save_checkpoint_with_meta(path, store, cfg, hashes, best, None)
}

/// Like [`save_checkpoint`], with an arbitrary JSON `meta` block embedded in
/// the manifest for provenance (run configuration, build id, …).
pub fn save_checkpoint_with_meta(
    path: &Path,
    store: &ParamStore,
    cfg: &ModelConfig,
    hashes: &VocabHashes,
    best: Option<BestInfo>,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let blob = blob_path(path);
    let mut params = Vec::new();
    let mut offset = 0usize;
    for (_, name, tensor) in store.iter() {
        params.push(ManifestParam {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.numel(),
        });
        offset += tensor.numel();
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        dtype: "f64".to_string(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "params.bin".into()),
        config: *cfg,
        vocab_hashes: hashes.clone(),
        best,
        meta,
        params,
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;

    let flat = store.to_flat();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(&blob)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub config: ModelConfig,
    pub vocab_hashes: VocabHashes,
    pub best: Option<BestInfo>,
    pub meta: Option<serde_json::Value>,
}

/// Read only the model configuration from a checkpoint manifest, so a caller
/// can register a matching parameter store before [`load_checkpoint`].
pub fn checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Incompatible(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    Ok(manifest.config)
}

/// Load a checkpoint into a store whose registration must match the manifest
/// name-for-name and shape-for-shape.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<LoadedCheckpoint> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Incompatible(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    if manifest.dtype != "f64" {
        return Err(Error::Incompatible(format!("unsupported dtype {:?}", manifest.dtype)));
    }

    let registered: Vec<(String, Vec<usize>, usize)> = store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), t.numel()))
        .collect();
    if registered.len() != manifest.params.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} parameters, store registered {}",
            manifest.params.len(),
            registered.len()
        )));
    }
    let mut expected_offset = 0usize;
    for (mp, (name, shape, numel)) in manifest.params.iter().zip(&registered) {
        if &mp.name != name || &mp.shape != shape || mp.len != *numel || mp.offset != expected_offset
        {
            return Err(Error::Incompatible(format!(
                "parameter mismatch at {:?}: manifest ({:?}, offset {}, len {}) vs store {:?}",
                mp.name, mp.shape, mp.offset, mp.len, shape
            )));
        }
        expected_offset += numel;
    }

    let blob = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let mut bytes = Vec::new();
    std::fs::File::open(&blob)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected_offset * 8 {
        return Err(Error::Incompatible(format!(
            "blob {} holds {} bytes, manifest expects {}",
            blob.display(),
            bytes.len(),
            expected_offset * 8
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    store.load_flat(&flat)?;

    Ok(LoadedCheckpoint {
        config: manifest.config,
        vocab_hashes: manifest.vocab_hashes,
        best: manifest.best,
        meta: manifest.meta,
    })
}
