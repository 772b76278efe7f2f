//! The subcommands: dataset generation, training, evaluation, single-question
//! inference with stage traces, experiment matrices, and benchmark conversion.

use std::path::{Path, PathBuf};

use rearev_core::dataset::{resolve_instances, Dataset, QuestionInstance};
use rearev_core::encoder::TokenVocab;
use rearev_core::eval::{evaluate, write_matrix_csv, MatrixRow};
use rearev_core::kg::KnowledgeGraph;
use rearev_core::metaqa::{self, ConvertConfig};
use rearev_core::model::{forward_question, ModelConfig, ModelParams};
use rearev_core::rng::DetRng;
use rearev_core::subgraph::{
    extended_relation_count, extract_subgraph_ppr, read_cache, Subgraph,
};
use rearev_core::synth::{emit_dataset, generate_kg, generate_questions};
use rearev_core::tensor::{ParamStore, Tape};
use rearev_core::train::{
    checkpoint_config, load_checkpoint, save_checkpoint_with_meta, train, BestInfo, VocabHashes,
};
use rearev_core::{Error, Result};
use serde_json::json;

use crate::config::Resolved;

/// A dataset directory loaded through the ordinary readers.
pub struct Loaded {
    pub kg: KnowledgeGraph,
    pub vocab: TokenVocab,
    pub rels_ext: usize,
    pub train: Vec<QuestionInstance>,
    pub dev: Vec<QuestionInstance>,
    pub test: Vec<QuestionInstance>,
}

impl Loaded {
    pub fn split(&self, name: &str) -> Result<&[QuestionInstance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?} (train|dev|test)"))),
        }
    }

    pub fn hashes(&self) -> VocabHashes {
        VocabHashes {
            entity: self.kg.entities.sha256_hex(),
            relation: self.kg.relations.sha256_hex(),
            token: self.vocab.sha256_hex(),
        }
    }
}

pub fn load_data_dir(dir: &Path) -> Result<Loaded> {
    let (kg, _) = KnowledgeGraph::load_facts(dir.join("facts.tsv"))?;
    let vocab = TokenVocab::load(dir.join("vocab.txt"))?;
    let subs = read_cache(dir.join("subgraphs.jsonl"))?;
    let mut splits = Vec::with_capacity(3);
    for name in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        let ds = Dataset::load_jsonl(dir.join(name))?;
        splits.push(resolve_instances(&ds, &kg, &vocab, subs.clone())?);
    }
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let rels_ext = extended_relation_count(kg.num_relations());
    Ok(Loaded { kg, vocab, rels_ext, train, dev, test })
}

/// Deterministically keep `frac` of the instances (question order preserved).
fn subsample(instances: Vec<QuestionInstance>, frac: f64, seed: u64) -> Vec<QuestionInstance> {
    if frac >= 1.0 {
        return instances;
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut rng = DetRng::seed_from_u64(DetRng::derive_seed(seed, &[0xf7ac]));
    rng.shuffle(&mut order);
    let keep = ((frac * instances.len() as f64).ceil() as usize).clamp(1, instances.len());
    let mut picked = order[..keep].to_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| instances[i].clone()).collect()
}

fn write_stamped_json(path: &Path, stamp: serde_json::Value, body: serde_json::Value) -> Result<()> {
    let mut doc = stamp;
    doc["report"] = body;
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn gen_data(res: &Resolved, out: &Path) -> Result<()> {
    let gen = res.cfg.gen_config()?;
    let world = generate_kg(&gen)?;
    let records = generate_questions(&world, &gen)?;
    let report = emit_dataset(&world, &records, &gen, out)?;
    write_stamped_json(&out.join("report.json"), res.stamp(), serde_json::to_value(&report)?)?;
    println!(
        "wrote {}: {} train / {} dev / {} test questions, {}/{} facts kept, coverage {:.4}",
        out.display(),
        report.n_train,
        report.n_dev,
        report.n_test,
        report.kept_facts,
        report.total_facts,
        report.coverage
    );
    Ok(())
}

pub fn train_cmd(
    res: &Resolved,
    data_dir: &Path,
    ckpt: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let loaded = load_data_dir(data_dir)?;
    let train_set = subsample(loaded.train.clone(), res.cfg.train_frac, res.cfg.seed);
    println!(
        "training on {} of {} questions ({} dev), d={} T={} K={} L={} mode={}",
        train_set.len(),
        loaded.train.len(),
        loaded.dev.len(),
        res.cfg.d,
        res.cfg.t,
        res.cfg.k,
        res.cfg.l,
        res.cfg.mode
    );

    let cfg = res.cfg.model_config(loaded.vocab.len(), loaded.rels_ext)?;
    let mut store = ParamStore::new();
    let params = ModelParams::register(&mut store, &cfg)?;
    let mut tcfg = res.cfg.train_config();
    tcfg.log_path = log.map(Path::to_path_buf);

    let report = train(&mut store, &params, &cfg, &train_set, &loaded.dev, &tcfg)?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}: loss {:.4}  val hits@1 {:.4}  val f1 {:.4}  skipped {}",
            e.epoch, e.train_loss, e.val_hits1, e.val_f1, e.skipped
        );
    }

    save_checkpoint_with_meta(
        ckpt,
        &store,
        &cfg,
        &loaded.hashes(),
        Some(BestInfo { epoch: report.best_epoch, val_hits1: report.best_val_hits1 }),
        Some(res.stamp()),
    )?;
    if let Some(log_path) = log {
        write_stamped_json(
            &log_path.with_extension("meta.json"),
            res.stamp(),
            json!({"log": log_path.display().to_string()}),
        )?;
    }
    println!(
        "best epoch {} (val hits@1 {:.4}); checkpoint {}",
        report.best_epoch,
        report.best_val_hits1,
        ckpt.display()
    );
    Ok(())
}

/// Register a store from the checkpoint's own model config and load it,
/// verifying the dataset vocabularies it was trained against.
fn load_model(ckpt: &Path, loaded: &Loaded) -> Result<(ModelConfig, ParamStore, ModelParams)> {
    let cfg = checkpoint_config(ckpt)?;
    if cfg.vocab_size != loaded.vocab.len() || cfg.num_relations_ext != loaded.rels_ext {
        return Err(Error::Incompatible(format!(
            "checkpoint built for vocab {} / relations {}, dataset has {} / {}",
            cfg.vocab_size,
            cfg.num_relations_ext,
            loaded.vocab.len(),
            loaded.rels_ext
        )));
    }
    let mut store = ParamStore::new();
    let params = ModelParams::register(&mut store, &cfg)?;
    let manifest = load_checkpoint(ckpt, &mut store)?;
    let expect = loaded.hashes();
    if manifest.vocab_hashes != VocabHashes::default() && manifest.vocab_hashes != expect {
        return Err(Error::Incompatible(
            "checkpoint was trained against a different dataset directory \
             (vocabulary digests differ)"
                .into(),
        ));
    }
    Ok((cfg, store, params))
}

pub fn eval_cmd(
    res: &Resolved,
    data_dir: &Path,
    ckpt: &Path,
    split: &str,
    out: Option<&Path>,
) -> Result<()> {
    let loaded = load_data_dir(data_dir)?;
    let (cfg, store, params) = load_model(ckpt, &loaded)?;
    let instances = loaded.split(split)?;
    let report = evaluate(&store, &params, &cfg, instances, res.cfg.tau, res.cfg.f1_rule()?)?;
    println!(
        "{split}: hits@1 {:.4}  f1 {:.4}  ({} questions, {} unanswerable)",
        report.hits1, report.f1, report.total, report.unanswerable
    );
    if let Some(path) = out {
        write_stamped_json(
            path,
            res.stamp(),
            json!({
                "split": split,
                "hits1": report.hits1,
                "f1": report.f1,
                "total": report.total,
                "unanswerable": report.unanswerable,
            }),
        )?;
    }
    Ok(())
}

fn top_k(p: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, p[i])).collect()
}

pub struct InferTarget {
    pub qid: Option<String>,
    pub text: Option<String>,
    pub seeds: Vec<String>,
}

pub fn infer_cmd(
    res: &Resolved,
    data_dir: &Path,
    ckpt: &Path,
    target: &InferTarget,
    top: usize,
    trace: bool,
) -> Result<()> {
    let loaded = load_data_dir(data_dir)?;
    let (cfg, store, params) = load_model(ckpt, &loaded)?;

    let (label, tokens, sub): (String, Vec<u32>, Subgraph) = match (&target.qid, &target.text) {
        (Some(qid), _) => {
            let inst = loaded
                .train
                .iter()
                .chain(loaded.dev.iter())
                .chain(loaded.test.iter())
                .find(|i| &i.qid == qid)
                .ok_or_else(|| Error::UnknownQid(qid.clone()))?;
            (qid.clone(), inst.tokens.clone(), inst.subgraph.clone())
        }
        (None, Some(text)) => {
            if target.seeds.is_empty() {
                return Err(Error::NoSeeds);
            }
            let seed_ids: Vec<u32> = target
                .seeds
                .iter()
                .map(|s| {
                    loaded.kg.entities.get(s).ok_or_else(|| Error::UnknownEntity(s.clone()))
                })
                .collect::<Result<_>>()?;
            let sub = extract_subgraph_ppr(&loaded.kg, &seed_ids, res.cfg.m, 0.15, 30)?;
            (format!("ad-hoc: {text}"), loaded.vocab.encode(text)?, sub)
        }
        (None, None) => {
            return Err(Error::Config("pass --qid, or --text with --seeds".into()))
        }
    };

    let mut tape = Tape::inference();
    let fwd = forward_question(&mut tape, &store, &params, &cfg, &tokens, &sub)?;
    let name = |local: usize| loaded.kg.entities.name(sub.global_of(local as u32));

    println!("question {label}");
    if trace {
        for (t, stage) in fwd.stages.iter().enumerate() {
            let ranked = top_k(&stage.final_p, top);
            let line: Vec<String> = ranked
                .iter()
                .map(|(i, p)| format!("{} {:.4}", name(*i), p))
                .collect();
            println!("stage {t}: {}", line.join("  "));
        }
    }
    println!("answers:");
    for (i, p) in top_k(tape.value(fwd.p_out).data(), top) {
        println!("  {} {:.4}", name(i), p);
    }
    Ok(())
}

/// Train/evaluate one cell per (kg-keep, T, seed): a fresh corpus per keep
/// ratio, a fresh model per cell, Hits@1/F1 on the test split.
pub fn matrix_cmd(
    res: &Resolved,
    out_csv: &Path,
    keeps: &[f64],
    stages: &[usize],
    seeds: &[u64],
) -> Result<()> {
    if keeps.is_empty() || stages.is_empty() || seeds.is_empty() {
        return Err(Error::Config("matrix needs at least one keep, stage, and seed".into()));
    }
    let work = out_csv
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .join("matrix-data");
    let mut rows = Vec::new();
    for &keep in keeps {
        let mut gen = res.cfg.gen_config()?;
        gen.keep_ratio = keep;
        let dir = work.join(format!("keep-{keep}"));
        let world = generate_kg(&gen)?;
        let records = generate_questions(&world, &gen)?;
        let report = emit_dataset(&world, &records, &gen, &dir)?;
        let loaded = load_data_dir(&dir)?;
        println!("keep {keep}: corpus coverage {:.4}", report.coverage);

        for &t in stages {
            for &seed in seeds {
                let mut run = res.cfg.clone();
                run.t = t;
                run.seed = seed;
                let cfg = run.model_config(loaded.vocab.len(), loaded.rels_ext)?;
                let mut store = ParamStore::new();
                let params = ModelParams::register(&mut store, &cfg)?;
                let train_set = subsample(loaded.train.clone(), run.train_frac, seed);
                let tcfg = run.train_config();
                train(&mut store, &params, &cfg, &train_set, &loaded.dev, &tcfg)?;
                let m =
                    evaluate(&store, &params, &cfg, &loaded.test, run.tau, run.f1_rule()?)?;
                println!(
                    "keep {keep} T={t} seed {seed}: test hits@1 {:.4} f1 {:.4}",
                    m.hits1, m.f1
                );
                rows.push(MatrixRow {
                    keep_ratio: keep,
                    train_frac: run.train_frac,
                    t_stages: t,
                    k_instructions: run.k,
                    l_layers: run.l,
                    hits1: m.hits1,
                    f1: m.f1,
                    seed,
                });
            }
        }
    }
    write_matrix_csv(out_csv, &rows)?;
    write_stamped_json(
        &out_csv.with_extension("meta.json"),
        res.stamp(),
        json!({"rows": rows.len(), "csv": out_csv.display().to_string()}),
    )?;
    println!("wrote {} rows to {}", rows.len(), out_csv.display());
    Ok(())
}

pub struct MetaqaPaths {
    pub kb: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

pub fn convert_metaqa(res: &Resolved, paths: &MetaqaPaths, out: &Path) -> Result<()> {
    let cfg = ConvertConfig {
        m: res.cfg.m,
        train_frac: res.cfg.train_frac,
        seed: res.cfg.seed,
        ..ConvertConfig::default()
    };
    let report = metaqa::convert(
        &paths.kb,
        [&paths.train, &paths.dev, &paths.test],
        out,
        &cfg,
    )?;
    write_stamped_json(&out.join("report.json"), res.stamp(), serde_json::to_value(&report)?)?;
    println!(
        "wrote {}: {} train / {} dev / {} test questions over {} facts \
         ({} entities, {} relations), coverage {:.4}",
        out.display(),
        report.n_train,
        report.n_dev,
        report.n_test,
        report.facts,
        report.entities,
        report.relations,
        report.coverage
    );
    if report.unseeded > 0 {
        println!("note: {} questions name no entity present in the graph", report.unseeded);
    }
    Ok(())
}
