//! Deterministic movie-domain benchmark generator: a typed random KG,
//! templated 1/2/3-hop, order-sensitive, and conjunction questions with a
//! set-traversal answer oracle, and dataset emission (facts, splits,
//! per-question subgraphs, coverage).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, QuestionRecord};
use crate::encoder::TokenVocab;
use crate::kg::KnowledgeGraph;
use crate::rng::DetRng;
use crate::subgraph::{coverage, extract_subgraph_ppr, write_cache, Subgraph};
use crate::{Error, Result};

pub const REL_DIRECTED: &str = "directed_by";
pub const REL_STARRED: &str = "starred_actors";
pub const REL_WRITTEN: &str = "written_by";
pub const REL_YEAR: &str = "release_year";
pub const REL_GENRE: &str = "has_genre";

const GENRE_NAMES: [&str; 8] =
    ["action", "comedy", "drama", "horror", "sci_fi", "romance", "thriller", "documentary"];

/// Emission-time relation renames; the canonical name never appears in the
/// emitted files for an aliased relation.
const ALIASES: [(&str, &str); 5] = [
    (REL_DIRECTED, "helmed_by"),
    (REL_STARRED, "cast_includes"),
    (REL_WRITTEN, "scripted_by"),
    (REL_YEAR, "debut_year"),
    (REL_GENRE, "in_category"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub relation: String,
    /// False: follow src→dst; true: follow dst→src.
    pub inverse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainProgram {
    pub seed: String,
    pub steps: Vec<Step>,
}

/// Executable meaning of a question: a relation chain from one seed, the
/// intersection of exactly two such chains, or one chain minus another
/// ("who *else* wrote for the director of X" subtracts X's own writers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogicalForm {
    Chain { seed: String, steps: Vec<Step> },
    Conjunction { branches: (ChainProgram, ChainProgram) },
    Difference { base: ChainProgram, minus: ChainProgram },
}

impl LogicalForm {
    pub fn validate(&self) -> Result<()> {
        let check = |steps: &[Step]| {
            if steps.len() > 3 {
                Err(Error::Data(format!("relation program has {} steps, max 3", steps.len())))
            } else {
                Ok(())
            }
        };
        match self {
            LogicalForm::Chain { steps, .. } => check(steps),
            LogicalForm::Conjunction { branches } => {
                check(&branches.0.steps)?;
                check(&branches.1.steps)
            }
            LogicalForm::Difference { base, minus } => {
                check(&base.steps)?;
                check(&minus.steps)
            }
        }
    }

    /// Rewrite relation names through an alias map (missing names pass
    /// through untouched).
    pub fn with_aliases(&self, map: &BTreeMap<String, String>) -> LogicalForm {
        let fix = |steps: &[Step]| {
            steps
                .iter()
                .map(|s| Step {
                    relation: map.get(&s.relation).cloned().unwrap_or_else(|| s.relation.clone()),
                    inverse: s.inverse,
                })
                .collect()
        };
        match self {
            LogicalForm::Chain { seed, steps } => {
                LogicalForm::Chain { seed: seed.clone(), steps: fix(steps) }
            }
            LogicalForm::Conjunction { branches } => LogicalForm::Conjunction {
                branches: (
                    ChainProgram { seed: branches.0.seed.clone(), steps: fix(&branches.0.steps) },
                    ChainProgram { seed: branches.1.seed.clone(), steps: fix(&branches.1.steps) },
                ),
            },
            LogicalForm::Difference { base, minus } => LogicalForm::Difference {
                base: ChainProgram { seed: base.seed.clone(), steps: fix(&base.steps) },
                minus: ChainProgram { seed: minus.seed.clone(), steps: fix(&minus.steps) },
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub movies: usize,
    pub directors: usize,
    pub actors: usize,
    pub writers: usize,
    pub years: usize,
    pub genres: usize,
    /// Total questions, spread round-robin over the active templates.
    pub questions: usize,
    /// Restrict generation to these question types (1hop, 2hop, 2hop_order,
    /// 3hop, conjunction). None = all templates.
    pub qtypes: Option<Vec<String>>,
    pub max_answers: usize,
    /// Per-relation probability of emitting under an alias name.
    pub alias_prob: f64,
    /// Fraction of facts surviving into the emitted KG.
    pub keep_ratio: f64,
    /// PPR budget (top-m nodes) for the per-question subgraphs.
    pub subgraph_nodes: usize,
    pub ppr_alpha: f64,
    pub ppr_iters: usize,
    pub train_ratio: f64,
    pub dev_ratio: f64,
    pub seed: u64,
}

impl GenConfig {
    /// Pool sizes scaled so multi-hop questions stay connected and answer
    /// sets stay small.
    pub fn for_movies(movies: usize) -> Self {
        GenConfig {
            movies,
            directors: (movies / 5).max(3),
            actors: movies.max(5),
            writers: (movies / 4).max(3),
            years: (movies / 8).clamp(5, 70),
            genres: 8,
            questions: movies * 10,
            qtypes: None,
            max_answers: 20,
            alias_prob: 0.0,
            keep_ratio: 1.0,
            subgraph_nodes: 200,
            ppr_alpha: 0.15,
            ppr_iters: 30,
            train_ratio: 0.8,
            dev_ratio: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.movies == 0 {
            return Err(Error::Config("need at least one movie".into()));
        }
        if self.directors == 0 || self.actors < 2 || self.writers == 0 || self.years == 0
            || self.genres == 0
        {
            return Err(Error::Config("every entity pool needs members (actors ≥ 2)".into()));
        }
        if self.questions == 0 {
            return Err(Error::Config("need at least one question".into()));
        }
        if self.max_answers == 0 {
            return Err(Error::Config("answer cap must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alias_prob) {
            return Err(Error::Config(format!("alias_prob must be in [0,1], got {}", self.alias_prob)));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!("keep_ratio must be in (0,1], got {}", self.keep_ratio)));
        }
        if self.train_ratio < 0.0 || self.dev_ratio < 0.0
            || self.train_ratio + self.dev_ratio > 1.0 + 1e-9
        {
            return Err(Error::Config("split ratios must be non-negative and sum within 1".into()));
        }
        if self.subgraph_nodes == 0 {
            return Err(Error::Config("subgraph budget must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        let mut cfg = GenConfig::for_movies(500);
        cfg.questions = 5000;
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pool {
    Movie,
    Director,
    Actor,
    Writer,
    Year,
}

/// The canonical generated KG plus typed entity-id pools.
pub struct World {
    pub kg: KnowledgeGraph,
    pub movies: Vec<u32>,
    pub directors: Vec<u32>,
    pub actors: Vec<u32>,
    pub writers: Vec<u32>,
    pub years: Vec<u32>,
    pub genres: Vec<u32>,
}

impl World {
    fn pool(&self, p: Pool) -> &[u32] {
        match p {
            Pool::Movie => &self.movies,
            Pool::Director => &self.directors,
            Pool::Actor => &self.actors,
            Pool::Writer => &self.writers,
            Pool::Year => &self.years,
        }
    }
}

/// Draw `k` distinct indices below `n` (all of them when k ≥ n).
fn distinct(rng: &mut DetRng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.below(n);
        if seen.insert(i) {
            out.push(i);
        }
    }
    out
}

/// Typed random KG: every movie gets exactly 1 year and genre, 1–2
/// directors, 2–5 actors, and 1–3 writers. Deterministic per seed.
pub fn generate_kg(cfg: &GenConfig) -> Result<World> {
    cfg.validate()?;
    let mut kg = KnowledgeGraph::new();
    let mut rng = DetRng::seed_from_u64(DetRng::derive_seed(cfg.seed, &[0]));

    let movies: Vec<u32> =
        (0..cfg.movies).map(|i| kg.entities.intern(&format!("movie_{i}"))).collect();
    let directors: Vec<u32> =
        (0..cfg.directors).map(|i| kg.entities.intern(&format!("director_{i}"))).collect();
    let actors: Vec<u32> =
        (0..cfg.actors).map(|i| kg.entities.intern(&format!("actor_{i}"))).collect();
    let writers: Vec<u32> =
        (0..cfg.writers).map(|i| kg.entities.intern(&format!("writer_{i}"))).collect();
    let years: Vec<u32> =
        (0..cfg.years).map(|i| kg.entities.intern(&(1950 + i).to_string())).collect();
    let genres: Vec<u32> = (0..cfg.genres)
        .map(|i| {
            let name = GENRE_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("genre_{i}"));
            kg.entities.intern(&name)
        })
        .collect();

    for rel in [REL_DIRECTED, REL_STARRED, REL_WRITTEN, REL_YEAR, REL_GENRE] {
        kg.relations.intern(rel);
    }

    for m in 0..cfg.movies {
        let movie = format!("movie_{m}");
        let n_dir = 1 + rng.below(2);
        for i in distinct(&mut rng, cfg.directors, n_dir) {
            kg.add_fact(&movie, REL_DIRECTED, &format!("director_{i}"));
        }
        let n_act = 2 + rng.below(4);
        for i in distinct(&mut rng, cfg.actors, n_act) {
            kg.add_fact(&movie, REL_STARRED, &format!("actor_{i}"));
        }
        let n_wri = 1 + rng.below(3);
        for i in distinct(&mut rng, cfg.writers, n_wri) {
            kg.add_fact(&movie, REL_WRITTEN, &format!("writer_{i}"));
        }
        let y = rng.below(cfg.years);
        kg.add_fact(&movie, REL_YEAR, &(1950 + y).to_string());
        let g = rng.below(cfg.genres);
        let genre = kg.entities.name(genres[g]).to_string();
        kg.add_fact(&movie, REL_GENRE, &genre);
    }

    Ok(World { kg, movies, directors, actors, writers, years, genres })
}

/// Fact adjacency split by direction, for set traversal.
pub struct OracleIndex {
    fwd: HashMap<(u32, u32), Vec<u32>>,
    inv: HashMap<(u32, u32), Vec<u32>>,
}

impl OracleIndex {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let mut fwd: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        let mut inv: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for f in &kg.facts {
            fwd.entry((f.r, f.s)).or_default().push(f.o);
            inv.entry((f.r, f.o)).or_default().push(f.s);
        }
        OracleIndex { fwd, inv }
    }

    fn neighbors(&self, rel: u32, node: u32, inverse: bool) -> &[u32] {
        let map = if inverse { &self.inv } else { &self.fwd };
        map.get(&(rel, node)).map(Vec::as_slice).unwrap_or(&[])
    }

    fn traverse(&self, kg: &KnowledgeGraph, seed: &str, steps: &[Step]) -> BTreeSet<u32> {
        let Some(start) = kg.entities.get(seed) else {
            return BTreeSet::new();
        };
        let mut current = BTreeSet::from([start]);
        for step in steps {
            let Some(rel) = kg.relations.get(&step.relation) else {
                return BTreeSet::new();
            };
            let mut next = BTreeSet::new();
            for &v in &current {
                next.extend(self.neighbors(rel, v, step.inverse));
            }
            current = next;
        }
        current
    }

    /// Breadth-first set traversal; conjunction branches intersect. Unknown
    /// seeds or relations yield the empty set.
    pub fn answers(&self, kg: &KnowledgeGraph, lf: &LogicalForm) -> BTreeSet<u32> {
        debug_assert!(lf.validate().is_ok());
        match lf {
            LogicalForm::Chain { seed, steps } => self.traverse(kg, seed, steps),
            LogicalForm::Conjunction { branches } => {
                let a = self.traverse(kg, &branches.0.seed, &branches.0.steps);
                let b = self.traverse(kg, &branches.1.seed, &branches.1.steps);
                a.intersection(&b).copied().collect()
            }
            LogicalForm::Difference { base, minus } => {
                let a = self.traverse(kg, &base.seed, &base.steps);
                let b = self.traverse(kg, &minus.seed, &minus.steps);
                a.difference(&b).copied().collect()
            }
        }
    }
}

enum Kind {
    Chain { pool: Pool, steps: &'static [(&'static str, bool)] },
    /// Branch seeds come from one anchor movie's attribute values, so the
    /// intersection is never empty.
    ConjFromMovie { rels: (&'static str, &'static str) },
    /// Chain traversal minus a shorter chain from the same seed. Subtracting
    /// the seed's own attribute values guarantees every answer sits at the
    /// full chain depth — nothing survives that a shortcut could also reach.
    ChainMinus {
        pool: Pool,
        steps: &'static [(&'static str, bool)],
        minus: &'static [(&'static str, bool)],
    },
}

struct Template {
    name: &'static str,
    qtype: &'static str,
    patterns: &'static [&'static str],
    kind: Kind,
}

fn templates() -> Vec<Template> {
    vec![
        Template {
            name: "director_of_movie",
            qtype: "1hop",
            patterns: &["who directed {0}", "who was the director of {0}"],
            kind: Kind::Chain { pool: Pool::Movie, steps: &[(REL_DIRECTED, false)] },
        },
        Template {
            name: "year_of_movie",
            qtype: "1hop",
            patterns: &["when was {0} released", "what year did {0} come out"],
            kind: Kind::Chain { pool: Pool::Movie, steps: &[(REL_YEAR, false)] },
        },
        Template {
            name: "actors_of_movie",
            qtype: "1hop",
            patterns: &["who acted in {0}", "who starred in {0}"],
            kind: Kind::Chain { pool: Pool::Movie, steps: &[(REL_STARRED, false)] },
        },
        Template {
            name: "writer_of_movie",
            qtype: "1hop",
            patterns: &["who wrote {0}", "who was the writer of {0}"],
            kind: Kind::Chain { pool: Pool::Movie, steps: &[(REL_WRITTEN, false)] },
        },
        Template {
            name: "genre_of_movie",
            qtype: "1hop",
            patterns: &["what genre is {0}", "what kind of film is {0}"],
            kind: Kind::Chain { pool: Pool::Movie, steps: &[(REL_GENRE, false)] },
        },
        Template {
            name: "movies_of_director",
            qtype: "1hop",
            patterns: &["which movies did {0} direct", "what films were directed by {0}"],
            kind: Kind::Chain { pool: Pool::Director, steps: &[(REL_DIRECTED, true)] },
        },
        Template {
            name: "movies_of_actor",
            qtype: "1hop",
            patterns: &["which movies star {0}", "what films did {0} appear in"],
            kind: Kind::Chain { pool: Pool::Actor, steps: &[(REL_STARRED, true)] },
        },
        Template {
            name: "movies_of_year",
            qtype: "1hop",
            patterns: &["which movies were released in {0}", "what films came out in {0}"],
            kind: Kind::Chain { pool: Pool::Year, steps: &[(REL_YEAR, true)] },
        },
        // order-sensitive pairs: same relation set, opposite traversal order
        Template {
            name: "directors_of_actor_movies",
            qtype: "2hop_order",
            patterns: &[
                "who directed the movies starring {0}",
                "who directed the films that {0} appeared in",
            ],
            kind: Kind::Chain {
                pool: Pool::Actor,
                steps: &[(REL_STARRED, true), (REL_DIRECTED, false)],
            },
        },
        Template {
            name: "actors_of_director_movies",
            qtype: "2hop_order",
            patterns: &[
                "who starred in the movies directed by {0}",
                "who acted in the films that {0} directed",
            ],
            kind: Kind::Chain {
                pool: Pool::Director,
                steps: &[(REL_DIRECTED, true), (REL_STARRED, false)],
            },
        },
        Template {
            name: "years_of_writer_movies",
            qtype: "2hop_order",
            patterns: &[
                "when were the movies written by {0} released",
                "what years did the films of {0} come out",
            ],
            kind: Kind::Chain {
                pool: Pool::Writer,
                steps: &[(REL_WRITTEN, true), (REL_YEAR, false)],
            },
        },
        Template {
            name: "writers_of_year_movies",
            qtype: "2hop_order",
            patterns: &[
                "who wrote the movies released in {0}",
                "who were the writers of the films from {0}",
            ],
            kind: Kind::Chain {
                pool: Pool::Year,
                steps: &[(REL_YEAR, true), (REL_WRITTEN, false)],
            },
        },
        Template {
            name: "genres_of_director_movies",
            qtype: "2hop",
            patterns: &[
                "what genres are the movies directed by {0}",
                "what kinds of films did {0} direct",
            ],
            kind: Kind::Chain {
                pool: Pool::Director,
                steps: &[(REL_DIRECTED, true), (REL_GENRE, false)],
            },
        },
        Template {
            name: "directors_of_shared_actor_movies",
            qtype: "3hop",
            patterns: &[
                "who directed the movies that share actors with {0}",
                "who directed the films starring the actors of {0}",
            ],
            kind: Kind::Chain {
                pool: Pool::Movie,
                steps: &[(REL_STARRED, false), (REL_STARRED, true), (REL_DIRECTED, false)],
            },
        },
        Template {
            name: "genres_from_own_director",
            qtype: "3hop",
            patterns: &[
                "what genres are the movies made by the director of {0}",
                "what kinds of films did the director of {0} make",
            ],
            kind: Kind::Chain {
                pool: Pool::Movie,
                steps: &[(REL_DIRECTED, false), (REL_DIRECTED, true), (REL_GENRE, false)],
            },
        },
        Template {
            name: "years_from_own_writer",
            qtype: "3hop",
            patterns: &[
                "when were the movies from the writer of {0} released",
                "what years did the films by the writer of {0} come out",
            ],
            kind: Kind::Chain {
                pool: Pool::Movie,
                steps: &[(REL_WRITTEN, false), (REL_WRITTEN, true), (REL_YEAR, false)],
            },
        },
        // exclusion variants: the seed movie's own people are subtracted, so
        // every answer is exactly three hops out — no shortcut reaches it
        Template {
            name: "other_writers_for_director",
            qtype: "3hop_excl",
            patterns: &[
                "who else wrote for the director of {0}",
                "which other writers worked with the director of {0}",
            ],
            kind: Kind::ChainMinus {
                pool: Pool::Movie,
                steps: &[(REL_DIRECTED, false), (REL_DIRECTED, true), (REL_WRITTEN, false)],
                minus: &[(REL_WRITTEN, false)],
            },
        },
        Template {
            name: "other_actors_for_director",
            qtype: "3hop_excl",
            patterns: &[
                "who else acted for the director of {0}",
                "which other actors worked with the director of {0}",
            ],
            kind: Kind::ChainMinus {
                pool: Pool::Movie,
                steps: &[(REL_DIRECTED, false), (REL_DIRECTED, true), (REL_STARRED, false)],
                minus: &[(REL_STARRED, false)],
            },
        },
        Template {
            name: "conj_director_actor",
            qtype: "conjunction",
            patterns: &[
                "which movies were directed by {0} and star {1}",
                "what films did {0} direct that {1} appeared in",
            ],
            kind: Kind::ConjFromMovie { rels: (REL_DIRECTED, REL_STARRED) },
        },
        Template {
            name: "conj_year_genre",
            qtype: "conjunction",
            patterns: &[
                "which movies from {0} are {1} films",
                "what {1} movies came out in {0}",
            ],
            kind: Kind::ConjFromMovie { rels: (REL_YEAR, REL_GENRE) },
        },
        Template {
            name: "conj_actor_genre",
            qtype: "conjunction",
            patterns: &[
                "which movies starring {0} are {1} films",
                "what {1} movies star {0}",
            ],
            kind: Kind::ConjFromMovie { rels: (REL_STARRED, REL_GENRE) },
        },
    ]
}

struct Instantiated {
    text: String,
    seeds: Vec<String>,
    answers: Vec<String>,
    lf: LogicalForm,
}

fn fill_pattern(pattern: &str, seeds: &[String]) -> String {
    let mut text = pattern.replace("{0}", &seeds[0]);
    if seeds.len() > 1 {
        text = text.replace("{1}", &seeds[1]);
    }
    text
}

fn instantiate(
    world: &World,
    oracle: &OracleIndex,
    template: &Template,
    rng: &mut DetRng,
    max_answers: usize,
) -> Result<Instantiated> {
    let kg = &world.kg;
    for _ in 0..100 {
        let (seeds, lf) = match &template.kind {
            Kind::Chain { pool, steps } => {
                let pool = world.pool(*pool);
                let seed_id = pool[rng.below(pool.len())];
                let seed = kg.entities.name(seed_id).to_string();
                let steps: Vec<Step> = steps
                    .iter()
                    .map(|&(r, inv)| Step { relation: r.to_string(), inverse: inv })
                    .collect();
                (vec![seed.clone()], LogicalForm::Chain { seed, steps })
            }
            Kind::ChainMinus { pool, steps, minus } => {
                let pool = world.pool(*pool);
                let seed_id = pool[rng.below(pool.len())];
                let seed = kg.entities.name(seed_id).to_string();
                let program = |raw: &[(&str, bool)]| ChainProgram {
                    seed: seed.clone(),
                    steps: raw
                        .iter()
                        .map(|&(r, inv)| Step { relation: r.to_string(), inverse: inv })
                        .collect(),
                };
                let lf = LogicalForm::Difference { base: program(steps), minus: program(minus) };
                (vec![seed], lf)
            }
            Kind::ConjFromMovie { rels } => {
                let anchor = world.movies[rng.below(world.movies.len())];
                let pick = |rng: &mut DetRng, rel_name: &str| -> Option<String> {
                    let rel = kg.relations.get(rel_name)?;
                    let values = oracle.neighbors(rel, anchor, false);
                    if values.is_empty() {
                        return None;
                    }
                    Some(kg.entities.name(values[rng.below(values.len())]).to_string())
                };
                let (Some(s0), Some(s1)) = (pick(rng, rels.0), pick(rng, rels.1)) else {
                    continue;
                };
                let branch = |seed: &str, rel: &str| ChainProgram {
                    seed: seed.to_string(),
                    steps: vec![Step { relation: rel.to_string(), inverse: true }],
                };
                let lf = LogicalForm::Conjunction {
                    branches: (branch(&s0, rels.0), branch(&s1, rels.1)),
                };
                (vec![s0, s1], lf)
            }
        };

        let answer_ids = oracle.answers(kg, &lf);
        if answer_ids.is_empty() || answer_ids.len() > max_answers {
            continue;
        }
        let mut answers: Vec<String> =
            answer_ids.iter().map(|&a| kg.entities.name(a).to_string()).collect();
        answers.sort();
        let pattern = template.patterns[rng.below(template.patterns.len())];
        return Ok(Instantiated { text: fill_pattern(pattern, &seeds), seeds, answers, lf });
    }
    Err(Error::TemplateExhausted(template.name.to_string()))
}

fn active_templates(cfg: &GenConfig) -> Result<Vec<Template>> {
    let all = templates();
    let Some(filter) = &cfg.qtypes else {
        return Ok(all);
    };
    let keep: Vec<Template> =
        all.into_iter().filter(|t| filter.iter().any(|q| q == t.qtype)).collect();
    if keep.is_empty() {
        return Err(Error::Config(format!("no templates match qtypes {filter:?}")));
    }
    Ok(keep)
}

/// Instantiate `cfg.questions` records, cycling round-robin through the
/// active templates. Qids are zero-padded question indices.
pub fn generate_questions(world: &World, cfg: &GenConfig) -> Result<Vec<QuestionRecord>> {
    cfg.validate()?;
    let oracle = OracleIndex::new(&world.kg);
    let temps = active_templates(cfg)?;
    let mut rng = DetRng::seed_from_u64(DetRng::derive_seed(cfg.seed, &[1]));
    (0..cfg.questions)
        .map(|i| {
            let t = &temps[i % temps.len()];
            let inst = instantiate(world, &oracle, t, &mut rng, cfg.max_answers)?;
            Ok(QuestionRecord {
                qid: format!("q{i:05}"),
                text: inst.text,
                seeds: inst.seeds,
                answers: inst.answers,
                lf: Some(inst.lf),
                qtype: Some(t.qtype.to_string()),
            })
        })
        .collect()
}

/// Pick which relations get aliased (probability `alias_prob` each).
fn choose_aliases(cfg: &GenConfig) -> BTreeMap<String, String> {
    let mut rng = DetRng::seed_from_u64(DetRng::derive_seed(cfg.seed, &[2]));
    let mut map = BTreeMap::new();
    for (canonical, alias) in ALIASES {
        if rng.chance(cfg.alias_prob) {
            map.insert(canonical.to_string(), alias.to_string());
        }
    }
    map
}

/// Rebuild a KG with relation names rewritten, preserving entity and
/// relation id order exactly (entities that lost all facts stay interned).
fn rename_relations(kg: &KnowledgeGraph, map: &BTreeMap<String, String>) -> KnowledgeGraph {
    let mut out = KnowledgeGraph::new();
    for name in kg.entities.names() {
        out.entities.intern(name);
    }
    for name in kg.relations.names() {
        let renamed = map.get(name).cloned().unwrap_or_else(|| name.to_string());
        out.relations.intern(&renamed);
    }
    for f in &kg.facts {
        let s = kg.entities.name(f.s).to_string();
        let r = map
            .get(kg.relations.name(f.r))
            .cloned()
            .unwrap_or_else(|| kg.relations.name(f.r).to_string());
        let o = kg.entities.name(f.o).to_string();
        out.add_fact(&s, &r, &o);
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct EmitReport {
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub total_facts: usize,
    pub kept_facts: usize,
    /// Fraction of questions with at least one answer inside their subgraph.
    pub coverage: f64,
    pub aliases: BTreeMap<String, String>,
}

fn split_sizes(n: usize, train_ratio: f64, dev_ratio: f64) -> (usize, usize) {
    let n_train = ((train_ratio * n as f64) + 1e-9).floor() as usize;
    let n_dev = ((dev_ratio * n as f64) + 1e-9).floor() as usize;
    (n_train.min(n), n_dev.min(n - n_train.min(n)))
}

/// Write the full dataset directory: facts.tsv (after optional fact drop
/// and relation aliasing), vocab.txt built from train texts, the three
/// split JSONL files, per-question PPR subgraphs, and a coverage report.
pub fn emit_dataset(
    world: &World,
    records: &[QuestionRecord],
    cfg: &GenConfig,
    out_dir: &Path,
) -> Result<EmitReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Data("no question records to emit".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let total_facts = world.kg.facts.len();
    let working = if cfg.keep_ratio < 1.0 {
        world.kg.drop_facts(cfg.keep_ratio, DetRng::derive_seed(cfg.seed, &[4]))?
    } else {
        world.kg.clone()
    };
    let aliases = choose_aliases(cfg);
    let working = if aliases.is_empty() { working } else { rename_relations(&working, &aliases) };
    let kept_facts = working.facts.len();
    working.save_facts(&out_dir.join("facts.tsv"))?;

    // Re-load the emitted file: its interning order (first appearance in the
    // fact stream) defines the id space a consumer reconstructs, and every id
    // written to the subgraph cache must index that space, not the
    // generator's. The two differ — the generator interns entity pools up
    // front, including entities that never land in a fact.
    let (canon, _) = KnowledgeGraph::load_facts(&out_dir.join("facts.tsv"))?;

    // alias the stored logical forms to match the emitted relation names
    let records: Vec<QuestionRecord> = records
        .iter()
        .map(|r| QuestionRecord {
            lf: r.lf.as_ref().map(|lf| lf.with_aliases(&aliases)),
            ..r.clone()
        })
        .collect();

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = DetRng::seed_from_u64(DetRng::derive_seed(cfg.seed, &[3]));
    rng.shuffle(&mut order);
    let (n_train, n_dev) = split_sizes(records.len(), cfg.train_ratio, cfg.dev_ratio);

    let pick = |idx: &[usize]| Dataset {
        records: idx.iter().map(|&i| records[i].clone()).collect(),
    };
    let train = pick(&order[..n_train]);
    let dev = pick(&order[n_train..n_train + n_dev]);
    let test = pick(&order[n_train + n_dev..]);
    train.save_jsonl(&out_dir.join("train.jsonl"))?;
    dev.save_jsonl(&out_dir.join("dev.jsonl"))?;
    test.save_jsonl(&out_dir.join("test.jsonl"))?;

    let vocab = TokenVocab::from_texts(train.records.iter().map(|r| r.text.as_str()))?;
    vocab.save(&out_dir.join("vocab.txt"))?;

    // per-question subgraphs from the emitted (possibly incomplete) KG
    // A dropped fact can erase a seed entity from the emitted KG entirely;
    // such questions get an empty subgraph rather than poisoning the run.
    let seed_ids: Vec<Vec<u32>> = records
        .iter()
        .map(|r| r.seeds.iter().filter_map(|s| canon.entities.get(s)).collect())
        .collect();
    let subgraphs: Vec<Subgraph> = seed_ids
        .par_iter()
        .map(|seeds| {
            if seeds.is_empty() {
                Ok(Subgraph::empty())
            } else {
                extract_subgraph_ppr(&canon, seeds, cfg.subgraph_nodes, cfg.ppr_alpha, cfg.ppr_iters)
            }
        })
        .collect::<Result<_>>()?;
    write_cache(
        &out_dir.join("subgraphs.jsonl"),
        records.iter().map(|r| r.qid.as_str()).zip(subgraphs.iter()),
    )?;

    let answer_ids: Vec<Vec<u32>> = records
        .iter()
        .map(|r| r.answers.iter().filter_map(|a| canon.entities.get(a)).collect())
        .collect();
    let cov = coverage(&answer_ids, &subgraphs)?;

    let report = EmitReport {
        out_dir: out_dir.to_path_buf(),
        n_train,
        n_dev,
        n_test: records.len() - n_train - n_dev,
        total_facts,
        kept_facts,
        coverage: cov,
        aliases,
    };
    std::fs::write(out_dir.join("coverage.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
