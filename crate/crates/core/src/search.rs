//! Constrained evolutionary search over sub-networks of a base network.
//!
//! A [`SearchSpace`] is a base network plus knobs. Each knob offers a list of
//! choices and a candidate is the vector of chosen indices. Width knobs
//! shrink groups of layers by a filter multiplier; depth knobs keep a prefix
//! of a sequence of skippable blocks. Feasibility is judged by an
//! [`AttributePredictor`], so the search never touches a device.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Attribute;
use crate::network::{prune_with_levels, Edge, NetworkError, NetworkSpec};
use crate::predictor::{AttributePredictor, PredictorError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("no feasible candidate: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A removable sub-graph. All edges entering it come from one node outside
/// the block (or none, when it reads the network input); removing it
/// reconnects consumers of `exit` to that node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub layers: Vec<String>,
    pub exit: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Knob {
    /// Every listed layer keeps `multiplier` of its filters.
    Width { name: String, layers: Vec<String>, multipliers: Vec<f64> },
    /// Keep the first `choice` blocks and drop the rest.
    Depth { name: String, blocks: Vec<Block>, choices: Vec<usize> },
}

impl Knob {
    pub fn name(&self) -> &str {
        match self {
            Knob::Width { name, .. } | Knob::Depth { name, .. } => name,
        }
    }

    pub fn choice_count(&self) -> usize {
        match self {
            Knob::Width { multipliers, .. } => multipliers.len(),
            Knob::Depth { choices, .. } => choices.len(),
        }
    }
}

/// Spaces up to this size are checked choice-by-choice exhaustively at
/// construction; larger ones only per knob.
pub const EXHAUSTIVE_VALIDATION_LIMIT: u128 = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    base: NetworkSpec,
    knobs: Vec<Knob>,
}

pub type Encoding = Vec<usize>;

impl SearchSpace {
    pub fn new(base: NetworkSpec, knobs: Vec<Knob>) -> Result<Self, SearchError> {
        let mut names = BTreeSet::new();
        let mut widened = BTreeSet::new();
        for knob in &knobs {
            if !names.insert(knob.name().to_string()) {
                return Err(SearchError::Space(format!("knob name {:?} repeated", knob.name())));
            }
            if knob.choice_count() == 0 {
                return Err(SearchError::Space(format!("knob {:?} has no choices", knob.name())));
            }
            match knob {
                Knob::Width { layers, multipliers, name } => {
                    if let Some(m) = multipliers.iter().find(|m| !(m.is_finite() && **m > 0.0 && **m <= 1.0)) {
                        return Err(SearchError::Space(format!("knob {name:?}: multiplier {m} outside (0, 1]")));
                    }
                    for id in layers {
                        if base.layer(id).and_then(|l| l.as_conv()).is_none() {
                            return Err(SearchError::Space(format!("knob {name:?}: {id:?} is not a conv layer")));
                        }
                        if !widened.insert(id.clone()) {
                            return Err(SearchError::Space(format!("layer {id:?} belongs to two width knobs")));
                        }
                    }
                }
                Knob::Depth { blocks, choices, name } => {
                    if let Some(c) = choices.iter().find(|&&c| c > blocks.len()) {
                        return Err(SearchError::Space(format!("knob {name:?}: keeps {c} of {} blocks", blocks.len())));
                    }
                    for b in blocks {
                        if !b.layers.contains(&b.exit) {
                            return Err(SearchError::Space(format!("knob {name:?}: exit {:?} not in block", b.exit)));
                        }
                        if let Some(id) = b.layers.iter().find(|id| base.layer(id).is_none()) {
                            return Err(SearchError::Space(format!("knob {name:?}: unknown layer {id:?}")));
                        }
                    }
                }
            }
        }
        let space = Self { base, knobs };
        if space.size() <= EXHAUSTIVE_VALIDATION_LIMIT {
            for enc in space.encodings() {
                space.decode(&enc)?;
            }
        } else {
            for (k, knob) in space.knobs.iter().enumerate() {
                for c in 0..knob.choice_count() {
                    let mut enc = vec![0; space.knobs.len()];
                    enc[k] = c;
                    space.decode(&enc)?;
                }
            }
        }
        Ok(space)
    }

    pub fn base(&self) -> &NetworkSpec {
        &self.base
    }

    pub fn knobs(&self) -> &[Knob] {
        &self.knobs
    }

    /// Number of candidates, saturating.
    pub fn size(&self) -> u128 {
        self.knobs.iter().fold(1u128, |acc, k| acc.saturating_mul(k.choice_count() as u128))
    }

    /// Every encoding in lexicographic order.
    pub fn encodings(&self) -> impl Iterator<Item = Encoding> + '_ {
        let counts: Vec<usize> = self.knobs.iter().map(Knob::choice_count).collect();
        let mut next = Some(vec![0; counts.len()]);
        std::iter::from_fn(move || {
            let current = next.take()?;
            let mut succ = current.clone();
            for i in (0..succ.len()).rev() {
                succ[i] += 1;
                if succ[i] < counts[i] {
                    next = Some(succ);
                    break;
                }
                succ[i] = 0;
            }
            Some(current)
        })
    }

    pub fn random_encoding(&self, rng: &mut impl Rng) -> Encoding {
        self.knobs.iter().map(|k| rng.gen_range(0..k.choice_count())).collect()
    }

    pub fn decode(&self, encoding: &[usize]) -> Result<NetworkSpec, SearchError> {
        if encoding.len() != self.knobs.len() || encoding.iter().zip(&self.knobs).any(|(&c, k)| c >= k.choice_count()) {
            return Err(SearchError::Space(format!("encoding {encoding:?} does not fit the space")));
        }
        let mut levels = BTreeMap::new();
        let mut dropped: Vec<&Block> = Vec::new();
        for (knob, &c) in self.knobs.iter().zip(encoding) {
            match knob {
                Knob::Width { layers, multipliers, .. } => {
                    let level = (1.0 - multipliers[c]) * 100.0;
                    levels.extend(layers.iter().map(|id| (id.clone(), level)));
                }
                Knob::Depth { blocks, choices, .. } => dropped.extend(&blocks[choices[c]..]),
            }
        }
        let mut net = prune_with_levels(&self.base, &levels)?;
        // drop later blocks first so each exit still exists when rewired
        for block in dropped.into_iter().rev() {
            net = remove_block(&net, block)?;
        }
        let name = format!("{}~{}", self.base.name(), encoding.iter().map(usize::to_string).collect::<Vec<_>>().join("."));
        Ok(net.renamed(name))
    }
}

fn remove_block(net: &NetworkSpec, block: &Block) -> Result<NetworkSpec, SearchError> {
    let inside: BTreeSet<&str> = block.layers.iter().map(String::as_str).collect();
    let entries: BTreeSet<&str> = net
        .edges()
        .iter()
        .filter(|e| inside.contains(e.to.as_str()) && !inside.contains(e.from.as_str()))
        .map(|e| e.from.as_str())
        .collect();
    if entries.len() > 1 {
        return Err(SearchError::Space(format!("block ending at {:?} has {} entry nodes", block.exit, entries.len())));
    }
    let entry = entries.into_iter().next();
    let mut edges = Vec::new();
    for e in net.edges() {
        let (from_in, to_in) = (inside.contains(e.from.as_str()), inside.contains(e.to.as_str()));
        if !from_in && !to_in {
            edges.push(e.clone());
        } else if e.from == block.exit && !to_in {
            if let Some(entry) = entry {
                edges.push(Edge::new(entry, e.to.clone(), e.mode));
            }
        } else if from_in && !to_in {
            return Err(SearchError::Space(format!("block layer {:?} feeds {:?} outside the block", e.from, e.to)));
        }
    }
    let layers = net.layers().iter().filter(|l| !inside.contains(l.id())).cloned().collect();
    Ok(net.rebuild(layers, edges)?)
}

/// Hard upper bounds. Training memory is checked at `training_bs`,
/// inference attributes at batch size 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub max_gamma_mb: Option<f64>,
    pub max_small_gamma_mb: Option<f64>,
    pub max_small_phi_ms: Option<f64>,
    pub training_bs: u32,
}

impl Default for Constraints {
    fn default() -> Self {
        Self { max_gamma_mb: None, max_small_gamma_mb: None, max_small_phi_ms: None, training_bs: 32 }
    }
}

impl Constraints {
    pub fn validate(&self) -> Result<(), SearchError> {
        for (attribute, bound, _) in self.bounds() {
            if !(bound.is_finite() && bound > 0.0) {
                return Err(SearchError::Config(format!("bound on {attribute} must be positive, got {bound}")));
            }
        }
        if self.training_bs == 0 {
            return Err(SearchError::Config("training batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// `(attribute, bound, batch size)` for every set bound.
    pub fn bounds(&self) -> Vec<(Attribute, f64, u32)> {
        [
            (Attribute::Gamma, self.max_gamma_mb, self.training_bs),
            (Attribute::SmallGamma, self.max_small_gamma_mb, 1),
            (Attribute::SmallPhi, self.max_small_phi_ms, 1),
        ]
        .into_iter()
        .filter_map(|(a, b, bs)| b.map(|b| (a, b, bs)))
        .collect()
    }

    fn check_predictor(&self, predictor: &dyn AttributePredictor) -> Result<(), SearchError> {
        self.validate()?;
        let available = predictor.attributes();
        for (attribute, bound, _) in self.bounds() {
            if !available.contains(&attribute) {
                return Err(SearchError::Config(format!("constraint on {attribute} but no model predicts it")));
            }
            if let Some(lb) = predictor.lower_bound(attribute) {
                if lb > bound {
                    return Err(SearchError::Infeasible(format!(
                        "{attribute} bound {bound} is below the smallest value the model can predict ({lb})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_satisfied(&self, net: &NetworkSpec, predictor: &dyn AttributePredictor) -> Result<bool, SearchError> {
        for (attribute, bound, bs) in self.bounds() {
            if predictor.predict(attribute, net, bs)? > bound {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Objective to maximise. Must be deterministic.
pub trait Fitness: Sync {
    fn fitness(&self, encoding: &[usize], net: &NetworkSpec) -> f64;
}

impl<F> Fitness for F
where
    F: Fn(&[usize], &NetworkSpec) -> f64 + Sync,
{
    fn fitness(&self, encoding: &[usize], net: &NetworkSpec) -> f64 {
        self(encoding, net)
    }
}

/// Total weight parameters of the decoded network. A capacity proxy for
/// demonstrations and tests only; it is not an accuracy model.
#[derive(Clone, Copy, Debug, Default)]
pub struct ParameterCount;

impl Fitness for ParameterCount {
    fn fitness(&self, _: &[usize], net: &NetworkSpec) -> f64 {
        net.weight_count() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    pub population: usize,
    pub iterations: usize,
    /// Per-knob resampling probability when mutating.
    pub mutation_rate: f64,
    /// Share of the population kept as parents.
    pub parent_fraction: f64,
    /// Share of children made by mutation; the rest by crossover.
    pub mutation_share: f64,
    /// Rejected draws allowed per accepted candidate.
    pub sample_budget: usize,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            population: 100,
            iterations: 500,
            mutation_rate: 0.1,
            parent_fraction: 0.25,
            mutation_share: 0.5,
            sample_budget: 10_000,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.population == 0 || self.iterations == 0 {
            return Err(SearchError::Config("population and iterations must be >= 1".into()));
        }
        if !prob(self.mutation_rate) || !prob(self.mutation_share) || !(self.parent_fraction > 0.0 && self.parent_fraction <= 1.0)
        {
            return Err(SearchError::Config("rates must lie in [0, 1] and parent_fraction in (0, 1]".into()));
        }
        if self.sample_budget == 0 {
            return Err(SearchError::Config("sample budget must be >= 1".into()));
        }
        Ok(())
    }

    pub fn parent_count(&self) -> usize {
        ((self.population as f64 * self.parent_fraction).ceil() as usize).clamp(1, self.population)
    }

    /// Candidates evaluated when no draw is ever rejected: the initial
    /// population plus one full population of children per iteration.
    pub fn min_evaluations(&self) -> u64 {
        (self.population as u64) * (self.iterations as u64 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub encoding: Encoding,
    pub fitness: f64,
}

/// Higher fitness first, then lexicographically smaller encoding.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness.total_cmp(&a.fitness).then_with(|| a.encoding.cmp(&b.encoding))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLogEntry {
    pub iter: usize,
    pub best_fitness: f64,
    pub evaluated_total: u64,
    pub best_encoding: Encoding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub log: Vec<SearchLogEntry>,
    pub evaluated_total: u64,
    pub rejected_total: u64,
    /// Iterations in which the best-ever fitness strictly increased.
    pub improvements: usize,
}

impl SearchOutcome {
    pub fn write_log<W: Write>(&self, mut out: W) -> Result<(), SearchError> {
        for entry in &self.log {
            serde_json::to_writer(&mut out, entry).map_err(|e| SearchError::Io(e.into()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub encoding: Encoding,
    pub net: NetworkSpec,
    pub rejections: usize,
}

/// Draw uniform candidates until one satisfies the constraints.
pub fn sample_feasible(
    space: &SearchSpace,
    constraints: &Constraints,
    predictor: &dyn AttributePredictor,
    rng: &mut impl Rng,
    budget: usize,
) -> Result<Sampled, SearchError> {
    constraints.check_predictor(predictor)?;
    for rejections in 0..=budget {
        let encoding = space.random_encoding(rng);
        let net = space.decode(&encoding)?;
        if constraints.is_satisfied(&net, predictor)? {
            return Ok(Sampled { encoding, net, rejections });
        }
    }
    Err(SearchError::Infeasible(format!("{budget} consecutive samples violated the constraints")))
}

struct Evaluator<'a> {
    space: &'a SearchSpace,
    constraints: &'a Constraints,
    predictor: &'a dyn AttributePredictor,
    fitness: &'a dyn Fitness,
    cache: HashMap<Encoding, Option<f64>>,
    evaluated: u64,
    rejected: u64,
}

impl Evaluator<'_> {
    /// `Some(fitness)` for feasible candidates. Every call counts as one
    /// evaluation; repeated encodings are served from the cache.
    fn evaluate(&mut self, encoding: &Encoding) -> Result<Option<f64>, SearchError> {
        self.evaluated += 1;
        let result = match self.cache.get(encoding) {
            Some(r) => *r,
            None => {
                let net = self.space.decode(encoding)?;
                let r = if self.constraints.is_satisfied(&net, self.predictor)? {
                    Some(self.fitness.fitness(encoding, &net))
                } else {
                    None
                };
                self.cache.insert(encoding.clone(), r);
                r
            }
        };
        if result.is_none() {
            self.rejected += 1;
        }
        Ok(result)
    }

    fn draw<R: Rng>(&mut self, budget: usize, rng: &mut R, mut propose: impl FnMut(&mut R) -> Encoding) -> Result<Candidate, SearchError> {
        for _ in 0..=budget {
            let encoding = propose(rng);
            if let Some(fitness) = self.evaluate(&encoding)? {
                return Ok(Candidate { encoding, fitness });
            }
        }
        Err(SearchError::Infeasible(format!("{budget} consecutive candidates violated the constraints")))
    }
}

/// Evolutionary search. Each iteration keeps the best `parent_fraction` of
/// the population, breeds `population` feasible children by mutation or
/// uniform crossover, and keeps the best `population` of parents and
/// children. Returns the best candidate ever seen.
pub fn evolve(
    space: &SearchSpace,
    constraints: &Constraints,
    predictor: &dyn AttributePredictor,
    fitness: &dyn Fitness,
    config: &EsConfig,
) -> Result<SearchOutcome, SearchError> {
    config.validate()?;
    constraints.check_predictor(predictor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eval = Evaluator { space, constraints, predictor, fitness, cache: HashMap::new(), evaluated: 0, rejected: 0 };

    let mut population = Vec::with_capacity(config.population);
    for _ in 0..config.population {
        population.push(eval.draw(config.sample_budget, &mut rng, |r| space.random_encoding(r))?);
    }
    population.sort_by(rank);
    let mut best = population[0].clone();
    let mut log = vec![SearchLogEntry {
        iter: 0,
        best_fitness: best.fitness,
        evaluated_total: eval.evaluated,
        best_encoding: best.encoding.clone(),
    }];
    let mut improvements = 0;

    let parents_n = config.parent_count();
    for iter in 1..=config.iterations {
        population.truncate(parents_n);
        let parents = population.clone();
        for _ in 0..config.population {
            let mutate = rng.gen_bool(config.mutation_share);
            let child = eval.draw(config.sample_budget, &mut rng, |r| {
                if mutate {
                    let p = parents.choose(r).expect("parents non-empty");
                    mutated(space, &p.encoding, config.mutation_rate, r)
                } else {
                    let a = parents.choose(r).expect("parents non-empty");
                    let b = parents.choose(r).expect("parents non-empty");
                    a.encoding.iter().zip(&b.encoding).map(|(&x, &y)| if r.gen_bool(0.5) { x } else { y }).collect()
                }
            })?;
            population.push(child);
        }
        population.sort_by(rank);
        population.truncate(config.population);
        if rank(&population[0], &best) == Ordering::Less {
            if population[0].fitness > best.fitness {
                improvements += 1;
            }
            best = population[0].clone();
        }
        log.push(SearchLogEntry {
            iter,
            best_fitness: best.fitness,
            evaluated_total: eval.evaluated,
            best_encoding: best.encoding.clone(),
        });
    }

    debug_assert!(constraints.is_satisfied(&space.decode(&best.encoding)?, predictor)?);
    Ok(SearchOutcome { best, log, evaluated_total: eval.evaluated, rejected_total: eval.rejected, improvements })
}

fn mutated(space: &SearchSpace, encoding: &[usize], rate: f64, rng: &mut impl Rng) -> Encoding {
    encoding
        .iter()
        .zip(space.knobs())
        .map(|(&c, k)| if rng.gen_bool(rate) { rng.gen_range(0..k.choice_count()) } else { c })
        .collect()
}

/// Wall-clock seconds to evaluate `candidates` at `per_candidate_s` each.
pub fn estimate_search_cost(candidates: u64, per_candidate_s: f64) -> f64 {
    assert!(per_candidate_s >= 0.0, "per-candidate cost must be non-negative");
    candidates as f64 * per_candidate_s
}
