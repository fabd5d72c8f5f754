//! Indicator scores, per-layer selection and constrained top-K search.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::supernet::{template_cost, IndicatorStore, PathSample, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    /// `S[l][m]`.
    pub scores: Vec<Vec<f64>>,
    /// Mean |γ| of the layer indicator; `None` on reduction layers.
    pub layer_weight: Vec<Option<f64>>,
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64
}

/// `S[l][m] = mean|γ_v| · mean|γ_u|` on normal layers, `mean|γ_v|` on
/// reduction layers.
pub fn compute_scores(store: &IndicatorStore) -> ScoreTable {
    let layer_weight: Vec<Option<f64>> = store.layer.iter().map(|u| u.as_deref().map(mean_abs)).collect();
    let scores = store
        .block
        .iter()
        .zip(&layer_weight)
        .map(|(row, u)| row.iter().map(|v| mean_abs(v) * u.unwrap_or(1.0)).collect())
        .collect();
    ScoreTable { scores, layer_weight }
}

impl ScoreTable {
    pub fn path_score(&self, choices: &[usize]) -> f64 {
        choices.iter().zip(&self.scores).map(|(&m, row)| row[m]).sum()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "layer,candidate,score,layer_weight")?;
        for (l, row) in self.scores.iter().enumerate() {
            for (m, s) in row.iter().enumerate() {
                let lw = self.layer_weight[l].map_or(String::new(), |v| v.to_string());
                writeln!(w, "{l},{m},{s},{lw}")?;
            }
        }
        Ok(())
    }
}

/// Per-layer argmax, lowest index on ties.
pub fn select_top_per_layer(table: &ScoreTable) -> PathSample {
    let blocks: Vec<usize> = table
        .scores
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (m, &s)| if s > best.1 { (m, s) } else { best })
                .0
        })
        .collect();
    PathSample::from_blocks(&blocks)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_params: Option<u64>,
}

impl Constraint {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_set(&self) -> bool {
        self.max_flops.is_some() || self.max_params.is_some()
    }

    pub fn admits(&self, flops: u64, params: u64) -> bool {
        self.max_flops.is_none_or(|f| flops <= f) && self.max_params.is_none_or(|p| params <= p)
    }
}

/// Per-layer, per-candidate costs plus a constant part (stem and head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub flops: Vec<Vec<u64>>,
    pub params: Vec<Vec<u64>>,
    pub base_flops: u64,
    pub base_params: u64,
}

impl CostTable {
    /// Analytic costs. The stem is a bias-free 3×3 convolution and the
    /// head a bias-free dense layer; BN affine parameters are not counted.
    pub fn from_space(space: &SearchSpace) -> Self {
        let d = space.channels();
        let sizes = space.spatial_sizes();
        let n = space.image_size;
        let stem_params = (d * space.input_channels * 9) as u64;
        let head_params = (d * space.classes) as u64;
        let (flops, params) = space
            .layers
            .iter()
            .enumerate()
            .map(|(l, slot)| {
                slot.candidates
                    .iter()
                    .map(|t| template_cost(t, slot.channels, sizes[l]))
                    .unzip()
            })
            .unzip();
        CostTable {
            flops,
            params,
            base_flops: stem_params * (n * n) as u64 + head_params,
            base_params: stem_params + head_params,
        }
    }

    pub fn cost(&self, choices: &[usize]) -> (u64, u64) {
        choices.iter().enumerate().fold((self.base_flops, self.base_params), |(f, p), (l, &m)| {
            (f + self.flops[l][m], p + self.params[l][m])
        })
    }

    fn dims(&self) -> Vec<usize> {
        self.flops.iter().map(Vec::len).collect()
    }
}

/// `(MACs, params)` of a block-only path, including stem and head.
pub fn flops_and_params(path: &PathSample, space: &SearchSpace) -> Result<(u64, u64)> {
    path.validate(space)?;
    let blocks = path
        .blocks()
        .ok_or_else(|| Error::invalid("cost of a path with a layer indicator is undefined"))?;
    Ok(CostTable::from_space(space).cost(&blocks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub rank: usize,
    pub choices: Vec<usize>,
    pub score: f64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedSubnets {
    pub entries: Vec<RankedEntry>,
}

impl RankedSubnets {
    pub fn top(&self) -> Option<&RankedEntry> {
        self.entries.first()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(RankedSubnets { entries })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Exhaustive,
    Evolutionary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub elitism: usize,
    pub tournament: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population: 64,
            generations: 50,
            mutation_rate: 0.1,
            elitism: 4,
            tournament: 3,
        }
    }
}

pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;

/// Score descending, then choices ascending.
fn rank(cands: Vec<(Vec<usize>, f64)>, costs: &CostTable, k: usize) -> RankedSubnets {
    let mut cands = cands;
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    RankedSubnets {
        entries: cands
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (choices, score))| {
                let (flops, params) = costs.cost(&choices);
                RankedEntry {
                    rank: i + 1,
                    choices,
                    score,
                    flops,
                    params,
                }
            })
            .collect(),
    }
}

fn check_shapes(table: &ScoreTable, costs: &CostTable) -> Result<()> {
    let a: Vec<usize> = table.scores.iter().map(Vec::len).collect();
    if a != costs.dims() || a.is_empty() || a.contains(&0) {
        return Err(Error::invalid(format!(
            "score table shape {a:?} does not match cost table {:?}",
            costs.dims()
        )));
    }
    Ok(())
}

pub fn search_topk(
    table: &ScoreTable,
    space: &SearchSpace,
    c: &Constraint,
    k: usize,
    strategy: Strategy,
    rng: &mut Rng,
) -> Result<RankedSubnets> {
    let costs = CostTable::from_space(space);
    match strategy {
        Strategy::Exhaustive => exhaustive_topk(table, &costs, c, k),
        Strategy::Evolutionary => evolutionary_topk(table, &costs, c, k, &EvolutionConfig::default(), rng),
    }
}

pub fn exhaustive_topk(table: &ScoreTable, costs: &CostTable, c: &Constraint, k: usize) -> Result<RankedSubnets> {
    check_shapes(table, costs)?;
    let dims = costs.dims();
    let size = dims.iter().fold(1u64, |a, &m| a.saturating_mul(m as u64));
    if size > EXHAUSTIVE_LIMIT {
        return Err(Error::invalid(format!(
            "space of {size} subnets exceeds the exhaustive limit {EXHAUSTIVE_LIMIT}"
        )));
    }
    let mut feasible = Vec::new();
    let mut choice = vec![0usize; dims.len()];
    'outer: loop {
        let (f, p) = costs.cost(&choice);
        if c.admits(f, p) {
            feasible.push((choice.clone(), table.path_score(&choice)));
        }
        for l in (0..dims.len()).rev() {
            choice[l] += 1;
            if choice[l] < dims[l] {
                continue 'outer;
            }
            choice[l] = 0;
        }
        break;
    }
    if feasible.is_empty() {
        return Err(Error::Infeasible);
    }
    Ok(rank(feasible, costs, k))
}

struct Evo<'a> {
    table: &'a ScoreTable,
    costs: &'a CostTable,
    c: &'a Constraint,
    dims: Vec<usize>,
    archive: BTreeMap<Vec<usize>, f64>,
}

impl Evo<'_> {
    fn feasible(&self, x: &[usize]) -> bool {
        let (f, p) = self.costs.cost(x);
        self.c.admits(f, p)
    }

    /// Relative excess over the constraint; zero when feasible.
    fn violation(&self, x: &[usize]) -> f64 {
        let (f, p) = self.costs.cost(x);
        let over = |v: u64, cap: Option<u64>| cap.map_or(0.0, |m| (v as f64 - m as f64).max(0.0) / m.max(1) as f64);
        over(f, self.c.max_flops) + over(p, self.c.max_params)
    }

    /// Greedy single-layer downgrades until feasible, losing as little
    /// score per unit of violation removed as possible.
    fn repair(&self, mut x: Vec<usize>) -> Option<Vec<usize>> {
        let mut v = self.violation(&x);
        while v > 0.0 {
            let mut best: Option<(f64, usize, usize, f64)> = None;
            for l in 0..x.len() {
                for m in 0..self.dims[l] {
                    if m == x[l] {
                        continue;
                    }
                    let old = x[l];
                    x[l] = m;
                    let nv = self.violation(&x);
                    x[l] = old;
                    if nv < v {
                        let loss = self.table.scores[l][old] - self.table.scores[l][m];
                        let ratio = loss / (v - nv);
                        if best.is_none_or(|b| ratio < b.0) {
                            best = Some((ratio, l, m, nv));
                        }
                    }
                }
            }
            let (_, l, m, nv) = best?;
            x[l] = m;
            v = nv;
        }
        Some(x)
    }

    fn admit(&mut self, x: Vec<usize>) -> Option<Vec<usize>> {
        let x = if self.feasible(&x) { x } else { self.repair(x)? };
        let s = self.table.path_score(&x);
        self.archive.insert(x.clone(), s);
        Some(x)
    }

    fn score(&self, x: &[usize]) -> f64 {
        self.table.path_score(x)
    }

    /// First-improvement hill climb over one- and two-layer changes.
    fn polish(&mut self, mut x: Vec<usize>) -> Vec<usize> {
        let n = x.len();
        loop {
            let base = self.score(&x);
            let mut improved = None;
            'search: for l1 in 0..n {
                for m1 in 0..self.dims[l1] {
                    for l2 in l1..n {
                        let ms: Vec<usize> = if l2 == l1 { vec![x[l2]] } else { (0..self.dims[l2]).collect() };
                        for m2 in ms {
                            let mut y = x.clone();
                            y[l1] = m1;
                            y[l2] = if l2 == l1 { m1 } else { m2 };
                            if y == x || !self.feasible(&y) {
                                continue;
                            }
                            let s = self.score(&y);
                            self.archive.insert(y.clone(), s);
                            if s > base {
                                improved = Some(y);
                                break 'search;
                            }
                        }
                    }
                }
            }
            match improved {
                Some(y) => x = y,
                None => return x,
            }
        }
    }
}

/// Tournament selection, single-point crossover, per-layer mutation with
/// elitism, followed by a local polish of the elite. Every feasible
/// candidate ever evaluated is archived and the top `k` of the archive
/// are returned.
pub fn evolutionary_topk(
    table: &ScoreTable,
    costs: &CostTable,
    c: &Constraint,
    k: usize,
    cfg: &EvolutionConfig,
    rng: &mut Rng,
) -> Result<RankedSubnets> {
    check_shapes(table, costs)?;
    let dims = costs.dims();
    let mut evo = Evo {
        table,
        costs,
        c,
        dims: dims.clone(),
        archive: BTreeMap::new(),
    };
    let random = |rng: &mut Rng| -> Vec<usize> { dims.iter().map(|&m| rng.random_range(0..m)).collect() };

    let mut pop: Vec<Vec<usize>> = Vec::new();
    // Per-layer best and cheapest paths seed the population.
    let greedy: Vec<usize> = select_top_per_layer(table).blocks().expect("block path");
    for seed in [greedy, cheapest(costs, |l, m| costs.flops[l][m]), cheapest(costs, |l, m| costs.params[l][m])] {
        if let Some(x) = evo.admit(seed) {
            pop.push(x);
        }
    }
    let mut attempts = 0;
    while pop.len() < cfg.population && attempts < cfg.population * 20 {
        attempts += 1;
        if let Some(x) = evo.admit(random(rng)) {
            pop.push(x);
        }
    }
    if pop.is_empty() {
        return Err(Error::Infeasible);
    }

    for _ in 0..cfg.generations {
        pop.sort_by(|a, b| evo.score(b).total_cmp(&evo.score(a)).then_with(|| a.cmp(b)));
        pop.dedup();
        let mut next: Vec<Vec<usize>> = pop.iter().take(cfg.elitism).cloned().collect();
        let mut tries = 0;
        while next.len() < cfg.population && tries < cfg.population * 20 {
            tries += 1;
            let pick = |rng: &mut Rng| -> Vec<usize> {
                (0..cfg.tournament.max(1))
                    .map(|_| pop.choose(rng).expect("non-empty population"))
                    .max_by(|a, b| evo.score(a).total_cmp(&evo.score(b)))
                    .expect("tournament of at least one")
                    .clone()
            };
            let (a, b) = (pick(rng), pick(rng));
            let cut = rng.random_range(0..=dims.len());
            let mut child: Vec<usize> = a[..cut].iter().chain(&b[cut..]).copied().collect();
            for (l, g) in child.iter_mut().enumerate() {
                if rng.random::<f64>() < cfg.mutation_rate {
                    *g = rng.random_range(0..dims[l]);
                }
            }
            if let Some(x) = evo.admit(child) {
                next.push(x);
            }
        }
        pop = next;
    }

    let mut elite: Vec<(Vec<usize>, f64)> = evo.archive.iter().map(|(x, &s)| (x.clone(), s)).collect();
    elite.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (x, _) in elite.into_iter().take(cfg.elitism.max(1)) {
        evo.polish(x);
    }
    let cands: Vec<(Vec<usize>, f64)> = evo.archive.into_iter().collect();
    Ok(rank(cands, costs, k))
}

fn cheapest(costs: &CostTable, cost: impl Fn(usize, usize) -> u64) -> Vec<usize> {
    costs
        .dims()
        .iter()
        .enumerate()
        .map(|(l, &m)| (0..m).min_by_key(|&j| cost(l, j)).unwrap_or(0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn table(scores: Vec<Vec<f64>>) -> ScoreTable {
        let n = scores.len();
        ScoreTable {
            scores,
            layer_weight: vec![None; n],
        }
    }

    fn costs(flops: Vec<Vec<u64>>) -> CostTable {
        let params = flops.clone();
        CostTable {
            flops,
            params,
            base_flops: 0,
            base_params: 0,
        }
    }

    #[test]
    fn score_arithmetic() {
        let s = compute_scores(&IndicatorStore {
            block: vec![vec![vec![0.5, -1.5]], vec![vec![0.4, 0.6]], vec![vec![0.0, 0.0]]],
            layer: vec![Some(vec![2.0]), None, Some(vec![3.0])],
        });
        assert_eq!(s.scores, vec![vec![2.0], vec![0.5], vec![0.0]]);
        assert_eq!(s.layer_weight, vec![Some(2.0), None, Some(3.0)]);
    }

    #[test]
    fn top_per_layer_ties_and_order() {
        assert_eq!(select_top_per_layer(&table(vec![vec![1.0; 3]; 2])), PathSample::from_blocks(&[0, 0]));
        assert_eq!(
            select_top_per_layer(&table(vec![vec![1.0, 2.0, 3.0]; 2])),
            PathSample::from_blocks(&[2, 2])
        );
    }

    #[test]
    fn two_by_two_constrained_fixture() {
        let t = table(vec![vec![1.0, 2.0], vec![3.0, 1.0]]);
        let c = costs(vec![vec![5, 9], vec![5, 5]]);
        let cons = Constraint {
            max_flops: Some(14),
            max_params: None,
        };
        let r = exhaustive_topk(&t, &c, &cons, 4).unwrap();
        // all four subnets cost at most 14; the best is (1, 0) with score 5
        assert_eq!(r.entries.len(), 4);
        assert_eq!(r.entries[0].choices, vec![1, 0]);
        assert_eq!(r.entries[0].score, 5.0);
        assert_eq!(r.entries[0].flops, 14);
        let tight = Constraint {
            max_flops: Some(13),
            max_params: None,
        };
        let r = exhaustive_topk(&t, &c, &tight, 1).unwrap();
        assert_eq!(r.entries[0].choices, vec![0, 0]);
        assert_eq!(r.entries[0].score, 4.0);
        let none = Constraint {
            max_flops: Some(9),
            max_params: None,
        };
        assert!(matches!(exhaustive_topk(&t, &c, &none, 1), Err(Error::Infeasible)));
    }

    #[test]
    fn evolutionary_matches_on_small_case() {
        let t = table(vec![vec![1.0, 2.0], vec![3.0, 1.0]]);
        let c = costs(vec![vec![5, 9], vec![5, 5]]);
        let cons = Constraint {
            max_flops: Some(13),
            max_params: None,
        };
        let r = evolutionary_topk(&t, &c, &cons, 1, &EvolutionConfig::default(), &mut rng_from(0)).unwrap();
        assert_eq!(r.entries[0].choices, vec![0, 0]);
    }

    #[test]
    fn conv_hand_counts() {
        use crate::supernet::conv_cost;
        assert_eq!(conv_cost(1, 1, 1, 4, 1), (16, 1));
        assert_eq!(conv_cost(8, 4, 3, 1, 1).1, 8 * 4 * 9);
    }
}
