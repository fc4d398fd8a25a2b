//! Minibatch construction for set-consistency training: pairs of cell sets
//! that share a perturbation, drawn under one of three strategies.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, tag};
use crate::synthgen::CellMeta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Student and teacher see the same cells (standard DINO at n = 1).
    SameCells,
    /// Two disjoint sets from one batch.
    WithinBatch,
    /// Two sets from two different batches.
    CrossBatch,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SameCells => "same_cells",
            Strategy::WithinBatch => "within_batch",
            Strategy::CrossBatch => "cross_batch",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_cells" => Ok(Strategy::SameCells),
            "within_batch" => Ok(Strategy::WithinBatch),
            "cross_batch" => Ok(Strategy::CrossBatch),
            _ => Err(Error::config("strategy", format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Sets share one guide.
    Sgrna,
    /// Sets share a gene target and may mix its guides. All NTC guides pool into one perturbation.
    GeneTarget,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Sgrna => "sgrna",
            Level::GeneTarget => "gene_target",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgrna" | "sgRNA" => Ok(Level::Sgrna),
            "gene_target" => Ok(Level::GeneTarget),
            _ => Err(Error::config("level", format!("unknown level `{s}`"))),
        }
    }
}

/// Identity of a perturbation at the sampling level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    Guide(u32),
    Gene(u32),
    Ntc,
}

impl Perturbation {
    pub fn of(meta: &CellMeta, level: Level) -> Self {
        match (level, meta.gene_id) {
            (Level::Sgrna, _) => Perturbation::Guide(meta.guide_id),
            (Level::GeneTarget, Some(g)) => Perturbation::Gene(g),
            (Level::GeneTarget, None) => Perturbation::Ntc,
        }
    }
}

/// Two sets of manifest row indices sharing one perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetPair {
    pub perturbation: Perturbation,
    pub student_batch: u32,
    pub teacher_batch: u32,
    pub student_set: Vec<usize>,
    pub teacher_set: Vec<usize>,
    pub strategy: Strategy,
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchPlan {
    pub step: u64,
    pub set_pairs: Vec<SetPair>,
    pub n_p: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub level: Level,
    /// Perturbations per minibatch.
    pub n_p: usize,
    /// Cells per set.
    pub n: usize,
    pub include_ntc: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: Strategy::CrossBatch,
            level: Level::Sgrna,
            n_p: 16,
            n: 8,
            include_ntc: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if self.n_p == 0 {
            return Err(Error::config("n_p", "must be at least 1"));
        }
        Ok(())
    }
}

/// Cells grouped by perturbation and batch, with the feasible batch pairs
/// of every perturbation for one strategy.
#[derive(Debug, Clone)]
pub struct SetIndex {
    config: SamplerConfig,
    groups: BTreeMap<Perturbation, BTreeMap<u32, Vec<usize>>>,
    feasible: Vec<(Perturbation, Vec<(u32, u32)>)>,
    skipped: Vec<Perturbation>,
}

impl SetIndex {
    /// Index the given manifest rows (all rows when `rows` is `None`).
    pub fn new(manifest: &[CellMeta], rows: Option<&[usize]>, config: &SamplerConfig) -> Result<Self> {
        config.validate()?;
        let mut groups: BTreeMap<Perturbation, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
        let mut add = |i: usize| {
            let m = &manifest[i];
            if m.is_ntc() && !config.include_ntc {
                return;
            }
            groups
                .entry(Perturbation::of(m, config.level))
                .or_default()
                .entry(m.batch_id)
                .or_default()
                .push(i);
        };
        match rows {
            Some(rows) => rows.iter().copied().for_each(&mut add),
            None => (0..manifest.len()).for_each(&mut add),
        }
        let n = config.n;
        let mut feasible = Vec::new();
        let mut skipped = Vec::new();
        for (p, by_batch) in &groups {
            let pairs: Vec<(u32, u32)> = match config.strategy {
                Strategy::SameCells => by_batch
                    .iter()
                    .filter(|(_, c)| c.len() >= n)
                    .map(|(&b, _)| (b, b))
                    .collect(),
                Strategy::WithinBatch => by_batch
                    .iter()
                    .filter(|(_, c)| c.len() >= 2 * n)
                    .map(|(&b, _)| (b, b))
                    .collect(),
                Strategy::CrossBatch => {
                    let ok: Vec<u32> = by_batch
                        .iter()
                        .filter(|(_, c)| c.len() >= n)
                        .map(|(&b, _)| b)
                        .collect();
                    ok.iter()
                        .flat_map(|&a| ok.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
                        .collect()
                }
            };
            if pairs.is_empty() {
                skipped.push(*p);
            } else {
                feasible.push((*p, pairs));
            }
        }
        if !skipped.is_empty() {
            log::warn!(
                "{} of {} perturbations cannot form {} sets of n={} and are skipped",
                skipped.len(),
                groups.len(),
                config.strategy.as_str(),
                n
            );
        }
        if feasible.is_empty() {
            log::warn!(
                "no perturbation is feasible for {} with n={}",
                config.strategy.as_str(),
                n
            );
        }
        Ok(SetIndex {
            config: config.clone(),
            groups,
            feasible,
            skipped,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn feasible(&self) -> impl Iterator<Item = Perturbation> + '_ {
        self.feasible.iter().map(|(p, _)| *p)
    }

    pub fn n_feasible(&self) -> usize {
        self.feasible.len()
    }

    pub fn skipped(&self) -> &[Perturbation] {
        &self.skipped
    }

    /// Human-readable feasibility summary for diagnostics.
    pub fn diagnostics(&self) -> String {
        let mut counts: Vec<usize> = self
            .groups
            .values()
            .flat_map(|b| b.values().map(Vec::len))
            .collect();
        counts.sort_unstable();
        let batches: std::collections::BTreeSet<u32> =
            self.groups.values().flat_map(|b| b.keys().copied()).collect();
        format!(
            "strategy={} level={} n={}: {} perturbations, {} feasible, {} batches, cells per (perturbation, batch) min {} median {} max {}",
            self.config.strategy.as_str(),
            self.config.level.as_str(),
            self.config.n,
            self.groups.len(),
            self.feasible.len(),
            batches.len(),
            counts.first().copied().unwrap_or(0),
            counts.get(counts.len() / 2).copied().unwrap_or(0),
            counts.last().copied().unwrap_or(0),
        )
    }
}

/// Draw one minibatch: perturbations uniformly without replacement, a batch
/// pair uniformly among the eligible ones, then cells uniformly without
/// replacement within each (perturbation, batch).
pub fn build_minibatch<R: rand::Rng>(index: &SetIndex, step: u64, rng: &mut R) -> MinibatchPlan {
    let cfg = &index.config;
    let n = cfg.n;
    let mut order: Vec<usize> = (0..index.feasible.len()).collect();
    order.shuffle(rng);
    if order.len() < cfg.n_p && !order.is_empty() {
        log::warn!(
            "only {} feasible perturbations for a minibatch of {}",
            order.len(),
            cfg.n_p
        );
    }
    order.truncate(cfg.n_p);
    let set_pairs = order
        .into_iter()
        .map(|k| {
            let (p, pairs) = &index.feasible[k];
            let &(b, b2) = pairs.choose(rng).expect("feasible entries have pairs");
            let cells = &index.groups[p];
            let (student_set, teacher_set) = match cfg.strategy {
                Strategy::SameCells => {
                    let s: Vec<usize> = cells[&b].choose_multiple(rng, n).copied().collect();
                    (s.clone(), s)
                }
                Strategy::WithinBatch => {
                    let mut s: Vec<usize> = cells[&b].choose_multiple(rng, 2 * n).copied().collect();
                    let t = s.split_off(n);
                    (s, t)
                }
                Strategy::CrossBatch => (
                    cells[&b].choose_multiple(rng, n).copied().collect(),
                    cells[&b2].choose_multiple(rng, n).copied().collect(),
                ),
            };
            SetPair {
                perturbation: *p,
                student_batch: b,
                teacher_batch: b2,
                student_set,
                teacher_set,
                strategy: cfg.strategy,
                level: cfg.level,
            }
        })
        .collect();
    MinibatchPlan {
        step,
        set_pairs,
        n_p: cfg.n_p,
        n,
    }
}

/// Deterministic stream of minibatch plans. Each step has its own rng, so a
/// stream can be resumed at any step.
#[derive(Debug, Clone)]
pub struct EpochIterator<'a> {
    index: &'a SetIndex,
    seed: u64,
    steps_per_epoch: u64,
    next_step: u64,
    end_step: u64,
}

impl<'a> EpochIterator<'a> {
    pub fn new(index: &'a SetIndex, steps_per_epoch: usize, epochs: usize, seed: u64) -> Result<Self> {
        if steps_per_epoch == 0 {
            return Err(Error::config("steps_per_epoch", "must be at least 1"));
        }
        Ok(EpochIterator {
            index,
            seed,
            steps_per_epoch: steps_per_epoch as u64,
            next_step: 0,
            end_step: (steps_per_epoch * epochs) as u64,
        })
    }

    /// Skip ahead so that the next plan is the one for global step `step`.
    pub fn resume_at(mut self, step: u64) -> Self {
        self.next_step = step;
        self
    }

    pub fn plan_at(&self, step: u64) -> MinibatchPlan {
        let epoch = step / self.steps_per_epoch;
        let mut rng = seed::rng(self.seed, &[tag::SAMPLER, epoch, step]);
        build_minibatch(self.index, step, &mut rng)
    }
}

impl Iterator for EpochIterator<'_> {
    type Item = MinibatchPlan;
    fn next(&mut self) -> Option<MinibatchPlan> {
        if self.next_step >= self.end_step {
            return None;
        }
        let plan = self.plan_at(self.next_step);
        self.next_step += 1;
        Some(plan)
    }
}

/// Check every strategy contract of a plan against the manifest.
pub fn check_plan(manifest: &[CellMeta], plan: &MinibatchPlan) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for pair in &plan.set_pairs {
        if !seen.insert(pair.perturbation) {
            return Err(Error::Misuse(format!("{:?} sampled twice", pair.perturbation)));
        }
        if pair.student_set.len() != plan.n || pair.teacher_set.len() != plan.n {
            return Err(Error::Misuse("set size differs from n".into()));
        }
        for (set, batch) in [
            (&pair.student_set, pair.student_batch),
            (&pair.teacher_set, pair.teacher_batch),
        ] {
            let mut uniq = set.clone();
            uniq.sort_unstable();
            uniq.dedup();
            if uniq.len() != set.len() {
                return Err(Error::Misuse("cell repeated within a set".into()));
            }
            for &i in set {
                let m = &manifest[i];
                if m.batch_id != batch || Perturbation::of(m, pair.level) != pair.perturbation {
                    return Err(Error::Misuse(format!("cell {} does not belong to its set", m.cell_id)));
                }
            }
        }
        let ok = match pair.strategy {
            Strategy::SameCells => pair.student_set == pair.teacher_set,
            Strategy::WithinBatch => {
                pair.student_batch == pair.teacher_batch
                    && pair.student_set.iter().all(|c| !pair.teacher_set.contains(c))
            }
            Strategy::CrossBatch => pair.student_batch != pair.teacher_batch,
        };
        if !ok {
            return Err(Error::Misuse(format!(
                "pair violates the {} contract",
                pair.strategy.as_str()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::Split;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_oneof, proptest, Just};

    /// Synthetic manifest: `counts[guide][batch]` cells, guides mapped to genes in pairs,
    /// the last guide is NTC.
    fn manifest(counts: &[Vec<usize>]) -> Vec<CellMeta> {
        let mut out = Vec::new();
        let last = counts.len() - 1;
        for (g, per_batch) in counts.iter().enumerate() {
            for (b, &c) in per_batch.iter().enumerate() {
                for _ in 0..c {
                    out.push(CellMeta {
                        cell_id: out.len() as u64,
                        gene_id: (g != last).then_some(g as u32 / 2),
                        guide_id: g as u32,
                        batch_id: b as u32,
                        escaper: false,
                        well_position: (0.5, 0.5),
                        cell_seed: 0,
                        split: Split::Train,
                    });
                }
            }
        }
        out
    }

    fn cfg(strategy: Strategy, level: Level, n_p: usize, n: usize) -> SamplerConfig {
        SamplerConfig {
            strategy,
            level,
            n_p,
            n,
            include_ntc: true,
        }
    }

    #[test]
    fn same_cells_singletons_are_identical() {
        let m = manifest(&vec![vec![4, 4]; 5]);
        let idx = SetIndex::new(&m, None, &cfg(Strategy::SameCells, Level::Sgrna, 3, 1)).unwrap();
        let plan = build_minibatch(&idx, 0, &mut seed::rng(1, &[]));
        assert_eq!(plan.set_pairs.len(), 3);
        for p in &plan.set_pairs {
            assert_eq!(p.student_set.len(), 1);
            assert_eq!(p.student_set, p.teacher_set);
        }
        check_plan(&m, &plan).unwrap();
    }

    #[test]
    fn one_batch_cross_batch_yields_no_pairs() {
        let m = manifest(&vec![vec![10]; 3]);
        let idx = SetIndex::new(&m, None, &cfg(Strategy::CrossBatch, Level::Sgrna, 2, 2)).unwrap();
        assert_eq!(idx.n_feasible(), 0);
        let plan = build_minibatch(&idx, 0, &mut seed::rng(1, &[]));
        assert!(plan.set_pairs.is_empty());
    }

    #[test]
    fn infeasible_perturbations_are_skipped_not_fatal() {
        // Guide 0 has only 3 cells per batch: too few for two disjoint sets of 2.
        let m = manifest(&[vec![3, 3], vec![4, 1], vec![8, 8]]);
        let idx = SetIndex::new(&m, None, &cfg(Strategy::WithinBatch, Level::Sgrna, 3, 2)).unwrap();
        assert_eq!(idx.skipped(), &[Perturbation::Guide(0)]);
        let plan = build_minibatch(&idx, 0, &mut seed::rng(1, &[]));
        assert_eq!(plan.set_pairs.len(), 2);
        check_plan(&m, &plan).unwrap();
        assert!(plan
            .set_pairs
            .iter()
            .all(|p| p.perturbation != Perturbation::Guide(1) || p.student_batch == 0));
    }

    #[test]
    fn gene_level_sets_mix_guides() {
        // Guides 0 and 1 target gene 0 with 1 cell each per batch.
        let m = manifest(&[vec![1, 1], vec![1, 1], vec![2, 2]]);
        let idx = SetIndex::new(&m, None, &cfg(Strategy::CrossBatch, Level::GeneTarget, 4, 2)).unwrap();
        let plan = build_minibatch(&idx, 0, &mut seed::rng(3, &[]));
        check_plan(&m, &plan).unwrap();
        let pair = plan
            .set_pairs
            .iter()
            .find(|p| p.perturbation == Perturbation::Gene(0))
            .unwrap();
        let guides: std::collections::BTreeSet<u32> =
            pair.student_set.iter().map(|&i| m[i].guide_id).collect();
        assert_eq!(guides.len(), 2);
    }

    #[test]
    fn ntc_can_be_excluded() {
        let m = manifest(&vec![vec![4, 4]; 3]);
        let mut c = cfg(Strategy::CrossBatch, Level::GeneTarget, 8, 1);
        assert!(SetIndex::new(&m, None, &c).unwrap().feasible().any(|p| p == Perturbation::Ntc));
        c.include_ntc = false;
        assert!(!SetIndex::new(&m, None, &c).unwrap().feasible().any(|p| p == Perturbation::Ntc));
    }

    #[test]
    fn iterator_is_deterministic_and_counted() {
        let m = manifest(&vec![vec![6, 6, 6]; 8]);
        let idx = SetIndex::new(&m, None, &cfg(Strategy::CrossBatch, Level::Sgrna, 4, 2)).unwrap();
        let a: Vec<_> = EpochIterator::new(&idx, 200, 1, 9).unwrap().collect();
        let b: Vec<_> = EpochIterator::new(&idx, 200, 1, 9).unwrap().collect();
        assert_eq!(a.len(), 200);
        assert_eq!(a, b);
        let resumed: Vec<_> = EpochIterator::new(&idx, 200, 1, 9).unwrap().resume_at(150).collect();
        assert_eq!(&a[150..], &resumed[..]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn selection_frequency_is_uniform() {
        // 20 perturbations, 5 drawn per minibatch, 4000 minibatches.
        let m = manifest(&vec![vec![3, 3]; 20]);
        let idx = SetIndex::new(&m, None, &cfg(Strategy::CrossBatch, Level::Sgrna, 5, 1)).unwrap();
        let mut counts = BTreeMap::new();
        let steps = 4000;
        for plan in EpochIterator::new(&idx, 100, steps / 100, 17).unwrap() {
            for p in plan.set_pairs {
                *counts.entry(p.perturbation).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 20);
        let expected = steps as f64 * 5.0 / 20.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // Chi-square with 19 degrees of freedom: mean 19, sd sqrt(38); 3 sigma above the mean.
        assert!(chi2 < 19.0 + 3.0 * 38f64.sqrt(), "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn plans_never_violate_contracts(
            counts in proptest::collection::vec(proptest::collection::vec(0usize..7, 1..5), 2..9),
            strategy in prop_oneof![Just(Strategy::SameCells), Just(Strategy::WithinBatch), Just(Strategy::CrossBatch)],
            level in prop_oneof![Just(Level::Sgrna), Just(Level::GeneTarget)],
            n in 1usize..4,
            n_p in 1usize..6,
            seed in 0u64..10_000,
        ) {
            let width = counts.iter().map(Vec::len).max().unwrap();
            let counts: Vec<Vec<usize>> = counts
                .into_iter()
                .map(|mut v| { v.resize(width, 0); v })
                .collect();
            let m = manifest(&counts);
            let idx = SetIndex::new(&m, None, &cfg(strategy, level, n_p, n)).unwrap();
            let plan = build_minibatch(&idx, 0, &mut seed::rng(seed, &[]));
            prop_assert!(check_plan(&m, &plan).is_ok());
            prop_assert_eq!(plan.set_pairs.len(), n_p.min(idx.n_feasible()));
        }
    }
}
