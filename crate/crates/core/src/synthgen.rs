//! Miniature synthetic optical pooled screen with planted ground truth.
//!
//! A world holds one sparse effect vector per gene in the space of the
//! renderer's controllable parameters, a module structure over genes (the
//! biological-relationship oracle), per-guide efficacies and per-batch
//! technical confounders. Cells are rendered procedurally from a seed, so a
//! dataset is fully described by its metadata.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::imageproc::gaussian_blur;
use crate::seed::{self, tag};

/// Controllable render parameters. Gene effects live in this space, in units
/// of the per-parameter cell-to-cell standard deviation.
pub mod param {
    pub const NUCLEUS_RADIUS: usize = 0;
    pub const NUCLEUS_ELONGATION: usize = 1;
    pub const DNA_INTENSITY: usize = 2;
    pub const FOCI_COUNT: usize = 3;
    pub const DAMAGE_INTENSITY: usize = 4;
    pub const CELL_RADIUS: usize = 5;
    pub const ACTIN_INTENSITY: usize = 6;
    pub const FILAMENT_COUNT: usize = 7;
    pub const FILAMENT_COHERENCE: usize = 8;
    pub const TUBULIN_INTENSITY: usize = 9;
    pub const COUNT: usize = 10;

    pub const NAMES: [&str; COUNT] = [
        "nucleus_radius",
        "nucleus_elongation",
        "dna_intensity",
        "foci_count",
        "damage_intensity",
        "cell_radius",
        "actin_intensity",
        "filament_count",
        "filament_coherence",
        "tubulin_intensity",
    ];

    /// (baseline, unit, min, max), geometry in pixels at a 64-pixel image.
    pub const SPEC: [(f64, f64, f64, f64); COUNT] = [
        (9.0, 1.2, 3.0, 20.0),
        (0.15, 0.07, 0.0, 0.6),
        (1.0, 0.15, 0.05, 3.0),
        (4.0, 1.5, 0.0, 20.0),
        (0.6, 0.12, 0.0, 3.0),
        (20.0, 2.0, 8.0, 30.0),
        (0.7, 0.12, 0.05, 3.0),
        (14.0, 3.0, 0.0, 40.0),
        (0.3, 0.12, 0.0, 1.0),
        (0.7, 0.12, 0.05, 3.0),
    ];
}

/// Per-batch technical confounders applied after rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfounder {
    pub gain: [f64; CHANNELS],
    pub offset: [f64; CHANNELS],
    pub blur_sigma: f64,
}

impl BatchConfounder {
    pub fn identity() -> Self {
        BatchConfounder {
            gain: [1.0; CHANNELS],
            offset: [0.0; CHANNELS],
            blur_sigma: 0.0,
        }
    }

    pub fn with_gain(gain: f64) -> Self {
        BatchConfounder {
            gain: [gain; CHANNELS],
            ..Self::identity()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_genes: usize,
    pub guides_per_gene: usize,
    pub n_ntc_guides: usize,
    pub n_batches: usize,
    pub n_modules: usize,
    pub module_size: usize,
    /// Minimum pairwise cosine similarity of effect vectors inside a module.
    pub module_cosine_floor: f64,
    /// Per-parameter jitter of member directions around the module direction.
    pub module_jitter: f64,
    /// Median effect magnitude (log-normal), in cell-noise units.
    pub effect_median: f64,
    /// Log-scale spread of effect magnitudes.
    pub effect_log_sd: f64,
    pub effect_support_min: usize,
    pub effect_support_max: usize,
    pub guide_efficacy_min: f64,
    pub guide_efficacy_max: f64,
    /// Fraction of targeting guides drawn as weak guides (efficacy below 0.3).
    pub weak_guide_rate: f64,
    pub escaper_rate: f64,
    /// Cell-to-cell variation of every render parameter, in parameter units.
    pub cell_noise: f64,
    pub image_size: usize,
    pub sensor_noise: f64,
    pub confounders: bool,
    pub gain_min: f64,
    pub gain_max: f64,
    pub offset_max: f64,
    pub blur_max: f64,
    /// Explicit per-batch confounders; overrides the random draw when set.
    pub batch_confounders: Option<Vec<BatchConfounder>>,
    /// Extra ground-truth pairs with no morphological signal (the analogue
    /// of overlapping complexes in a full relationship database).
    pub n_decoy_edges: usize,
    /// Slope of an optional multiplicative illumination plane along the well row.
    pub illumination_slope: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_genes: 64,
            guides_per_gene: 4,
            n_ntc_guides: 8,
            n_batches: 6,
            n_modules: 8,
            module_size: 4,
            module_cosine_floor: 0.8,
            module_jitter: 0.25,
            effect_median: 1.0,
            effect_log_sd: 0.6,
            effect_support_min: 2,
            effect_support_max: 4,
            guide_efficacy_min: 0.6,
            guide_efficacy_max: 1.0,
            weak_guide_rate: 0.1,
            escaper_rate: 0.15,
            cell_noise: 1.0,
            image_size: 64,
            sensor_noise: 0.01,
            confounders: true,
            gain_min: 0.7,
            gain_max: 1.4,
            offset_max: 0.05,
            blur_max: 1.5,
            batch_confounders: None,
            n_decoy_edges: 40,
            illumination_slope: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        fn at_least_one(field: &str, v: usize) -> Result<()> {
            if v == 0 {
                Err(Error::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        }
        fn unit(field: &str, v: f64) -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                Err(Error::config(field, format!("{v} is outside [0, 1]")))
            } else {
                Ok(())
            }
        }
        at_least_one("n_genes", self.n_genes)?;
        at_least_one("guides_per_gene", self.guides_per_gene)?;
        at_least_one("n_ntc_guides", self.n_ntc_guides)?;
        at_least_one("n_batches", self.n_batches)?;
        unit("escaper_rate", self.escaper_rate)?;
        unit("guide_efficacy_min", self.guide_efficacy_min)?;
        unit("guide_efficacy_max", self.guide_efficacy_max)?;
        unit("weak_guide_rate", self.weak_guide_rate)?;
        if self.guide_efficacy_min > self.guide_efficacy_max {
            return Err(Error::config(
                "guide_efficacy_min",
                "must not exceed guide_efficacy_max",
            ));
        }
        if self.n_modules > self.n_genes {
            return Err(Error::config("n_modules", "module count exceeds n_genes"));
        }
        if self.n_modules > 0 && self.module_size < 2 {
            return Err(Error::config("module_size", "modules need at least 2 genes"));
        }
        if self.n_modules * self.module_size > self.n_genes {
            return Err(Error::config(
                "module_size",
                "n_modules * module_size exceeds n_genes",
            ));
        }
        if !(-1.0..=1.0).contains(&self.module_cosine_floor) {
            return Err(Error::config("module_cosine_floor", "must lie in [-1, 1]"));
        }
        if self.effect_support_min == 0
            || self.effect_support_min > self.effect_support_max
            || self.effect_support_max > param::COUNT
        {
            return Err(Error::config(
                "effect_support_min",
                format!("support range must satisfy 1 <= min <= max <= {}", param::COUNT),
            ));
        }
        if self.effect_median < 0.0 || self.effect_log_sd < 0.0 || self.cell_noise < 0.0 {
            return Err(Error::config("effect_median", "magnitudes must be non-negative"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16 pixels"));
        }
        if self.gain_min <= 0.0 || self.gain_min > self.gain_max {
            return Err(Error::config("gain_min", "gains must satisfy 0 < min <= max"));
        }
        if self.offset_max < 0.0 || self.blur_max < 0.0 || self.sensor_noise < 0.0 {
            return Err(Error::config("blur_max", "must be non-negative"));
        }
        if let Some(list) = &self.batch_confounders {
            if list.len() != self.n_batches {
                return Err(Error::config(
                    "batch_confounders",
                    format!("{} entries for {} batches", list.len(), self.n_batches),
                ));
            }
            for c in list {
                if c.gain.iter().any(|&g| g <= 0.0) || c.blur_sigma < 0.0 {
                    return Err(Error::config(
                        "batch_confounders",
                        "gains must be positive and blur non-negative",
                    ));
                }
            }
        }
        let pairs = self.n_genes * (self.n_genes - 1) / 2;
        if self.n_decoy_edges > pairs.saturating_sub(self.module_edge_count()) {
            return Err(Error::config("n_decoy_edges", "more decoys than free gene pairs"));
        }
        Ok(())
    }

    fn module_edge_count(&self) -> usize {
        self.n_modules * self.module_size * self.module_size.saturating_sub(1) / 2
    }
}

/// Ground truth of the synthetic screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub rng_seed: u64,
    pub n_genes: usize,
    pub guides_per_gene: usize,
    pub n_ntc_guides: usize,
    pub n_batches: usize,
    pub gene_names: Vec<String>,
    /// One vector of length `param::COUNT` per gene.
    pub gene_effects: Vec<Vec<f64>>,
    pub module_assignment: Vec<Option<usize>>,
    pub guide_efficacy: Vec<f64>,
    pub batch_confounders: Vec<BatchConfounder>,
    pub escaper_rate: f64,
    /// Gene pairs related in the full truth but without shared morphology.
    pub decoy_edges: Vec<(u32, u32)>,
}

/// Metadata of one guide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuideInfo {
    pub guide_id: u32,
    /// `None` for non-targeting controls.
    pub gene_id: Option<u32>,
}

impl WorldSpec {
    pub fn n_guides(&self) -> usize {
        self.n_genes * self.guides_per_gene + self.n_ntc_guides
    }

    pub fn guide(&self, guide_id: u32) -> Result<GuideInfo> {
        let g = guide_id as usize;
        if g >= self.n_guides() {
            return Err(Error::Lookup(format!("guide {guide_id} does not exist")));
        }
        let targeting = self.n_genes * self.guides_per_gene;
        let gene_id = (g < targeting).then(|| (g / self.guides_per_gene) as u32);
        Ok(GuideInfo { guide_id, gene_id })
    }

    pub fn guides(&self) -> impl Iterator<Item = GuideInfo> + '_ {
        (0..self.n_guides() as u32).map(|g| self.guide(g).expect("in range"))
    }

    pub fn gene_name(&self, gene: Option<u32>) -> &str {
        match gene {
            Some(g) => &self.gene_names[g as usize],
            None => NTC_LABEL,
        }
    }

    /// All within-module gene pairs `(a, b)` with `a < b`, sorted.
    pub fn module_edges(&self) -> Vec<(u32, u32)> {
        let mut edges = Vec::new();
        for a in 0..self.n_genes {
            for b in a + 1..self.n_genes {
                if let (Some(ma), Some(mb)) = (self.module_assignment[a], self.module_assignment[b])
                {
                    if ma == mb {
                        edges.push((a as u32, b as u32));
                    }
                }
            }
        }
        edges
    }

    /// Module edges plus decoy edges, sorted and deduplicated.
    pub fn full_truth_edges(&self) -> Vec<(u32, u32)> {
        let set: BTreeSet<(u32, u32)> = self
            .module_edges()
            .into_iter()
            .chain(self.decoy_edges.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    /// Gene ids ordered by module (module members contiguous), then unassigned genes.
    pub fn module_sorted_genes(&self) -> Vec<u32> {
        let mut order: Vec<u32> = (0..self.n_genes as u32).collect();
        order.sort_by_key(|&g| (self.module_assignment[g as usize].unwrap_or(usize::MAX), g));
        order
    }
}

pub const NTC_LABEL: &str = "NTC";

fn lognormal_magnitude(rng: &mut impl Rng, median: f64, log_sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    median * (log_sd * z).exp()
}

fn sparse_direction(rng: &mut impl Rng, support_min: usize, support_max: usize) -> Vec<f64> {
    let size = rng.random_range(support_min..=support_max);
    let mut idx: Vec<usize> = (0..param::COUNT).collect();
    idx.shuffle(rng);
    let mut v = vec![0.0; param::COUNT];
    for &i in &idx[..size] {
        let z: f64 = StandardNormal.sample(rng);
        // Keep every supported parameter visibly non-zero.
        v[i] = z.signum() * (0.3 + z.abs());
    }
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Build the ground truth of a synthetic screen. Pure in `(config, seed)`.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<WorldSpec> {
    config.validate()?;
    let n_genes = config.n_genes;

    let mut module_rng = seed::rng(seed, &[tag::MODULES]);
    let mut order: Vec<usize> = (0..n_genes).collect();
    order.shuffle(&mut module_rng);
    let mut module_assignment = vec![None; n_genes];
    for m in 0..config.n_modules {
        for &g in &order[m * config.module_size..(m + 1) * config.module_size] {
            module_assignment[g] = Some(m);
        }
    }

    let mut effect_rng = seed::rng(seed, &[tag::GENE_EFFECT]);
    let mut directions: Vec<Option<Vec<f64>>> = vec![None; n_genes];
    let jitter = Normal::new(0.0, config.module_jitter.max(0.0)).expect("valid sd");
    for m in 0..config.n_modules {
        let base = sparse_direction(
            &mut effect_rng,
            config.effect_support_min.max(2),
            config.effect_support_max.max(2),
        );
        let members = &order[m * config.module_size..(m + 1) * config.module_size];
        let mut accepted: Vec<Vec<f64>> = Vec::new();
        for &g in members {
            let mut candidate = base.clone();
            for attempt in 0..1000 {
                candidate = base.clone();
                let scale = if attempt < 500 { 1.0 } else { 0.5 };
                for (c, b) in candidate.iter_mut().zip(&base) {
                    if *b != 0.0 {
                        *c += scale * jitter.sample(&mut effect_rng);
                    }
                }
                normalize(&mut candidate);
                if accepted
                    .iter()
                    .all(|a| cosine(a, &candidate) >= config.module_cosine_floor)
                {
                    break;
                }
                if attempt == 999 {
                    candidate = base.clone();
                }
            }
            accepted.push(candidate.clone());
            directions[g] = Some(candidate);
        }
    }
    let mut gene_effects = Vec::with_capacity(n_genes);
    for g in 0..n_genes {
        let dir = match directions[g].take() {
            Some(d) => d,
            None => sparse_direction(
                &mut effect_rng,
                config.effect_support_min,
                config.effect_support_max,
            ),
        };
        let mag = lognormal_magnitude(&mut effect_rng, config.effect_median, config.effect_log_sd);
        gene_effects.push(dir.into_iter().map(|x| x * mag).collect::<Vec<f64>>());
    }

    let mut guide_rng = seed::rng(seed, &[tag::GUIDES]);
    let mut guide_efficacy = Vec::new();
    for _ in 0..n_genes * config.guides_per_gene {
        let e = if guide_rng.random::<f64>() < config.weak_guide_rate {
            guide_rng.random_range(0.0..0.3)
        } else if config.guide_efficacy_max > config.guide_efficacy_min {
            guide_rng.random_range(config.guide_efficacy_min..config.guide_efficacy_max)
        } else {
            config.guide_efficacy_min
        };
        guide_efficacy.push(e);
    }
    guide_efficacy.extend(std::iter::repeat_n(0.0, config.n_ntc_guides));

    let batch_confounders = match &config.batch_confounders {
        Some(list) => list.clone(),
        None if !config.confounders => vec![BatchConfounder::identity(); config.n_batches],
        None => {
            let mut rng = seed::rng(seed, &[tag::BATCHES]);
            (0..config.n_batches)
                .map(|_| {
                    let mut gain = [0.0; CHANNELS];
                    let mut offset = [0.0; CHANNELS];
                    for c in 0..CHANNELS {
                        gain[c] = if config.gain_max > config.gain_min {
                            rng.random_range(config.gain_min..config.gain_max)
                        } else {
                            config.gain_min
                        };
                        offset[c] = config.offset_max * rng.random::<f64>();
                    }
                    BatchConfounder {
                        gain,
                        offset,
                        blur_sigma: config.blur_max * rng.random::<f64>(),
                    }
                })
                .collect()
        }
    };

    let mut decoy_rng = seed::rng(seed, &[tag::DECOYS]);
    let modules: BTreeSet<(u32, u32)> = {
        let mut set = BTreeSet::new();
        for a in 0..n_genes {
            for b in a + 1..n_genes {
                if module_assignment[a].is_some() && module_assignment[a] == module_assignment[b] {
                    set.insert((a as u32, b as u32));
                }
            }
        }
        set
    };
    let mut decoys = BTreeSet::new();
    while decoys.len() < config.n_decoy_edges {
        let a = decoy_rng.random_range(0..n_genes as u32);
        let b = decoy_rng.random_range(0..n_genes as u32);
        if a == b {
            continue;
        }
        let e = (a.min(b), a.max(b));
        if !modules.contains(&e) {
            decoys.insert(e);
        }
    }

    Ok(WorldSpec {
        config: config.clone(),
        rng_seed: seed,
        n_genes,
        guides_per_gene: config.guides_per_gene,
        n_ntc_guides: config.n_ntc_guides,
        n_batches: config.n_batches,
        gene_names: (0..n_genes).map(|g| format!("G{g:03}")).collect(),
        gene_effects,
        module_assignment,
        guide_efficacy,
        batch_confounders,
        escaper_rate: config.escaper_rate,
        decoy_edges: decoys.into_iter().collect(),
    })
}

/// Split membership of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Number of batches per split; assigned in batch-id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitConfig {
    pub fn assign(&self, n_batches: usize) -> Result<Vec<Split>> {
        if self.train + self.val + self.test != n_batches {
            return Err(Error::config(
                "split",
                format!(
                    "train + val + test = {} but the world has {n_batches} batches",
                    self.train + self.val + self.test
                ),
            ));
        }
        let mut out = vec![Split::Train; self.train];
        out.extend(std::iter::repeat_n(Split::Val, self.val));
        out.extend(std::iter::repeat_n(Split::Test, self.test));
        Ok(out)
    }

    /// Default split for `n` batches: one validation batch, and roughly two
    /// ninths held out for testing (at least two once `n >= 5`, so that
    /// cross-batch evaluation is possible on the test split alone).
    pub fn for_batches(n: usize) -> Self {
        match n {
            0 | 1 => SplitConfig { train: n, val: 0, test: 0 },
            2 => SplitConfig { train: 1, val: 0, test: 1 },
            3 | 4 => SplitConfig { train: n - 2, val: 1, test: 1 },
            _ => {
                let test = ((2 * n + 4) / 9).max(2);
                SplitConfig { train: n - 1 - test, val: 1, test }
            }
        }
    }
}

/// Metadata of one synthetic cell; the image is re-rendered from `cell_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub cell_id: u64,
    /// `None` for non-targeting controls.
    pub gene_id: Option<u32>,
    pub guide_id: u32,
    pub batch_id: u32,
    pub escaper: bool,
    pub well_position: (f64, f64),
    pub cell_seed: u64,
    pub split: Split,
}

impl CellMeta {
    pub fn is_ntc(&self) -> bool {
        self.gene_id.is_none()
    }
}

/// One rendered cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub meta: CellMeta,
    pub image: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub cells_per_guide_per_batch: usize,
    pub split: Option<SplitConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            cells_per_guide_per_batch: 16,
            split: None,
        }
    }
}

/// A world plus the metadata of every cell in the screen.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldSpec,
    pub cells: Vec<CellMeta>,
    pub batch_split: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells_in(&self, split: Split) -> impl Iterator<Item = (usize, &CellMeta)> {
        self.cells
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.split == split)
    }

    pub fn batches_in(&self, split: Split) -> Vec<u32> {
        self.batch_split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(b, _)| b as u32)
            .collect()
    }
}

/// Enumerate `cells_per_guide_per_batch` cells for every (guide, batch) pair.
pub fn generate_dataset(world: &WorldSpec, config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if config.cells_per_guide_per_batch == 0 {
        return Err(Error::config(
            "cells_per_guide_per_batch",
            "must be at least 1",
        ));
    }
    let split_cfg = config
        .split
        .unwrap_or_else(|| SplitConfig::for_batches(world.n_batches));
    let batch_split = split_cfg.assign(world.n_batches)?;
    let mut cells = Vec::with_capacity(
        world.n_guides() * world.n_batches * config.cells_per_guide_per_batch,
    );
    let mut cell_id = 0u64;
    for batch in 0..world.n_batches as u32 {
        for guide in world.guides() {
            for k in 0..config.cells_per_guide_per_batch as u64 {
                let cell_seed = seed::derive(
                    seed,
                    &[tag::CELL, guide.guide_id as u64, batch as u64, k],
                );
                let mut pos_rng = seed::rng(cell_seed, &[tag::POSITION]);
                cells.push(CellMeta {
                    cell_id,
                    gene_id: guide.gene_id,
                    guide_id: guide.guide_id,
                    batch_id: batch,
                    escaper: escaper_coin(world, guide.gene_id, cell_seed),
                    well_position: (pos_rng.random::<f64>(), pos_rng.random::<f64>()),
                    cell_seed,
                    split: batch_split[batch as usize],
                });
                cell_id += 1;
            }
        }
    }
    Ok(Dataset {
        world: world.clone(),
        cells,
        batch_split,
    })
}

fn escaper_coin(world: &WorldSpec, gene: Option<u32>, cell_seed: u64) -> bool {
    gene.is_some() && seed::rng(cell_seed, &[tag::ESCAPE]).random::<f64>() < world.escaper_rate
}

/// The effect vector actually rendered for a cell (zero for NTCs and escapers).
pub fn effective_effect(world: &WorldSpec, gene: Option<u32>, guide: u32, cell_seed: u64) -> Vec<f64> {
    match gene {
        Some(g) if !escaper_coin(world, gene, cell_seed) => world.gene_effects[g as usize]
            .iter()
            .map(|e| e * world.guide_efficacy[guide as usize])
            .collect(),
        _ => vec![0.0; param::COUNT],
    }
}

/// Render one cell of `gene`/`guide` in `batch`.
pub fn render_cell(
    world: &WorldSpec,
    gene: Option<u32>,
    guide: u32,
    batch: u32,
    cell_seed: u64,
) -> Result<CellRecord> {
    let info = world.guide(guide)?;
    if info.gene_id != gene {
        return Err(Error::Lookup(format!(
            "guide {guide} targets {:?}, not {:?}",
            info.gene_id, gene
        )));
    }
    if batch as usize >= world.n_batches {
        return Err(Error::Lookup(format!("batch {batch} does not exist")));
    }
    let effect = effective_effect(world, gene, guide, cell_seed);
    let confounder = &world.batch_confounders[batch as usize];
    let mut pos_rng = seed::rng(cell_seed, &[tag::POSITION]);
    let well_position = (pos_rng.random::<f64>(), pos_rng.random::<f64>());
    let image = render_with(world, &effect, confounder, cell_seed, well_position.0);
    Ok(CellRecord {
        meta: CellMeta {
            cell_id: 0,
            gene_id: gene,
            guide_id: guide,
            batch_id: batch,
            escaper: escaper_coin(world, gene, cell_seed),
            well_position,
            cell_seed,
            split: Split::Train,
        },
        image,
    })
}

/// Render a cell for dataset metadata.
pub fn render_meta(world: &WorldSpec, meta: &CellMeta) -> Result<Image> {
    let mut rec = render_cell(world, meta.gene_id, meta.guide_id, meta.batch_id, meta.cell_seed)?;
    rec.meta = meta.clone();
    Ok(rec.image)
}

/// Render parameters for a cell: baseline + (effect + cell noise) * unit, clamped.
pub fn render_params(world: &WorldSpec, effect: &[f64], cell_seed: u64) -> [f64; param::COUNT] {
    let mut rng = seed::rng(cell_seed, &[tag::RENDER]);
    let mut p = [0.0; param::COUNT];
    for (i, slot) in p.iter_mut().enumerate() {
        let (base, unit, lo, hi) = param::SPEC[i];
        let z: f64 = StandardNormal.sample(&mut rng);
        *slot = (base + (effect[i] + world.config.cell_noise * z) * unit).clamp(lo, hi);
    }
    p
}

/// Render with an explicit effect vector and confounder.
pub fn render_with(
    world: &WorldSpec,
    effect: &[f64],
    confounder: &BatchConfounder,
    cell_seed: u64,
    well_row: f64,
) -> Image {
    let params = render_params(world, effect, cell_seed);
    let mut img = render_params_image(&params, world.config.image_size, world.config.sensor_noise, cell_seed);
    if world.config.illumination_slope != 0.0 {
        let f = (1.0 + world.config.illumination_slope * (well_row - 0.5)).max(0.0) as f32;
        img.data.iter_mut().for_each(|v| *v *= f);
    }
    apply_confounder(&mut img, confounder);
    img
}

/// `image <- gain * image + offset`, then Gaussian blur, clamped at zero.
pub fn apply_confounder(img: &mut Image, confounder: &BatchConfounder) {
    for c in 0..img.channels.min(CHANNELS) {
        let g = confounder.gain[c] as f32;
        let o = confounder.offset[c] as f32;
        img.channel_mut(c).iter_mut().for_each(|v| *v = g * *v + o);
    }
    if confounder.blur_sigma > 0.0 {
        *img = gaussian_blur(img, confounder.blur_sigma);
    }
    img.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Procedural 4-channel cell: soft elliptical nucleus (DNA), damage foci,
/// cortical actin ring, and tubulin filaments.
pub fn render_params_image(p: &[f64; param::COUNT], size: usize, sensor_noise: f64, cell_seed: u64) -> Image {
    use param::*;
    let mut rng = seed::rng(cell_seed, &[tag::RENDER, 1]);
    let s = size as f64;
    let scale = s / 64.0;
    let cx = s / 2.0 + rng.random_range(-2.0..2.0) * scale;
    let cy = s / 2.0 + rng.random_range(-2.0..2.0) * scale;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin_t, cos_t) = theta.sin_cos();

    let r_nuc = p[NUCLEUS_RADIUS] * scale;
    let e = p[NUCLEUS_ELONGATION];
    let (ax, bx) = (r_nuc * (1.0 + e), r_nuc * (1.0 - e));
    let r_cell = (p[CELL_RADIUS] * scale).max(r_nuc * 1.2);
    let (cax, cbx) = (r_cell * (1.0 + 0.5 * e), r_cell * (1.0 - 0.5 * e));

    let mut img = Image::zeros(CHANNELS, size, size);
    let n = size * size;
    let mut nuc_mask = vec![0.0f64; n];
    let mut cell_mask = vec![0.0f64; n];
    let mut ring = vec![0.0f64; n];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            let dn = ((u / ax).powi(2) + (v / bx).powi(2)).sqrt();
            nuc_mask[y * size + x] = sigmoid((1.0 - dn) * r_nuc / 0.8);
            let dc = ((u / cax).powi(2) + (v / cbx).powi(2)).sqrt();
            cell_mask[y * size + x] = sigmoid((1.0 - dc) * r_cell / 1.0);
            let edge = (dc - 0.92) * r_cell;
            ring[y * size + x] = (-(edge * edge) / (2.0 * (1.6 * scale).powi(2))).exp();
        }
    }

    // DNA
    for (i, v) in img.channel_mut(0).iter_mut().enumerate() {
        *v = (p[DNA_INTENSITY] * nuc_mask[i]) as f32;
    }

    // DNA damage: diffuse nuclear signal plus Gaussian foci inside the nucleus.
    let n_foci = p[FOCI_COUNT].round().max(0.0) as usize;
    let foci_sigma = 1.2 * scale;
    let mut foci = Vec::with_capacity(n_foci);
    for _ in 0..n_foci {
        let rr = 0.75 * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (u, v) = (rr * ax * phi.cos(), rr * bx * phi.sin());
        foci.push((cx + u * cos_t - v * sin_t, cy + u * sin_t + v * cos_t));
    }
    {
        let amp = p[DAMAGE_INTENSITY];
        let ch = img.channel_mut(1);
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                let mut val = 0.15 * amp * nuc_mask[i];
                for &(fx, fy) in &foci {
                    let d2 = (x as f64 + 0.5 - fx).powi(2) + (y as f64 + 0.5 - fy).powi(2);
                    if d2 < 16.0 * foci_sigma * foci_sigma {
                        val += amp * (-d2 / (2.0 * foci_sigma * foci_sigma)).exp();
                    }
                }
                ch[i] = val as f32;
            }
        }
    }

    // F-actin: cytoplasm plus cortical ring.
    for (i, v) in img.channel_mut(2).iter_mut().enumerate() {
        *v = (p[ACTIN_INTENSITY] * (0.35 * cell_mask[i] + 0.65 * ring[i] * cell_mask[i].max(0.3)))
            as f32;
    }

    // Tubulin: diffuse cytoplasm plus straight filaments with partly coherent orientation.
    let n_fil = p[FILAMENT_COUNT].round().max(0.0) as usize;
    let coherence = p[FILAMENT_COHERENCE];
    let dominant: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let width = 0.8 * scale;
    let mut tub = vec![0.0f64; n];
    for i in 0..n {
        tub[i] = 0.15 * cell_mask[i];
    }
    for _ in 0..n_fil {
        let phi = if rng.random::<f64>() < coherence {
            dominant + rng.random_range(-0.15..0.15)
        } else {
            rng.random_range(0.0..std::f64::consts::PI)
        };
        let rr = 0.6 * r_cell * rng.random::<f64>().sqrt();
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (px, py) = (cx + rr * a.cos(), cy + rr * a.sin());
        let (nx, ny) = (-phi.sin(), phi.cos());
        let amp = 0.5 + 0.5 * rng.random::<f64>();
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                if cell_mask[i] < 0.02 {
                    continue;
                }
                let d = (x as f64 + 0.5 - px) * nx + (y as f64 + 0.5 - py) * ny;
                if d.abs() < 3.0 * width {
                    tub[i] += amp * (-(d * d) / (2.0 * width * width)).exp() * cell_mask[i];
                }
            }
        }
    }
    for (v, t) in img.channel_mut(3).iter_mut().zip(&tub) {
        *v = (p[TUBULIN_INTENSITY] * t.min(2.5)) as f32;
    }

    if sensor_noise > 0.0 {
        let noise = Normal::new(0.0, sensor_noise).expect("valid sd");
        for v in img.data.iter_mut() {
            *v = (*v as f64 + noise.sample(&mut rng)).max(0.0) as f32;
        }
    }
    img
}
