//! Experiment stages behind the command line: configuration loading, run
//! manifests, and the synth / train / embed / evaluate / ablate / report steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{
    adjacency_matrix, adjacency_svg, evaluate, pair_similarities, pr_curve_svg, write_adjacency_csv, MetricsReport,
    RelationGraph, DEFAULT_K,
};
use crate::profiles::{
    batch_gene_profiles, consensus_profiles, extract_engineered_profiles, extract_single_cell_profiles,
    guide_profiles, pca_reduce, robust_normalize, EmbeddingTable,
};
use crate::sampler::{Level, Strategy};
use crate::store::{
    open_dataset, read_json, read_pairs_csv, write_dataset, write_json, CellSource, Normalization, PreprocessConfig,
    Preprocessor, MANIFEST_FILE, TRUTH_CURATED_FILE, TRUTH_FULL_FILE, WORLD_FILE,
};
use crate::synthgen::{generate_dataset, generate_world, DatasetConfig, Split, WorldConfig};
use crate::trainer::{load_teacher, HistoryRow, TrainConfig, TrainState, Trainer, CHECKPOINT_FILE, HISTORY_FILE};

/// Environment overrides: `SETDINO__TRAIN__EPOCHS=5` sets `train.epochs`.
pub const ENV_PREFIX: &str = "SETDINO__";
pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const PREPROCESSOR_FILE: &str = "preprocessor.json";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

/// Table names written by [`embed`].
pub const TABLES: [&str; 4] = ["single_cell", "batch_guide", "batch_gene", "consensus"];

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Class tokens of the trained teacher.
    Learned,
    /// Hand-crafted features with NTC median/MAD normalisation.
    Engineered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub features: FeatureSource,
    /// Splits whose cells are profiled.
    pub splits: Vec<Split>,
    /// Variance cutoff of the single-cell PCA. Unset means 0.95 for
    /// engineered features and no PCA for learned ones.
    pub pca_cutoff: Option<f64>,
    /// Set to false to skip PCA on engineered features.
    pub engineered_pca: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            features: FeatureSource::Learned,
            splits: vec![Split::Test],
            pca_cutoff: None,
            engineered_pca: true,
        }
    }
}

impl EmbedConfig {
    pub fn effective_pca_cutoff(&self) -> Option<f64> {
        match (self.features, self.pca_cutoff) {
            (_, Some(c)) => Some(c),
            (FeatureSource::Engineered, None) if self.engineered_pca => Some(0.95),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub k: usize,
    /// Top-percentile cutoff of the predicted graph in the adjacency export.
    pub adjacency_percentile: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            k: DEFAULT_K,
            adjacency_percentile: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub strategy: Strategy,
    pub n: usize,
    #[serde(default)]
    pub level: Option<Level>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

impl ArmConfig {
    fn new(strategy: Strategy, n: usize) -> Self {
        ArmConfig {
            name: None,
            strategy,
            n,
            level: None,
            normalization: None,
        }
    }

    /// Same cells with one cell per set is plain DINO.
    pub fn is_standard_dino(&self) -> bool {
        self.strategy == Strategy::SameCells && self.n == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub arms: Vec<ArmConfig>,
    /// Training seeds; every arm runs once per seed on the shared dataset.
    pub seeds: Vec<u64>,
    /// Arms whose final-epoch collapse indicator is below `collapse_fraction * ln K` are flagged.
    pub collapse_fraction: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        use Strategy::*;
        AblateConfig {
            arms: vec![
                ArmConfig::new(SameCells, 1),
                ArmConfig::new(SameCells, 4),
                ArmConfig::new(WithinBatch, 1),
                ArmConfig::new(WithinBatch, 4),
                ArmConfig::new(CrossBatch, 1),
                ArmConfig::new(CrossBatch, 4),
                ArmConfig::new(CrossBatch, 8),
            ],
            seeds: vec![0],
            collapse_fraction: 0.05,
        }
    }
}

/// Everything a run needs, in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seed of the world, the dataset and the preprocessing samples.
    pub seed: u64,
    /// Write rendered images next to the manifest instead of re-rendering them on read.
    pub store_images: bool,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub embed: EmbedConfig,
    pub evaluate: EvaluateConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            store_images: false,
            world: WorldConfig::default(),
            dataset: DatasetConfig::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            embed: EmbedConfig::default(),
            evaluate: EvaluateConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Qualify a configuration error with its section name.
fn in_section(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{section}.{field}"),
            message,
        },
        other => other,
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        in_section("world", self.world.validate())?;
        if self.dataset.cells_per_guide_per_batch == 0 {
            return Err(Error::config("dataset.cells_per_guide_per_batch", "must be at least 1"));
        }
        if let Some(split) = &self.dataset.split {
            in_section("dataset", split.assign(self.world.n_batches).map(|_| ()))?;
        }
        in_section("train", self.train.validate())?;
        if self.embed.splits.is_empty() {
            return Err(Error::config("embed.splits", "must name at least one split"));
        }
        if let Some(c) = self.embed.pca_cutoff {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::config("embed.pca_cutoff", "must lie in (0, 1]"));
            }
        }
        if self.evaluate.k == 0 {
            return Err(Error::config("evaluate.k", "must be at least 1"));
        }
        let p = self.evaluate.adjacency_percentile;
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::config("evaluate.adjacency_percentile", "must lie in (0, 100]"));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::config("ablate.seeds", "must list at least one seed"));
        }
        for (i, arm) in self.ablate.arms.iter().enumerate() {
            if arm.n == 0 {
                return Err(Error::config(format!("ablate.arms[{i}].n"), "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }
}

/// Set `value` at a dotted path, creating intermediate tables.
fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A raw override value: TOML syntax when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// `SETDINO__A__B=v` pairs as (`a.b`, `v`).
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v))
        })
        .collect();
    out.sort();
    out
}

/// Parse a config file (or the defaults), apply overrides in order, and
/// validate. Unknown keys are errors.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
        }
        None => toml::Table::new(),
    };
    from_table(table, overrides)
}

fn from_table(mut table: toml::Table, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    for (key, raw) in overrides {
        set_dotted(&mut table, key, parse_value(raw))?;
    }
    let mut unknown = Vec::new();
    let mut record = |p: serde_ignored::Path| unknown.push(p.to_string());
    let de = serde_ignored::Deserializer::new(toml::Value::Table(table), &mut record);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::config(field, e.into_inner().to_string())
    })?;
    if let Some(key) = unknown.first() {
        return Err(Error::config(key.clone(), "unknown key"));
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// A copy with dotted-key overrides applied and validated.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let table = toml::Table::try_from(self).map_err(|e| Error::config("config", e.to_string()))?;
        from_table(table, overrides)
    }
}

// ---------------------------------------------------------------------------
// Run manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Output paths relative to the run directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Hash of the resolved configuration at the last write.
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    pub tool_version: String,
    pub created_unix: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(RUN_MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST_FILE), self)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Re-run stages whose recorded hash matches.
    pub force: bool,
    pub deterministic: bool,
    /// Stop training after this many steps in total (the run stays resumable).
    pub stop_after: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serialisable");
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut file, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

/// Identity of a dataset directory: its world and manifest.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let parts = (file_hash(&dir.join(WORLD_FILE))?, file_hash(&dir.join(MANIFEST_FILE))?);
    Ok(hash_json(&parts))
}

fn relative(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).display().to_string()
}

/// Outcome of a stage body: its outputs, and whether it ran to completion.
struct StageOutcome {
    outputs: Vec<PathBuf>,
    complete: bool,
}

/// Run `body` unless `dir` records a completed `stage` with the same hash
/// and all of its outputs still exist. The hash is recorded before the body runs.
fn run_stage(
    dir: &Path,
    stage: &str,
    hash: &str,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    body: impl FnOnce() -> Result<StageOutcome>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = RunManifest::load(dir)?.unwrap_or_else(|| RunManifest {
        run_id: hash_json(&(stage, hash))[..16].to_string(),
        config_hash: String::new(),
        seed: cfg.seed,
        deterministic: opts.deterministic,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix: now(),
        stages: BTreeMap::new(),
    });
    if let Some(rec) = manifest.stages.get(stage) {
        let outputs: Vec<PathBuf> = rec.outputs.iter().map(|o| dir.join(o)).collect();
        if !opts.force && rec.config_hash == hash && rec.finished_unix.is_some() && outputs.iter().all(|p| p.exists())
        {
            log::info!("{stage}: up to date in {}, skipping (use --force to rerun)", dir.display());
            return Ok(outputs);
        }
    }
    manifest.config_hash = hash_json(cfg);
    manifest.seed = cfg.seed;
    manifest.deterministic = opts.deterministic;
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.stages.insert(
        stage.to_string(),
        StageRecord {
            config_hash: hash.to_string(),
            started_unix: now(),
            finished_unix: None,
            outputs: Vec::new(),
        },
    );
    manifest.save(dir)?;
    std::fs::write(dir.join(CONFIG_ECHO_FILE), cfg.to_toml()?).map_err(|e| Error::io(dir, e))?;

    let outcome = body()?;
    let rec = manifest.stages.get_mut(stage).expect("inserted above");
    rec.outputs = outcome.outputs.iter().map(|p| relative(dir, p)).collect();
    if outcome.complete {
        rec.finished_unix = Some(now());
    }
    manifest.save(dir)?;
    Ok(outcome.outputs)
}

// ---------------------------------------------------------------------------
// Stages

/// Generate the world and dataset into `out`. Returns the manifest path.
pub fn synth(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let hash = hash_json(&("synth", cfg.seed, &cfg.world, &cfg.dataset, cfg.store_images));
    let outputs = run_stage(out, "synth", &hash, cfg, opts, || {
        let world = generate_world(&cfg.world, cfg.seed)?;
        let ds = generate_dataset(&world, &cfg.dataset, cfg.seed)?;
        log::info!(
            "synth: {} genes, {} batches, {} cells",
            world.n_genes,
            world.n_batches,
            ds.len()
        );
        let manifest = write_dataset(out, &ds, cfg.store_images)?;
        Ok(StageOutcome {
            outputs: vec![
                manifest,
                out.join(WORLD_FILE),
                out.join(TRUTH_FULL_FILE),
                out.join(TRUTH_CURATED_FILE),
            ],
            complete: true,
        })
    })?;
    Ok(outputs[0].clone())
}

fn rows_in(source: &dyn CellSource, splits: &[Split], what: &str) -> Result<Vec<usize>> {
    let rows: Vec<usize> = source
        .cells()
        .iter()
        .enumerate()
        .filter(|(_, c)| splits.contains(&c.split))
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::config(
            format!("{what}.splits"),
            format!("no cells in splits {splits:?}"),
        ));
    }
    Ok(rows)
}

/// Train on the configured splits of `data`. Returns the checkpoint path.
pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let source = open_dataset(data)?;
    let hash = hash_json(&("train", dataset_hash(data)?, cfg.seed, &cfg.preprocess, &cfg.train));
    if opts.force {
        for f in [CHECKPOINT_FILE, HISTORY_FILE] {
            let p = out.join(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let outputs = run_stage(out, "train", &hash, cfg, opts, || {
        let rows = rows_in(&source, &cfg.train.splits, "train")?;
        let pre = Preprocessor::fit(&source, Some(&rows), &cfg.preprocess, cfg.seed)?;
        write_json(&out.join(PREPROCESSOR_FILE), &pre)?;
        let mut trainer = Trainer::new(&source, Some(&rows), &pre, &cfg.train)?.with_output(out)?;
        trainer.run(opts.stop_after)?;
        Ok(StageOutcome {
            outputs: vec![out.join(CHECKPOINT_FILE), out.join(HISTORY_FILE)],
            complete: trainer.state.step >= trainer.total_steps(),
        })
    })?;
    Ok(outputs[0].clone())
}

/// Profile the configured splits of `data` and write the four tables.
/// `checkpoint` is required for learned features.
pub fn embed(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    data: &Path,
    out: &Path,
    opts: &RunOptions,
) -> Result<Vec<PathBuf>> {
    let source = open_dataset(data)?;
    let learned = cfg.embed.features == FeatureSource::Learned;
    let ck_hash = match (learned, checkpoint) {
        (true, Some(p)) => Some(file_hash(p)?),
        (true, None) => {
            return Err(Error::config("checkpoint", "learned features need a checkpoint"));
        }
        (false, _) => None,
    };
    let hash = hash_json(&("embed", &ck_hash, dataset_hash(data)?, cfg.seed, &cfg.preprocess, &cfg.embed));
    run_stage(out, "embed", &hash, cfg, opts, || {
        let rows = rows_in(&source, &cfg.embed.splits, "embed")?;
        let pre = Preprocessor::fit(&source, Some(&rows), &cfg.preprocess, cfg.seed)?;
        let mut single = match (&ck_hash, checkpoint) {
            (Some(h), Some(p)) => {
                let model = load_teacher(p)?;
                extract_single_cell_profiles(&model, &source, &pre, Some(&rows), &format!("checkpoint:{}", &h[..16]))?
            }
            _ => robust_normalize(&extract_engineered_profiles(&source, &pre, Some(&rows))?)?,
        };
        if let Some(c) = cfg.embed.effective_pca_cutoff() {
            let (reduced, pca) = pca_reduce(&single, c)?;
            log::info!("embed: PCA keeps {} of {} components", reduced.dim(), pca.rank());
            single = reduced;
        }
        let guides = guide_profiles(&single)?;
        let batch_gene = batch_gene_profiles(&single)?;
        let consensus = consensus_profiles(&batch_gene)?;
        let mut outputs = Vec::new();
        for (name, table) in TABLES.iter().zip([&single, &guides, &batch_gene, &consensus]) {
            let (json, bin) = table.write(out, name)?;
            outputs.push(json);
            outputs.push(bin);
        }
        log::info!(
            "embed: {} cells, {} batch-gene rows, {} consensus genes, d = {}",
            single.len(),
            batch_gene.len(),
            consensus.len(),
            single.dim()
        );
        Ok(StageOutcome {
            outputs,
            complete: true,
        })
    })
}

fn read_truth(path: &Path, name: &str) -> Result<RelationGraph> {
    let pairs = read_pairs_csv(path)?;
    if pairs.is_empty() {
        return Err(Error::Undefined(format!(
            "{} lists no gene pairs; recall is undefined",
            path.display()
        )));
    }
    Ok(RelationGraph::from_pairs(&pairs, name))
}

/// Gene order for the adjacency view: connected components of `truth`
/// (largest first), then the remaining genes, each in `genes` order.
fn module_order(genes: &[String], truth: &RelationGraph) -> Vec<String> {
    let index: BTreeMap<&str, usize> = genes.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let mut adj = vec![Vec::new(); genes.len()];
    for (a, b) in &truth.edges {
        if let (Some(&i), Some(&j)) = (index.get(a.as_str()), index.get(b.as_str())) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let mut seen = vec![false; genes.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for s in 0..genes.len() {
        if seen[s] || adj[s].is_empty() {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut k = 0;
        while k < comp.len() {
            for &y in &adj[comp[k]] {
                if !seen[y] {
                    seen[y] = true;
                    comp.push(y);
                }
            }
            k += 1;
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps.push((0..genes.len()).filter(|&i| !seen[i]).collect());
    comps.into_iter().flatten().map(|i| genes[i].clone()).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn write_pr_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["truth", "percentile", "recall", "precision", "n_predicted"])
        .map_err(|e| csv_error(path, e))?;
    for t in &report.truths {
        for p in &t.pr_curve {
            w.write_record([
                t.name.clone(),
                p.percentile.to_string(),
                p.recall.to_string(),
                p.precision.to_string(),
                p.n_predicted.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_sweep_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "n_pcs",
        "reproducibility_knn",
        "reproducibility_map",
        "batch_knn",
        "graph_connectivity",
    ])
    .map_err(|e| csv_error(path, e))?;
    for r in &report.pca_sweep {
        let m = &r.metrics;
        w.write_record([
            r.n_pcs.to_string(),
            m.reproducibility_knn.to_string(),
            m.reproducibility_map.to_string(),
            m.batch_knn.to_string(),
            m.graph_connectivity.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Evaluate the tables in `tables` against a truth pair list (and an
/// optional curated subset, which defaults to the same list). Returns the report path.
pub fn evaluate_tables(
    cfg: &ExperimentConfig,
    tables: &Path,
    truth: &Path,
    curated: Option<&Path>,
    out: &Path,
    opts: &RunOptions,
) -> Result<PathBuf> {
    let curated = curated.unwrap_or(truth);
    let mut inputs = Vec::new();
    for name in ["batch_gene", "consensus"] {
        let (json, bin) = EmbeddingTable::paths(tables, name);
        inputs.push(file_hash(&json)?);
        inputs.push(file_hash(&bin)?);
    }
    inputs.push(file_hash(truth)?);
    inputs.push(file_hash(curated)?);
    let hash = hash_json(&("evaluate", &inputs, &cfg.evaluate));
    let outputs = run_stage(out, "evaluate", &hash, cfg, opts, || {
        let batch_gene = EmbeddingTable::read(tables, "batch_gene")?;
        let consensus = EmbeddingTable::read(tables, "consensus")?;
        let full = read_truth(truth, "full")?;
        let cur = read_truth(curated, "curated")?;
        let report = evaluate(&batch_gene, &consensus, &full, &cur, cfg.evaluate.k)?;
        let mut outputs = vec![out.join(REPORT_FILE)];
        write_json(&outputs[0], &report)?;

        let pr = out.join("pr_curve.csv");
        write_pr_csv(&pr, &report)?;
        outputs.push(pr);
        let curves: Vec<(String, Vec<_>)> = report.truths.iter().map(|t| (t.name.clone(), t.pr_curve.clone())).collect();
        outputs.push(write_text(&out.join("pr_curve.svg"), &pr_curve_svg(&curves))?);
        let sweep = out.join("pca_sweep.csv");
        write_sweep_csv(&sweep, &report)?;
        outputs.push(sweep);

        let genes: Vec<String> = consensus.rows.iter().map(|r| r.gene.clone()).collect();
        let order = module_order(&genes, &cur);
        let p = cfg.evaluate.adjacency_percentile;
        let predicted = pair_similarities(&consensus)?.graph_at(p)?;
        let mut panels = Vec::new();
        for (name, title, graph) in [
            ("truth_full", "full truth".to_string(), &full),
            ("truth_curated", "curated truth".to_string(), &cur),
            ("predicted", format!("predicted, top {p}%"), &predicted),
        ] {
            let m = adjacency_matrix(graph, &order);
            let path = out.join(format!("adjacency_{name}.csv"));
            write_adjacency_csv(&path, &m, &order)?;
            outputs.push(path);
            panels.push((title, m));
        }
        outputs.push(write_text(&out.join("adjacency.svg"), &adjacency_svg(&panels))?);
        let h = &report.headline;
        log::info!(
            "evaluate: batch KNN {:.3} GC {:.3} repro KNN {:.3} mAP {:.3} recall@5% full {:.3} curated {:.3}",
            h.batch_knn,
            h.graph_connectivity,
            h.reproducibility_knn,
            h.reproducibility_map,
            h.full_recall_5,
            h.curated_recall_5
        );
        Ok(StageOutcome {
            outputs,
            complete: true,
        })
    })?;
    Ok(outputs[0].clone())
}

// ---------------------------------------------------------------------------
// Ablation

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub label: String,
    pub strategy: Strategy,
    pub n: usize,
    pub level: Level,
    pub normalization: Normalization,
    pub seed: u64,
    pub dataset_hash: String,
    pub status: String,
    pub batch_knn: Option<f64>,
    pub graph_connectivity: Option<f64>,
    pub reproducibility_knn: Option<f64>,
    pub reproducibility_map: Option<f64>,
    pub full_recall_5: Option<f64>,
    pub full_recall_10: Option<f64>,
    pub curated_recall_5: Option<f64>,
    pub curated_recall_10: Option<f64>,
    /// Mean collapse indicator over the final epoch.
    pub collapse_final: Option<f64>,
    pub collapse_flag: bool,
}

/// Mean collapse indicator over the rows of the last recorded epoch.
pub fn final_epoch_collapse(history: &[HistoryRow]) -> Option<f64> {
    let last = history.last()?.epoch;
    let vals: Vec<f64> = history.iter().filter(|r| r.epoch == last).map(|r| r.collapse).collect();
    Some(vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn arm_name(arm: &ArmConfig, level: Level, normalization: Normalization) -> String {
    arm.name.clone().unwrap_or_else(|| {
        format!(
            "{}_n{}_{}_{}",
            arm.strategy.as_str(),
            arm.n,
            level.as_str(),
            normalization.as_str()
        )
    })
}

/// Train, embed and evaluate every arm on one shared dataset. A failing arm
/// is recorded and the others proceed. Returns the CSV path.
pub fn ablate(cfg: &ExperimentConfig, out: &Path, data: Option<&Path>, opts: &RunOptions) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = out.join("dataset");
            synth(cfg, &d, opts)?;
            d
        }
    };
    let dhash = dataset_hash(&data_dir)?;
    let log_k = (cfg.train.model.n_prototypes as f64).ln();
    let mut rows = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for arm in &cfg.ablate.arms {
            let level = arm.level.unwrap_or(cfg.train.level);
            let normalization = arm.normalization.unwrap_or(cfg.preprocess.normalization);
            let name = arm_name(arm, level, normalization);
            let mut arm_cfg = cfg.clone();
            arm_cfg.train.strategy = arm.strategy;
            arm_cfg.train.n = arm.n;
            arm_cfg.train.level = level;
            arm_cfg.train.seed = seed;
            arm_cfg.preprocess.normalization = normalization;
            let dir = out.join("arms").join(format!("{name}_seed{seed}"));
            log::info!("ablate: arm {name}, seed {seed}");
            let result = (|| -> Result<(MetricsReport, Option<f64>)> {
                let ck = train(&arm_cfg, &data_dir, &dir.join("train"), opts)?;
                let (state, _) = TrainState::load(&ck)?;
                embed(&arm_cfg, Some(&ck), &data_dir, &dir.join("tables"), opts)?;
                let report = evaluate_tables(
                    &arm_cfg,
                    &dir.join("tables"),
                    &data_dir.join(TRUTH_FULL_FILE),
                    Some(&data_dir.join(TRUTH_CURATED_FILE)),
                    &dir.join("eval"),
                    opts,
                )?;
                Ok((read_json(&report)?, final_epoch_collapse(&state.history)))
            })();
            let mut row = AblationRow {
                arm: name.clone(),
                label: if arm.is_standard_dino() {
                    "standard DINO baseline".into()
                } else {
                    "Set-DINO".into()
                },
                strategy: arm.strategy,
                n: arm.n,
                level,
                normalization,
                seed,
                dataset_hash: dhash.clone(),
                status: "ok".into(),
                batch_knn: None,
                graph_connectivity: None,
                reproducibility_knn: None,
                reproducibility_map: None,
                full_recall_5: None,
                full_recall_10: None,
                curated_recall_5: None,
                curated_recall_10: None,
                collapse_final: None,
                collapse_flag: false,
            };
            match result {
                Ok((report, collapse)) => {
                    let h = report.headline;
                    row.batch_knn = Some(h.batch_knn);
                    row.graph_connectivity = Some(h.graph_connectivity);
                    row.reproducibility_knn = Some(h.reproducibility_knn);
                    row.reproducibility_map = Some(h.reproducibility_map);
                    row.full_recall_5 = Some(h.full_recall_5);
                    row.full_recall_10 = Some(h.full_recall_10);
                    row.curated_recall_5 = Some(h.curated_recall_5);
                    row.curated_recall_10 = Some(h.curated_recall_10);
                    row.collapse_final = collapse;
                    row.collapse_flag = collapse.is_some_and(|c| c < cfg.ablate.collapse_fraction * log_k);
                    if row.collapse_flag {
                        log::warn!(
                            "ablate: arm {name} seed {seed} looks collapsed (indicator {:.4} < {:.4})",
                            collapse.unwrap_or(0.0),
                            cfg.ablate.collapse_fraction * log_k
                        );
                    }
                }
                Err(e) => {
                    log::error!("ablate: arm {name} seed {seed} failed: {e}");
                    row.status = format!("error: {e}");
                }
            }
            rows.push(row);
        }
    }
    write_json(&out.join(ABLATION_JSON), &rows)?;
    let path = out.join(ABLATION_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Report

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Summarise evaluation and ablation directories into one Markdown table.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    let mut lines = vec![
        "| run | batch KNN | GC | repro KNN | mAP | full R@5% | full R@10% | curated R@5% | curated R@10% | collapse |"
            .to_string(),
        "|---|---|---|---|---|---|---|---|---|---|".to_string(),
    ];
    let mut seen = BTreeSet::new();
    for dir in inputs {
        let report_path = dir.join(REPORT_FILE);
        let ablation_path = dir.join(ABLATION_JSON);
        if report_path.exists() {
            let r: MetricsReport = read_json(&report_path)?;
            let h = r.headline;
            lines.push(format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | - |",
                dir.display(),
                pct(Some(h.batch_knn)),
                pct(Some(h.graph_connectivity)),
                pct(Some(h.reproducibility_knn)),
                pct(Some(h.reproducibility_map)),
                pct(Some(h.full_recall_5)),
                pct(Some(h.full_recall_10)),
                pct(Some(h.curated_recall_5)),
                pct(Some(h.curated_recall_10)),
            ));
            seen.insert(dir.clone());
        }
        if ablation_path.exists() {
            let file = File::open(&ablation_path).map_err(|e| Error::io(&ablation_path, e))?;
            let rows: Vec<AblationRow> = serde_json::from_reader(BufReader::new(file))
                .map_err(|e| Error::format(&ablation_path, e.to_string()))?;
            for r in rows {
                let collapse = match r.collapse_final {
                    Some(c) if r.collapse_flag => format!("{c:.3} (collapsed)"),
                    Some(c) => format!("{c:.3}"),
                    None => r.status.clone(),
                };
                lines.push(format!(
                    "| {} seed {} ({}) | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                    r.arm,
                    r.seed,
                    r.label,
                    pct(r.batch_knn),
                    pct(r.graph_connectivity),
                    pct(r.reproducibility_knn),
                    pct(r.reproducibility_map),
                    pct(r.full_recall_5),
                    pct(r.full_recall_10),
                    pct(r.curated_recall_5),
                    pct(r.curated_recall_10),
                    collapse
                ));
            }
            seen.insert(dir.clone());
        }
        if !seen.contains(dir) {
            return Err(Error::Lookup(format!(
                "{} holds neither {REPORT_FILE} nor {ABLATION_JSON}",
                dir.display()
            )));
        }
    }
    let mut text = String::from("# Results\n\nValues in percent. Batch KNN and GC: lower is better.\n\n");
    text.push_str(&lines.join("\n"));
    text.push('\n');
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_text(out, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load_config(
            None,
            &[
                ("train.epochs".into(), "3".into()),
                ("preprocess.normalization".into(), "zscore".into()),
                ("world.n_genes".into(), "40".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.preprocess.normalization, Normalization::ZScore);
        assert_eq!(cfg.world.n_genes, 40);
    }

    #[test]
    fn env_keys_map_to_dotted_paths() {
        let got = env_overrides([
            ("SETDINO__TRAIN__BASE_LR".to_string(), "1e-3".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ]);
        assert_eq!(got, vec![("train.base_lr".to_string(), "1e-3".to_string())]);
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_field() {
        let err = load_config(None, &[("train.epoch".into(), "3".into())]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "train.epoch"), "{err}");
        let err = load_config(None, &[("train.epochs".into(), "\"many\"".into())]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "train.epochs"), "{err}");
        let err = load_config(None, &[("world.n_genes".into(), "0".into())]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "world.n_genes"), "{err}");
    }

    #[test]
    fn overrides_apply_to_a_loaded_config() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[("train.n".into(), "4".into())])
            .unwrap();
        assert_eq!(cfg.train.n, 4);
        assert_eq!(cfg.world, WorldConfig::default());
    }

    #[test]
    fn config_echo_round_trips() {
        let cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
        assert_eq!(load_config(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn module_order_groups_components() {
        let genes: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        let truth = RelationGraph::from_pairs(
            &[("e".into(), "b".into()), ("d".into(), "b".into()), ("a".into(), "c".into())],
            "t",
        );
        assert_eq!(module_order(&genes, &truth), ["b", "d", "e", "a", "c"]);
    }

    #[test]
    fn final_epoch_collapse_averages_last_epoch() {
        let row = |epoch, collapse| HistoryRow {
            step: 0,
            epoch,
            loss: 0.0,
            lr: 0.0,
            weight_decay: 0.0,
            teacher_momentum: 0.0,
            collapse,
            n_pairs: 1,
        };
        let h = [row(0, 9.0), row(1, 1.0), row(1, 2.0)];
        assert_eq!(final_epoch_collapse(&h), Some(1.5));
        assert_eq!(final_epoch_collapse(&[]), None);
    }
}
