//! Profile tables at the single-cell, per-guide, batch-level gene and
//! consensus gene levels; learned and engineered features; robust
//! normalisation and PCA.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::imageproc::{percentile, resize};
use crate::store::{CellSource, Preprocessor};
use crate::synthgen::NTC_LABEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableLevel {
    SingleCell,
    BatchGuide,
    BatchGene,
    ConsensusGene,
}

impl TableLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            TableLevel::SingleCell => "single_cell",
            TableLevel::BatchGuide => "batch_guide",
            TableLevel::BatchGene => "batch_gene",
            TableLevel::ConsensusGene => "consensus_gene",
        }
    }
}

/// Key and metadata of one table row. Fields that the level aggregates
/// away are `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub key: String,
    pub gene: String,
    pub gene_id: Option<u32>,
    pub guide_id: Option<u32>,
    pub batch_id: Option<u32>,
    pub cell_id: Option<u64>,
    pub n_cells: usize,
}

impl RowMeta {
    pub fn is_ntc(&self) -> bool {
        self.gene == NTC_LABEL
    }
}

/// Row-major feature matrix with per-row metadata. Features are `f64` in
/// memory and little-endian `f32` on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub level: TableLevel,
    pub provenance: String,
    pub columns: Vec<String>,
    pub rows: Vec<RowMeta>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableHeader {
    level: TableLevel,
    provenance: String,
    dim: usize,
    n_rows: usize,
    dtype: String,
    endian: String,
    columns: Vec<String>,
    rows: Vec<RowMeta>,
}

impl EmbeddingTable {
    pub fn new(level: TableLevel, provenance: impl Into<String>, columns: Vec<String>) -> Self {
        EmbeddingTable {
            level,
            provenance: provenance.into(),
            columns,
            rows: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Columns named `f0, f1, ...`.
    pub fn with_dim(level: TableLevel, provenance: impl Into<String>, dim: usize) -> Self {
        Self::new(level, provenance, (0..dim).map(|j| format!("f{j}")).collect())
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn push(&mut self, meta: RowMeta, features: &[f64]) -> Result<()> {
        if features.len() != self.dim() {
            return Err(Error::Shape(format!(
                "row {} has {} features, table has {}",
                meta.key,
                features.len(),
                self.dim()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("row {} has non-finite features", meta.key)));
        }
        self.rows.push(meta);
        self.data.extend_from_slice(features);
        Ok(())
    }

    /// New table with the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = EmbeddingTable {
            rows: Vec::with_capacity(indices.len()),
            data: Vec::with_capacity(indices.len() * self.dim()),
            ..EmbeddingTable::new(self.level, self.provenance.clone(), self.columns.clone())
        };
        for &i in indices {
            out.rows.push(self.rows[i].clone());
            out.data.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows.len() * self.dim() {
            return Err(Error::Shape("feature matrix does not match the row count".into()));
        }
        if let Some(i) = (0..self.len()).find(|&i| self.row(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("row {} has non-finite features", self.rows[i].key)));
        }
        Ok(())
    }

    pub fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{name}.json")), dir.join(format!("{name}.bin")))
    }

    /// Write `<name>.json` (sidecar) and `<name>.bin` (features).
    pub fn write(&self, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (json, bin) = Self::paths(dir, name);
        let header = TableHeader {
            level: self.level,
            provenance: self.provenance.clone(),
            dim: self.dim(),
            n_rows: self.len(),
            dtype: "f32".into(),
            endian: "little".into(),
            columns: self.columns.clone(),
            rows: self.rows.clone(),
        };
        crate::store::write_json(&json, &header)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        Ok((json, bin))
    }

    pub fn read(dir: &Path, name: &str) -> Result<Self> {
        let (json, bin) = Self::paths(dir, name);
        let header: TableHeader = crate::store::read_json(&json)?;
        if header.dtype != "f32" || header.endian != "little" {
            return Err(Error::format(&json, "only little-endian f32 tables are supported"));
        }
        if header.columns.len() != header.dim || header.rows.len() != header.n_rows {
            return Err(Error::format(&json, "sidecar counts are inconsistent"));
        }
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != header.n_rows * header.dim * 4 {
            return Err(Error::format(
                &bin,
                format!("expected {} bytes, found {}", header.n_rows * header.dim * 4, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let table = EmbeddingTable {
            level: header.level,
            provenance: header.provenance,
            columns: header.columns,
            rows: header.rows,
            data,
        };
        table.validate()?;
        Ok(table)
    }
}

fn cell_row(source: &dyn CellSource, row: usize) -> RowMeta {
    let meta = &source.cells()[row];
    RowMeta {
        key: format!("cell:{}", meta.cell_id),
        gene: source.world().gene_name(meta.gene_id).to_string(),
        gene_id: meta.gene_id,
        guide_id: Some(meta.guide_id),
        batch_id: Some(meta.batch_id),
        cell_id: Some(meta.cell_id),
        n_cells: 1,
    }
}

fn all_rows(source: &dyn CellSource, rows: Option<&[usize]>) -> Vec<usize> {
    rows.map_or_else(|| (0..source.cells().len()).collect(), <[usize]>::to_vec)
}

const EXTRACT_CHUNK: usize = 32;

/// Concatenated class tokens of the last (up to) four blocks, one row per
/// cell. The preprocessed image is resized to the model's input size, the
/// scale of a full-field global crop.
pub fn extract_single_cell_profiles(
    model: &EncoderState<f32>,
    source: &dyn CellSource,
    pre: &Preprocessor,
    rows: Option<&[usize]>,
    provenance: &str,
) -> Result<EmbeddingTable> {
    let rows = all_rows(source, rows);
    let size = model.config.image_size;
    let d = model.config.feature_dim();
    let chunks: Vec<Vec<f32>> = rows
        .par_chunks(EXTRACT_CHUNK)
        .map(|chunk| {
            let images = chunk
                .iter()
                .map(|&r| pre.load(source, r).map(|img| resize(&img, size)))
                .collect::<Result<Vec<Image>>>()?;
            let refs: Vec<&Image> = images.iter().collect();
            crate::encoder::encode(model, &refs).map(|(_, per_layer)| per_layer)
        })
        .collect::<Result<_>>()?;
    let mut table = EmbeddingTable::with_dim(TableLevel::SingleCell, provenance, d);
    let features: Vec<f64> = chunks.into_iter().flatten().map(f64::from).collect();
    for (i, &r) in rows.iter().enumerate() {
        table.push(cell_row(source, r), &features[i * d..(i + 1) * d])?;
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Engineered features

pub const ENGINEERED_DIM: usize = 5 * CHANNELS + 2;

pub fn engineered_feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(ENGINEERED_DIM);
    for c in 0..CHANNELS {
        for stat in ["mean", "std", "p10", "p90", "gradient"] {
            names.push(format!("ch{c}_{stat}"));
        }
    }
    names.push("dna_area".into());
    names.push("dna_eccentricity".into());
    names
}

/// Per channel: mean, std, 10th and 90th percentile, mean forward-difference
/// gradient magnitude. Then the DNA-channel area above half range and the
/// eccentricity of its largest 4-connected component.
pub fn engineered_features(image: &Image) -> Result<Vec<f64>> {
    if image.channels != CHANNELS || image.height == 0 || image.width == 0 {
        return Err(Error::Shape(format!(
            "engineered features need a non-empty {CHANNELS}-channel image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.height, image.width);
    let mut out = Vec::with_capacity(ENGINEERED_DIM);
    for c in 0..CHANNELS {
        let ch = image.channel(c);
        out.push(image.channel_mean(c));
        out.push(image.channel_std(c));
        let mut buf = ch.to_vec();
        out.push(percentile(&mut buf, 10.0));
        out.push(percentile(&mut buf, 90.0));
        let mut grad = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let v = ch[y * w + x] as f64;
                let gx = if x + 1 < w { ch[y * w + x + 1] as f64 - v } else { 0.0 };
                let gy = if y + 1 < h { ch[(y + 1) * w + x] as f64 - v } else { 0.0 };
                grad += (gx * gx + gy * gy).sqrt();
            }
        }
        out.push(grad / (h * w) as f64);
    }
    let (area, ecc) = dna_morphology(image.channel(0), h, w);
    out.push(area);
    out.push(ecc);
    Ok(out)
}

fn dna_morphology(ch: &[f32], h: usize, w: usize) -> (f64, f64) {
    let (lo, hi) = ch
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= f32::EPSILON * hi.abs().max(1.0) {
        return (0.0, 0.0);
    }
    let thr = lo + 0.5 * (hi - lo);
    let mask: Vec<bool> = ch.iter().map(|&v| v > thr).collect();
    let area = mask.iter().filter(|&&m| m).count() as f64;

    // Largest 4-connected component; ties go to the first in raster order.
    let mut label = vec![usize::MAX; h * w];
    let mut best: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let mut comp = Vec::new();
        label[start] = start;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == usize::MAX {
                    label[j] = start;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let n = best.len() as f64;
    if best.len() < 2 {
        return (area, 0.0);
    }
    let (my, mx) = best
        .iter()
        .fold((0.0, 0.0), |(a, b), &i| (a + (i / w) as f64 / n, b + (i % w) as f64 / n));
    let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    for &i in &best {
        let dy = (i / w) as f64 - my;
        let dx = (i % w) as f64 - mx;
        syy += dy * dy / n;
        sxx += dx * dx / n;
        sxy += dx * dy / n;
    }
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let (l1, l2) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
    let ecc = if l1 > 0.0 { (1.0 - (l2 / l1).max(0.0)).sqrt() } else { 0.0 };
    (area, ecc)
}

/// Engineered features of every (preprocessed) cell.
pub fn extract_engineered_profiles(
    source: &dyn CellSource,
    pre: &Preprocessor,
    rows: Option<&[usize]>,
) -> Result<EmbeddingTable> {
    let rows = all_rows(source, rows);
    let features = rows
        .par_iter()
        .map(|&r| pre.load(source, r).and_then(|img| engineered_features(&img)))
        .collect::<Result<Vec<_>>>()?;
    let mut table = EmbeddingTable::new(TableLevel::SingleCell, "engineered", engineered_feature_names());
    for (&r, f) in rows.iter().zip(&features) {
        table.push(cell_row(source, r), f)?;
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Robust normalisation

pub const MAD_SCALE: f64 = 1.4826;

/// Median with the two middle values averaged for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per batch and feature: `(x - median_NTC) / (1.4826 * MAD_NTC)`.
/// Features with zero NTC MAD are only centred.
pub fn robust_normalize(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    let d = table.dim();
    let mut by_batch: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        let b = r
            .batch_id
            .ok_or_else(|| Error::Misuse(format!("row {} has no batch; robust normalisation is per batch", r.key)))?;
        by_batch.entry(b).or_default().push(i);
    }
    let mut out = table.clone();
    for (batch, members) in &by_batch {
        let ntc: Vec<usize> = members.iter().copied().filter(|&i| table.rows[i].is_ntc()).collect();
        if ntc.len() < 2 {
            return Err(Error::MissingControls(format!(
                "batch {batch} has {} NTC rows; robust normalisation needs at least 2",
                ntc.len()
            )));
        }
        let mut degenerate = 0;
        for j in 0..d {
            let mut vals: Vec<f64> = ntc.iter().map(|&i| table.row(i)[j]).collect();
            let med = median(&mut vals);
            let mut dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
            let mad = median(&mut dev);
            let scale = if mad > 0.0 {
                MAD_SCALE * mad
            } else {
                degenerate += 1;
                1.0
            };
            for &i in members {
                out.data[i * d + j] = (table.data[i * d + j] - med) / scale;
            }
        }
        if degenerate > 0 {
            log::warn!("batch {batch}: {degenerate} features have zero NTC MAD and were only centred");
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PCA

/// Principal axes of a fitted table, sorted by decreasing variance and
/// truncated at numerical rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// `[rank, dim]`, row-major.
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn fit(data: &[f64], rows: usize, dim: usize) -> Result<Self> {
        if rows < 2 {
            return Err(Error::Size("PCA needs at least 2 rows".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::Shape("PCA input does not match its shape".into()));
        }
        let mut mean = vec![0.0; dim];
        for r in data.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let centred = DMatrix::from_fn(rows, dim, |i, j| data[i * dim + j] - mean[j]);
        let cov = (centred.transpose() * &centred) / (rows as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
        let floor = top * dim as f64 * f64::EPSILON * 16.0;
        let mut components = Vec::new();
        let mut explained_variance = Vec::new();
        for &i in &order {
            let lam = eig.eigenvalues[i];
            if lam <= floor || lam <= 0.0 {
                break;
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Sign convention: the largest-magnitude entry is positive.
            let pivot = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bv), (k, &x)| if x.abs() > bv.abs() { (k, x) } else { (bi, bv) })
                .1;
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.extend(v);
            explained_variance.push(lam);
        }
        Ok(Pca {
            dim,
            mean,
            components,
            explained_variance,
        })
    }

    /// Fit on the rows of a table taken in key order, so that the result
    /// does not depend on how the rows happen to be stored.
    pub fn fit_table(table: &EmbeddingTable) -> Result<Self> {
        let mut order: Vec<usize> = (0..table.len()).collect();
        order.sort_by(|&a, &b| table.rows[a].key.cmp(&table.rows[b].key));
        let data: Vec<f64> = order.iter().flat_map(|&i| table.row(i).iter().copied()).collect();
        Self::fit(&data, table.len(), table.dim())
    }

    pub fn rank(&self) -> usize {
        self.explained_variance.len()
    }

    /// Smallest component count whose cumulative explained variance reaches `cutoff`.
    pub fn n_for_cutoff(&self, cutoff: f64) -> usize {
        let total: f64 = self.explained_variance.iter().sum();
        let mut acc = 0.0;
        for (i, v) in self.explained_variance.iter().enumerate() {
            acc += v;
            if acc >= cutoff * total * (1.0 - 1e-12) {
                return i + 1;
            }
        }
        self.rank()
    }

    /// Scores on the first `c` components.
    pub fn transform(&self, row: &[f64], c: usize) -> Vec<f64> {
        (0..c.min(self.rank()))
            .map(|k| {
                let axis = &self.components[k * self.dim..(k + 1) * self.dim];
                axis.iter().zip(row.iter().zip(&self.mean)).map(|(a, (x, m))| a * (x - m)).sum()
            })
            .collect()
    }

    pub fn inverse(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, s) in scores.iter().enumerate() {
            let axis = &self.components[k * self.dim..(k + 1) * self.dim];
            for (o, a) in out.iter_mut().zip(axis) {
                *o += s * a;
            }
        }
        out
    }

    /// The table projected onto the first `c` components.
    pub fn apply(&self, table: &EmbeddingTable, c: usize) -> Result<EmbeddingTable> {
        if table.dim() != self.dim {
            return Err(Error::Shape(format!("PCA was fitted on {} features, table has {}", self.dim, table.dim())));
        }
        let c = c.min(self.rank());
        let mut out = EmbeddingTable::new(
            table.level,
            format!("{}+pca{c}", table.provenance),
            (0..c).map(|k| format!("pc{k}")).collect(),
        );
        for i in 0..table.len() {
            out.push(table.rows[i].clone(), &self.transform(table.row(i), c))?;
        }
        Ok(out)
    }
}

/// Fit PCA and keep the fewest components explaining `cutoff` of the variance.
pub fn pca_reduce(table: &EmbeddingTable, cutoff: f64) -> Result<(EmbeddingTable, Pca)> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::config("pca_cutoff", "must lie in (0, 1]"));
    }
    let pca = Pca::fit_table(table)?;
    let c = pca.n_for_cutoff(cutoff);
    Ok((pca.apply(table, c)?, pca))
}

// ---------------------------------------------------------------------------
// Aggregation levels

/// Gene order: targeting genes by id (then name), NTC last.
fn gene_sort_key(r: &RowMeta) -> (bool, Option<u32>, String) {
    (r.is_ntc(), r.gene_id, r.gene.clone())
}

/// `n_cells`-weighted mean of the rows of each group, in key order.
fn group_means<K: Ord + Clone>(
    table: &EmbeddingTable,
    level: TableLevel,
    key: impl Fn(&RowMeta) -> K,
    meta: impl Fn(&RowMeta, &str) -> RowMeta,
) -> Result<EmbeddingTable> {
    let d = table.dim();
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        groups.entry(key(r)).or_default().push(i);
    }
    let mut out = EmbeddingTable::new(level, table.provenance.clone(), table.columns.clone());
    for members in groups.values() {
        let total: usize = members.iter().map(|&i| table.rows[i].n_cells.max(1)).sum();
        let mut mean = vec![0.0; d];
        for &i in members {
            let wgt = table.rows[i].n_cells.max(1) as f64 / total as f64;
            for (m, v) in mean.iter_mut().zip(table.row(i)) {
                *m += wgt * v;
            }
        }
        let first = &table.rows[members[0]];
        let mut m = meta(first, &first.gene);
        m.n_cells = total;
        out.push(m, &mean)?;
    }
    Ok(out)
}

fn need_batch(table: &EmbeddingTable) -> Result<()> {
    match table.rows.iter().find(|r| r.batch_id.is_none()) {
        Some(r) => Err(Error::Misuse(format!("row {} has no batch id", r.key))),
        None => Ok(()),
    }
}

/// Mean profile of every (guide, batch).
pub fn guide_profiles(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    need_batch(table)?;
    if let Some(r) = table.rows.iter().find(|r| r.guide_id.is_none()) {
        return Err(Error::Misuse(format!("row {} has no guide id", r.key)));
    }
    group_means(
        table,
        TableLevel::BatchGuide,
        |r| (gene_sort_key(r), r.guide_id, r.batch_id),
        |r, gene| RowMeta {
            key: format!("{gene}/g{}@b{}", r.guide_id.expect("checked"), r.batch_id.expect("checked")),
            gene: gene.to_string(),
            gene_id: r.gene_id,
            guide_id: r.guide_id,
            batch_id: r.batch_id,
            cell_id: None,
            n_cells: 0,
        },
    )
}

/// Mean profile over all cells of each (gene, batch), NTC included as its own gene.
pub fn batch_gene_profiles(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    need_batch(table)?;
    group_means(
        table,
        TableLevel::BatchGene,
        |r| (gene_sort_key(r), r.batch_id),
        |r, gene| RowMeta {
            key: format!("{gene}@b{}", r.batch_id.expect("checked")),
            gene: gene.to_string(),
            gene_id: r.gene_id,
            guide_id: None,
            batch_id: r.batch_id,
            cell_id: None,
            n_cells: 0,
        },
    )
}

/// Centre every batch on its NTC row, then average each gene across batches.
pub fn consensus_profiles(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    if table.level != TableLevel::BatchGene {
        return Err(Error::Misuse(format!(
            "consensus profiles are built from batch_gene tables, got {}",
            table.level.as_str()
        )));
    }
    need_batch(table)?;
    let d = table.dim();
    let mut ntc: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        if r.is_ntc() && ntc.insert(r.batch_id.expect("checked"), i).is_some() {
            return Err(Error::Misuse(format!("batch {:?} has two NTC rows", r.batch_id)));
        }
    }
    let mut groups: BTreeMap<(bool, Option<u32>, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        if r.is_ntc() {
            continue;
        }
        let b = r.batch_id.expect("checked");
        if !ntc.contains_key(&b) {
            return Err(Error::MissingControls(format!("batch {b} has no NTC row to centre on")));
        }
        groups.entry(gene_sort_key(r)).or_default().push(i);
    }
    let mut out = EmbeddingTable::new(TableLevel::ConsensusGene, table.provenance.clone(), table.columns.clone());
    for members in groups.values() {
        let mut mean = vec![0.0; d];
        let inv = 1.0 / members.len() as f64;
        for &i in members {
            let c = table.row(ntc[&table.rows[i].batch_id.expect("checked")]);
            for j in 0..d {
                mean[j] += (table.row(i)[j] - c[j]) * inv;
            }
        }
        let first = &table.rows[members[0]];
        out.push(
            RowMeta {
                key: first.gene.clone(),
                gene: first.gene.clone(),
                gene_id: first.gene_id,
                guide_id: None,
                batch_id: None,
                cell_id: None,
                n_cells: members.iter().map(|&i| table.rows[i].n_cells).sum(),
            },
            &mean,
        )?;
    }
    Ok(out)
}
