//! Cell image sources (rendered on demand or read from a dataset directory)
//! and the per-batch preprocessing that turns raw renders into model input.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::imageproc::{compute_ntc_stats, ntc_zscore_normalize, zscore_normalize, ClipBounds, NtcStats};
use crate::seed::{self, tag};
use crate::synthgen::{render_meta, CellMeta, Dataset, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Normalization {
    #[serde(rename = "zscore")]
    ZScore,
    #[serde(rename = "ntc_zscore")]
    NtcZScore,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::ZScore => "zscore",
            Normalization::NtcZScore => "ntc_zscore",
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Normalization::ZScore),
            "ntc_zscore" => Ok(Normalization::NtcZScore),
            _ => Err(Error::config(
                "normalization",
                format!("unknown normalization `{s}` (expected zscore or ntc_zscore)"),
            )),
        }
    }
}

/// Anything that can hand out raw cell images by manifest row.
pub trait CellSource: Sync {
    fn world(&self) -> &WorldSpec;
    fn cells(&self) -> &[CellMeta];
    fn raw(&self, row: usize) -> Result<Image>;
}

/// Renders every image from the world on request.
#[derive(Debug, Clone)]
pub struct RenderSource {
    pub world: WorldSpec,
    pub cells: Vec<CellMeta>,
}

impl RenderSource {
    pub fn new(dataset: &Dataset) -> Self {
        RenderSource {
            world: dataset.world.clone(),
            cells: dataset.cells.clone(),
        }
    }
}

impl CellSource for RenderSource {
    fn world(&self) -> &WorldSpec {
        &self.world
    }

    fn cells(&self) -> &[CellMeta] {
        &self.cells
    }

    fn raw(&self, row: usize) -> Result<Image> {
        let meta = self
            .cells
            .get(row)
            .ok_or_else(|| Error::Lookup(format!("manifest row {row} does not exist")))?;
        render_meta(&self.world, meta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub normalization: Normalization,
    /// Clip percentiles, computed per batch and channel over a sample of its cells.
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Cells per batch pooled for the clip percentiles.
    pub clip_sample: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            normalization: Normalization::NtcZScore,
            clip_lo: 0.1,
            clip_hi: 99.9,
            clip_sample: 64,
        }
    }
}

/// Fitted per-batch clip windows and NTC statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub config: PreprocessConfig,
    pub clips: BTreeMap<u32, ClipBounds>,
    pub ntc: BTreeMap<u32, NtcStats>,
}

impl Preprocessor {
    /// Fit on the given manifest rows (all rows when `None`).
    pub fn fit(
        source: &dyn CellSource,
        rows: Option<&[usize]>,
        config: &PreprocessConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.clip_sample == 0 {
            return Err(Error::config("clip_sample", "must be at least 1"));
        }
        let cells = source.cells();
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..cells.len()).collect();
                &all
            }
        };
        let mut by_batch: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &r in rows {
            by_batch.entry(cells[r].batch_id).or_default().push(r);
        }
        let mut clips = BTreeMap::new();
        let mut ntc = BTreeMap::new();
        for (&batch, members) in &by_batch {
            let mut rng = seed::rng(seed, &[tag::CLIP_SAMPLE, batch as u64]);
            let sample: Vec<usize> = members
                .choose_multiple(&mut rng, config.clip_sample.min(members.len()))
                .copied()
                .collect();
            let images = sample
                .par_iter()
                .map(|&r| source.raw(r))
                .collect::<Result<Vec<_>>>()?;
            let bounds = ClipBounds::from_pool(&images, config.clip_lo, config.clip_hi)?;
            clips.insert(batch, bounds);
            if config.normalization == Normalization::NtcZScore {
                let controls: Vec<usize> = members.iter().copied().filter(|&r| cells[r].is_ntc()).collect();
                let images = controls
                    .par_iter()
                    .map(|&r| source.raw(r).and_then(|img| bounds.apply(&img)))
                    .collect::<Result<Vec<_>>>()?;
                ntc.insert(batch, compute_ntc_stats(&images, batch)?);
            }
        }
        Ok(Preprocessor {
            config: config.clone(),
            clips,
            ntc,
        })
    }

    /// Clip with the batch window, then normalise.
    pub fn apply(&self, meta: &CellMeta, raw: &Image) -> Result<Image> {
        let batch = meta.batch_id;
        let clip = self
            .clips
            .get(&batch)
            .ok_or_else(|| Error::Lookup(format!("no clip window fitted for batch {batch}")))?;
        let clipped = clip.apply(raw)?;
        match self.config.normalization {
            Normalization::ZScore => zscore_normalize(&clipped),
            Normalization::NtcZScore => {
                let stats = self.ntc.get(&batch).ok_or_else(|| {
                    Error::MissingControls(format!("no NTC statistics for batch {batch}"))
                })?;
                ntc_zscore_normalize(&clipped, batch, stats)
            }
        }
    }

    pub fn load(&self, source: &dyn CellSource, row: usize) -> Result<Image> {
        let raw = source.raw(row)?;
        self.apply(&source.cells()[row], &raw)
    }
}

// ---------------------------------------------------------------------------
// Dataset directory: world.json, manifest.jsonl, images/batch_XXX.bin, truth CSVs.

pub const WORLD_FILE: &str = "world.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRUTH_FULL_FILE: &str = "truth_full.csv";
pub const TRUTH_CURATED_FILE: &str = "truth_curated.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    #[serde(flatten)]
    meta: CellMeta,
    gene: String,
    /// Shard holding the rendered image; absent when images are re-rendered on demand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default)]
    index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub dtype: String,
    pub endian: String,
    pub shape: Vec<usize>,
}

/// Write `[N, C, H, W]` images as a JSON header line followed by raw little-endian f32.
pub fn write_shard(path: &Path, images: &[Image]) -> Result<()> {
    let (c, h, w) = images
        .first()
        .map(|i| (i.channels, i.height, i.width))
        .unwrap_or((CHANNELS, 0, 0));
    if images.iter().any(|i| i.shape() != [c, h, w]) {
        return Err(Error::Shape("images in one shard must share a shape".into()));
    }
    let header = ShardHeader {
        dtype: "f32".into(),
        endian: "little".into(),
        shape: vec![images.len(), c, h, w],
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::format(path, e.to_string()))?;
    out.write_all(b"\n").map_err(io)?;
    for img in images {
        for v in &img.data {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

struct Shard {
    path: PathBuf,
    file: Mutex<File>,
    data_offset: u64,
    shape: [usize; 4],
}

impl Shard {
    fn open(path: PathBuf) -> Result<Self> {
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(&path, e))?;
        let header: ShardHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::format(&path, e.to_string()))?;
        if header.dtype != "f32" || header.endian != "little" || header.shape.len() != 4 {
            return Err(Error::format(&path, "expected a little-endian f32 [N, C, H, W] shard"));
        }
        let shape = [header.shape[0], header.shape[1], header.shape[2], header.shape[3]];
        let data_offset = line.len() as u64;
        let expected = data_offset + 4 * shape.iter().product::<usize>() as u64;
        let actual = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        if actual != expected {
            return Err(Error::format(
                &path,
                format!("file has {actual} bytes, header implies {expected}"),
            ));
        }
        Ok(Shard {
            file: Mutex::new(reader.into_inner()),
            path,
            data_offset,
            shape,
        })
    }

    fn read(&self, index: usize) -> Result<Image> {
        let [n, c, h, w] = self.shape;
        if index >= n {
            return Err(Error::Lookup(format!(
                "image {index} out of range in {}",
                self.path.display()
            )));
        }
        let len = c * h * w;
        let mut bytes = vec![0u8; 4 * len];
        {
            let mut f = self.file.lock().expect("shard lock poisoned");
            f.seek(SeekFrom::Start(self.data_offset + (4 * len * index) as u64))
                .and_then(|_| f.read_exact(&mut bytes))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Image::from_vec(c, h, w, data)
    }
}

/// A dataset directory written by [`write_dataset`]. Cells without a
/// stored image are rendered from their seed.
pub struct ShardSource {
    pub world: WorldSpec,
    cells: Vec<CellMeta>,
    shards: Vec<Shard>,
    locations: Vec<Option<(usize, usize)>>,
}

impl CellSource for ShardSource {
    fn world(&self) -> &WorldSpec {
        &self.world
    }

    fn cells(&self) -> &[CellMeta] {
        &self.cells
    }

    fn raw(&self, row: usize) -> Result<Image> {
        match self
            .locations
            .get(row)
            .ok_or_else(|| Error::Lookup(format!("manifest row {row} does not exist")))?
        {
            Some((shard, index)) => self.shards[*shard].read(*index),
            None => render_meta(&self.world, &self.cells[row]),
        }
    }
}

fn shard_name(batch: u32) -> String {
    format!("images/batch_{batch:03}.bin")
}

/// Write the dataset directory, rendering every cell into shards when
/// `store_images` is set. Returns the manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset, store_images: bool) -> Result<PathBuf> {
    let world = &dataset.world;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(WORLD_FILE), world)?;

    let mut by_batch: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, c) in dataset.cells.iter().enumerate() {
        by_batch.entry(c.batch_id).or_default().push(i);
    }
    let mut location = vec![(None, 0usize); dataset.cells.len()];
    if store_images {
        std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    }
    for (batch, rows) in by_batch.iter().filter(|_| store_images) {
        let images = rows
            .par_iter()
            .map(|&r| render_meta(world, &dataset.cells[r]))
            .collect::<Result<Vec<_>>>()?;
        let name = shard_name(*batch);
        write_shard(&dir.join(&name), &images)?;
        for (k, &r) in rows.iter().enumerate() {
            location[r] = (Some(name.clone()), k);
        }
    }

    let path = dir.join(MANIFEST_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for (meta, (shard, index)) in dataset.cells.iter().zip(location) {
        let rec = ManifestRecord {
            meta: meta.clone(),
            gene: world.gene_name(meta.gene_id).to_string(),
            path: shard,
            index,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::format(&path, e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;

    let names = |edges: Vec<(u32, u32)>| -> Vec<(String, String)> {
        edges
            .into_iter()
            .map(|(a, b)| (world.gene_name(Some(a)).to_string(), world.gene_name(Some(b)).to_string()))
            .collect()
    };
    write_pairs_csv(&dir.join(TRUTH_FULL_FILE), &names(world.full_truth_edges()))?;
    write_pairs_csv(&dir.join(TRUTH_CURATED_FILE), &names(world.module_edges()))?;
    Ok(path)
}

/// Open a dataset directory written by [`write_dataset`].
pub fn open_dataset(dir: &Path) -> Result<ShardSource> {
    let world: WorldSpec = read_json(&dir.join(WORLD_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut cells = Vec::new();
    let mut locations = Vec::new();
    let mut shard_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut shards = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", lineno + 1)))?;
        let location = match &rec.path {
            None => None,
            Some(p) => Some(match shard_ids.get(p) {
                Some(&id) => (id, rec.index),
                None => {
                    shards.push(Shard::open(dir.join(p))?);
                    shard_ids.insert(p.clone(), shards.len() - 1);
                    (shards.len() - 1, rec.index)
                }
            }),
        };
        locations.push(location);
        cells.push(rec.meta);
    }
    Ok(ShardSource {
        world,
        cells,
        shards,
        locations,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Two-column CSV of identifier pairs with a `gene_a,gene_b` header.
pub fn write_pairs_csv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["gene_a", "gene_b"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for (a, b) in pairs {
        w.write_record([a, b]).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => Error::format(path, e.to_string()),
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::format(path, "expected two columns"));
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}
