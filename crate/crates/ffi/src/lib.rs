//! C ABI over the setdino library.
//!
//! Every entry point returns an [`SdStatus`]; on failure the message is
//! available from [`sd_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use setdino::error::{Error, ErrorClass};
use setdino::metrics::{batch_level_metrics, pair_similarities, recall_precision, similarity_separation, RelationGraph};
use setdino::pipeline::{self, ExperimentConfig, RunOptions};
use setdino::profiles::{consensus_profiles, EmbeddingTable, RowMeta, TableLevel};
use setdino::store::read_pairs_csv;

/// Status codes. 2 to 5 match the exit codes of the command-line tool.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdStatus {
    Ok = 0,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    NullArgument = 10,
    InvalidArgument = 11,
    Panic = 12,
}

/// Embedding table (features plus row metadata).
pub struct SdTable(EmbeddingTable);

/// Set of related gene pairs.
pub struct SdTruth(RelationGraph);

/// Resolved experiment configuration.
pub struct SdConfig(ExperimentConfig);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SdBatchMetrics {
    pub reproducibility_knn: f64,
    pub reproducibility_map: f64,
    pub batch_knn: f64,
    pub graph_connectivity: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Invalid(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return SdStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            let status = match e.class() {
                ErrorClass::Config => SdStatus::Config,
                ErrorClass::Data => SdStatus::Data,
                ErrorClass::Numeric => SdStatus::Numeric,
                ErrorClass::Io => SdStatus::Io,
            };
            (status, e.to_string())
        }
        Ok(Err(Fail::Null(what))) => (SdStatus::NullArgument, format!("`{what}` is null")),
        Ok(Err(Fail::Invalid(m))) => (SdStatus::InvalidArgument, m),
        Err(_) => (SdStatus::Panic, "internal panic".to_string()),
    };
    set_last_error(msg);
    status
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_arg<T>(p: *mut T, what: &'static str, value: T) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Tables

/// Empty batch-level gene table of dimension `dim`.
#[no_mangle]
pub unsafe extern "C" fn sd_table_new(dim: usize, out: *mut *mut SdTable) -> SdStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail::Invalid("`dim` must be positive".into()));
        }
        let t = EmbeddingTable::with_dim(TableLevel::BatchGene, "ffi", dim);
        out_arg(out, "out", Box::into_raw(Box::new(SdTable(t))))
    })
}

/// Append one (gene, batch) row. `batch_id < 0` means no batch.
#[no_mangle]
pub unsafe extern "C" fn sd_table_push(
    table: *mut SdTable,
    gene: *const c_char,
    batch_id: i64,
    features: *const f64,
    len: usize,
) -> SdStatus {
    guard(|| {
        let t = &mut table.as_mut().ok_or(Fail::Null("table"))?.0;
        let gene = str_arg(gene, "gene")?;
        if features.is_null() {
            return Err(Fail::Null("features"));
        }
        if len != t.dim() {
            return Err(Fail::Invalid(format!("expected {} features, got {len}", t.dim())));
        }
        let batch = if batch_id < 0 {
            None
        } else {
            Some(u32::try_from(batch_id).map_err(|_| Fail::Invalid("`batch_id` out of range".into()))?)
        };
        let f = std::slice::from_raw_parts(features, len);
        let key = match batch {
            Some(b) => format!("{gene}@b{b}"),
            None => gene.to_string(),
        };
        if t.rows.iter().any(|r| r.key == key) {
            return Err(Fail::Invalid(format!("duplicate row `{key}`")));
        }
        t.push(
            RowMeta {
                key,
                gene: gene.to_string(),
                gene_id: None,
                guide_id: None,
                batch_id: batch,
                cell_id: None,
                n_cells: 1,
            },
            f,
        )?;
        Ok(())
    })
}

/// Read `<dir>/<name>.json` and `<dir>/<name>.bin`.
#[no_mangle]
pub unsafe extern "C" fn sd_table_read(dir: *const c_char, name: *const c_char, out: *mut *mut SdTable) -> SdStatus {
    guard(|| {
        let t = EmbeddingTable::read(Path::new(str_arg(dir, "dir")?), str_arg(name, "name")?)?;
        out_arg(out, "out", Box::into_raw(Box::new(SdTable(t))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn sd_table_write(table: *const SdTable, dir: *const c_char, name: *const c_char) -> SdStatus {
    guard(|| {
        let t = &ref_arg(table, "table")?.0;
        t.write(Path::new(str_arg(dir, "dir")?), str_arg(name, "name")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sd_table_shape(table: *const SdTable, rows: *mut usize, dim: *mut usize) -> SdStatus {
    guard(|| {
        let t = &ref_arg(table, "table")?.0;
        out_arg(rows, "rows", t.len())?;
        out_arg(dim, "dim", t.dim())
    })
}

/// Copy row `row` into `buf` (length `len` must equal the dimension).
#[no_mangle]
pub unsafe extern "C" fn sd_table_row(table: *const SdTable, row: usize, buf: *mut f64, len: usize) -> SdStatus {
    guard(|| {
        let t = &ref_arg(table, "table")?.0;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        if row >= t.len() || len != t.dim() {
            return Err(Fail::Invalid(format!(
                "row {row} / length {len} outside a {}x{} table",
                t.len(),
                t.dim()
            )));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(t.row(row));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sd_table_free(table: *mut SdTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// NTC-centred consensus gene profiles of a batch-level gene table. The NTC
/// rows must use the gene name "NTC".
#[no_mangle]
pub unsafe extern "C" fn sd_consensus_profiles(table: *const SdTable, out: *mut *mut SdTable) -> SdStatus {
    guard(|| {
        let c = consensus_profiles(&ref_arg(table, "table")?.0)?;
        out_arg(out, "out", Box::into_raw(Box::new(SdTable(c))))
    })
}

// ---------------------------------------------------------------------------
// Metrics

/// Reproducibility and batch-effect metrics of a batch-level gene table.
#[no_mangle]
pub unsafe extern "C" fn sd_batch_level_metrics(table: *const SdTable, k: usize, out: *mut SdBatchMetrics) -> SdStatus {
    guard(|| {
        if k == 0 {
            return Err(Fail::Invalid("`k` must be positive".into()));
        }
        let m = batch_level_metrics(&ref_arg(table, "table")?.0, k)?;
        out_arg(
            out,
            "out",
            SdBatchMetrics {
                reproducibility_knn: m.reproducibility_knn,
                reproducibility_map: m.reproducibility_map,
                batch_knn: m.batch_knn,
                graph_connectivity: m.graph_connectivity,
            },
        )
    })
}

/// Gene pairs from a two-column CSV with a header row.
#[no_mangle]
pub unsafe extern "C" fn sd_truth_read_csv(path: *const c_char, out: *mut *mut SdTruth) -> SdStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let pairs = read_pairs_csv(Path::new(path))?;
        out_arg(out, "out", Box::into_raw(Box::new(SdTruth(RelationGraph::from_pairs(&pairs, path)))))
    })
}

/// Gene pairs from two parallel arrays of `n` names.
#[no_mangle]
pub unsafe extern "C" fn sd_truth_from_pairs(
    a: *const *const c_char,
    b: *const *const c_char,
    n: usize,
    out: *mut *mut SdTruth,
) -> SdStatus {
    guard(|| {
        if n > 0 && (a.is_null() || b.is_null()) {
            return Err(Fail::Null("a / b"));
        }
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            pairs.push((
                str_arg(*a.add(i), "a[i]")?.to_string(),
                str_arg(*b.add(i), "b[i]")?.to_string(),
            ));
        }
        out_arg(out, "out", Box::into_raw(Box::new(SdTruth(RelationGraph::from_pairs(&pairs, "ffi")))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn sd_truth_free(truth: *mut SdTruth) {
    if !truth.is_null() {
        drop(Box::from_raw(truth));
    }
}

/// Recall and precision of the top-`percentile`% most similar gene pairs of
/// a consensus table.
#[no_mangle]
pub unsafe extern "C" fn sd_recall_precision(
    consensus: *const SdTable,
    truth: *const SdTruth,
    percentile: f64,
    recall: *mut f64,
    precision: *mut f64,
) -> SdStatus {
    guard(|| {
        let pred = pair_similarities(&ref_arg(consensus, "consensus")?.0)?.graph_at(percentile)?;
        let (r, p) = recall_precision(&pred, &ref_arg(truth, "truth")?.0)?;
        out_arg(recall, "recall", r)?;
        out_arg(precision, "precision", p)
    })
}

/// Kolmogorov-Smirnov statistic between truth-pair and other-pair similarities.
#[no_mangle]
pub unsafe extern "C" fn sd_similarity_ks(consensus: *const SdTable, truth: *const SdTruth, ks: *mut f64) -> SdStatus {
    guard(|| {
        let sep = similarity_separation(&ref_arg(consensus, "consensus")?.0, &ref_arg(truth, "truth")?.0)?;
        out_arg(ks, "ks", sep.ks)
    })
}

// ---------------------------------------------------------------------------
// Pipeline

/// Load a TOML config (`path` may be null for the defaults).
#[no_mangle]
pub unsafe extern "C" fn sd_config_load(path: *const c_char, out: *mut *mut SdConfig) -> SdStatus {
    guard(|| {
        let path = if path.is_null() { None } else { Some(str_arg(path, "path")?) };
        let cfg = pipeline::load_config(path.map(Path::new), &[])?;
        out_arg(out, "out", Box::into_raw(Box::new(SdConfig(cfg))))
    })
}

/// Override one dotted key, e.g. `train.epochs` = `5`. Values use TOML syntax.
#[no_mangle]
pub unsafe extern "C" fn sd_config_set(config: *mut SdConfig, key: *const c_char, value: *const c_char) -> SdStatus {
    guard(|| {
        let c = config.as_mut().ok_or(Fail::Null("config"))?;
        let kv = (str_arg(key, "key")?.to_string(), str_arg(value, "value")?.to_string());
        c.0 = c.0.with_overrides(&[kv])?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sd_config_free(config: *mut SdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Generate the synthetic screen into `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn sd_synth(config: *const SdConfig, out_dir: *const c_char) -> SdStatus {
    guard(|| {
        pipeline::synth(&ref_arg(config, "config")?.0, Path::new(str_arg(out_dir, "out_dir")?), &RunOptions::default())?;
        Ok(())
    })
}

/// Train on `data_dir`, writing the checkpoint into `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn sd_train(config: *const SdConfig, data_dir: *const c_char, out_dir: *const c_char) -> SdStatus {
    guard(|| {
        pipeline::train(
            &ref_arg(config, "config")?.0,
            Path::new(str_arg(data_dir, "data_dir")?),
            Path::new(str_arg(out_dir, "out_dir")?),
            &RunOptions::default(),
        )?;
        Ok(())
    })
}

/// Write the profile tables of `data_dir` into `out_dir`. `checkpoint` may
/// be null when the config selects engineered features.
#[no_mangle]
pub unsafe extern "C" fn sd_embed(
    config: *const SdConfig,
    checkpoint: *const c_char,
    data_dir: *const c_char,
    out_dir: *const c_char,
) -> SdStatus {
    guard(|| {
        let ck = if checkpoint.is_null() { None } else { Some(Path::new(str_arg(checkpoint, "checkpoint")?)) };
        pipeline::embed(
            &ref_arg(config, "config")?.0,
            ck,
            Path::new(str_arg(data_dir, "data_dir")?),
            Path::new(str_arg(out_dir, "out_dir")?),
            &RunOptions::default(),
        )?;
        Ok(())
    })
}

/// Evaluate the tables in `tables_dir`. `curated_csv` may be null.
#[no_mangle]
pub unsafe extern "C" fn sd_evaluate(
    config: *const SdConfig,
    tables_dir: *const c_char,
    truth_csv: *const c_char,
    curated_csv: *const c_char,
    out_dir: *const c_char,
) -> SdStatus {
    guard(|| {
        let curated = if curated_csv.is_null() { None } else { Some(Path::new(str_arg(curated_csv, "curated_csv")?)) };
        pipeline::evaluate_tables(
            &ref_arg(config, "config")?.0,
            Path::new(str_arg(tables_dir, "tables_dir")?),
            Path::new(str_arg(truth_csv, "truth_csv")?),
            curated,
            Path::new(str_arg(out_dir, "out_dir")?),
            &RunOptions::default(),
        )?;
        Ok(())
    })
}
