//! Evaluation protocol: KNN graphs and accuracies, retrieval mAP, graph
//! connectivity, percentile relationship graphs with recall/precision, the
//! KS separation statistic, PCA sweeps, adjacency exports and the report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::{EmbeddingTable, Pca};

pub const DEFAULT_K: usize = 5;

/// `a.b / (|a| |b|)`; the single pairwise primitive every metric uses.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let sa: f64 = a.iter().map(|x| x * x).sum();
    let sb: f64 = b.iter().map(|x| x * x).sum();
    // One square root keeps identical rows at similarity exactly 1.
    (dot / (sa * sb).sqrt()).clamp(-1.0, 1.0)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_similarity(a, b)
}

fn is_zero(row: &[f64]) -> bool {
    row.iter().all(|&v| v == 0.0)
}

/// Rows with a non-zero feature vector; zero rows are dropped with a warning.
pub fn usable_rows(table: &EmbeddingTable) -> Vec<usize> {
    let rows: Vec<usize> = (0..table.len()).filter(|&i| !is_zero(table.row(i))).collect();
    if rows.len() < table.len() {
        log::warn!(
            "{} zero-norm rows dropped from {} table",
            table.len() - rows.len(),
            table.level.as_str()
        );
    }
    rows
}

/// Position of every row in the order of row keys (ties by row index).
/// Tie-breaks use this rank, so shuffling a table's rows changes nothing.
pub fn key_ranks(table: &EmbeddingTable) -> Vec<usize> {
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| table.rows[a].key.cmp(&table.rows[b].key).then(a.cmp(&b)));
    let mut rank = vec![0; table.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Exact k nearest neighbours by cosine distance. Node ids are table row
/// indices; equal distances are broken by ascending row key.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    /// Rows that are nodes, ascending.
    pub nodes: Vec<usize>,
    /// Per node (same order as `nodes`): `(row, distance)`, nearest first.
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

pub fn knn_graph(table: &EmbeddingTable, k: usize) -> Result<NeighborGraph> {
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let nodes = usable_rows(table);
    if nodes.len() < k + 1 {
        return Err(Error::Size(format!(
            "KNN with k = {k} needs at least {} non-zero rows, found {}",
            k + 1,
            nodes.len()
        )));
    }
    let rank = key_ranks(table);
    let neighbors = nodes
        .iter()
        .map(|&i| {
            let mut cand: Vec<(usize, f64)> = nodes
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (j, cosine_distance(table.row(i), table.row(j))))
                .collect();
            let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(rank[a.0].cmp(&rank[b.0]));
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
            cand.sort_by(cmp);
            cand
        })
        .collect();
    Ok(NeighborGraph { k, nodes, neighbors })
}

impl NeighborGraph {
    /// Undirected edges (`a < b`): an edge exists when either endpoint lists the other.
    pub fn symmetric_edges(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for (&i, list) in self.nodes.iter().zip(&self.neighbors) {
            for &(j, _) in list {
                out.insert((i.min(j), i.max(j)));
            }
        }
        out
    }
}

/// Majority label among the neighbours; ties go to the tied label whose
/// first occurrence is nearest.
fn vote<L: PartialEq>(neighbors: &[(usize, f64)], labels: &[L]) -> usize {
    let mut counts: Vec<(usize, usize)> = Vec::new(); // (row of first occurrence, count)
    for &(j, _) in neighbors {
        match counts.iter_mut().find(|(r, _)| labels[*r] == labels[j]) {
            Some(c) => c.1 += 1,
            None => counts.push((j, 1)),
        }
    }
    let best = counts.iter().map(|c| c.1).max().unwrap_or(0);
    counts.iter().find(|c| c.1 == best).map(|c| c.0).expect("k >= 1")
}

/// Fraction of query nodes whose neighbour vote equals their own label.
/// `labels` is indexed by table row; `query` selects which nodes are scored.
pub fn knn_accuracy_on<L: PartialEq>(graph: &NeighborGraph, labels: &[L], query: impl Fn(usize) -> bool) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (&i, list) in graph.nodes.iter().zip(&graph.neighbors) {
        if !query(i) {
            continue;
        }
        total += 1;
        if labels[vote(list, labels)] == labels[i] {
            hits += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    hits as f64 / total as f64
}

pub fn knn_accuracy<L: PartialEq>(graph: &NeighborGraph, labels: &[L]) -> f64 {
    knn_accuracy_on(graph, labels, |_| true)
}

/// Mean average precision of retrieving same-label rows by ascending
/// cosine distance (ties by row key), over query rows. Every usable row is
/// in the background; queries without another same-label row are skipped.
/// Per-query precisions are summed in key order.
pub fn retrieval_map<L: PartialEq>(table: &EmbeddingTable, labels: &[L], query: impl Fn(usize) -> bool) -> f64 {
    let rank = key_ranks(table);
    let mut nodes = usable_rows(table);
    nodes.sort_by_key(|&i| rank[i]);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut singletons = 0usize;
    for &i in nodes.iter().filter(|&&i| query(i)) {
        let mut ranked: Vec<(usize, f64)> = nodes
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| (j, cosine_distance(table.row(i), table.row(j))))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(rank[a.0].cmp(&rank[b.0])));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &(j, _)) in ranked.iter().enumerate() {
            if labels[j] == labels[i] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits == 0 {
            singletons += 1;
            continue;
        }
        sum += ap / hits as f64;
        count += 1;
    }
    if singletons > 0 {
        log::warn!("{singletons} queries have no other row with their label and were skipped");
    }
    if count == 0 {
        return 0.0;
    }
    sum / count as f64
}

/// Mean over batches of |largest connected component| / |batch nodes| in
/// the batch-induced subgraph of the symmetrised KNN graph.
pub fn graph_connectivity<B: Ord + Clone>(graph: &NeighborGraph, batches: &[B]) -> f64 {
    let mut members: BTreeMap<B, Vec<usize>> = BTreeMap::new();
    for &i in &graph.nodes {
        members.entry(batches[i].clone()).or_default().push(i);
    }
    let edges = graph.symmetric_edges();
    let mut total = 0.0;
    for nodes in members.values() {
        let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(p, &r)| (r, p)).collect();
        let mut parent: Vec<usize> = (0..nodes.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &edges {
            if let (Some(&pa), Some(&pb)) = (pos.get(&a), pos.get(&b)) {
                let (ra, rb) = (find(&mut parent, pa), find(&mut parent, pb));
                if ra != rb {
                    parent[ra] = rb;
                }
            }
        }
        let mut sizes = vec![0usize; nodes.len()];
        for x in 0..nodes.len() {
            let r = find(&mut parent, x);
            sizes[r] += 1;
        }
        total += *sizes.iter().max().expect("non-empty") as f64 / nodes.len() as f64;
    }
    if members.is_empty() {
        log::warn!("graph connectivity of an empty graph");
        return 0.0;
    }
    total / members.len() as f64
}

// ---------------------------------------------------------------------------
// Relationship graphs

/// Undirected gene graph; edges are stored with the smaller name first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationGraph {
    pub genes: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
    pub source: String,
}

impl RelationGraph {
    pub fn from_pairs(pairs: &[(String, String)], source: &str) -> Self {
        let mut genes = BTreeSet::new();
        let mut edges = BTreeSet::new();
        for (a, b) in pairs {
            genes.insert(a.clone());
            genes.insert(b.clone());
            if a != b {
                edges.insert(ordered(a, b));
            }
        }
        RelationGraph {
            genes,
            edges,
            source: source.into(),
        }
    }

    pub fn restrict(&self, genes: &BTreeSet<String>) -> Self {
        RelationGraph {
            genes: self.genes.intersection(genes).cloned().collect(),
            edges: self
                .edges
                .iter()
                .filter(|(a, b)| genes.contains(a) && genes.contains(b))
                .cloned()
                .collect(),
            source: self.source.clone(),
        }
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        self.edges.contains(&(x.to_string(), y.to_string()))
    }
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Linear-interpolation percentile of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// All gene pairs of a consensus table with their cosine similarity, in
/// row order (`i < j`). Zero rows are dropped.
pub struct PairSimilarities {
    pub genes: Vec<String>,
    pub pairs: Vec<(usize, usize, f64)>,
    pub sorted: Vec<f64>,
}

pub fn pair_similarities(table: &EmbeddingTable) -> Result<PairSimilarities> {
    let rows = usable_rows(table);
    if rows.len() < 3 {
        return Err(Error::Size(format!("relationship graphs need at least 3 genes, found {}", rows.len())));
    }
    let genes: Vec<String> = rows.iter().map(|&r| table.rows[r].gene.clone()).collect();
    if genes.iter().collect::<BTreeSet<_>>().len() != genes.len() {
        return Err(Error::Misuse("relationship graphs need one row per gene".into()));
    }
    let mut pairs = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            pairs.push((a, b, cosine_similarity(table.row(rows[a]), table.row(rows[b]))));
        }
    }
    let mut sorted: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    sorted.sort_by(f64::total_cmp);
    Ok(PairSimilarities { genes, pairs, sorted })
}

impl PairSimilarities {
    /// Pairs whose similarity reaches the `(100 - p)`-th percentile; ties at
    /// the threshold are all kept.
    pub fn graph_at(&self, p: f64) -> Result<RelationGraph> {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::config("percentile", "must lie in (0, 100]"));
        }
        let threshold = percentile_sorted(&self.sorted, 100.0 - p);
        Ok(RelationGraph {
            genes: self.genes.iter().cloned().collect(),
            edges: self
                .pairs
                .iter()
                .filter(|&&(_, _, s)| s >= threshold)
                .map(|&(a, b, _)| ordered(&self.genes[a], &self.genes[b]))
                .collect(),
            source: format!("prediction@{p}"),
        })
    }
}

pub fn relation_graph_from_profiles(table: &EmbeddingTable, p: f64) -> Result<RelationGraph> {
    pair_similarities(table)?.graph_at(p)
}

/// Recall and precision of `pred` against `truth` on their shared genes.
pub fn recall_precision(pred: &RelationGraph, truth: &RelationGraph) -> Result<(f64, f64)> {
    let shared: BTreeSet<String> = pred.genes.intersection(&truth.genes).cloned().collect();
    let (p, t) = (pred.restrict(&shared), truth.restrict(&shared));
    if t.edges.is_empty() {
        return Err(Error::Undefined(
            "the ground truth has no edges among the profiled genes; recall is undefined".into(),
        ));
    }
    let hit = p.edges.intersection(&t.edges).count() as f64;
    let precision = if p.edges.is_empty() { 0.0 } else { hit / p.edges.len() as f64 };
    Ok((hit / t.edges.len() as f64, precision))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub percentile: f64,
    pub recall: f64,
    pub precision: f64,
    pub n_predicted: usize,
}

/// Recall and precision at each top-`p`% cutoff. Recall must not decrease
/// with the cutoff; a violation is reported as a numeric error.
pub fn pr_curve(table: &EmbeddingTable, truth: &RelationGraph, percentiles: &[f64]) -> Result<Vec<PrPoint>> {
    let sims = pair_similarities(table)?;
    let mut out = Vec::with_capacity(percentiles.len());
    for &p in percentiles {
        let pred = sims.graph_at(p)?;
        let (recall, precision) = recall_precision(&pred, truth)?;
        out.push(PrPoint {
            percentile: p,
            recall,
            precision,
            n_predicted: pred.edges.len(),
        });
    }
    let mut by_p: Vec<&PrPoint> = out.iter().collect();
    by_p.sort_by(|a, b| a.percentile.total_cmp(&b.percentile));
    if by_p.windows(2).any(|w| w[1].recall < w[0].recall) {
        return Err(Error::Numeric("recall decreased with a looser cutoff".into()));
    }
    Ok(out)
}

pub fn default_percentiles() -> Vec<f64> {
    (1..=20).map(f64::from).collect()
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let v = if x[i] <= y[j] { x[i] } else { y[j] };
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / x.len() as f64 - j as f64 / y.len() as f64).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub ks: f64,
    pub truth_similarities: Vec<f64>,
    pub random_similarities: Vec<f64>,
}

/// Cosine similarities of truth pairs versus all other pairs, and their KS statistic.
pub fn similarity_separation(table: &EmbeddingTable, truth: &RelationGraph) -> Result<Separation> {
    let sims = pair_similarities(table)?;
    let mut t = Vec::new();
    let mut r = Vec::new();
    for &(a, b, s) in &sims.pairs {
        if truth.has_edge(&sims.genes[a], &sims.genes[b]) {
            t.push(s);
        } else {
            r.push(s);
        }
    }
    if t.is_empty() {
        return Err(Error::Undefined("no truth pair among the profiled genes".into()));
    }
    Ok(Separation {
        ks: ks_statistic(&t, &r),
        truth_similarities: t,
        random_similarities: r,
    })
}

// ---------------------------------------------------------------------------
// Batch-level summaries

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLevelMetrics {
    pub reproducibility_knn: f64,
    pub reproducibility_map: f64,
    pub batch_knn: f64,
    pub graph_connectivity: f64,
}

/// Reproducibility (gene KNN and mAP, NTC rows as background only) and
/// batch effect (batch KNN, GC) of a batch-level gene table.
pub fn batch_level_metrics(table: &EmbeddingTable, k: usize) -> Result<BatchLevelMetrics> {
    let genes: Vec<&str> = table.rows.iter().map(|r| r.gene.as_str()).collect();
    let batches: Vec<Option<u32>> = table.rows.iter().map(|r| r.batch_id).collect();
    let is_query = |i: usize| !table.rows[i].is_ntc();
    let graph = knn_graph(table, k)?;
    Ok(BatchLevelMetrics {
        reproducibility_knn: knn_accuracy_on(&graph, &genes, is_query),
        reproducibility_map: retrieval_map(table, &genes, is_query),
        batch_knn: knn_accuracy(&graph, &batches),
        graph_connectivity: graph_connectivity(&graph, &batches),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_pcs: usize,
    #[serde(flatten)]
    pub metrics: BatchLevelMetrics,
}

/// Batch-level metrics on the first `c` principal components, PCA fitted once.
pub fn pca_sweep(table: &EmbeddingTable, counts: &[usize], k: usize) -> Result<Vec<SweepRow>> {
    let pca = Pca::fit_table(table)?;
    counts
        .iter()
        .map(|&c| {
            if c == 0 || c > pca.rank() {
                return Err(Error::config(
                    "pca_sweep.counts",
                    format!("component count {c} outside 1..={}", pca.rank()),
                ));
            }
            Ok(SweepRow {
                n_pcs: c,
                metrics: batch_level_metrics(&pca.apply(table, c)?, k)?,
            })
        })
        .collect()
}

/// 1, 2, 4, ... up to the rank, with the rank itself last.
pub fn default_sweep_counts(rank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut c = 1;
    while c < rank {
        out.push(c);
        c *= 2;
    }
    if rank > 0 {
        out.push(rank);
    }
    out
}

// ---------------------------------------------------------------------------
// Adjacency export

/// Dense 0/1 adjacency in `order`, unit diagonal for display.
pub fn adjacency_matrix(graph: &RelationGraph, order: &[String]) -> Vec<Vec<u8>> {
    order
        .iter()
        .enumerate()
        .map(|(i, a)| {
            order
                .iter()
                .enumerate()
                .map(|(j, b)| u8::from(i == j || graph.has_edge(a, b)))
                .collect()
        })
        .collect()
}

pub fn write_adjacency_csv(path: &Path, matrix: &[Vec<u8>], order: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header = vec![String::new()];
    header.extend(order.iter().cloned());
    w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
    for (name, row) in order.iter().zip(matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u8::to_string));
        w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Side-by-side heat maps, one panel per matrix.
pub fn adjacency_svg(panels: &[(String, Vec<Vec<u8>>)]) -> String {
    let n = panels.first().map_or(0, |p| p.1.len());
    let cell = (480.0 / n.max(1) as f64).clamp(2.0, 12.0);
    let side = cell * n as f64;
    let gap = 24.0;
    let width = panels.len() as f64 * (side + gap) + gap;
    let height = side + 2.0 * gap + 8.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="12">"#
    );
    for (p, (title, m)) in panels.iter().enumerate() {
        let x0 = gap + p as f64 * (side + gap);
        let y0 = 2.0 * gap;
        let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}">{}</text>"#, gap, xml_escape(title));
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.1}" y="{y0:.1}" width="{side:.1}" height="{side:.1}" fill="#ffffff" stroke="#888888"/>"##
        );
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v == 0 {
                    continue;
                }
                let fill = if i == j { "#9e9e9e" } else { "#1f4e9c" };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{fill}"/>"#,
                    x0 + j as f64 * cell,
                    y0 + i as f64 * cell
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot of (recall, precision) curves.
pub fn pr_curve_svg(curves: &[(String, Vec<PrPoint>)]) -> String {
    let (w, h, m) = (420.0, 320.0, 48.0);
    let colors = ["#1f4e9c", "#c0392b", "#27ae60", "#8e44ad", "#d68910"];
    let pmax = curves
        .iter()
        .flat_map(|c| c.1.iter().map(|p| p.precision))
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="#444444"/>"##,
        w - 2.0 * m,
        h - 2.0 * m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}">recall</text>"#, w / 2.0 - 16.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="4" y="{}">precision (max {pmax:.3})</text>"#, m - 12.0);
    for (ci, (name, pts)) in curves.iter().enumerate() {
        let color = colors[ci % colors.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|p| {
                format!(
                    "{:.1},{:.1}",
                    m + p.recall * (w - 2.0 * m),
                    h - m - p.precision / pmax * (h - 2.0 * m)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - m - 120.0,
            m + 16.0 + 14.0 * ci as f64,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub batch_knn: f64,
    pub graph_connectivity: f64,
    pub reproducibility_knn: f64,
    pub reproducibility_map: f64,
    pub full_recall_5: f64,
    pub full_recall_10: f64,
    pub curated_recall_5: f64,
    pub curated_recall_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub name: String,
    pub n_genes: usize,
    pub n_edges: usize,
    pub ks_statistic: f64,
    pub pr_curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub n_batch_gene_rows: usize,
    pub n_consensus_genes: usize,
    pub headline: Headline,
    pub truths: Vec<TruthSummary>,
    pub pca_sweep: Vec<SweepRow>,
}

fn recall_at(curve: &[PrPoint], p: f64) -> f64 {
    curve.iter().find(|c| c.percentile == p).map_or(0.0, |c| c.recall)
}

/// Check that every truth gene has a consensus profile; list the ones that don't.
pub fn check_truth_genes(consensus: &EmbeddingTable, truth: &RelationGraph) -> Result<()> {
    let have: BTreeSet<&str> = consensus.rows.iter().map(|r| r.gene.as_str()).collect();
    let missing: Vec<&str> = truth
        .genes
        .iter()
        .map(String::as_str)
        .filter(|g| !have.contains(g))
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    Err(Error::Lookup(format!(
        "{} truth genes have no profile: {}",
        missing.len(),
        missing.join(", ")
    )))
}

/// Full evaluation. `full` and `curated` are the two relationship truths.
pub fn evaluate(
    batch_gene: &EmbeddingTable,
    consensus: &EmbeddingTable,
    full: &RelationGraph,
    curated: &RelationGraph,
    k: usize,
) -> Result<MetricsReport> {
    let bl = batch_level_metrics(batch_gene, k)?;
    let percentiles = default_percentiles();
    let mut truths = Vec::new();
    for (name, truth) in [("full", full), ("curated", curated)] {
        check_truth_genes(consensus, truth)?;
        let curve = pr_curve(consensus, truth, &percentiles)?;
        let sep = similarity_separation(consensus, truth)?;
        truths.push(TruthSummary {
            name: name.into(),
            n_genes: truth.genes.len(),
            n_edges: truth.edges.len(),
            ks_statistic: sep.ks,
            pr_curve: curve,
        });
    }
    let rank = Pca::fit_table(batch_gene)?.rank();
    let sweep = pca_sweep(batch_gene, &default_sweep_counts(rank), k)?;
    Ok(MetricsReport {
        k,
        n_batch_gene_rows: batch_gene.len(),
        n_consensus_genes: consensus.len(),
        headline: Headline {
            batch_knn: bl.batch_knn,
            graph_connectivity: bl.graph_connectivity,
            reproducibility_knn: bl.reproducibility_knn,
            reproducibility_map: bl.reproducibility_map,
            full_recall_5: recall_at(&truths[0].pr_curve, 5.0),
            full_recall_10: recall_at(&truths[0].pr_curve, 10.0),
            curated_recall_5: recall_at(&truths[1].pr_curve, 5.0),
            curated_recall_10: recall_at(&truths[1].pr_curve, 10.0),
        },
        truths,
        pca_sweep: sweep,
    })
}
