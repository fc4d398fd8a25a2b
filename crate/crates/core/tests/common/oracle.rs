//! Brute-force reference implementations of the graph metrics. They share
//! only the pairwise cosine primitive with the library; neighbour
//! selection, voting, ranking and connectivity are written out directly.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use setdino::metrics::cosine_distance;
use setdino::profiles::EmbeddingTable;

fn nonzero(t: &EmbeddingTable) -> Vec<usize> {
    (0..t.len()).filter(|&i| t.row(i).iter().any(|&v| v != 0.0)).collect()
}

/// All other rows sorted by (distance, key).
fn ranked(t: &EmbeddingTable, i: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = nonzero(t)
        .into_iter()
        .filter(|&j| j != i)
        .map(|j| (j, cosine_distance(t.row(i), t.row(j))))
        .collect();
    all.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap()
            .then_with(|| t.rows[a.0].key.cmp(&t.rows[b.0].key))
    });
    all
}

/// Row -> its k nearest (row, distance).
pub fn knn(t: &EmbeddingTable, k: usize) -> BTreeMap<usize, Vec<(usize, f64)>> {
    nonzero(t)
        .into_iter()
        .map(|i| (i, ranked(t, i).into_iter().take(k).collect()))
        .collect()
}

pub fn knn_accuracy<L: Clone + Eq + std::hash::Hash>(
    t: &EmbeddingTable,
    k: usize,
    labels: &[L],
    query: impl Fn(usize) -> bool,
) -> f64 {
    let graph = knn(t, k);
    let (mut hit, mut total) = (0, 0);
    for (i, nbrs) in &graph {
        if !query(*i) {
            continue;
        }
        total += 1;
        let mut counts: HashMap<L, usize> = HashMap::new();
        for (j, _) in nbrs {
            *counts.entry(labels[*j].clone()).or_default() += 1;
        }
        let best = *counts.values().max().unwrap();
        // Among tied labels, the one held by the nearest neighbour.
        let winner = nbrs
            .iter()
            .map(|(j, _)| labels[*j].clone())
            .find(|l| counts[l] == best)
            .unwrap();
        if winner == labels[*i] {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// AP as the mean of precision@r over the ranks r of relevant items.
pub fn mean_average_precision<L: PartialEq>(t: &EmbeddingTable, labels: &[L], query: impl Fn(usize) -> bool) -> f64 {
    let mut order = nonzero(t);
    order.sort_by(|&a, &b| t.rows[a].key.cmp(&t.rows[b].key));
    let mut aps = Vec::new();
    for &i in order.iter().filter(|&&i| query(i)) {
        let r = ranked(t, i);
        let relevant: Vec<usize> = (0..r.len()).filter(|&p| labels[r[p].0] == labels[i]).collect();
        if relevant.is_empty() {
            continue;
        }
        let mut ap = 0.0;
        for &p in &relevant {
            let in_top = r[..=p].iter().filter(|(j, _)| labels[*j] == labels[i]).count();
            ap += in_top as f64 / (p + 1) as f64;
        }
        aps.push(ap / relevant.len() as f64);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Depth-first search over an adjacency matrix of the symmetrised graph.
pub fn graph_connectivity<B: Ord + Clone>(t: &EmbeddingTable, k: usize, batches: &[B]) -> f64 {
    let graph = knn(t, k);
    let n = t.len();
    let mut adj = vec![vec![false; n]; n];
    for (i, nbrs) in &graph {
        for (j, _) in nbrs {
            adj[*i][*j] = true;
            adj[*j][*i] = true;
        }
    }
    let mut by_batch: BTreeMap<B, Vec<usize>> = BTreeMap::new();
    for i in graph.keys() {
        by_batch.entry(batches[*i].clone()).or_default().push(*i);
    }
    let mut sum = 0.0;
    for nodes in by_batch.values() {
        let inside: BTreeSet<usize> = nodes.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut largest = 0;
        for &s in nodes {
            if seen.contains(&s) {
                continue;
            }
            let mut stack = vec![s];
            seen.insert(s);
            let mut size = 0;
            while let Some(x) = stack.pop() {
                size += 1;
                for &y in &inside {
                    if adj[x][y] && seen.insert(y) {
                        stack.push(y);
                    }
                }
            }
            largest = largest.max(size);
        }
        sum += largest as f64 / nodes.len() as f64;
    }
    sum / by_batch.len() as f64
}

/// Recall and precision by enumerating every unordered gene pair.
pub fn recall_precision(
    genes: &[String],
    pred: &dyn Fn(&str, &str) -> bool,
    truth: &dyn Fn(&str, &str) -> bool,
) -> (f64, f64) {
    let (mut tp, mut np, mut nt) = (0usize, 0usize, 0usize);
    for a in 0..genes.len() {
        for b in a + 1..genes.len() {
            let (p, t) = (pred(&genes[a], &genes[b]), truth(&genes[a], &genes[b]));
            tp += usize::from(p && t);
            np += usize::from(p);
            nt += usize::from(t);
        }
    }
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    (tp as f64 / nt as f64, precision)
}
