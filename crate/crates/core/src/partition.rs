//! Synthetic blob datasets, per-node splits (IID, Dirichlet, label
//! partition), and label-flip poisoning.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use thiserror::Error;

use crate::tinynn::Dataset;

/// Radius of the circle the class centres sit on.
pub const CENTER_RADIUS: f64 = 3.0;
pub const DEFAULT_DIRICHLET_ALPHA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("label partition needs {needed} classes, dataset has {available}")]
    TooFewClasses { needed: usize, available: usize },
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Iid,
    Dirichlet { alpha: f64 },
    LabelPartition { classes_per_node: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub n_nodes: usize,
    pub seed: u64,
}

/// Class centre `k` of `n_classes`, evenly spaced on the circle.
pub fn class_center(k: usize, n_classes: usize) -> [f64; 2] {
    let angle = 2.0 * PI * k as f64 / n_classes as f64;
    [CENTER_RADIUS * angle.cos(), CENTER_RADIUS * angle.sin()]
}

/// 2-D Gaussian blobs with `per_class` rows per class, class-major order.
pub fn make_synthetic(
    n_classes: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, PartitionError> {
    if n_classes < 2 || per_class == 0 {
        return Err(PartitionError::BadParams(format!(
            "n_classes {n_classes}, per_class {per_class}"
        )));
    }
    let noise = Normal::new(0.0, spread)
        .map_err(|_| PartitionError::BadParams(format!("spread {spread}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::empty(2, n_classes);
    for k in 0..n_classes {
        let c = class_center(k, n_classes);
        for _ in 0..per_class {
            ds.push(
                &[c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)],
                k,
            );
        }
    }
    Ok(ds)
}

/// Row indices assigned to each node. Every input row appears exactly once.
pub fn split_indices(
    dataset: &Dataset,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>, PartitionError> {
    if dataset.is_empty() {
        return Err(PartitionError::EmptyDataset);
    }
    if spec.n_nodes == 0 {
        return Err(PartitionError::BadParams("n_nodes 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_nodes;
    match spec.scheme {
        Scheme::Iid => {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            let (base, extra) = (order.len() / n, order.len() % n);
            let mut shards = Vec::with_capacity(n);
            let mut start = 0;
            for i in 0..n {
                let size = base + usize::from(i < extra);
                shards.push(order[start..start + size].to_vec());
                start += size;
            }
            Ok(shards)
        }
        Scheme::Dirichlet { alpha } => {
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|_| PartitionError::BadParams(format!("alpha {alpha}")))?;
            let mut shards = vec![Vec::new(); n];
            for class_rows in rows_by_class(dataset) {
                let mut rows = class_rows;
                rows.shuffle(&mut rng);
                let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                if total > 0.0 {
                    draws.iter_mut().for_each(|d| *d /= total);
                } else {
                    let pick = rng.random_range(0..n);
                    draws = (0..n).map(|i| if i == pick { 1.0 } else { 0.0 }).collect();
                }
                let mut cum = 0.0;
                let mut start = 0;
                for (node, share) in draws.iter().enumerate() {
                    cum += share;
                    let end = if node == n - 1 {
                        rows.len()
                    } else {
                        ((cum * rows.len() as f64).round() as usize).clamp(start, rows.len())
                    };
                    shards[node].extend_from_slice(&rows[start..end]);
                    start = end;
                }
            }
            repair_empty(&mut shards);
            Ok(shards)
        }
        Scheme::LabelPartition { classes_per_node } => {
            if classes_per_node == 0 {
                return Err(PartitionError::BadParams("classes_per_node 0".into()));
            }
            let needed = n * classes_per_node;
            if needed > dataset.n_classes() {
                return Err(PartitionError::TooFewClasses {
                    needed,
                    available: dataset.n_classes(),
                });
            }
            let mut shards = vec![Vec::new(); n];
            for (class, rows) in rows_by_class(dataset).into_iter().enumerate() {
                let group = class / classes_per_node;
                shards[group % n].extend(rows);
            }
            for s in &mut shards {
                s.shuffle(&mut rng);
            }
            Ok(shards)
        }
    }
}

fn rows_by_class(dataset: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.n_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// Give every empty shard one row taken from the currently largest shard.
fn repair_empty(shards: &mut [Vec<usize>]) {
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .unwrap();
        if shards[largest].len() < 2 {
            return;
        }
        let row = shards[largest].pop().unwrap();
        shards[empty].push(row);
    }
}

/// Splits `dataset` into one shard per node.
pub fn split(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, PartitionError> {
    Ok(split_indices(dataset, spec)?
        .iter()
        .map(|rows| dataset.select(rows))
        .collect())
}

/// Seeded permutation of `0..n` with no fixed points.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    assert!(n >= 2, "no derangement of fewer than two labels");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Label-flip poisoning: every label `y` becomes `perm[y]` for a seeded
/// derangement `perm`. Features are untouched.
pub fn poison(dataset: &Dataset, seed: u64) -> Dataset {
    let perm = derangement(dataset.n_classes(), seed);
    let labels = dataset.labels().iter().map(|&y| perm[y]).collect();
    dataset
        .with_labels(labels)
        .expect("permuted labels stay in range")
}
