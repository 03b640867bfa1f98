//! Seeded synthetic labeled-graph datasets for smoke runs without downloads.

use flowpool::graphs::{GraphDataset, LabeledGraph};
use flowpool::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sparse molecule-like graphs with 7 node label kinds and 2 classes: a
/// random spanning tree plus a couple of ring closures. Class 1 graphs carry
/// extra nodes of kind 3, so the classes are separable only on average.
pub fn molecule_like(num_graphs: usize, seed: u64) -> Result<GraphDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common = [0, 0, 0, 1, 1, 2, 4, 5, 6];
    let mut graphs = Vec::with_capacity(num_graphs);
    for i in 0..num_graphs {
        let n = rng.random_range(10..=28);
        let class = i % 2;
        let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
        for _ in 0..2 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b {
                edges.push((a, b));
            }
        }
        let mut labels: Vec<usize> = (0..n)
            .map(|_| {
                if class == 1 && rng.random::<f64>() < 0.15 {
                    3
                } else {
                    common[rng.random_range(0..common.len())]
                }
            })
            .collect();
        // every kind present at least once across the set
        labels[0] = i % 7;
        graphs.push(LabeledGraph::new(n, &edges, labels, class)?);
    }
    GraphDataset::new("SYNTHETIC", graphs)
}

/// Two classes told apart by their majority node label; linearly separable
/// after mean-like pooling.
pub fn separable(num_graphs: usize, seed: u64) -> Result<GraphDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(num_graphs);
    for i in 0..num_graphs {
        let n = rng.random_range(6..=12);
        let class = i % 2;
        let edges: Vec<(usize, usize)> = (1..n).map(|v| (v - 1, v)).collect();
        let labels = (0..n)
            .map(|k| if k == 0 { 1 - class } else { class })
            .collect();
        graphs.push(LabeledGraph::new(n, &edges, labels, class)?);
    }
    GraphDataset::new("SEPARABLE", graphs)
}
