//! Propagation helpers shared by the invariant tests.

use std::collections::VecDeque;

use igt_core::autodiff::Tape;
use igt_core::data::ElementType;
use igt_core::graph::{all_pairs, HeteroGraph};
use igt_core::thegcn::{propagate, Aggregation};
use igt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dense_pipeline, random_graph, random_tensor, Dense};

pub const DIM: usize = 3;
pub const HOWS: [Aggregation; 2] = [Aggregation::Sum, Aggregation::Mean];

pub fn sparse_pipeline(
    g: &HeteroGraph,
    h0: &[Tensor; 4],
    layers: usize,
    how: Aggregation,
) -> [Tensor; 4] {
    let blocks = g.propagation_blocks().unwrap();
    let mut tape = Tape::new();
    let vars = h0.clone().map(|t| tape.constant(t));
    let out = propagate(&mut tape, &blocks, vars, layers, how).unwrap();
    out.map(|v| tape.value(v).clone())
}

pub fn random_h0<R: Rng>(g: &HeteroGraph, rng: &mut R) -> [Tensor; 4] {
    g.registry.counts().map(|n| random_tensor(&[n, DIM], rng))
}

pub fn max_diff(a: &[Tensor; 4], b: &[Tensor; 4]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}

pub fn combine(a: &[Tensor; 4], b: &[Tensor; 4], alpha: f64, beta: f64) -> [Tensor; 4] {
    std::array::from_fn(|k| {
        let data = a[k]
            .data()
            .iter()
            .zip(b[k].data())
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        Tensor::new(a[k].shape(), data).unwrap()
    })
}

/// Graph distances from `(kind, idx)` to every node, `usize::MAX` when unreachable.
pub fn distances(g: &HeteroGraph, kind: ElementType, idx: usize) -> [Vec<usize>; 4] {
    let counts = g.registry.counts();
    let mut adj: [Vec<Vec<(ElementType, usize)>>; 4] = counts.map(|n| vec![Vec::new(); n]);
    for (a, b) in all_pairs() {
        for (u, v) in g.edges_between(a, b).unwrap() {
            adj[a.index()][u].push((b, v));
            adj[b.index()][v].push((a, u));
        }
    }
    let mut dist = counts.map(|n| vec![usize::MAX; n]);
    dist[kind.index()][idx] = 0;
    let mut queue = VecDeque::from([(kind, idx)]);
    while let Some((k, i)) = queue.pop_front() {
        let d = dist[k.index()][i];
        for &(k2, j) in &adj[k.index()][i] {
            if dist[k2.index()][j] == usize::MAX {
                dist[k2.index()][j] = d + 1;
                queue.push_back((k2, j));
            }
        }
    }
    dist
}

pub fn dense_oracle_error(seed: u64, how: Aggregation) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, 200);
    let layers = rng.random_range(1..=3);
    let h0 = random_h0(&g, &mut rng);
    let sparse = sparse_pipeline(&g, &h0, layers, how);
    let dense = dense_pipeline(&g, &h0.clone().map(|t| Dense::from_tensor(&t)), layers, how);
    dense
        .iter()
        .zip(&sparse)
        .map(|(d, s)| d.max_abs_diff(s))
        .fold(0.0, f64::max)
}
